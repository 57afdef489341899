use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;

/// Dense `N x C x H x W` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn from_images(images: &[ImageTensor<T>]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::shape("empty image batch"))?;
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            first.same_shape(img)?;
            data.extend_from_slice(img.data());
        }
        Ok(Self {
            n: images.len(),
            c,
            h,
            w,
            data,
        })
    }

    pub fn to_images(&self) -> Vec<ImageTensor<T>> {
        (0..self.n)
            .map(|i| ImageTensor::from_planar(self.h, self.w, self.c, self.sample(i).to_vec()).expect("sample sized"))
            .collect()
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(n, c, h2, w2);
    for (src, dst) in x.data.chunks_exact(h * w).zip(out.data.chunks_exact_mut(h2 * w2)) {
        for y in 0..h2 {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * w2..(y + 1) * w2];
            for (x2, d) in drow.iter_mut().enumerate() {
                *d = row[x2 / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.dims();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(n, c, h, w);
    for (src, dst) in dy.data.chunks_exact(h2 * w2).zip(out.data.chunks_exact_mut(h * w)) {
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    out
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor {
        n: a.n,
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a gradient of `concat(a, b)` back into its parts.
pub fn split_channels<T: Scalar>(d: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let mut a = Tensor::zeros(d.n, first, d.h, d.w);
    let mut b = Tensor::zeros(d.n, d.c - first, d.h, d.w);
    let cut = first * d.plane_len();
    for i in 0..d.n {
        let s = d.sample(i);
        a.sample_mut(i).copy_from_slice(&s[..cut]);
        b.sample_mut(i).copy_from_slice(&s[cut..]);
    }
    (a, b)
}

/// Multiplies every channel of sample `i` by the `h x w` plane `gate[i]`.
pub fn gate_channels<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Tensor<T> {
    assert_eq!((gate.n, gate.c, gate.h, gate.w), (x.n, 1, x.h, x.w), "gate shape");
    let mut out = x.clone();
    let pl = x.plane_len();
    for i in 0..x.n {
        let g = gate.sample(i);
        for plane in out.sample_mut(i).chunks_exact_mut(pl) {
            for (v, &m) in plane.iter_mut().zip(g) {
                *v *= m;
            }
        }
    }
    out
}

#[inline]
pub fn leaky_relu_inplace<T: Scalar>(x: &mut [T], slope: T) {
    for v in x {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward of leaky ReLU given its output (sign is preserved for slope > 0).
#[inline]
pub fn leaky_relu_backward_inplace<T: Scalar>(dy: &mut [T], y: &[T], slope: T) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v < T::zero() {
            *d *= slope;
        }
    }
}
