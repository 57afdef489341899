use crate::error::{Error, Result};
use crate::image::{ImageTensor, Map2};
use crate::scalar::Scalar;

/// Non-overlapping `p x p` patches flattened in `(y, x, c)` order, patches
/// listed in raster order over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens<T> {
    data: Vec<T>,
    token_len: usize,
    grid: (usize, usize),
    patch: usize,
    channels: usize,
}

impl<T: Scalar> PatchTokens<T> {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_len(&self) -> usize {
        self.token_len
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn token(&self, i: usize) -> &[T] {
        &self.data[i * self.token_len..(i + 1) * self.token_len]
    }

    /// Row-major `n x token_len` matrix.
    pub fn as_matrix(&self) -> &[T] {
        &self.data
    }

    /// Tokens from an explicit `n x token_len` matrix (for tests and reordering).
    pub fn from_matrix(
        data: Vec<T>,
        token_len: usize,
        grid: (usize, usize),
        patch: usize,
        channels: usize,
    ) -> Result<Self> {
        if data.len() != grid.0 * grid.1 * token_len || token_len != patch * patch * channels {
            return Err(Error::shape("token matrix does not match grid and patch size"));
        }
        Ok(Self {
            data,
            token_len,
            grid,
            patch,
            channels,
        })
    }
}

fn check_patch(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::shape(format!("patch size {p} does not divide {h}x{w}")));
    }
    Ok(())
}

pub fn tokenize<T: Scalar>(image: &ImageTensor<T>, p: usize) -> Result<PatchTokens<T>> {
    let (h, w, c) = image.shape();
    check_patch(h, w, p)?;
    let (nh, nw) = (h / p, w / p);
    let token_len = p * p * c;
    let mut data = Vec::with_capacity(nh * nw * token_len);
    for gy in 0..nh {
        for gx in 0..nw {
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    for ch in 0..c {
                        data.push(image.get(y, x, ch));
                    }
                }
            }
        }
    }
    Ok(PatchTokens {
        data,
        token_len,
        grid: (nh, nw),
        patch: p,
        channels: c,
    })
}

pub fn detokenize<T: Scalar>(tokens: &PatchTokens<T>) -> ImageTensor<T> {
    let p = tokens.patch;
    let (nh, nw) = tokens.grid;
    let c = tokens.channels;
    ImageTensor::from_fn(nh * p, nw * p, c, |y, x, ch| {
        let i = (y / p) * nw + x / p;
        tokens.token(i)[((y % p) * p + x % p) * c + ch]
    })
}

/// Per-patch values on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LossVector<T> {
    pub values: Vec<T>,
    pub grid: (usize, usize),
}

impl<T: Scalar> LossVector<T> {
    pub fn new(values: Vec<T>, grid: (usize, usize)) -> Result<Self> {
        if values.len() != grid.0 * grid.1 {
            return Err(Error::shape(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.0,
                grid.1
            )));
        }
        Ok(Self { values, grid })
    }

    /// Unshaped vector (a `1 x n` grid).
    pub fn from_values(values: Vec<T>) -> Self {
        let n = values.len();
        Self { values, grid: (1, n) }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_map(&self) -> Map2<T> {
        Map2::from_vec(self.grid.0, self.grid.1, self.values.clone()).expect("grid sized")
    }
}

/// Mean squared difference over each patch's `p * p * C` elements.
pub fn gt_patch_losses<T: Scalar>(image: &ImageTensor<T>, recon: &ImageTensor<T>, p: usize) -> Result<LossVector<T>> {
    image.same_shape(recon)?;
    let (h, w, c) = image.shape();
    check_patch(h, w, p)?;
    let (nh, nw) = (h / p, w / p);
    let mut sums = vec![T::zero(); nh * nw];
    for ch in 0..c {
        let (a, b) = (image.plane(ch), recon.plane(ch));
        for y in 0..h {
            let row = (y / p) * nw;
            for x in 0..w {
                let d = a[y * w + x] - b[y * w + x];
                sums[row + x / p] += d * d;
            }
        }
    }
    let inv = T::one() / T::from_usize_lossy(p * p * c);
    LossVector::new(sums.into_iter().map(|s| s * inv).collect(), (nh, nw))
}
