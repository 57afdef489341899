use rand::Rng;

use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Uniform in `[-bound, bound]` with `bound = gain * sqrt(3 / fan_in)`.
pub(crate) fn kaiming_uniform<T: Scalar, R: Rng>(rng: &mut R, len: usize, fan_in: usize, gain: f64) -> Vec<T> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect()
}

/// Square-kernel convolution with `pad = kernel / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `cout x (cin * kernel * kernel)`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let k = cin * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
            kaiming_uniform(rng, cout * k, k, gain),
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), vec![cout], vec![T::zero(); cout]));
        Self {
            cin,
            cout,
            kernel,
            stride,
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Unfolds one sample into `(cin * k * k) x (ho * wo)` columns.
    fn im2col(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let s = self.stride;
        let p = ho * wo;
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        let out = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adds columns back onto one input sample.
    fn col2im(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let s = self.stride;
        let p = ho * wo;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "{}: channel mismatch", self.weight.name);
        let (ho, wo) = self.out_hw(x.h, x.w);
        let p = ho * wo;
        let kl = self.patch_len();
        let mut out = Tensor::zeros(x.n, self.cout, ho, wo);
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kl * p]
        };
        for i in 0..x.n {
            let cols: &[T] = if self.is_pointwise() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), x.h, x.w, &mut col);
                &col
            };
            let y = out.sample_mut(i);
            T::gemm(
                self.cout,
                kl,
                p,
                T::one(),
                &self.weight.value,
                (kl as isize, 1),
                cols,
                (p as isize, 1),
                T::zero(),
                y,
                (p as isize, 1),
            );
            if let Some(b) = &self.bias {
                for (plane, &bv) in y.chunks_exact_mut(p).zip(&b.value) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns `dL/dx` when requested.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let (ho, wo) = (dy.h, dy.w);
        let p = ho * wo;
        let kl = self.patch_len();
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let mut col = vec![T::zero(); if self.is_pointwise() { 0 } else { kl * p }];
        let mut dcol = vec![T::zero(); if need_dx { kl * p } else { 0 }];
        for i in 0..x.n {
            let dys = dy.sample(i);
            let cols: &[T] = if self.is_pointwise() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), x.h, x.w, &mut col);
                &col
            };
            // dW += dy * cols^T
            T::gemm(
                self.cout,
                p,
                kl,
                T::one(),
                dys,
                (p as isize, 1),
                cols,
                (1, p as isize),
                T::one(),
                &mut self.weight.grad,
                (kl as isize, 1),
            );
            if let Some(b) = &mut self.bias {
                for (g, plane) in b.grad.iter_mut().zip(dys.chunks_exact(p)) {
                    *g += plane.iter().copied().sum::<T>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                // dcol = W^T * dy
                let target: &mut [T] = if self.is_pointwise() {
                    dx.sample_mut(i)
                } else {
                    &mut dcol
                };
                T::gemm(
                    kl,
                    self.cout,
                    p,
                    T::one(),
                    &self.weight.value,
                    (1, kl as isize),
                    dys,
                    (p as isize, 1),
                    T::zero(),
                    target,
                    (p as isize, 1),
                );
                if !self.is_pointwise() {
                    self.col2im(&dcol, x.h, x.w, dx.sample_mut(i));
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

/// What the backward pass of a batch-norm layer needs.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: BnMode,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> (Tensor<T>, BnCache<T>) {
        let (n, c, h, w) = x.dims();
        let pl = h * w;
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut var_unbiased = vec![T::zero(); c];
        match mode {
            BnMode::Train => {
                let m = T::from_usize_lossy(n * pl);
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += x.sample(i)[ch * pl..(ch + 1) * pl].iter().copied().sum::<T>();
                    }
                    let mu = s / m;
                    let mut sq = T::zero();
                    for i in 0..n {
                        for &v in &x.sample(i)[ch * pl..(ch + 1) * pl] {
                            let d = v - mu;
                            sq += d * d;
                        }
                    }
                    let var = sq / m;
                    mean[ch] = mu;
                    inv_std[ch] = T::one() / (var + self.eps).sqrt();
                    var_unbiased[ch] = if n * pl > 1 {
                        sq / T::from_usize_lossy(n * pl - 1)
                    } else {
                        var
                    };
                }
            }
            BnMode::Eval => {
                for ch in 0..c {
                    mean[ch] = self.running_mean[ch];
                    inv_std[ch] = T::one() / (self.running_var[ch] + self.eps).sqrt();
                }
            }
        }
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..n {
            let xs = xhat.sample_mut(i);
            for ch in 0..c {
                let (mu, is) = (mean[ch], inv_std[ch]);
                for v in &mut xs[ch * pl..(ch + 1) * pl] {
                    *v = (*v - mu) * is;
                }
            }
            let ys = y.sample_mut(i);
            ys.copy_from_slice(xhat.sample(i));
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for v in &mut ys[ch * pl..(ch + 1) * pl] {
                    *v = *v * g + b;
                }
            }
        }
        (
            y,
            BnCache {
                mode,
                xhat: xhat.data,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
            },
        )
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != BnMode::Train {
            return;
        }
        let keep = T::one() - self.momentum;
        for ch in 0..self.channels {
            self.running_mean[ch] = keep * self.running_mean[ch] + self.momentum * cache.batch_mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + self.momentum * cache.batch_var_unbiased[ch];
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = dy.dims();
        let pl = h * w;
        let sl = c * pl;
        let mut dx = Tensor::zeros(n, c, h, w);
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let off = i * sl + ch * pl;
                for (d, xh) in dy.data[off..off + pl].iter().zip(&cache.xhat[off..off + pl]) {
                    sum_dy += *d;
                    sum_dy_xhat += *d * *xh;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            match cache.mode {
                BnMode::Train => {
                    let m = T::from_usize_lossy(n * pl);
                    let k = g * is / m;
                    for i in 0..n {
                        let off = i * sl + ch * pl;
                        for j in off..off + pl {
                            dx.data[j] = k * (m * dy.data[j] - sum_dy - cache.xhat[j] * sum_dy_xhat);
                        }
                    }
                }
                BnMode::Eval => {
                    for i in 0..n {
                        let off = i * sl + ch * pl;
                        for j in off..off + pl {
                            dx.data[j] = dy.data[j] * g * is;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor {
            n,
            c,
            h,
            w,
            data: (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Direct nested-loop convolution, zero padded.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (ho, wo) = conv.out_hw(x.h, x.w);
        let k = conv.kernel;
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(x.n, conv.cout, ho, wo);
        for i in 0..x.n {
            for co in 0..conv.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = conv.bias.as_ref().map_or(0.0, |b| b.value[co]);
                        for ci in 0..conv.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - pad;
                                    let ix = (ox * conv.stride + kx) as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((co * conv.cin + ci) * k + ky) * k + kx];
                                    s += wv * x.sample(i)[(ci * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                        out.sample_mut(i)[(co * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, bias) in &[(3, 1, false), (3, 2, true), (1, 1, true)] {
            let conv = Conv2d::<f64>::new("c", 3, 4, k, s, bias, 1.0, &mut rng);
            let x = rand_tensor(&mut rng, 2, 3, 6, 6);
            let a = conv.forward(&x);
            let b = naive_conv(&conv, &x);
            assert_eq!(a.dims(), b.dims());
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), r> must equal <x, dx> and <w, dW> for a linear layer
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let mut conv = Conv2d::<f64>::new("c", 2, 3, k, s, false, 1.0, &mut rng);
            let x = rand_tensor(&mut rng, 2, 2, 6, 6);
            let y = conv.forward(&x);
            let r = rand_tensor(&mut rng, y.n, y.c, y.h, y.w);
            let dx = conv.backward(&x, &r, true).unwrap();
            let lhs: f64 = y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
            let via_w: f64 = conv
                .weight
                .value
                .iter()
                .zip(&conv.weight.grad)
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
        }
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bn = BatchNorm2d::<f64>::new("bn", 2);
        let x = rand_tensor(&mut rng, 3, 2, 4, 4);
        let (y, _) = bn.forward(&x, BnMode::Train);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|i| y.sample(i)[ch * 16..(ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 48.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let x = rand_tensor(&mut rng, 2, 2, 3, 3);
        let r = rand_tensor(&mut rng, 2, 2, 3, 3);
        let loss = |bn: &BatchNorm2d<f64>, x: &Tensor<f64>| {
            let (y, _) = bn.forward(x, BnMode::Train);
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = bn.forward(&x, BnMode::Train);
        let dx = bn.backward(&cache, &r);
        let h = 1e-6;
        for j in 0..x.data.len() {
            let mut p = x.clone();
            p.data[j] += h;
            let mut m = x.clone();
            m.data[j] -= h;
            let fd = (loss(&bn, &p) - loss(&bn, &m)) / (2.0 * h);
            assert!((fd - dx.data[j]).abs() < 1e-6, "{fd} vs {}", dx.data[j]);
        }
    }
}
