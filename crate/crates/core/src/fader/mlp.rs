use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fader::tokens::{LossVector, PatchTokens};
use crate::nn::{kaiming_uniform, Param};
use crate::scalar::Scalar;

/// Two-layer perceptron mapping one patch token to a predicted error:
/// `w2 . leaky_relu(W1 t + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaderMlp<T> {
    pub input: usize,
    pub hidden: usize,
    pub slope: T,
    /// `hidden x input`
    pub w1: Param<T>,
    pub b1: Param<T>,
    /// `1 x hidden`
    pub w2: Param<T>,
    pub b2: Param<T>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace<T> {
    hidden: Vec<T>,
}

impl<T: Scalar> FaderMlp<T> {
    pub fn new(input: usize, hidden: usize, slope: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        Self {
            input,
            hidden,
            slope: T::lit(slope),
            w1: Param::new(
                "mlp.w1",
                vec![hidden, input],
                kaiming_uniform(&mut rng, hidden * input, input, gain),
            ),
            b1: Param::new("mlp.b1", vec![hidden], vec![T::zero(); hidden]),
            w2: Param::new(
                "mlp.w2",
                vec![1, hidden],
                kaiming_uniform(&mut rng, hidden, hidden, 1.0),
            ),
            b2: Param::new("mlp.b2", vec![1], vec![T::zero()]),
        }
    }

    /// Predicts one value per token; returns the trace for [`Self::backward`].
    pub fn forward_traced(&self, tokens: &PatchTokens<T>) -> Result<(LossVector<T>, MlpTrace<T>)> {
        if tokens.token_len() != self.input {
            return Err(Error::shape(format!(
                "token length {} but MLP expects {}",
                tokens.token_len(),
                self.input
            )));
        }
        let n = tokens.len();
        let (d, h) = (self.input, self.hidden);
        let mut hidden = vec![T::zero(); n * h];
        for row in hidden.chunks_exact_mut(h) {
            row.copy_from_slice(&self.b1.value);
        }
        // hidden (n x h) += tokens (n x d) * W1^T (d x h)
        T::gemm(
            n,
            d,
            h,
            T::one(),
            tokens.as_matrix(),
            (d as isize, 1),
            &self.w1.value,
            (1, d as isize),
            T::one(),
            &mut hidden,
            (h as isize, 1),
        );
        for v in &mut hidden {
            if *v < T::zero() {
                *v *= self.slope;
            }
        }
        let out: Vec<T> = hidden
            .chunks_exact(h)
            .map(|row| row.iter().zip(&self.w2.value).map(|(&a, &b)| a * b).sum::<T>() + self.b2.value[0])
            .collect();
        Ok((LossVector::new(out, tokens.grid())?, MlpTrace { hidden }))
    }

    pub fn predict(&self, tokens: &PatchTokens<T>) -> Result<LossVector<T>> {
        Ok(self.forward_traced(tokens)?.0)
    }

    /// Accumulates parameter gradients given `dL/dprediction`.
    pub fn backward(&mut self, tokens: &PatchTokens<T>, trace: &MlpTrace<T>, d_out: &[T]) {
        let (d, h) = (self.input, self.hidden);
        let n = d_out.len();
        let mut d_hidden = vec![T::zero(); n * h];
        for (i, (&g, row)) in d_out.iter().zip(trace.hidden.chunks_exact(h)).enumerate() {
            self.b2.grad[0] += g;
            let dh = &mut d_hidden[i * h..(i + 1) * h];
            for j in 0..h {
                self.w2.grad[j] += g * row[j];
                let mut v = g * self.w2.value[j];
                if row[j] < T::zero() {
                    v *= self.slope;
                }
                dh[j] = v;
            }
        }
        for row in d_hidden.chunks_exact(h) {
            for (gb, &v) in self.b1.grad.iter_mut().zip(row) {
                *gb += v;
            }
        }
        // dW1 (h x d) += d_hidden^T (h x n) * tokens (n x d)
        T::gemm(
            h,
            n,
            d,
            T::one(),
            &d_hidden,
            (1, h as isize),
            tokens.as_matrix(),
            (d as isize, 1),
            T::one(),
            &mut self.w1.grad,
            (d as isize, 1),
        );
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }
}
