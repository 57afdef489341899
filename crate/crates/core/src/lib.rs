//! Feature attenuation of defective representation (FADeR) for
//! reconstruction-based visual anomaly detection.

// `!(x > 0.0)` style guards deliberately reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attenuation;
pub mod backbone;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod fader;
pub mod image;
pub mod masking;
pub mod nn;
pub mod scalar;
pub mod scoring;
pub mod seeding;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Image = image::ImageTensor<f32>;
pub type ImageF64 = image::ImageTensor<f64>;
pub type UNetF32 = backbone::UNet<f32>;
pub type UNetF64 = backbone::UNet<f64>;
pub type FaderMlpF32 = fader::FaderMlp<f32>;
pub type FaderMlpF64 = fader::FaderMlp<f64>;
