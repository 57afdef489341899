//! Patch-grid attenuation masks and their rescaling onto feature maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Map2;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Soft,
    Binary,
}

/// Interpolation used to bring a patch-grid mask to a skip resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    #[default]
    Nearest,
    Bilinear,
}

impl ScalingMode {
    pub fn name(self) -> &'static str {
        match self {
            ScalingMode::Nearest => "nearest",
            ScalingMode::Bilinear => "bilinear",
        }
    }
}

impl std::str::FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(ScalingMode::Nearest),
            "bilinear" => Ok(ScalingMode::Bilinear),
            other => Err(Error::Config(format!("unknown scaling mode {other:?}"))),
        }
    }
}

/// Per-patch attenuation coefficients in `[0, 1]` (1 keeps the feature).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask<T> {
    grid: Map2<T>,
    provenance: Provenance,
}

impl<T: Scalar> SoftMask<T> {
    pub fn new(grid: Map2<T>, provenance: Provenance) -> Result<Self> {
        for &v in grid.data() {
            let ok = match provenance {
                Provenance::Soft => v >= T::zero() && v <= T::one(),
                Provenance::Binary => v == T::zero() || v == T::one(),
            };
            if !ok {
                return Err(Error::Numeric(format!(
                    "mask value {v} invalid for {provenance:?} mask"
                )));
            }
        }
        Ok(Self { grid, provenance })
    }

    pub fn ones(n_h: usize, n_w: usize) -> Self {
        Self {
            grid: Map2::filled(n_h, n_w, T::one()),
            provenance: Provenance::Soft,
        }
    }

    pub fn zeros(n_h: usize, n_w: usize) -> Self {
        Self {
            grid: Map2::filled(n_h, n_w, T::zero()),
            provenance: Provenance::Soft,
        }
    }

    pub fn grid(&self) -> &Map2<T> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        self.grid.data()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn mean(&self) -> T {
        self.grid.mean()
    }
}

/// Rescales a patch grid to `target` (`h, w`) with the conventions of
/// half-pixel-centred interpolation: nearest samples `floor(i * in / out)`,
/// bilinear samples `(i + 0.5) * in / out - 0.5` clamped to the grid.
pub fn scale_mask<T: Scalar>(mask: &SoftMask<T>, target: (usize, usize), mode: ScalingMode) -> Map2<T> {
    let g = mask.grid();
    let (ih, iw) = g.dims();
    let (oh, ow) = target;
    if (ih, iw) == (oh, ow) {
        return g.clone();
    }
    match mode {
        ScalingMode::Nearest => Map2::from_fn(oh, ow, |y, x| g.get(y * ih / oh, x * iw / ow)),
        ScalingMode::Bilinear => {
            let coord = |o: usize, inn: usize, out: usize| -> (usize, usize, T) {
                let src = ((o as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inn - 1);
                let i1 = (i0 + 1).min(inn - 1);
                (i0, i1, T::lit(src - i0 as f64))
            };
            Map2::from_fn(oh, ow, |y, x| {
                let (y0, y1, fy) = coord(y, ih, oh);
                let (x0, x1, fx) = coord(x, iw, ow);
                let one = T::one();
                let top = g.get(y0, x0) * (one - fx) + g.get(y0, x1) * fx;
                let bot = g.get(y1, x0) * (one - fx) + g.get(y1, x1) * fx;
                let v = top * (one - fy) + bot * fy;
                v.max(T::zero()).min(one)
            })
        }
    }
}
