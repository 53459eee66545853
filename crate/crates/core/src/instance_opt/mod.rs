//! Adam instance optimization of the displacement field.

mod bending;
mod loss;
mod optimize;

use serde::{Deserialize, Serialize};

use crate::convex::ConvexConfig;
use crate::dimred::DimredConfig;
use crate::error::{invalid, Result};
use crate::mind::MindConfig;

pub use bending::bending_energy;
pub use loss::{fused_loss, FeaturePair, FusedLoss, LossWeights};
pub use optimize::{optimize, trace_csv, DdrCoupling, OptimizeResult, TraceRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Glide,
    GlobalOnly,
    LocalOnly,
}

impl Mode {
    pub fn uses_global(self) -> bool {
        self != Mode::LocalOnly
    }

    pub fn uses_local(self) -> bool {
        self != Mode::GlobalOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub iters: usize,
    pub lr_disp: f64,
    pub down_factor: usize,
    pub mode: Mode,
    pub dimred: DimredConfig,
    pub convex: ConvexConfig,
    pub mind: MindConfig,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda: 1.25,
            alpha: 0.5,
            beta: 3.5,
            iters: 800,
            lr_disp: 1.0,
            down_factor: 2,
            mode: Mode::Glide,
            dimred: DimredConfig::default(),
            convex: ConvexConfig::default(),
            mind: MindConfig::default(),
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_disp > 0.0) {
            return Err(invalid("lr_disp must be > 0"));
        }
        if self.down_factor < 1 {
            return Err(invalid("down_factor must be >= 1"));
        }
        if [self.lambda, self.alpha, self.beta].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("loss weights must be finite and >= 0"));
        }
        self.dimred.validate()?;
        self.convex.validate()?;
        self.mind.validate()
    }

    /// Weights with the unused term of the mode zeroed.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: if self.mode.uses_global() { self.alpha } else { 0.0 },
            beta: if self.mode.uses_local() { self.beta } else { 0.0 },
            lambda: self.lambda,
        }
    }

    /// Parameter grid of the displacement for a working grid.
    pub fn down_dims(&self, work: crate::grid::Dims) -> crate::grid::Dims {
        work.map(|n| (n / self.down_factor).max(1))
    }
}
