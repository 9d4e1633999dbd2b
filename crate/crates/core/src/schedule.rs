//! Variance schedules and the forward noising process.
//!
//! Steps are stored for `t = 1..=T`; samplers walk them from `T` down to `1`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::Vector;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Serialized description of a schedule, echoed into every run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// Betas linearly spaced from `beta_start` to `beta_end`. With
    /// `scale_with_steps` both endpoints are multiplied by `1000 / steps`,
    /// which keeps the integrated noise level fixed as `steps` varies.
    Linear {
        steps: usize,
        #[serde(default = "default_beta_start")]
        beta_start: f64,
        #[serde(default = "default_beta_end")]
        beta_end: f64,
        #[serde(default)]
        scale_with_steps: bool,
    },
    Explicit {
        betas: Vec<f64>,
    },
}

fn default_beta_start() -> f64 {
    DEFAULT_BETA_START
}

fn default_beta_end() -> f64 {
    DEFAULT_BETA_END
}

impl ScheduleSpec {
    pub fn linear(steps: usize) -> Self {
        ScheduleSpec::Linear {
            steps,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            scale_with_steps: false,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            ScheduleSpec::Linear { steps, .. } => *steps,
            ScheduleSpec::Explicit { betas } => betas.len(),
        }
    }

    /// Same spec with a different step count (explicit lists cannot be resized).
    pub fn with_steps(&self, new_steps: usize) -> Result<Self> {
        match self {
            ScheduleSpec::Linear {
                beta_start,
                beta_end,
                scale_with_steps,
                ..
            } => Ok(ScheduleSpec::Linear {
                steps: new_steps,
                beta_start: *beta_start,
                beta_end: *beta_end,
                scale_with_steps: *scale_with_steps,
            }),
            ScheduleSpec::Explicit { .. } => Err(Error::Config(
                "an explicit beta list cannot be swept over step counts".into(),
            )),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match self {
            ScheduleSpec::Linear {
                steps,
                beta_start,
                beta_end,
                scale_with_steps,
            } => {
                let scale = if *scale_with_steps && *steps > 0 {
                    1000.0 / *steps as f64
                } else {
                    1.0
                };
                let mut s = make_linear_schedule(*steps, beta_start * scale, beta_end * scale)?;
                s.spec = self.clone();
                Ok(s)
            }
            ScheduleSpec::Explicit { betas } => NoiseSchedule::from_betas(betas.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    spec: ScheduleSpec,
}

/// Linearly interpolated betas, endpoints inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let mut s = NoiseSchedule::from_betas(betas)?;
    s.spec = ScheduleSpec::Linear {
        steps,
        beta_start,
        beta_end,
        scale_with_steps: false,
    };
    Ok(s)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let spec = ScheduleSpec::Explicit { betas: betas.clone() };
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            spec,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    /// β_t. Panics when `t` is out of range; use [`check_step`](Self::check_step) first.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// ᾱ_{t-1}, with ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Variance of the reverse-step noise, `β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`.
    pub fn reverse_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// `x_t = √ᾱ_t x0 + √(1-ᾱ_t) eps`.
    pub fn forward_sample(&self, x0: &Vector, t: usize, eps: &Vector) -> Result<Vector> {
        self.check_step(t)?;
        check_dim("forward_sample", x0.len(), eps.len())?;
        let ab = self.alpha_bar(t);
        Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }
}
