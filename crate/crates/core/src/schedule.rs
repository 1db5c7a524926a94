//! Noise schedules.
//!
//! All arrays are indexed by diffusion step `t = 1..=T` through accessor
//! methods; position `t = 0` is the clean reference point where
//! `alpha_bar = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Upper clip applied to every beta.
pub const MAX_BETA: f64 = 0.999;

/// Serializable description of a schedule, enough to rebuild it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleKind {
    Linear {
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default = "default_beta_start")]
        beta_start: f64,
        #[serde(default = "default_beta_end")]
        beta_end: f64,
    },
    Cosine {
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default = "default_offset")]
        offset: f64,
    },
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_beta_start() -> f64 {
    DEFAULT_BETA_START
}

fn default_beta_end() -> f64 {
    DEFAULT_BETA_END
}

fn default_offset() -> f64 {
    DEFAULT_COSINE_OFFSET
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Cosine {
            steps: DEFAULT_STEPS,
            offset: DEFAULT_COSINE_OFFSET,
        }
    }
}

impl ScheduleKind {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleKind::Linear {
                steps,
                beta_start,
                beta_end,
            } => NoiseSchedule::linear(steps, beta_start, beta_end),
            ScheduleKind::Cosine { steps, offset } => NoiseSchedule::cosine(steps, offset),
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            ScheduleKind::Linear { steps, .. } | ScheduleKind::Cosine { steps, .. } => steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    alpha_bar_prev: Vec<f64>,
    posterior_variance: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("at least one step is required".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(
            ScheduleKind::Linear {
                steps,
                beta_start,
                beta_end,
            },
            beta,
        ))
    }

    /// Cosine schedule: `alpha_bar(t) = f(t) / f(0)` with
    /// `f(t) = cos(((t/T + s) / (1 + s)) * pi/2)^2`, betas recovered from
    /// consecutive ratios and clipped at [`MAX_BETA`].
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("at least one step is required".into()));
        }
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::InvalidSchedule(format!("cosine offset must be positive, got {offset}")));
        }
        let f = |t: usize| {
            let phase = (t as f64 / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            phase.cos().powi(2)
        };
        let f0 = f(0);
        let beta = (1..=steps)
            .map(|t| (1.0 - (f(t) / f0) / (f(t - 1) / f0)).clamp(0.0, MAX_BETA))
            .collect();
        Ok(Self::from_betas(ScheduleKind::Cosine { steps, offset }, beta))
    }

    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut alpha_bar_prev = Vec::with_capacity(alpha.len());
        let mut running = 1.0;
        for a in &alpha {
            alpha_bar_prev.push(running);
            running *= a;
            alpha_bar.push(running);
        }
        let posterior_variance = beta
            .iter()
            .zip(alpha_bar.iter().zip(&alpha_bar_prev))
            .map(|(b, (ab, abp))| (1.0 - abp) / (1.0 - ab) * b)
            .collect();
        NoiseSchedule {
            kind,
            beta,
            alpha,
            alpha_bar,
            alpha_bar_prev,
            posterior_variance,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn total_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.total_steps(),
            })
        } else {
            Ok(())
        }
    }

    /// Panics unless `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar` for `0 <= t <= T`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        self.alpha_bar_prev[t - 1]
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    /// Per-step values; index `t - 1` holds step `t`.
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variance
    }

    /// Coefficients `(c0, ct)` of the posterior mean
    /// `mu = c0 * x0 + ct * x_t` of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_mean_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        let abp = self.alpha_bar_prev(t);
        let coef_x0 = abp.sqrt() * self.beta(t) / (1.0 - ab);
        let coef_xt = self.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab);
        Ok((coef_x0, coef_xt))
    }

    /// `(t, beta, alpha_bar, posterior_variance)` rows as CSV, starting with
    /// the `t = 0` reference row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,posterior_variance\n");
        out.push_str(&format!("0,{:e},{:e},{:e}\n", 0.0, 1.0, 0.0));
        for t in 1..=self.total_steps() {
            out.push_str(&format!(
                "{t},{:e},{:e},{:e}\n",
                self.beta(t),
                self.alpha_bar(t),
                self.posterior_variance(t)
            ));
        }
        out
    }
}
