//! Forward corruption and reverse samplers.
//!
//! Single-pose functions take `J x 3` matrices; the samplers run a batch of
//! independent chains (`B x J x 3`), each with its own random stream.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoise;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::schedule::NoiseSchedule;

/// Root-relative 3D joints, `J x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph3D(Array2<f64>);

/// Normalised 2D keypoints, `J x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D(Array2<f64>);

macro_rules! pose_newtype {
    ($ty:ident, $cols:expr) => {
        impl $ty {
            pub fn new(values: Array2<f64>) -> Result<Self> {
                if values.ncols() != $cols {
                    return Err(Error::shape(format!("J x {}", $cols), format!("{:?}", values.dim())));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(stringify!($ty).into()));
                }
                Ok($ty(values))
            }

            pub fn num_joints(&self) -> usize {
                self.0.nrows()
            }

            pub fn view(&self) -> ArrayView2<'_, f64> {
                self.0.view()
            }

            pub fn into_inner(self) -> Array2<f64> {
                self.0
            }
        }

        impl AsRef<Array2<f64>> for $ty {
            fn as_ref(&self) -> &Array2<f64> {
                &self.0
            }
        }
    };
}

pose_newtype!(PoseGraph3D, 3);
pose_newtype!(Detection2D, 2);

/// Default bound on predicted clean coordinates, in network units.
pub const DEFAULT_CLIP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub num_hypotheses: usize,
    /// Number of DDIM steps; ignored for DDPM.
    pub ddim_steps: usize,
    pub ddim_eta: f64,
    pub seed: u64,
    /// Bound on `x0` estimates; `None` disables clipping.
    pub clip_denoised: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SamplerMode::Ddpm,
            num_hypotheses: 1,
            ddim_steps: 100,
            ddim_eta: 0.0,
            seed: 0,
            clip_denoised: Some(DEFAULT_CLIP),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_hypotheses == 0 {
            return Err(Error::InvalidConfig("num_hypotheses must be at least 1".into()));
        }
        if self.mode == SamplerMode::Ddim {
            if self.ddim_steps == 0 || self.ddim_steps > schedule.total_steps() {
                return Err(Error::InvalidConfig(format!(
                    "ddim_steps must be in [1, {}], got {}",
                    schedule.total_steps(),
                    self.ddim_steps
                )));
            }
            if !(0.0..=1.0).contains(&self.ddim_eta) {
                return Err(Error::InvalidConfig(format!("ddim_eta must be in [0, 1], got {}", self.ddim_eta)));
            }
        }
        if let Some(c) = self.clip_denoised {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("clip_denoised must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Number of denoiser evaluations per chain.
    pub fn network_evaluations(&self, schedule: &NoiseSchedule) -> usize {
        match self.mode {
            SamplerMode::Ddpm => schedule.total_steps(),
            SamplerMode::Ddim => self.ddim_steps,
        }
    }
}

pub fn standard_normal(rng: &mut impl Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn check_same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// Closed-form corruption `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
pub fn forward_sample(
    x0: ArrayView2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    check_same_shape(x0, noise)?;
    let ab = schedule.alpha_bar(t);
    Ok(&x0 * ab.sqrt() + &noise * (1.0 - ab).sqrt())
}

/// One step of the Markov corruption chain, `x_{t-1} -> x_t`.
pub fn forward_step(
    x_prev: ArrayView2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    check_same_shape(x_prev, noise)?;
    Ok(&x_prev * schedule.alpha(t).sqrt() + &noise * schedule.beta(t).sqrt())
}

/// `x0` implied by a noise estimate at step `t` (`0 <= t <= T`).
pub fn predict_x0(
    x_t: ArrayView2<f64>,
    eps_pred: ArrayView2<f64>,
    alpha_bar: f64,
    clip: Option<f64>,
) -> Array2<f64> {
    let mut x0 = (&x_t - &(&eps_pred * (1.0 - alpha_bar).sqrt())) / alpha_bar.sqrt();
    if let Some(c) = clip {
        x0.mapv_inplace(|v| v.clamp(-c, c));
    }
    x0
}

/// Ancestral step: posterior mean from the implied `x0`, plus
/// `sqrt(posterior_variance) * noise` (dropped at `t = 1`).
pub fn ddpm_reverse_step(
    x_t: ArrayView2<f64>,
    t: usize,
    eps_pred: ArrayView2<f64>,
    schedule: &NoiseSchedule,
    noise: ArrayView2<f64>,
    clip: Option<f64>,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    check_same_shape(x_t, eps_pred)?;
    let x0 = predict_x0(x_t, eps_pred, schedule.alpha_bar(t), clip);
    let (c0, ct) = schedule.posterior_mean_coeffs(t)?;
    let mut out = &x0 * c0 + &x_t * ct;
    if t > 1 {
        check_same_shape(x_t, noise)?;
        out.scaled_add(schedule.posterior_variance(t).sqrt(), &noise);
    }
    Ok(out)
}

/// Generalised implicit step from `t` to `t_next < t`. `eta = 0` is
/// deterministic; `eta = 1` with `t_next = t - 1` has the ancestral variance.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_t: ArrayView2<f64>,
    t: usize,
    t_next: usize,
    eps_pred: ArrayView2<f64>,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: ArrayView2<f64>,
    clip: Option<f64>,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    if t_next >= t {
        return Err(Error::InvalidConfig(format!("DDIM step must decrease time: {t} -> {t_next}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidConfig(format!("eta must be in [0, 1], got {eta}")));
    }
    check_same_shape(x_t, eps_pred)?;
    let ab = schedule.alpha_bar(t);
    let ab_next = schedule.alpha_bar(t_next);
    let x0 = predict_x0(x_t, eps_pred, ab, clip);
    let sigma = ddim_sigma(ab, ab_next, eta);
    let direction = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
    let mut out = &x0 * ab_next.sqrt() + &eps_pred * direction;
    if sigma > 0.0 {
        check_same_shape(x_t, noise)?;
        out.scaled_add(sigma, &noise);
    }
    Ok(out)
}

fn ddim_sigma(ab: f64, ab_next: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    eta * ((1.0 - ab_next) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_next).max(0.0).sqrt()
}

/// Decreasing DDIM time grid `T = tau_S > ... > tau_0 = 0`, uniformly spaced
/// over `[0, T]` and rounded to integers.
pub fn ddim_timesteps(total_steps: usize, ddim_steps: usize) -> Result<Vec<usize>> {
    if ddim_steps == 0 || ddim_steps > total_steps {
        return Err(Error::InvalidConfig(format!(
            "ddim_steps must be in [1, {total_steps}], got {ddim_steps}"
        )));
    }
    Ok((0..=ddim_steps)
        .rev()
        .map(|i| ((i * total_steps) as f64 / ddim_steps as f64).round() as usize)
        .collect())
}

fn draw_batch_noise(rngs: &mut [StreamRng], joints: usize, dims: usize) -> Array3<f64> {
    let mut noise = Array3::zeros((rngs.len(), joints, dims));
    for (mut slot, rng) in noise.outer_iter_mut().zip(rngs.iter_mut()) {
        slot.assign(&standard_normal(rng, (joints, dims)));
    }
    noise
}

/// Runs one reverse chain per batch row. `rngs[b]` drives row `b` only, so
/// the result for a row does not depend on the batch it was run in.
pub fn sample_batch<D: Denoise + ?Sized>(
    denoiser: &D,
    y: ArrayView3<f64>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rngs: &mut [StreamRng],
) -> Result<Array3<f64>> {
    config.validate(schedule)?;
    let (batch, joints, _) = y.dim();
    if rngs.len() != batch {
        return Err(Error::shape(format!("{batch} random streams"), format!("{}", rngs.len())));
    }
    let mut x = draw_batch_noise(rngs, joints, 3);
    let clip = config.clip_denoised;
    match config.mode {
        SamplerMode::Ddpm => {
            for t in (1..=schedule.total_steps()).rev() {
                let eps = denoiser.denoise(x.view(), &vec![t; batch], y)?.eps;
                let noise = if t > 1 {
                    draw_batch_noise(rngs, joints, 3)
                } else {
                    Array3::zeros((batch, joints, 3))
                };
                let mut next = Array3::zeros(x.raw_dim());
                for b in 0..batch {
                    let step = ddpm_reverse_step(
                        x.index_axis(Axis(0), b),
                        t,
                        eps.index_axis(Axis(0), b),
                        schedule,
                        noise.index_axis(Axis(0), b),
                        clip,
                    )?;
                    next.index_axis_mut(Axis(0), b).assign(&step);
                }
                x = next;
            }
        }
        SamplerMode::Ddim => {
            let grid = ddim_timesteps(schedule.total_steps(), config.ddim_steps)?;
            for pair in grid.windows(2) {
                let (t, t_next) = (pair[0], pair[1]);
                let eps = denoiser.denoise(x.view(), &vec![t; batch], y)?.eps;
                let stochastic = ddim_sigma(schedule.alpha_bar(t), schedule.alpha_bar(t_next), config.ddim_eta) > 0.0;
                let noise = if stochastic {
                    draw_batch_noise(rngs, joints, 3)
                } else {
                    Array3::zeros((batch, joints, 3))
                };
                let mut next = Array3::zeros(x.raw_dim());
                for b in 0..batch {
                    let step = ddim_step(
                        x.index_axis(Axis(0), b),
                        t,
                        t_next,
                        eps.index_axis(Axis(0), b),
                        schedule,
                        config.ddim_eta,
                        noise.index_axis(Axis(0), b),
                        clip,
                    )?;
                    next.index_axis_mut(Axis(0), b).assign(&step);
                }
                x = next;
            }
        }
    }
    Ok(x)
}

/// Draws one pose for detection `y`, starting from `x_T ~ N(0, I)`.
pub fn sample<D: Denoise + ?Sized>(
    denoiser: &D,
    y: ArrayView2<f64>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng: &mut StreamRng,
) -> Result<Array2<f64>> {
    let y3 = y.insert_axis(Axis(0));
    let mut streams = [rng.clone()];
    let out = sample_batch(denoiser, y3, schedule, config, &mut streams)?;
    *rng = streams[0].clone();
    Ok(out.index_axis_move(Axis(0), 0))
}

/// Random stream of hypothesis `h` for work item `item`.
pub fn hypothesis_stream(seed: u64, item: u64, h: u64) -> StreamRng {
    rng::substream(seed, &[rng::domain::SAMPLE, item, h])
}

/// `N` hypotheses for one detection plus their per-joint mean. Hypothesis
/// `h` uses [`hypothesis_stream`]`(config.seed, item, h)`.
pub fn sample_hypotheses<D: Denoise + ?Sized>(
    denoiser: &D,
    y: ArrayView2<f64>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    item: u64,
) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
    let n = config.num_hypotheses;
    if n == 0 {
        return Err(Error::InvalidConfig("num_hypotheses must be at least 1".into()));
    }
    let mut rngs: Vec<StreamRng> = (0..n as u64).map(|h| hypothesis_stream(config.seed, item, h)).collect();
    let ys = y.insert_axis(Axis(0)).broadcast((n, y.nrows(), y.ncols())).unwrap().to_owned();
    let poses = sample_batch(denoiser, ys.view(), schedule, config, &mut rngs)?;
    let mean = poses.mean_axis(Axis(0)).expect("n >= 1");
    Ok((poses.outer_iter().map(|p| p.to_owned()).collect(), mean))
}

/// Per-joint arithmetic mean of a set of poses.
pub fn mean_pose(poses: &[Array2<f64>]) -> Option<Array2<f64>> {
    let first = poses.first()?;
    let mut acc = Array2::zeros(first.raw_dim());
    for p in poses {
        Zip::from(&mut acc).and(p).for_each(|a, &v| *a += v);
    }
    Some(acc / poses.len() as f64)
}
