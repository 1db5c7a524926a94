//! Joint noise-prediction and 2D-reconstruction objective, Adam, and the
//! epoch loop.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoise, Denoiser, DenoiserParams};
use crate::diffusion::standard_normal;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::skeleton::{flip_pose, SkeletonSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    #[default]
    L2Unsquared,
    L2Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the 2D reconstruction term.
    pub lambda_2d: f64,
    /// Per-joint weights; `None` means all ones.
    pub joint_weights: Option<Vec<f64>>,
    pub norm: LossNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_2d: 1.0,
            joint_weights: None,
            norm: LossNorm::L2Unsquared,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_joints: usize) -> Result<()> {
        if !(self.lambda_2d >= 0.0 && self.lambda_2d.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_2d must be >= 0, got {}", self.lambda_2d)));
        }
        if let Some(w) = &self.joint_weights {
            if w.len() != num_joints {
                return Err(Error::InvalidConfig(format!(
                    "joint_weights has {} entries for {num_joints} joints",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidConfig("joint_weights must be strictly positive".into()));
            }
        }
        Ok(())
    }

    pub fn weights(&self, num_joints: usize) -> Array1<f64> {
        match &self.joint_weights {
            Some(w) => Array1::from_vec(w.clone()),
            None => Array1::ones(num_joints),
        }
    }
}

/// Batch-mean loss and its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub noise: f64,
    pub reconstruction: f64,
}

/// Timesteps and noise for one batch, drawn up front so a loss can be
/// re-evaluated with identical randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Array3<f64>,
}

impl NoiseDraw {
    /// `t ~ U{1..T}` and `eps ~ N(0, I)` for each of `batch` items.
    pub fn sample(schedule: &NoiseSchedule, batch: usize, joints: usize, rng: &mut impl Rng) -> Self {
        let mut eps = Array3::zeros((batch, joints, 3));
        let mut t = Vec::with_capacity(batch);
        for mut slot in eps.outer_iter_mut() {
            t.push(rng.random_range(1..=schedule.total_steps()));
            slot.assign(&standard_normal(rng, (joints, 3)));
        }
        NoiseDraw { t, eps }
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` for every batch row.
pub fn corrupt_batch(x0: ArrayView3<f64>, schedule: &NoiseSchedule, draw: &NoiseDraw) -> Result<Array3<f64>> {
    if x0.dim() != draw.eps.dim() || draw.t.len() != x0.len_of(Axis(0)) {
        return Err(Error::shape(format!("{:?}", x0.dim()), format!("{:?}", draw.eps.dim())));
    }
    let mut x_t = Array3::zeros(x0.raw_dim());
    for (b, &t) in draw.t.iter().enumerate() {
        schedule.check_step(t)?;
        let ab = schedule.alpha_bar(t);
        let row = &x0.index_axis(Axis(0), b) * ab.sqrt() + &draw.eps.index_axis(Axis(0), b) * (1.0 - ab).sqrt();
        x_t.index_axis_mut(Axis(0), b).assign(&row);
    }
    Ok(x_t)
}

/// Per-item weighted norms of `target - pred` and their gradients with
/// respect to `pred`, already divided by the batch size.
fn weighted_norm_term(
    pred: ArrayView3<f64>,
    target: ArrayView3<f64>,
    weights: &Array1<f64>,
    norm: LossNorm,
) -> (f64, Array3<f64>) {
    let batch = pred.len_of(Axis(0)) as f64;
    let w = weights.view().insert_axis(Axis(1));
    let mut grad = Array3::zeros(pred.raw_dim());
    let mut total = 0.0;
    for ((p, t), mut g) in pred.outer_iter().zip(target.outer_iter()).zip(grad.outer_iter_mut()) {
        let r = (&t - &p) * &w;
        let sq: f64 = r.iter().map(|v| v * v).sum();
        match norm {
            LossNorm::L2Unsquared => {
                let n = sq.sqrt();
                total += n;
                if n > 0.0 {
                    g.assign(&(-(&r * &w) / (n * batch)));
                }
            }
            LossNorm::L2Squared => {
                total += sq;
                g.assign(&(-2.0 * (&r * &w) / batch));
            }
        }
    }
    (total / batch, grad)
}

fn check_batch(x0: ArrayView3<f64>, y: ArrayView3<f64>) -> Result<()> {
    let (b, j, c) = x0.dim();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if c != 3 || y.dim() != (b, j, 2) {
        return Err(Error::shape(format!("{b} x {j} x 3 and {b} x {j} x 2"), format!("{:?} and {:?}", x0.dim(), y.dim())));
    }
    Ok(())
}

fn breakdown_and_grads(
    eps_pred: ArrayView3<f64>,
    y_pred: ArrayView3<f64>,
    eps: ArrayView3<f64>,
    y: ArrayView3<f64>,
    loss: &LossConfig,
) -> (LossBreakdown, Array3<f64>, Array3<f64>) {
    let weights = loss.weights(eps.len_of(Axis(1)));
    let (noise, g_eps) = weighted_norm_term(eps_pred, eps, &weights, loss.norm);
    let (reconstruction, g_y) = weighted_norm_term(y_pred, y, &weights, loss.norm);
    let total = noise + loss.lambda_2d * reconstruction;
    (
        LossBreakdown {
            total,
            noise,
            reconstruction,
        },
        g_eps,
        g_y * loss.lambda_2d,
    )
}

/// Loss for a batch of `(x0, y)` pairs under a fixed noise draw.
pub fn loss_with_draw<D: Denoise + ?Sized>(
    denoiser: &D,
    x0: ArrayView3<f64>,
    y: ArrayView3<f64>,
    schedule: &NoiseSchedule,
    loss: &LossConfig,
    draw: &NoiseDraw,
) -> Result<LossBreakdown> {
    check_batch(x0, y)?;
    loss.validate(x0.len_of(Axis(1)))?;
    let x_t = corrupt_batch(x0, schedule, draw)?;
    let out = denoiser.denoise(x_t.view(), &draw.t, y)?;
    Ok(breakdown_and_grads(out.eps.view(), out.y_recon.view(), draw.eps.view(), y, loss).0)
}

/// Draws `t` and noise from `rng`, then evaluates the loss.
pub fn diffusion_loss<D: Denoise + ?Sized>(
    denoiser: &D,
    x0: ArrayView3<f64>,
    y: ArrayView3<f64>,
    schedule: &NoiseSchedule,
    loss: &LossConfig,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    check_batch(x0, y)?;
    let draw = NoiseDraw::sample(schedule, x0.len_of(Axis(0)), x0.len_of(Axis(1)), rng);
    loss_with_draw(denoiser, x0, y, schedule, loss, &draw)
}

/// Loss and its gradient with respect to every network parameter.
pub fn loss_and_gradients(
    denoiser: &Denoiser,
    x0: ArrayView3<f64>,
    y: ArrayView3<f64>,
    schedule: &NoiseSchedule,
    loss: &LossConfig,
    draw: &NoiseDraw,
) -> Result<(LossBreakdown, DenoiserParams)> {
    check_batch(x0, y)?;
    loss.validate(x0.len_of(Axis(1)))?;
    let x_t = corrupt_batch(x0, schedule, draw)?;
    let (out, cache) = denoiser.forward(x_t.view(), &draw.t, y)?;
    let (breakdown, g_eps, g_y) = breakdown_and_grads(out.eps.view(), out.y_recon.view(), draw.eps.view(), y, loss);
    let grads = denoiser.backward(&cache, g_eps.view(), g_y.view())?;
    Ok((breakdown, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipCoin {
    Apply,
    Skip,
}

/// Horizontal flip of a 3D pose and its detection with one shared decision.
pub fn augment_flip(
    x0: ArrayView2<f64>,
    y: ArrayView2<f64>,
    spec: &SkeletonSpec,
    coin: FlipCoin,
) -> Result<(Array2<f64>, Array2<f64>)> {
    match coin {
        FlipCoin::Skip => Ok((x0.to_owned(), y.to_owned())),
        FlipCoin::Apply => Ok((flip_pose(x0, spec, 0)?, flip_pose(y, spec, 0)?)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Zeroes subnormal values.
fn flush_subnormal(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// Adam with bias correction; moments mirror the parameter layout.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: DenoiserParams,
    v: DenoiserParams,
    step: u64,
}

impl Adam {
    pub fn new(params: &DenoiserParams, config: AdamConfig) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut DenoiserParams, grads: &DenoiserParams, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let grads = grads.tensors();
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = flush_subnormal(beta1 * *m + (1.0 - beta1) * g);
                    *v = flush_subnormal(beta2 * *v + (1.0 - beta2) * g * g);
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_shrink: f64,
    pub flip_probability: f64,
    pub seed: u64,
    pub schedule: ScheduleKind,
    /// Save a checkpoint every this many epochs; `None` saves only the last.
    pub checkpoint_every: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 1024,
            learning_rate: 4e-5,
            lr_shrink: 0.995,
            flip_probability: 0.5,
            seed: 0,
            schedule: ScheduleKind::default(),
            checkpoint_every: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lr_shrink > 0.0 && self.lr_shrink <= 1.0) {
            return Err(Error::InvalidConfig(format!("lr_shrink must be in (0, 1], got {}", self.lr_shrink)));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::InvalidConfig(format!(
                "flip_probability must be in [0, 1], got {}",
                self.flip_probability
            )));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidConfig("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate used during zero-based epoch `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_shrink.powi(epoch as i32)
    }
}

/// Stacked `(x0, y)` pairs in network units: `N x J x 3` and `N x J x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub x0: Array3<f64>,
    pub y: Array3<f64>,
}

impl TrainingSet {
    pub fn new(x0: Array3<f64>, y: Array3<f64>) -> Result<Self> {
        let (n, j, c) = x0.dim();
        if c != 3 || y.dim() != (n, j, 2) {
            return Err(Error::shape(format!("{n} x {j} x 3 and {n} x {j} x 2"), format!("{:?} and {:?}", x0.dim(), y.dim())));
        }
        Ok(TrainingSet { x0, y })
    }

    pub fn len(&self) -> usize {
        self.x0.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_joints(&self) -> usize {
        self.x0.len_of(Axis(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub lr: f64,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,l1,l2,lr\n");
    for m in metrics {
        out.push_str(&format!("{},{},{},{},{}\n", m.epoch, m.loss, m.l1, m.l2, m.lr));
    }
    out
}

/// Owns the network and optimiser state across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    config: TrainConfig,
    loss: LossConfig,
    adam: Adam,
    epoch: usize,
    flips: u64,
}

impl Trainer {
    pub fn new(denoiser: Denoiser, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate(denoiser.num_joints())?;
        let schedule = config.schedule.build()?;
        let adam = Adam::new(denoiser.params(), config.adam);
        Ok(Trainer {
            denoiser,
            schedule,
            config,
            loss,
            adam,
            epoch: 0,
            flips: 0,
        })
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn into_denoiser(self) -> Denoiser {
        self.denoiser
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Number of flipped training samples seen so far.
    pub fn flip_count(&self) -> u64 {
        self.flips
    }

    /// One pass over `data` in a shuffled order drawn from the epoch's own
    /// random stream.
    pub fn run_epoch(&mut self, data: &TrainingSet) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let spec = self.denoiser.config().skeleton.clone();
        if data.num_joints() != spec.num_joints() {
            return Err(Error::SkeletonMismatch(format!(
                "dataset has {} joints, model expects {}",
                data.num_joints(),
                spec.num_joints()
            )));
        }
        let lr = self.config.learning_rate_at(self.epoch);
        let mut rng: StreamRng = rng::substream(self.config.seed, &[rng::domain::TRAIN, self.epoch as u64]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let j = spec.num_joints();
        let (mut loss, mut l1, mut l2) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            let mut x0 = Array3::zeros((chunk.len(), j, 3));
            let mut y = Array3::zeros((chunk.len(), j, 2));
            for (slot, &i) in chunk.iter().enumerate() {
                let flip = self.config.flip_probability > 0.0 && rng.random_bool(self.config.flip_probability);
                let coin = if flip {
                    self.flips += 1;
                    FlipCoin::Apply
                } else {
                    FlipCoin::Skip
                };
                let (a, b) = augment_flip(
                    data.x0.index_axis(Axis(0), i),
                    data.y.index_axis(Axis(0), i),
                    &spec,
                    coin,
                )?;
                x0.slice_mut(s![slot, .., ..]).assign(&a);
                y.slice_mut(s![slot, .., ..]).assign(&b);
            }
            let draw = NoiseDraw::sample(&self.schedule, chunk.len(), j, &mut rng);
            let (breakdown, grads) =
                loss_and_gradients(&self.denoiser, x0.view(), y.view(), &self.schedule, &self.loss, &draw)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {}", self.epoch + 1)));
            }
            self.adam.update(self.denoiser.params_mut(), &grads, lr);
            let weight = chunk.len() as f64;
            loss += breakdown.total * weight;
            l1 += breakdown.noise * weight;
            l2 += breakdown.reconstruction * weight;
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss: loss / n,
            l1: l1 / n,
            l2: l2 / n,
            lr,
        })
    }
}

/// Trains for `config.epochs` epochs. `observer` sees every epoch's
/// metrics and the trainer state (e.g. to write checkpoints).
pub fn train(
    data: &TrainingSet,
    denoiser: Denoiser,
    config: TrainConfig,
    loss: LossConfig,
    mut observer: impl FnMut(&EpochMetrics, &Trainer) -> Result<()>,
) -> Result<(Denoiser, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(denoiser, config, loss)?;
    let mut history = Vec::with_capacity(trainer.config.epochs);
    for _ in 0..trainer.config.epochs {
        let metrics = trainer.run_epoch(data)?;
        observer(&metrics, &trainer)?;
        history.push(metrics);
    }
    Ok((trainer.into_denoiser(), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, DenoiserOutput};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn tiny_spec() -> SkeletonSpec {
        SkeletonSpec::new(4, vec![(0, 1), (0, 2), (0, 3)], vec![(1, 2)], 0).unwrap()
    }

    fn tiny_net(seed: u64) -> Denoiser {
        let config = DenoiserConfig {
            model_dim: 8,
            num_blocks: 2,
            time_embed_dim: Some(4),
            skeleton: tiny_spec(),
            ..Default::default()
        };
        Denoiser::new(config, seed).unwrap()
    }

    fn randn3(rng: &mut StreamRng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
    }

    /// Knows the clean poses and detections, so it predicts the exact noise.
    struct Exact {
        x0: Array3<f64>,
        y: Array3<f64>,
        schedule: NoiseSchedule,
    }

    impl Denoise for Exact {
        fn num_joints(&self) -> usize {
            self.x0.len_of(Axis(1))
        }

        fn denoise(&self, x_t: ArrayView3<f64>, t: &[usize], _y: ArrayView3<f64>) -> Result<DenoiserOutput> {
            let mut eps = Array3::zeros(x_t.raw_dim());
            for (b, &tb) in t.iter().enumerate() {
                let ab = self.schedule.alpha_bar(tb);
                let e = (&x_t.index_axis(Axis(0), b) - &(&self.x0.index_axis(Axis(0), b) * ab.sqrt())) / (1.0 - ab).sqrt();
                eps.index_axis_mut(Axis(0), b).assign(&e);
            }
            Ok(DenoiserOutput {
                eps,
                y_recon: self.y.clone(),
            })
        }
    }

    #[test]
    fn exact_predictions_give_zero_loss() {
        let mut rng = StreamRng::seed_from_u64(0);
        let schedule = NoiseSchedule::cosine(100, 0.008).unwrap();
        let x0 = randn3(&mut rng, (5, 4, 3));
        let y = randn3(&mut rng, (5, 4, 2));
        let oracle = Exact {
            x0: x0.clone(),
            y: y.clone(),
            schedule: schedule.clone(),
        };
        let l = diffusion_loss(&oracle, x0.view(), y.view(), &schedule, &LossConfig::default(), &mut rng).unwrap();
        assert!(l.total.abs() < 1e-10, "{l:?}");
    }

    #[test]
    fn term_breakdown_and_weight_homogeneity() {
        let mut rng = StreamRng::seed_from_u64(1);
        let schedule = NoiseSchedule::cosine(100, 0.008).unwrap();
        let net = tiny_net(2);
        let x0 = randn3(&mut rng, (6, 4, 3));
        let y = randn3(&mut rng, (6, 4, 2));
        let draw = NoiseDraw::sample(&schedule, 6, 4, &mut rng);

        let base = LossConfig {
            joint_weights: Some(vec![1.0, 0.5, 2.0, 1.5]),
            ..Default::default()
        };
        let l = loss_with_draw(&net, x0.view(), y.view(), &schedule, &base, &draw).unwrap();
        assert!((l.total - (l.noise + l.reconstruction)).abs() < 1e-12);

        let no_2d = LossConfig {
            lambda_2d: 0.0,
            ..base.clone()
        };
        let l0 = loss_with_draw(&net, x0.view(), y.view(), &schedule, &no_2d, &draw).unwrap();
        assert_eq!(l0.total, l0.noise);

        let doubled = LossConfig {
            joint_weights: Some(vec![2.0, 1.0, 4.0, 3.0]),
            ..base.clone()
        };
        let l2 = loss_with_draw(&net, x0.view(), y.view(), &schedule, &doubled, &draw).unwrap();
        assert!((l2.noise - 2.0 * l.noise).abs() < 1e-12);
        assert!((l2.reconstruction - 2.0 * l.reconstruction).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let schedule = NoiseSchedule::cosine(10, 0.008).unwrap();
        let net = tiny_net(0);
        let mut rng = StreamRng::seed_from_u64(0);
        let empty = Array3::<f64>::zeros((0, 4, 3));
        let empty_y = Array3::<f64>::zeros((0, 4, 2));
        assert!(matches!(
            diffusion_loss(&net, empty.view(), empty_y.view(), &schedule, &LossConfig::default(), &mut rng),
            Err(Error::EmptyBatch)
        ));
        let bad = LossConfig {
            joint_weights: Some(vec![1.0, 0.0, 1.0, 1.0]),
            ..Default::default()
        };
        assert!(bad.validate(4).is_err());
        assert!(LossConfig { lambda_2d: -1.0, ..Default::default() }.validate(4).is_err());
    }

    #[test]
    fn flip_augmentation() {
        let spec = tiny_spec();
        let x0 = array![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-4.0, 5.0, 6.0], [7.0, -8.0, 9.0]];
        let y = array![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]];
        let (a, b) = augment_flip(x0.view(), y.view(), &spec, FlipCoin::Skip).unwrap();
        assert_eq!((a.clone(), b.clone()), (x0.clone(), y.clone()));
        let (a, b) = augment_flip(x0.view(), y.view(), &spec, FlipCoin::Apply).unwrap();
        assert_eq!(a, array![[0.0, 0.0, 0.0], [4.0, 5.0, 6.0], [-1.0, 2.0, 3.0], [-7.0, -8.0, 9.0]]);
        assert_eq!(b, array![[-0.1, 0.2], [-0.5, 0.6], [-0.3, 0.4], [-0.7, 0.8]]);
        let (aa, bb) = augment_flip(a.view(), b.view(), &spec, FlipCoin::Apply).unwrap();
        assert_eq!((aa, bb), (x0, y));
    }

    #[test]
    fn learning_rate_trajectory() {
        let c = TrainConfig::default();
        for k in [0usize, 1, 7, 199] {
            assert_eq!(c.learning_rate_at(k), 4e-5 * 0.995f64.powi(k as i32));
        }
        assert!(TrainConfig { lr_shrink: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { flip_probability: 1.5, ..Default::default() }.validate().is_err());
    }

    fn toy_set(rng: &mut StreamRng, n: usize) -> TrainingSet {
        TrainingSet::new(randn3(rng, (n, 4, 3)) * 0.3, randn3(rng, (n, 4, 2)) * 0.3).unwrap()
    }

    #[test]
    fn epochs_are_deterministic_and_flips_counted() {
        let mut rng = StreamRng::seed_from_u64(5);
        let data = toy_set(&mut rng, 10);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            flip_probability: 0.0,
            seed: 11,
            ..Default::default()
        };
        let run = |c: TrainConfig| train(&data, tiny_net(1), c, LossConfig::default(), |_, _| Ok(())).unwrap();
        let (net_a, hist_a) = run(config.clone());
        let (net_b, hist_b) = run(config.clone());
        assert_eq!(hist_a, hist_b);
        assert_eq!(net_a.params(), net_b.params());

        let mut trainer = Trainer::new(tiny_net(1), config.clone(), LossConfig::default()).unwrap();
        trainer.run_epoch(&data).unwrap();
        assert_eq!(trainer.flip_count(), 0);
        let mut flipping = Trainer::new(
            tiny_net(1),
            TrainConfig {
                flip_probability: 1.0,
                ..config
            },
            LossConfig::default(),
        )
        .unwrap();
        flipping.run_epoch(&data).unwrap();
        assert_eq!(flipping.flip_count(), 10);
    }

    #[test]
    fn adam_step_matches_closed_form() {
        // the first bias-corrected step moves each weight by lr * sign(g)
        let net = tiny_net(3);
        let mut params = net.params().clone();
        let mut grads = params.zeros_like();
        grads.eps_head.bias[0] = 0.25;
        grads.eps_head.bias[1] = -4.0;
        let before = params.eps_head.bias.clone();
        let mut adam = Adam::new(&params, AdamConfig::default());
        adam.update(&mut params, &grads, 0.01);
        assert!((params.eps_head.bias[0] - (before[0] - 0.01)).abs() < 1e-9);
        assert!((params.eps_head.bias[1] - (before[1] + 0.01)).abs() < 1e-9);
        assert_eq!(params.eps_head.bias[2], before[2]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn training_reduces_loss_on_tiny_problem() {
        let mut rng = StreamRng::seed_from_u64(8);
        let data = toy_set(&mut rng, 8);
        let config = TrainConfig {
            epochs: 150,
            batch_size: 8,
            learning_rate: 3e-3,
            lr_shrink: 1.0,
            flip_probability: 0.0,
            ..Default::default()
        };
        let (_, hist) = train(&data, tiny_net(4), config, LossConfig::default(), |_, _| Ok(())).unwrap();
        let head: f64 = hist[..10].iter().map(|m| m.loss).sum::<f64>() / 10.0;
        let tail: f64 = hist[hist.len() - 10..].iter().map(|m| m.loss).sum::<f64>() / 10.0;
        assert!(tail < 0.8 * head, "{head} -> {tail}");
    }
}
