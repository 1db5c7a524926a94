use graphdiff::denoiser::{Denoise, Denoiser, DenoiserConfig, DenoiserOutput};
use graphdiff::diffusion::{
    ddim_timesteps, ddpm_reverse_step, forward_sample, hypothesis_stream, sample_hypotheses, standard_normal,
    SamplerConfig, SamplerMode,
};
use graphdiff::evaluation::sample_items;
use graphdiff::schedule::{NoiseSchedule, ScheduleKind};
use graphdiff::skeleton::SkeletonSpec;
use graphdiff::training::{loss_and_gradients, loss_with_draw, LossConfig, LossNorm, NoiseDraw};
use graphdiff::Result;
use ndarray::{Array2, Array3, ArrayView3};
use proptest::prelude::*;
use rand::SeedableRng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn schedules_are_valid_for_any_length(steps in 2usize..400, offset in 0.001f64..0.05) {
        let s = NoiseSchedule::cosine(steps, offset).unwrap();
        let ab: Vec<f64> = (0..=steps).map(|t| s.alpha_bar(t)).collect();
        prop_assert_eq!(ab[0], 1.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b <= 0.999));
        prop_assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn ddim_grid_is_strictly_decreasing(total in 1usize..300, frac in 0.0f64..1.0) {
        let steps = 1 + ((total - 1) as f64 * frac) as usize;
        let grid = ddim_timesteps(total, steps).unwrap();
        prop_assert_eq!(grid.len(), steps + 1);
        prop_assert_eq!(grid[0], total);
        prop_assert_eq!(*grid.last().unwrap(), 0);
        prop_assert!(grid.windows(2).all(|w| w[0] > w[1]));
    }
}

#[test]
fn forward_samples_have_the_closed_form_moments() {
    let s = NoiseSchedule::cosine(100, 0.008).unwrap();
    let x0 = Array2::from_shape_fn((4, 3), |(j, k)| 0.3 * j as f64 - 0.2 * k as f64 + 0.1);
    let mut rng = graphdiff::rng::StreamRng::seed_from_u64(5);
    let n = 20_000;
    let mut sum = Array2::<f64>::zeros((4, 3));
    let mut sq = Array2::<f64>::zeros((4, 3));
    for _ in 0..n {
        let x = forward_sample(x0.view(), 30, &s, standard_normal(&mut rng, (4, 3)).view()).unwrap();
        sum += &x;
        sq += &x.mapv(|v| v * v);
    }
    let mean = &sum / n as f64;
    let var = &sq / n as f64 - &mean.mapv(|v| v * v);
    let ab = s.alpha_bar(30);
    for ((m, v), x) in mean.iter().zip(var.iter()).zip(x0.iter()) {
        assert!((m - ab.sqrt() * x).abs() < 0.03, "mean {m}");
        assert!((v / (1.0 - ab) - 1.0).abs() < 0.05, "var {v}");
    }
}

#[test]
fn exact_noise_recovers_x0_at_the_last_step() {
    let s = NoiseSchedule::cosine(50, 0.008).unwrap();
    let x0 = Array2::from_elem((3, 3), 0.25);
    let noise = Array2::from_elem((3, 3), -0.5);
    let xt = forward_sample(x0.view(), 1, &s, noise.view()).unwrap();
    let out = ddpm_reverse_step(xt.view(), 1, noise.view(), &s, Array2::zeros((3, 3)).view(), None).unwrap();
    assert!((&out - &x0).iter().all(|v| v.abs() < 1e-12));
}

/// Predicts zero noise; sampling then reduces to a deterministic
/// function of the starting point and the per-step noise.
struct Zero(usize);

impl Denoise for Zero {
    fn num_joints(&self) -> usize {
        self.0
    }

    fn denoise(&self, x_t: ArrayView3<f64>, _t: &[usize], y: ArrayView3<f64>) -> Result<DenoiserOutput> {
        Ok(DenoiserOutput {
            eps: Array3::zeros(x_t.raw_dim()),
            y_recon: y.to_owned(),
        })
    }
}

#[test]
fn hypotheses_do_not_depend_on_batching_or_workers() {
    let config = DenoiserConfig {
        model_dim: 8,
        num_blocks: 2,
        ..Default::default()
    };
    let net = Denoiser::new(config, 1).unwrap();
    let schedule = ScheduleKind::Cosine { steps: 10, offset: 0.008 }.build().unwrap();
    let detections: Vec<Array2<f64>> = (0..4)
        .map(|i| Array2::from_shape_fn((17, 2), |(j, k)| 0.01 * (i * 7 + j * 3 + k) as f64 - 0.2))
        .collect();
    for mode in [SamplerMode::Ddpm, SamplerMode::Ddim] {
        let sampler = SamplerConfig {
            mode,
            num_hypotheses: 3,
            ddim_steps: 5,
            ddim_eta: 0.5,
            seed: 21,
            ..Default::default()
        };
        let serial = sample_items(&net, &detections, &schedule, &sampler, 0).unwrap();
        let parallel = sample_items(&net, &detections, &schedule, &sampler, 2).unwrap();
        assert_eq!(serial, parallel);
        let (alone, _) = sample_hypotheses(&net, detections[2].view(), &schedule, &sampler, 2).unwrap();
        assert_eq!(alone, serial[2].0);
        let single = SamplerConfig {
            num_hypotheses: 1,
            ..sampler.clone()
        };
        let mut rng = hypothesis_stream(21, 2, 0);
        let one = graphdiff::diffusion::sample(&net, detections[2].view(), &schedule, &single, &mut rng).unwrap();
        assert_eq!(one, serial[2].0[0]);
    }
}

#[test]
fn ddim_with_zero_noise_prediction_scales_the_start() {
    let schedule = NoiseSchedule::cosine(20, 0.008).unwrap();
    let y = Array2::<f64>::zeros((5, 2));
    let sampler = SamplerConfig {
        mode: SamplerMode::Ddim,
        ddim_steps: 4,
        clip_denoised: None,
        seed: 3,
        ..Default::default()
    };
    let (poses, _) = sample_hypotheses(&Zero(5), y.view(), &schedule, &sampler, 0).unwrap();
    let start = standard_normal(&mut hypothesis_stream(3, 0, 0), (5, 3));
    // With eps = 0 every implicit step rescales by sqrt(ab_next / ab).
    let expected = &start / schedule.alpha_bar(20).sqrt();
    let rel = (&poses[0] - &expected).mapv(f64::abs).sum() / expected.mapv(f64::abs).sum();
    assert!(rel < 1e-9, "{rel}");
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn nudge(net: &mut Denoiser, tensor: usize, index: usize, delta: f64) {
    let mut tensors = net.params_mut().tensors_mut();
    *tensors[tensor].1.iter_mut().nth(index).unwrap() += delta;
}

fn full_loss_check(loss: LossConfig) {
    let spec = SkeletonSpec::new(4, vec![(0, 1), (1, 2), (1, 3)], vec![(2, 3)], 0).unwrap();
    let config = DenoiserConfig {
        model_dim: 6,
        num_blocks: 2,
        time_embed_dim: Some(4),
        skeleton: spec,
        ..Default::default()
    };
    let mut net = Denoiser::new(config, 17).unwrap();
    let schedule = NoiseSchedule::cosine(20, 0.008).unwrap();
    let mut rng = graphdiff::rng::StreamRng::seed_from_u64(8);
    let x0 = Array3::from_shape_fn((3, 4, 3), |(b, j, k)| 0.1 * (b + 2 * j) as f64 - 0.05 * k as f64);
    let y = Array3::from_shape_fn((3, 4, 2), |(b, j, k)| 0.07 * (b * j) as f64 + 0.03 * k as f64 - 0.1);
    let draw = NoiseDraw::sample(&schedule, 3, 4, &mut rng);
    let (_, grads) = loss_and_gradients(&net, x0.view(), y.view(), &schedule, &loss, &draw).unwrap();
    let f = |n: &Denoiser| loss_with_draw(n, x0.view(), y.view(), &schedule, &loss, &draw).unwrap().total;
    let names: Vec<String> = grads.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        for k in 0..len {
            nudge(&mut net, ti, k, h);
            let up = f(&net);
            nudge(&mut net, ti, k, -2.0 * h);
            let down = f(&net);
            nudge(&mut net, ti, k, h);
            let numeric = (up - down) / (2.0 * h);
            let err = relative(numeric, analytic[ti][k]);
            if numeric.abs().max(analytic[ti][k].abs()) > 1e-7 {
                worst = worst.max(err);
            }
            assert!(err < 1e-4 || (numeric - analytic[ti][k]).abs() < 1e-9, "{name}[{k}]: {numeric} vs {}", analytic[ti][k]);
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    full_loss_check(LossConfig::default());
}

#[test]
fn weighted_squared_loss_gradients_match_finite_differences() {
    full_loss_check(LossConfig {
        lambda_2d: 0.3,
        joint_weights: Some(vec![1.0, 2.0, 0.5, 1.5]),
        norm: LossNorm::L2Squared,
    });
}
