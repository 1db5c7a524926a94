//! MPJPE, Procrustes-aligned P-MPJPE and per-action reports.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PoseDataset, PoseItem};
use crate::denoiser::Denoise;
use crate::diffusion::{sample_hypotheses, SamplerConfig, SamplerMode};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Environment variable sizing the evaluation thread pool; unset or `0`
/// runs serially.
pub const NUM_WORKERS_ENV: &str = "GRAPHDIFF_NUM_WORKERS";

fn check_pair(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<()> {
    if pred.dim() != gt.dim() || pred.ncols() != 3 {
        return Err(Error::shape(format!("{:?} with 3 columns", gt.dim()), format!("{:?}", pred.dim())));
    }
    if pred.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Mean Euclidean distance over joints, in the inputs' units.
pub fn mpjpe(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let d = &pred - &gt;
    Ok(d.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / pred.nrows() as f64)
}

/// Subtracts the root joint from every joint.
pub fn root_relative(pose: ArrayView2<f64>, root_index: usize) -> Array2<f64> {
    &pose - &pose.row(root_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentKind {
    /// Rotation, positive scale and translation.
    #[default]
    Similarity,
    /// Rotation and translation only.
    Rigid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub aligned: Array2<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    /// Set when the point sets did not determine a rotation; the alignment
    /// is then translation-only.
    pub degenerate: bool,
}

fn to_points(x: ArrayView2<f64>) -> Vec<Vector3<f64>> {
    x.rows().into_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect()
}

/// Least-squares similarity transform mapping `pred` onto `gt`.
pub fn procrustes_align(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<Alignment> {
    procrustes_align_with(pred, gt, AlignmentKind::Similarity)
}

pub fn procrustes_align_with(pred: ArrayView2<f64>, gt: ArrayView2<f64>, kind: AlignmentKind) -> Result<Alignment> {
    check_pair(pred, gt)?;
    let p = to_points(pred);
    let g = to_points(gt);
    let n = p.len() as f64;
    let mu_p = p.iter().sum::<Vector3<f64>>() / n;
    let mu_g = g.iter().sum::<Vector3<f64>>() / n;
    let pc: Vec<Vector3<f64>> = p.iter().map(|v| v - mu_p).collect();
    let gc: Vec<Vector3<f64>> = g.iter().map(|v| v - mu_g).collect();
    let var_p: f64 = pc.iter().map(|v| v.norm_squared()).sum();

    let mut cov = Matrix3::zeros();
    for (a, b) in pc.iter().zip(&gc) {
        cov += b * a.transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut sv = svd.singular_values;
    // nalgebra does not sort singular values
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let largest = sv[idx[0]];
    let degenerate = p.len() < 3 || var_p <= f64::EPSILON || largest <= 0.0 || sv[idx[1]] <= 1e-12 * largest;

    let (rotation, scale) = if degenerate {
        (Matrix3::identity(), 1.0)
    } else {
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            // flip the direction of least variance
            d[(idx[2], idx[2])] = -1.0;
            sv[idx[2]] = -sv[idx[2]];
        }
        let rotation = u * d * v_t;
        let scale = match kind {
            AlignmentKind::Similarity => sv.sum() / var_p,
            AlignmentKind::Rigid => 1.0,
        };
        (rotation, scale)
    };
    let translation = mu_g - scale * rotation * mu_p;
    let mut aligned = Array2::zeros(pred.raw_dim());
    for (mut row, x) in aligned.rows_mut().into_iter().zip(&p) {
        let y = scale * rotation * x + translation;
        row.assign(&Array1::from_vec(vec![y[0], y[1], y[2]]));
    }
    Ok(Alignment {
        aligned,
        rotation,
        scale,
        translation,
        degenerate,
    })
}

pub fn p_mpjpe(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<f64> {
    p_mpjpe_with(pred, gt, AlignmentKind::Similarity)
}

pub fn p_mpjpe_with(pred: ArrayView2<f64>, gt: ArrayView2<f64>, kind: AlignmentKind) -> Result<f64> {
    let a = procrustes_align_with(pred, gt, kind)?;
    mpjpe(a.aligned.view(), gt)
}

/// Produces root-relative millimetre hypotheses for dataset items.
pub trait HypothesisSource: Sync {
    /// `n` hypotheses for item `index`.
    fn hypotheses(&self, index: usize, item: &PoseItem, root_index: usize, n: usize) -> Result<Vec<Array2<f64>>>;

    fn describe(&self) -> String;
}

/// Samples the diffusion model. Hypothesis `h` of item `i` uses the random
/// stream derived from `(seed, i, h)`.
pub struct DiffusionSource<'a, D: Denoise + Sync + ?Sized> {
    pub denoiser: &'a D,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
    pub pose_scale_mm: f64,
}

impl<D: Denoise + Sync + ?Sized> HypothesisSource for DiffusionSource<'_, D> {
    fn hypotheses(&self, index: usize, item: &PoseItem, _root_index: usize, n: usize) -> Result<Vec<Array2<f64>>> {
        let config = SamplerConfig {
            num_hypotheses: n,
            ..self.sampler.clone()
        };
        let (poses, _) = sample_hypotheses(self.denoiser, item.keypoints.view(), self.schedule, &config, index as u64)?;
        Ok(poses.into_iter().map(|p| p * self.pose_scale_mm).collect())
    }

    fn describe(&self) -> String {
        match self.sampler.mode {
            SamplerMode::Ddpm => format!("ddpm(T={})", self.schedule.total_steps()),
            SamplerMode::Ddim => format!("ddim(steps={}, eta={})", self.sampler.ddim_steps, self.sampler.ddim_eta),
        }
    }
}

/// Returns the ground truth itself; a sanity check for the metric
/// pipeline.
pub struct GroundTruthOracle;

impl HypothesisSource for GroundTruthOracle {
    fn hypotheses(&self, index: usize, item: &PoseItem, root_index: usize, n: usize) -> Result<Vec<Array2<f64>>> {
        let gt = item.joints_mm.as_ref().ok_or(Error::MissingGroundTruth(index))?;
        Ok(vec![root_relative(gt.view(), root_index); n])
    }

    fn describe(&self) -> String {
        "gt-oracle".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Score the per-joint mean of the hypotheses.
    #[default]
    Mean,
    /// Score the hypothesis closest to the ground truth (needs the ground
    /// truth, so it is an upper bound rather than a usable estimate).
    BestOfN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_hypotheses: usize,
    pub aggregation: Aggregation,
    pub alignment: AlignmentKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_hypotheses: 1,
            aggregation: Aggregation::Mean,
            alignment: AlignmentKind::Similarity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMetrics {
    pub action: String,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// In order of first appearance in the dataset.
    pub per_action: Vec<ActionMetrics>,
    pub average: ItemScore,
    pub num_hypotheses: usize,
    pub aggregation: Aggregation,
    pub sampler: String,
    pub items: Vec<ItemScore>,
}

fn score_item(
    source: &dyn HypothesisSource,
    index: usize,
    item: &PoseItem,
    root: usize,
    config: &EvalConfig,
) -> Result<ItemScore> {
    let gt_mm = item.joints_mm.as_ref().ok_or(Error::MissingGroundTruth(index))?;
    let gt = root_relative(gt_mm.view(), root);
    let hyps = source.hypotheses(index, item, root, config.num_hypotheses)?;
    let rel: Vec<Array2<f64>> = hyps.iter().map(|h| root_relative(h.view(), root)).collect();
    match config.aggregation {
        Aggregation::Mean => {
            let mean = crate::diffusion::mean_pose(&rel).ok_or(Error::EmptyBatch)?;
            Ok(ItemScore {
                mpjpe_mm: mpjpe(mean.view(), gt.view())?,
                p_mpjpe_mm: p_mpjpe_with(mean.view(), gt.view(), config.alignment)?,
            })
        }
        Aggregation::BestOfN => {
            let mut best = ItemScore {
                mpjpe_mm: f64::INFINITY,
                p_mpjpe_mm: f64::INFINITY,
            };
            for h in &rel {
                best.mpjpe_mm = best.mpjpe_mm.min(mpjpe(h.view(), gt.view())?);
                best.p_mpjpe_mm = best.p_mpjpe_mm.min(p_mpjpe_with(h.view(), gt.view(), config.alignment)?);
            }
            Ok(best)
        }
    }
}

/// Worker count from [`NUM_WORKERS_ENV`]; `0` means serial.
pub fn configured_workers() -> Result<usize> {
    match std::env::var(NUM_WORKERS_ENV) {
        Err(_) => Ok(0),
        Ok(v) if v.trim().is_empty() => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{NUM_WORKERS_ENV} must be a nonnegative integer, got {v:?}"))),
    }
}

/// Runs `f` on `0..n`, serially when `workers == 0` and on a dedicated
/// pool otherwise. Output order follows the index.
pub fn map_items<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers == 0 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Hypotheses and their mean for every detection. Item `i` uses the
/// streams of [`hypothesis_stream`](crate::diffusion::hypothesis_stream)
/// `(config.seed, i, h)`, so results do not depend on `workers`.
pub fn sample_items<D: Denoise + Sync + ?Sized>(
    denoiser: &D,
    detections: &[Array2<f64>],
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    workers: usize,
) -> Result<Vec<(Vec<Array2<f64>>, Array2<f64>)>> {
    map_items(detections.len(), workers, |i| {
        sample_hypotheses(denoiser, detections[i].view(), schedule, config, i as u64)
    })
}

/// Scores every item and aggregates per action. Results do not depend on
/// `workers` because every item has its own random streams.
pub fn evaluate(
    dataset: &PoseDataset,
    source: &dyn HypothesisSource,
    config: &EvalConfig,
    workers: usize,
) -> Result<EvalReport> {
    if config.num_hypotheses == 0 {
        return Err(Error::InvalidConfig("num_hypotheses must be at least 1".into()));
    }
    let root = dataset.skeleton.root_index();
    let items = dataset.items();
    let scores = map_items(items.len(), workers, |i| score_item(source, i, &items[i], root, config))?;

    let mut per_action: Vec<ActionMetrics> = Vec::new();
    for (item, s) in items.iter().zip(&scores) {
        let slot = match per_action.iter().position(|a| a.action == item.action) {
            Some(k) => k,
            None => {
                per_action.push(ActionMetrics {
                    action: item.action.clone(),
                    mpjpe_mm: 0.0,
                    p_mpjpe_mm: 0.0,
                    count: 0,
                });
                per_action.len() - 1
            }
        };
        let a = &mut per_action[slot];
        a.mpjpe_mm += s.mpjpe_mm;
        a.p_mpjpe_mm += s.p_mpjpe_mm;
        a.count += 1;
    }
    for a in &mut per_action {
        a.mpjpe_mm /= a.count as f64;
        a.p_mpjpe_mm /= a.count as f64;
    }
    let total: usize = per_action.iter().map(|a| a.count).sum();
    let weighted = |f: fn(&ActionMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_action.iter().map(|a| f(a) * a.count as f64).sum::<f64>() / total as f64
        }
    };
    let average = ItemScore {
        mpjpe_mm: weighted(|a| a.mpjpe_mm),
        p_mpjpe_mm: weighted(|a| a.p_mpjpe_mm),
    };
    Ok(EvalReport {
        per_action,
        average,
        num_hypotheses: config.num_hypotheses,
        aggregation: config.aggregation,
        sampler: source.describe(),
        items: scores,
    })
}

impl EvalReport {
    /// One row per action plus a final `Avg` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("action,mpjpe_mm,p_mpjpe_mm,count\n");
        for a in &self.per_action {
            out.push_str(&format!("{},{},{},{}\n", a.action, a.mpjpe_mm, a.p_mpjpe_mm, a.count));
        }
        let total: usize = self.per_action.iter().map(|a| a.count).sum();
        out.push_str(&format!("Avg,{},{},{}\n", self.average.mpjpe_mm, self.average.p_mpjpe_mm, total));
        out
    }

    /// Actions as columns with `Avg` last; one row per protocol.
    pub fn to_table(&self) -> String {
        let mut headers: Vec<String> = self.per_action.iter().map(|a| a.action.clone()).collect();
        headers.push("Avg".into());
        let row = |f: &dyn Fn(&ActionMetrics) -> f64, avg: f64| {
            let mut cells: Vec<String> = self.per_action.iter().map(|a| format!("{:.1}", f(a))).collect();
            cells.push(format!("{avg:.1}"));
            cells
        };
        let rows = [
            ("MPJPE", row(&|a| a.mpjpe_mm, self.average.mpjpe_mm)),
            ("P-MPJPE", row(&|a| a.p_mpjpe_mm, self.average.p_mpjpe_mm)),
        ];
        let widths: Vec<usize> = headers
            .iter()
            .enumerate()
            .map(|(k, h)| rows.iter().map(|(_, r)| r[k].len()).chain([h.len()]).max().unwrap_or(0))
            .collect();
        let label_width = 8;
        let mut out = format!(
            "# {} | N={} | {:?}\n",
            self.sampler, self.num_hypotheses, self.aggregation
        );
        out.push_str(&format!("{:<label_width$}", "Protocol"));
        for (h, w) in headers.iter().zip(&widths) {
            out.push_str(&format!(" {h:>w$}"));
        }
        out.push('\n');
        for (label, cells) in &rows {
            out.push_str(&format!("{label:<label_width$}"));
            for (c, w) in cells.iter().zip(&widths) {
                out.push_str(&format!(" {c:>w$}"));
            }
            out.push('\n');
        }
        out
    }

    /// Mean over items computed directly, for cross-checking the
    /// per-action weighting.
    pub fn item_mean(&self) -> ItemScore {
        let n = self.items.len().max(1) as f64;
        ItemScore {
            mpjpe_mm: self.items.iter().map(|s| s.mpjpe_mm).sum::<f64>() / n,
            p_mpjpe_mm: self.items.iter().map(|s| s.p_mpjpe_mm).sum::<f64>() / n,
        }
    }
}

/// Applies a similarity transform `s R x + t` to every row.
pub fn transform_pose(pose: ArrayView2<f64>, scale: f64, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(pose.raw_dim());
    for (mut o, x) in out.rows_mut().into_iter().zip(pose.rows()) {
        let y = scale * rotation * Vector3::new(x[0], x[1], x[2]) + translation;
        o[0] = y[0];
        o[1] = y[1];
        o[2] = y[2];
    }
    out
}
