use graphdiff::data::{synth_toy_dataset, PinholeCamera, PoseItem, SynthConfig};
use graphdiff::evaluation::{
    evaluate, mpjpe, p_mpjpe, p_mpjpe_with, procrustes_align, transform_pose, Aggregation, AlignmentKind,
    EvalConfig, GroundTruthOracle, HypothesisSource,
};
use graphdiff::skeleton::SkeletonSpec;
use graphdiff::Result;
use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::Array2;
use proptest::prelude::*;

fn pose_strategy(j: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1000.0f64..1000.0, 3 * j).prop_map(move |v| Array2::from_shape_vec((j, 3), v).unwrap())
}

fn rotation_strategy() -> impl Strategy<Value = Matrix3<f64>> {
    (-3.1f64..3.1, -1.5f64..1.5, -3.1f64..3.1).prop_map(|(r, p, y)| *Rotation3::from_euler_angles(r, p, y).matrix())
}

fn translation_strategy() -> impl Strategy<Value = Vector3<f64>> {
    (-500.0f64..500.0, -500.0f64..500.0, -500.0f64..500.0).prop_map(|(a, b, c)| Vector3::new(a, b, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn p_mpjpe_ignores_similarity_transforms(
        gt in pose_strategy(8),
        rot in rotation_strategy(),
        scale in 0.2f64..5.0,
        shift in translation_strategy(),
    ) {
        let moved = transform_pose(gt.view(), scale, &rot, &shift);
        prop_assert!(p_mpjpe(moved.view(), gt.view()).unwrap() < 1e-6);
    }

    #[test]
    fn rigid_alignment_ignores_rotation_and_translation(
        gt in pose_strategy(6),
        rot in rotation_strategy(),
        shift in translation_strategy(),
    ) {
        let moved = transform_pose(gt.view(), 1.0, &rot, &shift);
        prop_assert!(p_mpjpe_with(moved.view(), gt.view(), AlignmentKind::Rigid).unwrap() < 1e-6);
    }

    #[test]
    fn alignment_is_idempotent(pred in pose_strategy(7), gt in pose_strategy(7)) {
        let once = procrustes_align(pred.view(), gt.view()).unwrap();
        let twice = procrustes_align(once.aligned.view(), gt.view()).unwrap();
        let d = (&once.aligned - &twice.aligned).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        prop_assert!(d < 1e-6, "drift {d}");
        prop_assert!((once.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alignment_never_increases_error(pred in pose_strategy(7), gt in pose_strategy(7)) {
        let gt_centered = &gt - &gt.mean_axis(ndarray::Axis(0)).unwrap();
        let pred_centered = &pred - &pred.mean_axis(ndarray::Axis(0)).unwrap();
        let before = mpjpe(pred_centered.view(), gt_centered.view()).unwrap();
        prop_assert!(p_mpjpe(pred.view(), gt.view()).unwrap() <= before + 1e-9);
    }

    #[test]
    fn mpjpe_is_a_symmetric_nonnegative_distance(a in pose_strategy(5), b in pose_strategy(5)) {
        let ab = mpjpe(a.view(), b.view()).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, mpjpe(b.view(), a.view()).unwrap());
        prop_assert_eq!(mpjpe(a.view(), a.view()).unwrap(), 0.0);
    }
}

/// Offsets every non-root joint of the ground truth by a fixed amount per
/// action.
struct Shifted;

impl HypothesisSource for Shifted {
    fn hypotheses(&self, _index: usize, item: &PoseItem, root: usize, n: usize) -> Result<Vec<Array2<f64>>> {
        let mut p = item.joints_mm.clone().unwrap();
        for (j, mut row) in p.rows_mut().into_iter().enumerate() {
            if j != root {
                row[0] += shift_for(&item.action);
            }
        }
        Ok(vec![p; n])
    }

    fn describe(&self) -> String {
        "shifted".into()
    }
}

fn shift_for(action: &str) -> f64 {
    if action == "Walking" {
        10.0
    } else {
        30.0
    }
}

fn toy_dataset(size: usize) -> graphdiff::data::PoseDataset {
    synth_toy_dataset(
        &SynthConfig {
            size,
            seed: 11,
            ..Default::default()
        },
        &SkeletonSpec::h36m17(),
        &PinholeCamera::default(),
    )
    .unwrap()
}

#[test]
fn ground_truth_oracle_scores_zero() {
    let ds = toy_dataset(12);
    let report = evaluate(&ds, &GroundTruthOracle, &EvalConfig::default(), 0).unwrap();
    assert_eq!(report.average.mpjpe_mm, 0.0);
    assert!(report.average.p_mpjpe_mm < 1e-9);
    assert_eq!(report.items.len(), 12);
    assert_eq!(report.per_action.iter().map(|a| a.count).sum::<usize>(), 12);
}

#[test]
fn average_is_the_count_weighted_action_mean() {
    let ds = toy_dataset(40);
    assert!(ds.actions().len() > 1);
    let report = evaluate(&ds, &Shifted, &EvalConfig::default(), 0).unwrap();
    let weighted: f64 = report.per_action.iter().map(|a| a.mpjpe_mm * a.count as f64).sum::<f64>() / 40.0;
    assert!((weighted - report.average.mpjpe_mm).abs() < 1e-9);
    assert!((report.item_mean().mpjpe_mm - report.average.mpjpe_mm).abs() < 1e-9);
    for a in &report.per_action {
        let expected = shift_for(&a.action) * 16.0 / 17.0;
        assert!((a.mpjpe_mm - expected).abs() < 1e-9, "{}: {}", a.action, a.mpjpe_mm);
    }
    let csv = report.to_csv();
    assert!(csv.lines().last().unwrap().starts_with("Avg,"));
}

#[test]
fn reports_do_not_depend_on_worker_count() {
    let ds = toy_dataset(9);
    let config = EvalConfig {
        num_hypotheses: 3,
        aggregation: Aggregation::BestOfN,
        alignment: AlignmentKind::Similarity,
    };
    let serial = evaluate(&ds, &Shifted, &config, 0).unwrap();
    let parallel = evaluate(&ds, &Shifted, &config, 3).unwrap();
    assert_eq!(serial, parallel);
}

#[test]
fn missing_ground_truth_is_an_error() {
    let mut ds = toy_dataset(2);
    let mut item = ds.items()[0].clone();
    item.joints_mm = None;
    ds.push(item).unwrap();
    assert!(matches!(
        evaluate(&ds, &GroundTruthOracle, &EvalConfig::default(), 0),
        Err(graphdiff::Error::MissingGroundTruth(2))
    ));
}
