use std::fs;

use graphdiff::data::{
    import_csv, list_splits, load_dataset, save_dataset, synth_toy_dataset, NormalizationSpec, PinholeCamera,
    PoseDataset, PoseItem, SynthConfig,
};
use graphdiff::skeleton::SkeletonSpec;
use graphdiff::Error;
use ndarray::Array2;
use proptest::prelude::*;

fn chain(j: usize) -> SkeletonSpec {
    SkeletonSpec::new(j, (1..j).map(|k| (k - 1, k)).collect(), vec![], 0).unwrap()
}

// Splits store single precision.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn item_strategy(j: usize) -> impl Strategy<Value = PoseItem> {
    (
        prop::collection::vec(-2.0f64..2.0, 2 * j),
        prop::option::of(prop::collection::vec(-3000.0f64..3000.0, 3 * j)),
        "[a-z]{1,8}",
        "S[0-9]",
    )
        .prop_map(move |(k, x, action, subject)| PoseItem {
            keypoints: Array2::from_shape_vec((j, 2), k).unwrap().mapv(f32_exact),
            joints_mm: x.map(|x| Array2::from_shape_vec((j, 3), x).unwrap().mapv(f32_exact)),
            action,
            subject,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn save_load_is_bitwise(items in prop::collection::vec(item_strategy(5), 0..6)) {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = PoseDataset::new(chain(5), NormalizationSpec::default()).unwrap();
        for it in items {
            ds.push(it).unwrap();
        }
        save_dataset(dir.path(), &[("train", &ds)]).unwrap();
        let back = load_dataset(dir.path(), "train", None).unwrap();
        prop_assert_eq!(back.len(), ds.len());
        for (a, b) in back.items().iter().zip(ds.items()) {
            prop_assert!(a.keypoints.iter().zip(b.keypoints.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!(a.joints_mm.is_some(), b.joints_mm.is_some());
            if let (Some(p), Some(q)) = (&a.joints_mm, &b.joints_mm) {
                prop_assert!(p.iter().zip(q.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            prop_assert_eq!(&a.action, &b.action);
            prop_assert_eq!(&a.subject, &b.subject);
        }
        prop_assert_eq!(back, ds);
    }
}

#[test]
fn multiple_splits_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SkeletonSpec::h36m17();
    let config = SynthConfig {
        size: 4,
        ..Default::default()
    };
    let ds = synth_toy_dataset(&config, &spec, &PinholeCamera::default()).unwrap();
    save_dataset(dir.path(), &[("train", &ds), ("test", &ds.first(2))]).unwrap();
    let mut splits = list_splits(dir.path()).unwrap();
    splits.sort();
    assert_eq!(splits, vec!["test", "train"]);
    assert_eq!(load_dataset(dir.path(), "test", Some(&spec)).unwrap().len(), 2);
}

#[test]
fn skeleton_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ds = PoseDataset::new(chain(4), NormalizationSpec::default()).unwrap();
    save_dataset(dir.path(), &[("train", &ds)]).unwrap();
    let err = load_dataset(dir.path(), "train", Some(&SkeletonSpec::h36m17())).unwrap_err();
    assert!(matches!(err, Error::SkeletonMismatch(_)), "{err}");

    let mut ds = PoseDataset::new(chain(4), NormalizationSpec::default()).unwrap();
    let bad = PoseItem {
        keypoints: Array2::zeros((5, 2)),
        joints_mm: None,
        action: "a".into(),
        subject: "S1".into(),
    };
    assert!(matches!(ds.push(bad), Err(Error::SkeletonMismatch(_))));
}

#[test]
fn empty_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = PoseDataset::new(SkeletonSpec::h36m17(), NormalizationSpec::default()).unwrap();
    save_dataset(dir.path(), &[("train", &ds)]).unwrap();
    let back = load_dataset(dir.path(), "train", None).unwrap();
    assert!(back.is_empty());
    assert!(matches!(back.training_pairs(), Err(Error::EmptyBatch)));
}

#[test]
fn missing_and_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), "train", None), Err(Error::Io { .. })));

    let ds = synth_toy_dataset(
        &SynthConfig {
            size: 3,
            ..Default::default()
        },
        &SkeletonSpec::h36m17(),
        &PinholeCamera::default(),
    )
    .unwrap();
    save_dataset(dir.path(), &[("train", &ds)]).unwrap();
    let files: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "p3ds"))
        .collect();
    assert!(!files.is_empty());
    for f in files {
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
    }
    assert!(matches!(load_dataset(dir.path(), "train", None), Err(Error::Format { .. })));
}

#[test]
fn csv_import_normalizes_keypoints() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("poses.csv");
    let spec = chain(3);
    let mut text = String::from("action,subject,u0,v0,u1,v1,u2,v2,x0,y0,z0,x1,y1,z1,x2,y2,z2\n");
    text.push_str("Walking,S9,500,500,0,0,1000,1000,0,0,0,10,20,30,40,50,60\n");
    text.push_str("Sitting,S11,250,750,500,500,500,500,,,,,,,,,\n");
    fs::write(&path, text).unwrap();
    let units = NormalizationSpec::default();
    let ds = import_csv(&path, &spec, units).unwrap();
    assert_eq!(ds.len(), 2);
    let first = &ds.items()[0];
    assert_eq!(first.keypoints.row(0).to_vec(), vec![0.0, 0.0]);
    assert_eq!(first.keypoints.row(1).to_vec(), vec![-1.0, -1.0]);
    assert_eq!(first.keypoints.row(2).to_vec(), vec![1.0, 1.0]);
    assert_eq!(first.joints_mm.as_ref().unwrap()[[2, 2]], 60.0);
    assert!(ds.items()[1].joints_mm.is_none());
    assert_eq!(ds.items()[1].keypoints.row(0).to_vec(), vec![-0.5, 0.5]);
}

#[test]
fn csv_with_wrong_joint_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("poses.csv");
    fs::write(&path, "action,subject,u0,v0,u1,v1\nWalking,S9,1,2,3,4\n").unwrap();
    assert!(matches!(
        import_csv(&path, &chain(3), NormalizationSpec::default()),
        Err(Error::SkeletonMismatch(_))
    ));
}

#[test]
fn synthetic_poses_respect_bone_lengths() {
    let spec = SkeletonSpec::h36m17();
    let config = SynthConfig {
        size: 8,
        seed: 3,
        ..Default::default()
    };
    let ds = synth_toy_dataset(&config, &spec, &PinholeCamera::default()).unwrap();
    let bones = graphdiff::data::bone_lengths(&spec).unwrap();
    for item in ds.items() {
        let x = item.joints_mm.as_ref().unwrap();
        for &(a, b, len) in &bones {
            let d = (&x.row(a) - &x.row(b)).mapv(|v| v * v).sum().sqrt();
            assert!((d - len).abs() < 1e-9, "bone {a}-{b}: {d} vs {len}");
        }
    }
    let again = synth_toy_dataset(&config, &spec, &PinholeCamera::default()).unwrap();
    assert_eq!(again, ds);
}
