//! Pose datasets: unit normalisation, the on-disk format, CSV import and a
//! synthetic generator.
//!
//! # Directory format
//!
//! ```text
//! <dir>/meta            TOML: format, version, num_joints, skeleton, units,
//!                       splits, subjects
//! <dir>/actions         one action name per line; line number = action id
//! <dir>/<split>.p3ds    binary items of one split
//! ```
//!
//! A `.p3ds` file starts with a 16-byte header (`b"P3DS"`, then version,
//! item count and joint count as little-endian `u32`). Each item is `J x 2`
//! keypoints and `J x 3` joints as little-endian `f32` (joints all NaN when
//! absent), followed by the action id and subject id as little-endian `u32`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::skeleton::SkeletonSpec;
use crate::training::TrainingSet;

pub const FORMAT_MAGIC: &[u8; 4] = b"P3DS";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Action names used for synthetic labels.
pub const H36M_ACTIONS: [&str; 15] = [
    "Directions",
    "Discussion",
    "Eating",
    "Greeting",
    "Phoning",
    "Photo",
    "Posing",
    "Purchases",
    "Sitting",
    "SittingDown",
    "Smoking",
    "Waiting",
    "WalkDog",
    "Walking",
    "WalkTogether",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSpec {
    pub image_width: f64,
    pub image_height: f64,
    pub pose_scale_mm: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        NormalizationSpec {
            image_width: 1000.0,
            image_height: 1000.0,
            pose_scale_mm: 1000.0,
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.image_width) || !ok(self.image_height) {
            return Err(Error::InvalidConfig(format!(
                "image dimensions must be positive, got {} x {}",
                self.image_width, self.image_height
            )));
        }
        if !ok(self.pose_scale_mm) {
            return Err(Error::InvalidConfig(format!(
                "pose_scale_mm must be positive, got {}",
                self.pose_scale_mm
            )));
        }
        Ok(())
    }
}

fn check_cols(x: ArrayView2<f64>, cols: usize) -> Result<()> {
    if x.ncols() != cols {
        return Err(Error::shape(format!("J x {cols}"), format!("{:?}", x.dim())));
    }
    Ok(())
}

/// Pixels to width-normalised coordinates: `x' = 2x/w - 1`, `y' = (2y - h)/w`.
pub fn normalize_2d(keypoints_px: ArrayView2<f64>, spec: &NormalizationSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    check_cols(keypoints_px, 2)?;
    let (w, h) = (spec.image_width, spec.image_height);
    let mut out = keypoints_px.to_owned();
    for mut row in out.rows_mut() {
        row[0] = 2.0 * row[0] / w - 1.0;
        row[1] = (2.0 * row[1] - h) / w;
    }
    Ok(out)
}

pub fn denormalize_2d(keypoints: ArrayView2<f64>, spec: &NormalizationSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    check_cols(keypoints, 2)?;
    let (w, h) = (spec.image_width, spec.image_height);
    let mut out = keypoints.to_owned();
    for mut row in out.rows_mut() {
        row[0] = (row[0] + 1.0) * w / 2.0;
        row[1] = (row[1] * w + h) / 2.0;
    }
    Ok(out)
}

/// Millimetres to root-relative network units.
pub fn normalize_3d(joints_mm: ArrayView2<f64>, root_index: usize, pose_scale_mm: f64) -> Result<Array2<f64>> {
    check_cols(joints_mm, 3)?;
    if root_index >= joints_mm.nrows() {
        return Err(Error::InvalidConfig(format!("root index {root_index} out of range")));
    }
    let root = joints_mm.row(root_index).to_owned();
    let mut out = (&joints_mm - &root) / pose_scale_mm;
    out.row_mut(root_index).fill(0.0);
    Ok(out)
}

/// Inverse of [`normalize_3d`] given the original root position.
pub fn denormalize_3d(pose: ArrayView2<f64>, root_mm: ArrayView1<f64>, pose_scale_mm: f64) -> Result<Array2<f64>> {
    check_cols(pose, 3)?;
    if root_mm.len() != 3 {
        return Err(Error::shape("3 root coordinates", format!("{}", root_mm.len())));
    }
    Ok(&pose * pose_scale_mm + &root_mm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseItem {
    /// Normalised 2D detection, `J x 2`.
    pub keypoints: Array2<f64>,
    /// 3D joints in millimetres, `J x 3`.
    pub joints_mm: Option<Array2<f64>>,
    pub action: String,
    pub subject: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseDataset {
    pub skeleton: SkeletonSpec,
    pub units: NormalizationSpec,
    items: Vec<PoseItem>,
}

impl PoseDataset {
    pub fn new(skeleton: SkeletonSpec, units: NormalizationSpec) -> Result<Self> {
        units.validate()?;
        Ok(PoseDataset {
            skeleton,
            units,
            items: Vec::new(),
        })
    }

    pub fn push(&mut self, item: PoseItem) -> Result<()> {
        let j = self.skeleton.num_joints();
        if item.keypoints.dim() != (j, 2) {
            return Err(Error::SkeletonMismatch(format!(
                "keypoints {:?} for a {j}-joint skeleton",
                item.keypoints.dim()
            )));
        }
        if item.keypoints.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("keypoints".into()));
        }
        if let Some(x) = &item.joints_mm {
            if x.dim() != (j, 3) {
                return Err(Error::SkeletonMismatch(format!("joints {:?} for a {j}-joint skeleton", x.dim())));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("3D joints".into()));
            }
        }
        self.items.push(item);
        Ok(())
    }

    pub fn items(&self) -> &[PoseItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Distinct action names in order of first appearance.
    pub fn actions(&self) -> Vec<String> {
        distinct(self.items.iter().map(|i| i.action.as_str()))
    }

    /// Distinct subjects in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        distinct(self.items.iter().map(|i| i.subject.as_str()))
    }

    /// Items of the listed subjects, and everything else.
    pub fn split_by_subject(&self, subjects: &[&str]) -> (PoseDataset, PoseDataset) {
        let (a, b): (Vec<PoseItem>, Vec<PoseItem>) =
            self.items.iter().cloned().partition(|i| subjects.contains(&i.subject.as_str()));
        let with = |items| PoseDataset {
            skeleton: self.skeleton.clone(),
            units: self.units,
            items,
        };
        (with(a), with(b))
    }

    pub fn first(&self, n: usize) -> PoseDataset {
        PoseDataset {
            skeleton: self.skeleton.clone(),
            units: self.units,
            items: self.items.iter().take(n).cloned().collect(),
        }
    }

    /// Root-relative network-unit poses paired with their detections.
    pub fn training_pairs(&self) -> Result<TrainingSet> {
        let j = self.skeleton.num_joints();
        let n = self.items.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut x0 = Array3::zeros((n, j, 3));
        let mut y = Array3::zeros((n, j, 2));
        for (i, item) in self.items.iter().enumerate() {
            let joints = item.joints_mm.as_ref().ok_or(Error::MissingGroundTruth(i))?;
            let pose = normalize_3d(joints.view(), self.skeleton.root_index(), self.units.pose_scale_mm)?;
            x0.index_axis_mut(Axis(0), i).assign(&pose);
            y.index_axis_mut(Axis(0), i).assign(&item.keypoints);
        }
        TrainingSet::new(x0, y)
    }
}

fn distinct<'a>(names: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for n in names {
        if !out.iter().any(|o| o == n) {
            out.push(n.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    version: u32,
    num_joints: usize,
    splits: Vec<String>,
    subjects: Vec<String>,
    units: NormalizationSpec,
    skeleton: SkeletonSpec,
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.p3ds"))
}

/// Writes every split into `dir`. All splits must share one skeleton and
/// units; action and subject ids are shared across splits.
pub fn save_dataset(dir: &Path, splits: &[(&str, &PoseDataset)]) -> Result<()> {
    let (_, first) = splits
        .first()
        .ok_or_else(|| Error::InvalidConfig("at least one split is required".into()))?;
    for (name, ds) in splits {
        if ds.skeleton != first.skeleton || ds.units != first.units {
            return Err(Error::SkeletonMismatch(format!("split {name} differs in skeleton or units")));
        }
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!("invalid split name {name:?}")));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let actions = distinct(splits.iter().flat_map(|(_, d)| d.items.iter().map(|i| i.action.as_str())));
    let subjects = distinct(splits.iter().flat_map(|(_, d)| d.items.iter().map(|i| i.subject.as_str())));
    let action_ids: BTreeMap<&str, u32> = actions.iter().enumerate().map(|(i, a)| (a.as_str(), i as u32)).collect();
    let subject_ids: BTreeMap<&str, u32> = subjects.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();

    for (name, ds) in splits {
        let j = ds.skeleton.num_joints();
        let mut bytes = Vec::with_capacity(HEADER_LEN + ds.len() * (j * 5 * 4 + 8));
        bytes.extend_from_slice(FORMAT_MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(ds.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(j as u32).to_le_bytes());
        for item in &ds.items {
            for v in item.keypoints.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            match &item.joints_mm {
                Some(x) => x.iter().for_each(|v| bytes.extend_from_slice(&(*v as f32).to_le_bytes())),
                None => (0..j * 3).for_each(|_| bytes.extend_from_slice(&f32::NAN.to_le_bytes())),
            }
            bytes.extend_from_slice(&action_ids[item.action.as_str()].to_le_bytes());
            bytes.extend_from_slice(&subject_ids[item.subject.as_str()].to_le_bytes());
        }
        write_atomic(&split_path(dir, name), &bytes)?;
    }
    let mut action_text = actions.join("\n");
    action_text.push('\n');
    write_atomic(&dir.join("actions"), action_text.as_bytes())?;
    let meta = Meta {
        format: "P3DS".into(),
        version: FORMAT_VERSION,
        num_joints: first.skeleton.num_joints(),
        splits: splits.iter().map(|(n, _)| n.to_string()).collect(),
        subjects,
        units: first.units,
        skeleton: first.skeleton.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    write_atomic(&dir.join("meta"), text.as_bytes())
}

/// Names of the splits stored in `dir`.
pub fn list_splits(dir: &Path) -> Result<Vec<String>> {
    Ok(read_meta(dir)?.splits)
}

fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join("meta");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.format != "P3DS" || meta.version != FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported format {} v{}", meta.format, meta.version)));
    }
    if meta.num_joints != meta.skeleton.num_joints() {
        return Err(Error::format(&path, "num_joints disagrees with the skeleton"));
    }
    Ok(meta)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take4(&mut self) -> [u8; 4] {
        let out = self.bytes[self.pos..self.pos + 4].try_into().expect("4 bytes");
        self.pos += 4;
        out
    }

    fn f32(&mut self) -> f64 {
        f32::from_le_bytes(self.take4()) as f64
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take4())
    }
}

/// Loads one split. When `skeleton` is given, the stored skeleton must
/// have the same joint count.
pub fn load_dataset(dir: &Path, split: &str, skeleton: Option<&SkeletonSpec>) -> Result<PoseDataset> {
    let meta = read_meta(dir)?;
    if let Some(expected) = skeleton {
        if expected.num_joints() != meta.num_joints {
            return Err(Error::SkeletonMismatch(format!(
                "dataset has {} joints, skeleton has {}",
                meta.num_joints,
                expected.num_joints()
            )));
        }
    }
    if !meta.splits.iter().any(|s| s == split) {
        return Err(Error::format(dir.join("meta"), format!("no split named {split:?}")));
    }
    let actions_path = dir.join("actions");
    let actions: Vec<String> = fs::read_to_string(&actions_path)
        .map_err(|e| Error::io(&actions_path, e))?
        .lines()
        .map(str::to_string)
        .collect();

    let path = split_path(dir, split);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != FORMAT_MAGIC {
        return Err(Error::format(&path, "missing P3DS header"));
    }
    let mut r = Reader { bytes: &bytes, pos: 4 };
    let version = r.u32();
    let count = r.u32() as usize;
    let j = r.u32() as usize;
    if version != FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported version {version}")));
    }
    if j != meta.num_joints {
        return Err(Error::SkeletonMismatch(format!("{} stores {j} joints, meta says {}", path.display(), meta.num_joints)));
    }
    let item_len = j * 5 * 4 + 8;
    if bytes.len() != HEADER_LEN + count * item_len {
        return Err(Error::format(
            &path,
            format!("expected {} bytes for {count} items, found {}", HEADER_LEN + count * item_len, bytes.len()),
        ));
    }
    let mut ds = PoseDataset::new(meta.skeleton, meta.units)?;
    for i in 0..count {
        let keypoints = Array2::from_shape_simple_fn((j, 2), || r.f32());
        let joints = Array2::from_shape_simple_fn((j, 3), || r.f32());
        let joints_mm = if joints.iter().all(|v| v.is_nan()) { None } else { Some(joints) };
        let (a, s) = (r.u32() as usize, r.u32() as usize);
        let action = actions
            .get(a)
            .ok_or_else(|| Error::format(&path, format!("item {i}: unknown action id {a}")))?;
        let subject = meta
            .subjects
            .get(s)
            .ok_or_else(|| Error::format(&path, format!("item {i}: unknown subject id {s}")))?;
        ds.push(PoseItem {
            keypoints,
            joints_mm,
            action: action.clone(),
            subject: subject.clone(),
        })
        .map_err(|e| Error::format(&path, format!("item {i}: {e}")))?;
    }
    Ok(ds)
}

/// Reads a CSV fixture with header `action,subject,<2J pixel keypoints>`
/// optionally followed by `<3J millimetre joints>`. Rows with empty joint
/// fields have no 3D ground truth.
pub fn import_csv(path: &Path, skeleton: &SkeletonSpec, units: NormalizationSpec) -> Result<PoseDataset> {
    let j = skeleton.num_joints();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut ds = PoseDataset::new(skeleton.clone(), units)?;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let line = row + 2;
        if record.len() != 2 + 2 * j && record.len() != 2 + 5 * j {
            return Err(Error::SkeletonMismatch(format!(
                "{} line {line}: {} fields, expected {} or {} for {j} joints",
                path.display(),
                record.len(),
                2 + 2 * j,
                2 + 5 * j
            )));
        }
        let parse = |k: usize| -> Result<Option<f64>> {
            let field = &record[k];
            if field.is_empty() {
                return Ok(None);
            }
            field
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::format(path, format!("line {line}: bad number {field:?}")))
        };
        let mut px = Array2::zeros((j, 2));
        for (k, v) in px.iter_mut().enumerate() {
            *v = parse(2 + k)?.ok_or_else(|| Error::format(path, format!("line {line}: missing keypoint")))?;
        }
        let joints_mm = if record.len() == 2 + 5 * j {
            let values: Vec<Option<f64>> = (0..3 * j).map(|k| parse(2 + 2 * j + k)).collect::<Result<_>>()?;
            if values.iter().all(Option::is_none) {
                None
            } else if values.iter().all(Option::is_some) {
                Some(Array2::from_shape_vec((j, 3), values.into_iter().flatten().collect()).expect("3J values"))
            } else {
                return Err(Error::format(path, format!("line {line}: partially missing 3D joints")));
            }
        } else {
            None
        };
        ds.push(PoseItem {
            keypoints: normalize_2d(px.view(), &units)?,
            joints_mm,
            action: record[0].to_string(),
            subject: record[1].to_string(),
        })
        .map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
    }
    Ok(ds)
}

/// Pinhole camera looking down `+z`, image `y` pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinholeCamera {
    pub focal_px: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Distance of the root joint from the camera, in millimetres.
    pub depth_mm: f64,
    /// Maximum lateral offset of the root from the optical axis.
    pub lateral_range_mm: f64,
}

impl Default for PinholeCamera {
    fn default() -> Self {
        PinholeCamera {
            focal_px: 1000.0,
            image_width: 1000.0,
            image_height: 1000.0,
            depth_mm: 5000.0,
            lateral_range_mm: 200.0,
        }
    }
}

impl PinholeCamera {
    pub fn project(&self, joints_mm: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_cols(joints_mm, 3)?;
        let mut out = Array2::zeros((joints_mm.nrows(), 2));
        for (mut o, p) in out.rows_mut().into_iter().zip(joints_mm.rows()) {
            if !(p[2] > 0.0) {
                return Err(Error::InvalidConfig("joint behind the camera".into()));
            }
            o[0] = self.focal_px * p[0] / p[2] + self.image_width / 2.0;
            o[1] = self.focal_px * p[1] / p[2] + self.image_height / 2.0;
        }
        Ok(out)
    }

    pub fn normalization(&self, pose_scale_mm: f64) -> NormalizationSpec {
        NormalizationSpec {
            image_width: self.image_width,
            image_height: self.image_height,
            pose_scale_mm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    /// Bound on each local Euler angle, radians.
    pub max_joint_angle: f64,
    /// Bound on the global yaw, radians.
    pub max_yaw: f64,
    /// Standard deviation of Gaussian noise added to normalised keypoints.
    pub keypoint_noise: f64,
    pub subjects: Vec<String>,
    pub pose_scale_mm: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            size: 64,
            max_joint_angle: 0.6,
            max_yaw: PI / 4.0,
            keypoint_noise: 0.0,
            subjects: vec!["S1".into()],
            pose_scale_mm: 1000.0,
        }
    }
}

/// Rest-pose offset of every joint from its tree parent, in millimetres
/// (the root's own offset is zero).
pub fn rest_offsets(skeleton: &SkeletonSpec) -> Result<Vec<Vector3<f64>>> {
    let parents = skeleton.tree_parents()?;
    if skeleton.is_h36m17() {
        let v = Vector3::new;
        return Ok(vec![
            v(0.0, 0.0, 0.0),
            v(-130.0, 0.0, 0.0),
            v(0.0, 450.0, 0.0),
            v(0.0, 440.0, 0.0),
            v(130.0, 0.0, 0.0),
            v(0.0, 450.0, 0.0),
            v(0.0, 440.0, 0.0),
            v(0.0, -230.0, 0.0),
            v(0.0, -250.0, 0.0),
            v(0.0, -115.0, 0.0),
            v(0.0, -115.0, 0.0),
            v(150.0, 0.0, 0.0),
            v(280.0, 0.0, 0.0),
            v(250.0, 0.0, 0.0),
            v(-150.0, 0.0, 0.0),
            v(-280.0, 0.0, 0.0),
            v(-250.0, 0.0, 0.0),
        ]);
    }
    let j = skeleton.num_joints() as f64;
    Ok(parents
        .iter()
        .enumerate()
        .map(|(c, p)| match p {
            None => Vector3::zeros(),
            Some(_) => {
                let angle = 2.0 * PI * c as f64 / j;
                Vector3::new(100.0 * angle.cos(), 100.0 * angle.sin(), 0.0)
            }
        })
        .collect())
}

/// Fixed bone lengths `(parent, child, length_mm)` of the generator.
pub fn bone_lengths(skeleton: &SkeletonSpec) -> Result<Vec<(usize, usize, f64)>> {
    let parents = skeleton.tree_parents()?;
    let offsets = rest_offsets(skeleton)?;
    Ok(parents
        .iter()
        .enumerate()
        .filter_map(|(c, p)| p.map(|p| (p, c, offsets[c].norm())))
        .collect())
}

fn uniform(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

/// Random articulated poses seen by a pinhole camera. Local joint rotations
/// are bounded Euler angles composed down the kinematic tree, so every bone
/// keeps its rest length.
pub fn synth_toy_dataset(config: &SynthConfig, skeleton: &SkeletonSpec, camera: &PinholeCamera) -> Result<PoseDataset> {
    if config.size == 0 {
        return Err(Error::InvalidConfig("size must be at least 1".into()));
    }
    if config.subjects.is_empty() {
        return Err(Error::InvalidConfig("at least one subject is required".into()));
    }
    if !(config.keypoint_noise >= 0.0) || !(config.max_joint_angle >= 0.0) || !(config.max_yaw >= 0.0) {
        return Err(Error::InvalidConfig("angles and noise must be nonnegative".into()));
    }
    let parents = skeleton.tree_parents()?;
    let order = skeleton.topological_order()?;
    let offsets = rest_offsets(skeleton)?;
    let units = camera.normalization(config.pose_scale_mm);
    let mut ds = PoseDataset::new(skeleton.clone(), units)?;
    let j = skeleton.num_joints();
    for i in 0..config.size {
        let mut rng = rng::substream(config.seed, &[rng::domain::SYNTH, i as u64]);
        let yaw = uniform(&mut rng, config.max_yaw);
        let root_rot = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
        let root_pos = Vector3::new(
            uniform(&mut rng, camera.lateral_range_mm),
            uniform(&mut rng, camera.lateral_range_mm),
            camera.depth_mm,
        );
        let mut world_rot = vec![Matrix3::identity(); j];
        let mut pos = vec![Vector3::zeros(); j];
        world_rot[skeleton.root_index()] = *root_rot.matrix();
        pos[skeleton.root_index()] = root_pos;
        for &c in order.iter().skip(1) {
            let p = parents[c].expect("non-root joint has a parent");
            let a = config.max_joint_angle;
            let local = Rotation3::from_euler_angles(uniform(&mut rng, a), uniform(&mut rng, a), uniform(&mut rng, a));
            world_rot[c] = world_rot[p] * local.matrix();
            pos[c] = pos[p] + world_rot[c] * offsets[c];
        }
        let joints_mm = Array2::from_shape_fn((j, 3), |(r, k)| pos[r][k]);
        let mut keypoints = normalize_2d(camera.project(joints_mm.view())?.view(), &units)?;
        if config.keypoint_noise > 0.0 {
            keypoints.mapv_inplace(|v| v + config.keypoint_noise * rng.sample::<f64, _>(StandardNormal));
        }
        ds.push(PoseItem {
            keypoints,
            joints_mm: Some(joints_mm),
            action: H36M_ACTIONS[i % H36M_ACTIONS.len()].to_string(),
            subject: config.subjects[i % config.subjects.len()].clone(),
        })?;
    }
    Ok(ds)
}

/// Per-joint Euclidean distance between two `J x 3` poses.
pub fn joint_distances(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array1<f64> {
    (&a - &b).map_axis(Axis(1), |r| r.dot(&r).sqrt())
}
