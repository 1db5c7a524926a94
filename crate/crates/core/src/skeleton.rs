//! Skeleton graphs and their affinity matrices.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name under which the builtin 17-joint layout is addressable.
pub const H36M17: &str = "h36m17";

/// Human3.6M 17-joint layout, pelvis first.
pub const H36M17_JOINT_NAMES: [&str; 17] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

const H36M17_PARENTS: [usize; 17] = [0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];

const H36M17_FLIP_PAIRS: [(usize, usize); 6] = [(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)];

/// Validated, immutable description of a skeleton graph.
///
/// Edges are undirected and stored as `(min, max)` pairs in insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonFile", into = "SkeletonFile")]
pub struct SkeletonSpec {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    flip_pairs: Vec<(usize, usize)>,
    root_index: usize,
}

/// On-disk form of a skeleton, also used for (de)serialisation inside
/// checkpoints and configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonFile {
    pub num_joints: usize,
    pub edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub flip_pairs: Vec<(usize, usize)>,
    #[serde(default)]
    pub root_index: usize,
}

impl TryFrom<SkeletonFile> for SkeletonSpec {
    type Error = Error;

    fn try_from(f: SkeletonFile) -> Result<Self> {
        SkeletonSpec::new(f.num_joints, f.edges, f.flip_pairs, f.root_index)
    }
}

impl From<SkeletonSpec> for SkeletonFile {
    fn from(s: SkeletonSpec) -> Self {
        SkeletonFile {
            num_joints: s.num_joints,
            edges: s.edges,
            flip_pairs: s.flip_pairs,
            root_index: s.root_index,
        }
    }
}

impl SkeletonSpec {
    pub fn new(
        num_joints: usize,
        edges: Vec<(usize, usize)>,
        flip_pairs: Vec<(usize, usize)>,
        root_index: usize,
    ) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::InvalidSkeleton("num_joints must be positive".into()));
        }
        if root_index >= num_joints {
            return Err(Error::InvalidSkeleton(format!(
                "root index {root_index} out of range for {num_joints} joints"
            )));
        }
        let mut seen = BTreeSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a >= num_joints || b >= num_joints {
                return Err(Error::InvalidSkeleton(format!(
                    "edge ({a}, {b}) out of range for {num_joints} joints"
                )));
            }
            if a == b {
                return Err(Error::InvalidSkeleton(format!("self-loop on joint {a}")));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::InvalidSkeleton(format!("duplicate edge ({a}, {b})")));
            }
            normalized.push(key);
        }
        let mut used = BTreeSet::new();
        for &(l, r) in &flip_pairs {
            if l >= num_joints || r >= num_joints {
                return Err(Error::InvalidSkeleton(format!(
                    "flip pair ({l}, {r}) out of range for {num_joints} joints"
                )));
            }
            if l == r {
                return Err(Error::InvalidSkeleton(format!("flip pair ({l}, {r}) maps a joint to itself")));
            }
            if !used.insert(l) || !used.insert(r) {
                return Err(Error::InvalidSkeleton(format!("flip pair ({l}, {r}) overlaps another pair")));
            }
        }
        Ok(SkeletonSpec {
            num_joints,
            edges: normalized,
            flip_pairs,
            root_index,
        })
    }

    /// The 17-joint Human3.6M layout: 16 bones, pelvis root, six left/right
    /// pairs.
    pub fn h36m17() -> Self {
        let edges = (1..17).map(|j| (H36M17_PARENTS[j], j)).collect();
        SkeletonSpec::new(17, edges, H36M17_FLIP_PAIRS.to_vec(), 0).expect("builtin skeleton is valid")
    }

    /// Resolves `name_or_path`: the builtin name [`H36M17`], otherwise a TOML
    /// skeleton file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if name_or_path == H36M17 {
            Ok(Self::h36m17())
        } else {
            Self::load(name_or_path)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidSkeleton(_) => e,
            other => Error::format(path, other.to_string()),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: SkeletonFile =
            toml::from_str(text).map_err(|e| Error::InvalidSkeleton(format!("parse error: {e}")))?;
        file.try_into()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&SkeletonFile::from(self.clone())).expect("skeleton serialises")
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn flip_pairs(&self) -> &[(usize, usize)] {
        &self.flip_pairs
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn is_h36m17(&self) -> bool {
        *self == Self::h36m17()
    }

    /// Joint permutation applied by a horizontal flip (an involution).
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.num_joints).collect();
        for &(l, r) in &self.flip_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }

    /// Parent of every joint in a breadth-first spanning tree rooted at
    /// `root_index`, or an error if the graph is not a tree.
    pub fn tree_parents(&self) -> Result<Vec<Option<usize>>> {
        let j = self.num_joints;
        if self.edges.len() + 1 != j {
            return Err(Error::InvalidSkeleton(format!(
                "expected a tree with {} edges, found {}",
                j.saturating_sub(1),
                self.edges.len()
            )));
        }
        let mut adjacency = vec![Vec::new(); j];
        for &(a, b) in &self.edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        let mut parent = vec![None; j];
        let mut visited = vec![false; j];
        let mut queue = std::collections::VecDeque::from([self.root_index]);
        visited[self.root_index] = true;
        while let Some(node) = queue.pop_front() {
            for &next in &adjacency[node] {
                if !visited[next] {
                    visited[next] = true;
                    parent[next] = Some(node);
                    queue.push_back(next);
                }
            }
        }
        if visited.iter().any(|v| !v) {
            return Err(Error::InvalidSkeleton("skeleton graph is not connected".into()));
        }
        Ok(parent)
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let parents = self.tree_parents()?;
        let mut order = vec![self.root_index];
        let mut i = 0;
        while i < order.len() {
            let node = order[i];
            order.extend((0..self.num_joints).filter(|&c| parents[c] == Some(node)));
            i += 1;
        }
        Ok(order)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityKind {
    Binary,
    Normalized,
    Modulated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub values: Array2<f64>,
    pub kind: AffinityKind,
}

impl AffinityMatrix {
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let v = &self.values;
        v.indexed_iter().all(|((i, j), &x)| (x - v[[j, i]]).abs() <= tol)
    }
}

/// 0/1 adjacency without self-loops.
pub fn binary_affinity(spec: &SkeletonSpec) -> AffinityMatrix {
    let j = spec.num_joints();
    let mut values = Array2::zeros((j, j));
    for &(a, b) in spec.edges() {
        values[[a, b]] = 1.0;
        values[[b, a]] = 1.0;
    }
    AffinityMatrix {
        values,
        kind: AffinityKind::Binary,
    }
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
pub fn normalized_affinity(spec: &SkeletonSpec) -> AffinityMatrix {
    AffinityMatrix {
        values: normalize_with_self_loops(binary_affinity(spec).values.view()),
        kind: AffinityKind::Normalized,
    }
}

/// Adds the identity and normalises symmetrically by degree. Degrees are
/// absolute row sums so that signed (modulated) matrices stay well defined;
/// for nonnegative inputs this is the usual degree.
pub fn normalize_with_self_loops(a: ArrayView2<f64>) -> Array2<f64> {
    let mut m = a.to_owned();
    m.diag_mut().mapv_inplace(|x| x + 1.0);
    let inv_sqrt: Vec<f64> = m
        .rows()
        .into_iter()
        .map(|row| 1.0 / row.iter().map(|x| x.abs()).sum::<f64>().max(DEGREE_FLOOR).sqrt())
        .collect();
    for ((i, j), v) in m.indexed_iter_mut() {
        *v *= inv_sqrt[i] * inv_sqrt[j];
    }
    m
}

/// Degrees below this are clamped before the inverse square root.
pub const DEGREE_FLOOR: f64 = 1e-6;

/// Negates coordinate `axis` and swaps the rows of every flip pair.
pub fn flip_pose(pose: ArrayView2<f64>, spec: &SkeletonSpec, axis: usize) -> Result<Array2<f64>> {
    let (rows, dims) = pose.dim();
    if rows != spec.num_joints() {
        return Err(Error::shape(format!("{} joints", spec.num_joints()), format!("{rows} joints")));
    }
    if !(2..=3).contains(&dims) {
        return Err(Error::shape("2 or 3 coordinates", format!("{dims}")));
    }
    if axis >= dims {
        return Err(Error::InvalidConfig(format!("flip axis {axis} out of range for {dims}-D pose")));
    }
    let perm = spec.flip_permutation();
    let mut out = Array2::zeros((rows, dims));
    for (dst, &src) in perm.iter().enumerate() {
        out.row_mut(dst).assign(&pose.row(src));
        out[[dst, axis]] = -out[[dst, axis]];
    }
    Ok(out)
}
