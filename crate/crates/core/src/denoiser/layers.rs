//! Per-node linear maps and modulated graph convolutions, each with an
//! explicit backward pass.
//!
//! Node features are `B x J x C` arrays (batch, joint, channel).

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::DEGREE_FLOOR;

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

pub(crate) fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub(crate) fn relu_backward(grad: &mut Array3<f64>, output: &Array3<f64>) {
    Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

fn flat(x: ArrayView3<f64>) -> ArrayView2<f64> {
    let (b, j, c) = x.dim();
    x.into_shape_with_order((b * j, c)).expect("standard layout")
}

fn standard(x: ArrayView3<f64>) -> Array3<f64> {
    x.as_standard_layout().into_owned()
}

/// Row-wise affine map `x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: glorot(rng, fan_in, fan_out),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &x.t().dot(&grad_out);
        grads.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight.t())
    }

    /// Applies the map to every node of a `B x J x C` array.
    pub fn forward_nodes(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let (b, j, _) = x.dim();
        let x = standard(x);
        let out = self.forward(flat(x.view()));
        out.into_shape_with_order((b, j, self.bias.len())).expect("shape")
    }

    pub fn backward_nodes(&self, x: ArrayView3<f64>, grad_out: ArrayView3<f64>, grads: &mut Linear) -> Array3<f64> {
        let (b, j, c) = x.dim();
        let x = standard(x);
        let g = standard(grad_out);
        let dx = self.backward(flat(x.view()), flat(g.view()), grads);
        dx.into_shape_with_order((b, j, c)).expect("shape")
    }
}

/// Graph convolution with a learnable modulated affinity and per-joint
/// feature modulation.
///
/// The effective affinity is `A * sym(P) + sym(Q)` where `sym(M) =
/// (M + M^T) / 2`; it is then given self-loops and normalised symmetrically
/// by its absolute row sums. Node features are mapped by the shared weight,
/// scaled per joint by the rows of `modulation`, aggregated and biased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    /// `in x out`, shared by all joints.
    pub weight: Array2<f64>,
    /// `J x out`, one scaling vector per joint.
    pub modulation: Array2<f64>,
    pub bias: Array1<f64>,
    /// `J x J` multiplicative mask on the binary affinity.
    pub mask_p: Array2<f64>,
    /// `J x J` additive mask.
    pub mask_q: Array2<f64>,
}

/// Intermediate values of a [`GcnLayer`] forward pass.
#[derive(Debug, Clone)]
pub struct GcnCache {
    input: Array3<f64>,
    mapped: Array3<f64>,
    modulated: Array3<f64>,
    output: Array3<f64>,
    affinity: AffinityCache,
    relu: bool,
}

#[derive(Debug, Clone)]
struct AffinityCache {
    /// `A_mod + I`
    augmented: Array2<f64>,
    inv_sqrt_degree: Array1<f64>,
    floored: Vec<bool>,
    normalized: Array2<f64>,
}

fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    (m + &m.t()) * 0.5
}

impl GcnLayer {
    /// Masks start at `P = 1`, `Q = 0` and modulation at one, so a fresh
    /// layer behaves like a vanilla GCN layer.
    pub fn new(rng: &mut impl Rng, joints: usize, fan_in: usize, fan_out: usize) -> Self {
        GcnLayer {
            weight: glorot(rng, fan_in, fan_out),
            modulation: Array2::ones((joints, fan_out)),
            bias: Array1::zeros(fan_out),
            mask_p: Array2::ones((joints, joints)),
            mask_q: Array2::zeros((joints, joints)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GcnLayer {
            weight: Array2::zeros(self.weight.raw_dim()),
            modulation: Array2::zeros(self.modulation.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            mask_p: Array2::zeros(self.mask_p.raw_dim()),
            mask_q: Array2::zeros(self.mask_q.raw_dim()),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.modulation.nrows()
    }

    /// Symmetrised additive mask actually used in the forward pass.
    pub fn effective_q(&self) -> Array2<f64> {
        symmetrize(&self.mask_q)
    }

    /// `A * sym(P) + sym(Q)` before self-loops and normalisation.
    pub fn modulated_affinity(&self, binary: ArrayView2<f64>) -> Array2<f64> {
        &binary * &symmetrize(&self.mask_p) + &self.effective_q()
    }

    fn affinity_cache(&self, binary: ArrayView2<f64>) -> AffinityCache {
        let mut augmented = self.modulated_affinity(binary);
        augmented.diag_mut().mapv_inplace(|v| v + 1.0);
        let degree = augmented.map_axis(Axis(1), |row| row.iter().map(|v| v.abs()).sum::<f64>());
        let floored: Vec<bool> = degree.iter().map(|&d| d < DEGREE_FLOOR).collect();
        let inv_sqrt_degree = degree.mapv(|d| 1.0 / d.max(DEGREE_FLOOR).sqrt());
        let mut normalized = augmented.clone();
        for ((i, j), v) in normalized.indexed_iter_mut() {
            *v *= inv_sqrt_degree[i] * inv_sqrt_degree[j];
        }
        AffinityCache {
            augmented,
            inv_sqrt_degree,
            floored,
            normalized,
        }
    }

    /// Normalised modulated affinity used for aggregation.
    pub fn normalized_affinity(&self, binary: ArrayView2<f64>) -> Array2<f64> {
        self.affinity_cache(binary).normalized
    }

    fn check(&self, binary: ArrayView2<f64>, x: ArrayView3<f64>) -> Result<()> {
        let j = self.num_joints();
        if binary.dim() != (j, j) {
            return Err(Error::shape(format!("{j}x{j} affinity"), format!("{:?}", binary.dim())));
        }
        let (_, xj, xc) = x.dim();
        if xj != j || xc != self.weight.nrows() {
            return Err(Error::shape(
                format!("B x {j} x {}", self.weight.nrows()),
                format!("{:?}", x.dim()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, binary: ArrayView2<f64>, x: ArrayView3<f64>, relu: bool) -> Result<(Array3<f64>, GcnCache)> {
        self.check(binary, x)?;
        let (b, j, _) = x.dim();
        let out_dim = self.weight.ncols();
        let input = standard(x);
        let mapped = flat(input.view())
            .dot(&self.weight)
            .into_shape_with_order((b, j, out_dim))
            .expect("shape");
        let modulated = &mapped * &self.modulation;
        let affinity = self.affinity_cache(binary);
        let mut output = Array3::zeros((b, j, out_dim));
        for (mut out, h) in output.outer_iter_mut().zip(modulated.outer_iter()) {
            out.assign(&affinity.normalized.dot(&h));
            out += &self.bias;
        }
        if relu {
            relu_inplace(&mut output);
        }
        let cache = GcnCache {
            input,
            mapped,
            modulated,
            output: output.clone(),
            affinity,
            relu,
        };
        Ok((output, cache))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(
        &self,
        binary: ArrayView2<f64>,
        cache: &GcnCache,
        grad_out: ArrayView3<f64>,
        grads: &mut GcnLayer,
    ) -> Array3<f64> {
        let mut g = grad_out.to_owned();
        if cache.relu {
            relu_backward(&mut g, &cache.output);
        }
        let (b, j, out_dim) = g.dim();
        grads.bias += &g.sum_axis(Axis(0)).sum_axis(Axis(0));

        let adj = &cache.affinity.normalized;
        let mut grad_adj = Array2::<f64>::zeros((j, j));
        let mut grad_modulated = Array3::<f64>::zeros((b, j, out_dim));
        for ((go, h), mut gh) in g
            .outer_iter()
            .zip(cache.modulated.outer_iter())
            .zip(grad_modulated.outer_iter_mut())
        {
            grad_adj += &go.dot(&h.t());
            gh.assign(&adj.t().dot(&go));
        }
        grads.modulation += &(&grad_modulated * &cache.mapped).sum_axis(Axis(0));
        let grad_mapped = &grad_modulated * &self.modulation;
        let gm_flat = flat(grad_mapped.view());
        grads.weight += &flat(cache.input.view()).t().dot(&gm_flat);
        let dx = gm_flat.dot(&self.weight.t());

        self.affinity_backward(binary, &cache.affinity, &grad_adj, grads);
        dx.into_shape_with_order((b, j, self.weight.nrows())).expect("shape")
    }

    fn affinity_backward(&self, binary: ArrayView2<f64>, cache: &AffinityCache, grad_norm: &Array2<f64>, grads: &mut GcnLayer) {
        let r = &cache.inv_sqrt_degree;
        let m = &cache.augmented;
        let j = r.len();
        // d(normalized_ij)/d(m_ij) through the numerator
        let mut grad_m = Array2::<f64>::zeros((j, j));
        // dL/dr_i collects both the row and the column role of r_i
        let mut grad_r = Array1::<f64>::zeros(j);
        for a in 0..j {
            for c in 0..j {
                let gv = grad_norm[[a, c]];
                grad_m[[a, c]] = gv * r[a] * r[c];
                grad_r[a] += gv * m[[a, c]] * r[c];
                grad_r[c] += gv * m[[a, c]] * r[a];
            }
        }
        for a in 0..j {
            if cache.floored[a] {
                continue;
            }
            // r = d^{-1/2}  =>  dr/dd = -r^3 / 2
            let grad_degree = grad_r[a] * -0.5 * r[a].powi(3);
            for c in 0..j {
                let v = m[[a, c]];
                if v != 0.0 {
                    grad_m[[a, c]] += grad_degree * v.signum();
                }
            }
        }
        let grad_p_sym = &binary * &grad_m;
        grads.mask_p += &symmetrize(&grad_p_sym);
        grads.mask_q += &symmetrize(&grad_m);
    }
}

/// Vanilla graph convolution in column-per-node form: `H` is `d x J`, `W` is
/// `d' x d`, and the result `sigma(W H A)` is `d' x J`.
pub fn gcn_layer_forward(
    h: ArrayView2<f64>,
    a_tilde: ArrayView2<f64>,
    w: ArrayView2<f64>,
    activate: bool,
) -> Result<Array2<f64>> {
    let (d, j) = h.dim();
    if a_tilde.dim() != (j, j) {
        return Err(Error::shape(format!("{j}x{j} affinity"), format!("{:?}", a_tilde.dim())));
    }
    if w.ncols() != d {
        return Err(Error::shape(format!("W with {d} columns"), format!("{:?}", w.dim())));
    }
    let mut out = w.dot(&h).dot(&a_tilde);
    if activate {
        out.mapv_inplace(|v| v.max(0.0));
    }
    Ok(out)
}

/// Explicit per-joint weight matrices `W_j = W diag(m_j)`, the
/// unfactorised form of the weight modulation.
pub fn materialize_joint_weights(layer: &GcnLayer) -> Vec<Array2<f64>> {
    (0..layer.num_joints())
        .map(|j| &layer.weight * &layer.modulation.slice(s![j, ..]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{binary_affinity, normalized_affinity, SkeletonSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
    }

    fn randn2(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
    }

    fn path4() -> SkeletonSpec {
        SkeletonSpec::new(4, vec![(0, 1), (1, 2), (2, 3)], vec![(0, 3)], 0).unwrap()
    }

    #[test]
    fn fresh_layer_equals_vanilla_gcn() {
        let spec = path4();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = GcnLayer::new(&mut rng, 4, 3, 5);
        let a = binary_affinity(&spec).values;
        let x = randn3(&mut rng, (2, 4, 3));
        let (out, _) = layer.forward(a.view(), x.view(), false).unwrap();
        let norm = normalized_affinity(&spec).values;
        for b in 0..2 {
            let expected = norm.dot(&x.index_axis(Axis(0), b).dot(&layer.weight));
            assert!((&out.index_axis(Axis(0), b) - &expected).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn effective_q_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = GcnLayer::new(&mut rng, 5, 2, 2);
        layer.mask_q = randn2(&mut rng, (5, 5));
        let q = layer.effective_q();
        assert_eq!(&q - &q.t(), Array2::<f64>::zeros((5, 5)));
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = GcnLayer::new(&mut rng, 4, 3, 5);
        let a = binary_affinity(&path4()).values;
        assert!(layer.forward(a.view(), Array3::zeros((1, 4, 2)).view(), true).is_err());
        assert!(layer.forward(a.view(), Array3::zeros((1, 3, 3)).view(), true).is_err());
    }

    #[test]
    fn materialized_weights_match_factorized_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = path4();
        let a = binary_affinity(&spec).values;
        let mut layer = GcnLayer::new(&mut rng, 4, 3, 5);
        layer.modulation = randn2(&mut rng, (4, 5));
        layer.mask_p = randn2(&mut rng, (4, 4)).mapv(|v| 1.0 + 0.2 * v);
        layer.mask_q = randn2(&mut rng, (4, 4)) * 0.1;
        let x = randn3(&mut rng, (1, 4, 3));
        let (out, _) = layer.forward(a.view(), x.view(), true).unwrap();
        let weights = materialize_joint_weights(&layer);
        let adj = layer.normalized_affinity(a.view());
        for i in 0..4 {
            let mut acc = layer.bias.clone();
            for (jj, w) in weights.iter().enumerate() {
                acc = acc + w.t().dot(&x.slice(s![0, jj, ..])) * adj[[i, jj]];
            }
            for c in 0..5 {
                assert!((out[[0, i, c]] - acc[c].max(0.0)).abs() < 1e-12);
            }
        }
    }

    /// Scalar objective sum(out * probe) for finite differences.
    fn objective(layer: &GcnLayer, a: &Array2<f64>, x: &Array3<f64>, probe: &Array3<f64>) -> f64 {
        let (out, _) = layer.forward(a.view(), x.view(), true).unwrap();
        (&out * probe).sum()
    }

    #[test]
    fn gcn_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = path4();
        let a = binary_affinity(&spec).values;
        let mut layer = GcnLayer::new(&mut rng, 4, 3, 2);
        layer.modulation = randn2(&mut rng, (4, 2));
        layer.mask_p = randn2(&mut rng, (4, 4)).mapv(|v| 1.0 + 0.3 * v);
        layer.mask_q = randn2(&mut rng, (4, 4)) * 0.3;
        layer.bias = Array1::from_vec(vec![0.3, -0.2]);
        let x = randn3(&mut rng, (2, 4, 3));
        let probe = randn3(&mut rng, (2, 4, 2));
        let (_, cache) = layer.forward(a.view(), x.view(), true).unwrap();
        let mut grads = layer.zeros_like();
        let dx = layer.backward(a.view(), &cache, probe.view(), &mut grads);

        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "analytic {analytic} numeric {numeric}"
            );
        };
        macro_rules! fd_field {
            ($field:ident) => {
                for idx in 0..layer.$field.len() {
                    let mut p = layer.clone();
                    p.$field.as_slice_mut().unwrap()[idx] += h;
                    let mut m = layer.clone();
                    m.$field.as_slice_mut().unwrap()[idx] -= h;
                    check(
                        grads.$field.as_slice().unwrap()[idx],
                        objective(&p, &a, &x, &probe),
                        objective(&m, &a, &x, &probe),
                    );
                }
            };
        }
        fd_field!(weight);
        fd_field!(modulation);
        fd_field!(bias);
        fd_field!(mask_p);
        fd_field!(mask_q);
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            check(
                dx.as_slice().unwrap()[idx],
                objective(&layer, &a, &xp, &probe),
                objective(&layer, &a, &xm, &probe),
            );
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear::new(&mut rng, 3, 2);
        let x = randn2(&mut rng, (5, 3));
        let probe = randn2(&mut rng, (5, 2));
        let mut grads = lin.zeros_like();
        let dx = lin.backward(x.view(), probe.view(), &mut grads);
        let f = |l: &Linear, x: &Array2<f64>| (l.forward(x.view()) * &probe).sum();
        let h = 1e-6;
        for idx in 0..6 {
            let mut p = lin.clone();
            p.weight.as_slice_mut().unwrap()[idx] += h;
            let mut m = lin.clone();
            m.weight.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
            assert!((numeric - grads.weight.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
        for idx in 0..15 {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (f(&lin, &xp) - f(&lin, &xm)) / (2.0 * h);
            assert!((numeric - dx.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn vanilla_gcn_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = randn2(&mut rng, (3, 4));
        let w = randn2(&mut rng, (5, 3));
        let eye = Array2::<f64>::eye(4);
        let out = gcn_layer_forward(h.view(), eye.view(), w.view(), false).unwrap();
        assert!((&out - &w.dot(&h)).iter().all(|d| d.abs() < 1e-12));
        let a = normalized_affinity(&path4()).values;
        let mix = gcn_layer_forward(h.view(), a.view(), Array2::<f64>::eye(3).view(), false).unwrap();
        assert!((&mix - &h.dot(&a)).iter().all(|d| d.abs() < 1e-12));
        assert!(gcn_layer_forward(h.view(), a.view(), randn2(&mut rng, (5, 2)).view(), false).is_err());
    }

    #[test]
    fn vanilla_gcn_matches_per_node_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = SkeletonSpec::new(4, vec![(0, 1), (0, 2), (2, 3), (1, 3)], vec![], 0).unwrap();
        let a = normalized_affinity(&spec).values;
        let h = randn2(&mut rng, (3, 4));
        let w = randn2(&mut rng, (5, 3));
        let out = gcn_layer_forward(h.view(), a.view(), w.view(), true).unwrap();
        for i in 0..4 {
            let mut acc = Array1::<f64>::zeros(5);
            for jj in 0..4 {
                acc = acc + w.dot(&h.column(jj)) * a[[jj, i]];
            }
            for c in 0..5 {
                assert!((out[[c, i]] - acc[c].max(0.0)).abs() < 1e-6);
            }
        }
    }
}
