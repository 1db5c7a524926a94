use ndarray::{concatenate, Array2, Array3, ArrayView3, Axis, Zip};

use super::layers::GcnCache;
use super::time::embed_batch;
use super::{Denoise, DenoiserConfig, DenoiserOutput, DenoiserParams};
use crate::error::{Error, Result};
use crate::skeleton::binary_affinity;

/// A configured network: hyperparameters, weights and the skeleton's binary
/// affinity.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: DenoiserParams,
    binary: Array2<f64>,
}

struct BlockCache {
    first: GcnCache,
    second: GcnCache,
}

struct TimeBlockCache {
    gcn: GcnCache,
}

/// Activations kept from a forward pass for [`Denoiser::backward`].
pub struct ForwardCache {
    input: GcnCache,
    blocks: Vec<BlockCache>,
    time_blocks: Vec<TimeBlockCache>,
    embedding: Array2<f64>,
    time_hidden: Array2<f64>,
    time_out: Array2<f64>,
    time_act: Array2<f64>,
    features: Array3<f64>,
}

fn relu2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn mask_relu2(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = DenoiserParams::init(&config, seed)?;
        Self::from_parts(config, params)
    }

    /// Checks that `params` has the shapes `config` implies.
    pub fn from_parts(config: DenoiserConfig, params: DenoiserParams) -> Result<Self> {
        config.validate()?;
        let reference = DenoiserParams::init(&config, 0)?;
        let expected = reference.tensors();
        let found = params.tensors();
        if expected.len() != found.len() {
            return Err(Error::shape(
                format!("{} parameter tensors", expected.len()),
                format!("{}", found.len()),
            ));
        }
        for ((name, e), (_, f)) in expected.iter().zip(&found) {
            if e.shape() != f.shape() {
                return Err(Error::shape(format!("{name} {:?}", e.shape()), format!("{:?}", f.shape())));
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("denoiser parameters".into()));
        }
        let binary = binary_affinity(&config.skeleton).values;
        Ok(Denoiser { config, params, binary })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DenoiserParams {
        &mut self.params
    }

    pub fn into_params(self) -> DenoiserParams {
        self.params
    }

    pub fn binary_affinity(&self) -> &Array2<f64> {
        &self.binary
    }

    fn check_inputs(&self, x_t: ArrayView3<f64>, t: &[usize], y: ArrayView3<f64>) -> Result<()> {
        let j = self.config.skeleton.num_joints();
        let (b, xj, xc) = x_t.dim();
        if xj != j || xc != 3 {
            return Err(Error::shape(format!("B x {j} x 3"), format!("{:?}", x_t.dim())));
        }
        if y.dim() != (b, j, 2) {
            return Err(Error::shape(format!("{b} x {j} x 2"), format!("{:?}", y.dim())));
        }
        if t.len() != b {
            return Err(Error::shape(format!("{b} timesteps"), format!("{}", t.len())));
        }
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    /// Forward pass that keeps the activations needed for gradients.
    pub fn forward(&self, x_t: ArrayView3<f64>, t: &[usize], y: ArrayView3<f64>) -> Result<(DenoiserOutput, ForwardCache)> {
        self.check_inputs(x_t, t, y)?;
        let p = &self.params;
        let a = self.binary.view();

        let embedding = embed_batch(t, self.config.time_embed_dim());
        let time_hidden = p.time_hidden.forward(embedding.view());
        let time_out = p.time_out.forward(relu2(&time_hidden).view());
        let time_act = relu2(&time_out);

        let fused = concatenate(Axis(2), &[x_t, y]).expect("matching batch and joints");
        let (mut h, input) = p.input.forward(a, fused.view(), true)?;
        let mut blocks = Vec::with_capacity(p.blocks.len());
        let mut time_blocks = Vec::with_capacity(p.time_blocks.len());
        for (i, block) in p.blocks.iter().enumerate() {
            let (mid, first) = block.first.forward(a, h.view(), true)?;
            let (out, second) = block.second.forward(a, mid.view(), true)?;
            h += &out;
            blocks.push(BlockCache { first, second });
            if let Some(tb) = p.time_blocks.get(i) {
                let shift = tb.proj.forward(time_act.view());
                let shifted = &h + &shift.view().insert_axis(Axis(1));
                let (out, gcn) = tb.gcn.forward(a, shifted.view(), true)?;
                h += &out;
                time_blocks.push(TimeBlockCache { gcn });
            }
        }
        let output = DenoiserOutput {
            eps: p.eps_head.forward_nodes(h.view()),
            y_recon: p.y_head.forward_nodes(h.view()),
        };
        let cache = ForwardCache {
            input,
            blocks,
            time_blocks,
            embedding,
            time_hidden,
            time_out,
            time_act,
            features: h,
        };
        Ok((output, cache))
    }

    /// Gradients of a loss with respect to every parameter, given the loss
    /// gradients at both heads.
    pub fn backward(&self, cache: &ForwardCache, grad_eps: ArrayView3<f64>, grad_y: ArrayView3<f64>) -> Result<DenoiserParams> {
        let f = &cache.features;
        let (b, j, _) = f.dim();
        if grad_eps.dim() != (b, j, 3) || grad_y.dim() != (b, j, 2) {
            return Err(Error::shape(
                format!("{b} x {j} x 3 and {b} x {j} x 2"),
                format!("{:?} and {:?}", grad_eps.dim(), grad_y.dim()),
            ));
        }
        let p = &self.params;
        let a = self.binary.view();
        let mut grads = p.zeros_like();

        let mut gh = p.eps_head.backward_nodes(f.view(), grad_eps, &mut grads.eps_head);
        gh += &p.y_head.backward_nodes(f.view(), grad_y, &mut grads.y_head);
        let mut grad_time_act = Array2::<f64>::zeros(cache.time_act.raw_dim());

        for i in (0..p.blocks.len()).rev() {
            if let Some(tc) = cache.time_blocks.get(i) {
                let tb = &p.time_blocks[i];
                let du = tb.gcn.backward(a, &tc.gcn, gh.view(), &mut grads.time_blocks[i].gcn);
                gh += &du;
                let dshift = du.sum_axis(Axis(1));
                grad_time_act += &tb.proj.backward(cache.time_act.view(), dshift.view(), &mut grads.time_blocks[i].proj);
            }
            let block = &p.blocks[i];
            let bc = &cache.blocks[i];
            let gb = &mut grads.blocks[i];
            let dmid = block.second.backward(a, &bc.second, gh.view(), &mut gb.second);
            let din = block.first.backward(a, &bc.first, dmid.view(), &mut gb.first);
            gh += &din;
        }
        p.input.backward(a, &cache.input, gh.view(), &mut grads.input);

        let mut grad_out = grad_time_act;
        mask_relu2(&mut grad_out, &cache.time_out);
        let mut grad_hidden = p
            .time_out
            .backward(relu2(&cache.time_hidden).view(), grad_out.view(), &mut grads.time_out);
        mask_relu2(&mut grad_hidden, &cache.time_hidden);
        p.time_hidden
            .backward(cache.embedding.view(), grad_hidden.view(), &mut grads.time_hidden);
        Ok(grads)
    }
}

impl Denoise for Denoiser {
    fn num_joints(&self) -> usize {
        self.config.skeleton.num_joints()
    }

    fn denoise(&self, x_t: ArrayView3<f64>, t: &[usize], y: ArrayView3<f64>) -> Result<DenoiserOutput> {
        Ok(self.forward(x_t, t, y)?.0)
    }
}
