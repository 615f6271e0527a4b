//! Transformer detection head: learned queries refined by stacked
//! self-attention / sensor cross-attention / FFN blocks, with box and class
//! heads after every block.

mod attention;
mod cross;

pub use attention::{canonical_row_order, multi_head_self_attention, HeadProjections, SelfAttentionParams};
pub use cross::{
    cross_attention_sums, msf_cross_attention, slot_count, AttentionWeighting, CrossAttentionParams, SensorContext,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::boxes::{decode_raw, Box3D, CLASS_NAMES, REG_DIM};
use crate::error::{Error, Result};
use crate::geometry::SceneBounds;
use crate::tensor::{sigmoid, Bound, ParamId, ParamStore, Tensor, Var};

/// Affine layer `x·W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Registers `{name}.weight` from `init` and a zero `{name}.bias`.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: &mut impl FnMut(usize, usize) -> Tensor,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init(fan_in, fan_out))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn apply<'t>(&self, x: Var<'t>, bound: &Bound<'t>) -> Result<Var<'t>> {
        x.linear(bound.var(self.weight), bound.var(self.bias))
    }
}

/// `linear → relu → linear`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        init: &mut impl FnMut(usize, usize) -> Tensor,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::register(store, &format!("{name}.0"), dims.0, dims.1, init)?,
            out: Linear::register(store, &format!("{name}.1"), dims.1, dims.2, init)?,
        })
    }

    pub fn apply<'t>(&self, x: Var<'t>, bound: &Bound<'t>) -> Result<Var<'t>> {
        let h = self.hidden.apply(x, bound)?.relu();
        self.out.apply(h, bound)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn apply<'t>(&self, x: Var<'t>, bound: &Bound<'t>, eps: f64) -> Result<Var<'t>> {
        x.layer_norm(bound.var(self.gain), bound.var(self.bias), eps)
    }
}

/// Weights drawn from `U(−1/√fan_in, 1/√fan_in)`.
pub fn uniform_init<R: Rng>(rng: &mut R) -> impl FnMut(usize, usize) -> Tensor + '_ {
    move |fan_in, fan_out| {
        let a = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        Tensor::new(&[fan_in, fan_out], data).expect("positive extents")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub layers: usize,
    pub queries: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub classes: usize,
    pub cameras: usize,
    pub top_k: usize,
    pub weighting: AttentionWeighting,
    pub ln_eps: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            queries: 900,
            hidden: 256,
            heads: 8,
            ffn_dim: 512,
            classes: CLASS_NAMES.len(),
            cameras: 6,
            top_k: 300,
            weighting: AttentionWeighting::Sigmoid,
            ln_eps: 1e-5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("queries", self.queries),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("classes", self.classes),
            ("cameras", self.cameras),
            ("top_k", self.top_k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("head.{name} must be at least 1")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "{} attention heads do not divide width {}",
                self.heads, self.hidden
            )));
        }
        if self.top_k > self.queries {
            return Err(Error::contract(format!(
                "top_k {} exceeds the {} queries",
                self.top_k, self.queries
            )));
        }
        if self.classes > CLASS_NAMES.len() {
            return Err(Error::contract(format!("at most {} classes are supported", CLASS_NAMES.len())));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::contract("ln_eps must be positive"));
        }
        Ok(())
    }
}

/// Parameters of one refinement block and its prediction heads.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub self_attn: SelfAttentionParams,
    pub ln1: LayerNormParams,
    pub cross: CrossAttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: Mlp,
    pub ln3: LayerNormParams,
    pub reg: Mlp,
    pub cls: Mlp,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub config: HeadConfig,
    /// Initial query embeddings `[N_q, d]`.
    pub queries: ParamId,
    /// Reference-point projection `d → 3`, shared by all blocks.
    pub phi: Linear,
    pub blocks: Vec<BlockParams>,
}

/// Classification bias giving every class an initial score of 0.01.
pub fn class_prior_bias() -> f64 {
    -(99f64).ln()
}

impl HeadParams {
    pub fn register(
        store: &mut ParamStore,
        config: &HeadConfig,
        init: &mut impl FnMut(usize, usize) -> Tensor,
        queries: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        if queries.shape() != [config.queries, d] {
            return Err(Error::dim(format!(
                "initial queries {:?}, expected [{}, {d}]",
                queries.shape(),
                config.queries
            )));
        }
        let q = store.add("head.queries", queries)?;
        let phi = Linear::register(store, "head.phi", d, 3, init)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("head.block{l}");
            let cls = Mlp::register(store, &format!("{p}.cls"), (d, d, config.classes), init)?;
            store.tensor_mut(cls.out.bias).data_mut().fill(class_prior_bias());
            blocks.push(BlockParams {
                self_attn: SelfAttentionParams::register(store, &format!("{p}.self_attn"), d, config.heads, init)?,
                ln1: LayerNormParams::register(store, &format!("{p}.ln1"), d)?,
                cross: CrossAttentionParams::register(store, &format!("{p}.cross"), d, config.cameras, init)?,
                ln2: LayerNormParams::register(store, &format!("{p}.ln2"), d)?,
                ffn: Mlp::register(store, &format!("{p}.ffn"), (d, config.ffn_dim, d), init)?,
                ln3: LayerNormParams::register(store, &format!("{p}.ln3"), d)?,
                reg: Mlp::register(store, &format!("{p}.reg"), (d, d, REG_DIM), init)?,
                cls,
            });
        }
        Ok(Self {
            config: config.clone(),
            queries: q,
            phi,
            blocks,
        })
    }

    /// Uniform weights, standard-normal query embeddings.
    pub fn random(store: &mut ParamStore, config: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.queries * config.hidden;
        let q: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let queries = Tensor::new(&[config.queries, config.hidden], q)?;
        Self::register(store, config, &mut uniform_init(rng), queries)
    }
}

pub fn ffn<'t>(q: Var<'t>, params: &Mlp, bound: &Bound<'t>) -> Result<Var<'t>> {
    params.apply(q, bound)
}

/// One refinement step with post-norm residuals:
/// self-attention, sensor cross-attention, then the FFN.
pub fn msf_block<'t>(
    q: Var<'t>,
    ctx: &SensorContext<'t, '_>,
    block: &BlockParams,
    head: &HeadParams,
    bound: &Bound<'t>,
) -> Result<Var<'t>> {
    let eps = head.config.ln_eps;
    let q1 = block.ln1.apply(q.add(multi_head_self_attention(q, &block.self_attn, bound)?)?, bound, eps)?;
    let c = msf_cross_attention(q1, ctx, &head.phi, &block.cross, head.config.weighting, bound)?;
    let q2 = block.ln2.apply(q1.add(c)?, bound, eps)?;
    let q3 = block.ln3.apply(q2.add(ffn(q2, &block.ffn, bound)?)?, bound, eps)?;
    Ok(q3)
}

/// Predictions of one block.
pub struct LayerOutput<'t> {
    /// Raw regression `[N_q, 10]`.
    pub reg_raw: Var<'t>,
    pub cls_logits: Var<'t>,
    pub boxes: Vec<Box3D>,
    /// Refined queries that produced these predictions.
    pub queries: Var<'t>,
}

pub fn predict<'t>(q: Var<'t>, block: &BlockParams, bounds: &SceneBounds, bound: &Bound<'t>) -> Result<LayerOutput<'t>> {
    let reg_raw = block.reg.apply(q, bound)?;
    let cls_logits = block.cls.apply(q, bound)?;
    let boxes = decode_boxes(&reg_raw.value(), &cls_logits.value(), bounds);
    Ok(LayerOutput {
        reg_raw,
        cls_logits,
        boxes,
        queries: q,
    })
}

/// Decodes every query: geometry from the regression row, class as the
/// first arg-max logit and score as its sigmoid.
pub fn decode_boxes(reg: &Tensor, cls: &Tensor, bounds: &SceneBounds) -> Vec<Box3D> {
    let (n, _) = reg.dims2();
    (0..n)
        .map(|i| {
            let mut b = decode_raw(reg.row(i), bounds);
            let logits = cls.row(i);
            let mut best = 0;
            for (c, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = c;
                }
            }
            b.class = best;
            b.score = sigmoid(logits[best]);
            b
        })
        .collect()
}

/// Runs every block in order from `q`; the last entry is the inference output.
pub fn run_head<'t>(
    q: Var<'t>,
    ctx: &SensorContext<'t, '_>,
    head: &HeadParams,
    bounds: &SceneBounds,
    bound: &Bound<'t>,
) -> Result<Vec<LayerOutput<'t>>> {
    if head.blocks.is_empty() {
        return Err(Error::contract("the head needs at least one block"));
    }
    let mut outs = Vec::with_capacity(head.blocks.len());
    let mut cur = q;
    for block in &head.blocks {
        cur = msf_block(cur, ctx, block, head, bound)?;
        outs.push(predict(cur, block, bounds, bound)?);
    }
    Ok(outs)
}

/// The `k` highest-scoring boxes with their query indices, best first.
/// Equal scores keep query order.
pub fn select_top_k(boxes: &[Box3D], k: usize) -> Result<Vec<(usize, Box3D)>> {
    if k == 0 {
        return Err(Error::contract("top-k needs k ≥ 1"));
    }
    if k > boxes.len() {
        return Err(Error::contract(format!("top-k with k = {k} over {} queries", boxes.len())));
    }
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    Ok(idx.into_iter().take(k).map(|i| (i, boxes[i].clone())).collect())
}
