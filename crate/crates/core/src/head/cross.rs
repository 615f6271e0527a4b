use serde::{Deserialize, Serialize};

use super::Linear;
use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_sample, decode_reference_points, project_to_bev, project_to_image, BevGridSpec, CameraModel,
    SceneBounds,
};
use crate::pointcloud::PYRAMID_LEVELS;
use crate::tensor::{Bound, ParamStore, Tensor, Var};

/// How the per-slot attention logits become weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionWeighting {
    /// Independent sigmoid per slot.
    #[default]
    Sigmoid,
    /// Softmax across all image and BEV slots of a query.
    Softmax,
}

#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    /// `d → 4·V + 4` slot logits.
    pub weight_net: Linear,
    pub fuse_hidden: Linear,
    pub fuse_out: Linear,
}

impl CrossAttentionParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_cams: usize,
        init: &mut impl FnMut(usize, usize) -> Tensor,
    ) -> Result<Self> {
        Ok(Self {
            weight_net: Linear::register(store, &format!("{prefix}.weight_net"), dim, slot_count(n_cams), init)?,
            fuse_hidden: Linear::register(store, &format!("{prefix}.fuse.hidden"), 2 * dim, dim, init)?,
            fuse_out: Linear::register(store, &format!("{prefix}.fuse.out"), dim, dim, init)?,
        })
    }
}

pub fn slot_count(n_cams: usize) -> usize {
    PYRAMID_LEVELS * n_cams + PYRAMID_LEVELS
}

/// Sensor features of one sample, already placed on the tape.
pub struct SensorContext<'t, 'a> {
    pub cameras: &'a [CameraModel],
    /// `image[v][x]`: level `x` of camera `v`, each `[h, w, d]`.
    pub image: Vec<Vec<Var<'t>>>,
    /// BEV pyramid levels, each `[h, w, d]`.
    pub bev: Vec<Var<'t>>,
    pub bounds: SceneBounds,
    pub grid: BevGridSpec,
}

impl SensorContext<'_, '_> {
    fn check(&self, dim: usize) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::contract("cross-attention needs at least one camera"));
        }
        if self.image.len() != self.cameras.len() {
            return Err(Error::dim(format!(
                "{} image pyramids for {} cameras",
                self.image.len(),
                self.cameras.len()
            )));
        }
        let levels = self.image.iter().chain(std::iter::once(&self.bev));
        for pyr in levels {
            if pyr.len() != PYRAMID_LEVELS {
                return Err(Error::dim(format!("pyramid with {} levels", pyr.len())));
            }
            for l in pyr {
                if l.cols() != dim {
                    return Err(Error::dim(format!(
                        "feature map {:?} does not have {dim} channels",
                        l.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Weighted image and BEV sums `(g_img, g_bev)`, each `[n, d]`.
pub fn cross_attention_sums<'t>(
    q: Var<'t>,
    ctx: &SensorContext<'t, '_>,
    phi: &Linear,
    params: &CrossAttentionParams,
    weighting: AttentionWeighting,
    bound: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let dim = q.cols();
    ctx.check(dim)?;
    let n_cams = ctx.cameras.len();
    let refs = decode_reference_points(q, bound.var(phi.weight), bound.var(phi.bias), &ctx.bounds)?;

    let logits = params.weight_net.apply(q, bound)?;
    if logits.cols() != slot_count(n_cams) {
        return Err(Error::dim(format!(
            "weight net emits {} slots, {} cameras need {}",
            logits.cols(),
            n_cams,
            slot_count(n_cams)
        )));
    }
    let weights = match weighting {
        AttentionWeighting::Sigmoid => logits.sigmoid(),
        AttentionWeighting::Softmax => logits.softmax(),
    };

    let accumulate = |acc: Option<Var<'t>>, term: Var<'t>| -> Result<Option<Var<'t>>> {
        Ok(Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        }))
    };
    let mut g_img = None;
    for (v, cam) in ctx.cameras.iter().enumerate() {
        let (coords, valid) = project_to_image(refs, cam)?;
        for (x, map) in ctx.image[v].iter().enumerate() {
            let f = bilinear_sample(*map, coords, &valid)?;
            g_img = accumulate(g_img, f.mul_col(weights, v * PYRAMID_LEVELS + x)?)?;
        }
    }
    let (coords, valid) = project_to_bev(refs, &ctx.grid)?;
    let mut g_bev = None;
    for (x, map) in ctx.bev.iter().enumerate() {
        let f = bilinear_sample(*map, coords, &valid)?;
        g_bev = accumulate(g_bev, f.mul_col(weights, n_cams * PYRAMID_LEVELS + x)?)?;
    }
    Ok((g_img.expect("checked: one camera"), g_bev.expect("checked: four levels")))
}

/// Per-query fusion of image and BEV features.
///
/// Each query decodes a reference point, samples every image level of every
/// camera and every BEV level at the point's projections, weights the
/// samples with query-predicted slot weights, sums image and BEV samples
/// separately and fuses the two sums with a two-layer MLP.
pub fn msf_cross_attention<'t>(
    q: Var<'t>,
    ctx: &SensorContext<'t, '_>,
    phi: &Linear,
    params: &CrossAttentionParams,
    weighting: AttentionWeighting,
    bound: &Bound<'t>,
) -> Result<Var<'t>> {
    let (g_img, g_bev) = cross_attention_sums(q, ctx, phi, params, weighting, bound)?;
    let fused = q.tape().hcat(&[g_img, g_bev])?;
    let hidden = params.fuse_hidden.apply(fused, bound)?.relu();
    params.fuse_out.apply(hidden, bound)
}
