//! The gradient-check suite: every differentiable primitive, then the
//! fusion cross-attention, a full block and the set loss through a small
//! two-layer head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boxes::Box3D;
use crate::error::Result;
use crate::geometry::{bilinear_sample, BevGridSpec, CameraModel, SceneBounds};
use crate::head::{
    msf_block, msf_cross_attention, multi_head_self_attention, run_head, uniform_init, AttentionWeighting,
    CrossAttentionParams, HeadConfig, HeadParams, Linear, SelfAttentionParams, SensorContext,
};
use crate::matching::{focal_loss, set_loss, CostWeights, FocalParams};
use crate::pointcloud::{avg_pool_2x2, encode_pillars, per_cell_linear, pillarize, PointCloud, PILLAR_FEATURES};
use crate::tensor::{grad_check, Bound, ParamStore, Tape, Tensor, Var};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
/// Coordinates probed per parameter tensor (all of them when smaller).
pub const COORDS_PER_GROUP: usize = 100;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Values bounded away from zero, for kinked ops.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// `Σ y ⊙ w` with fixed pseudo-random `w`, so every output coordinate
/// gets its own weight.
fn probe<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(y.shape().iter().product::<usize>() as u64);
    let w = uniform(&mut rng, &y.shape(), -1.0, 1.0);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

type Case = (&'static str, Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>, Vec<Tensor>);

fn primitive_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($p:expr),*], $f:expr) => {
            cases.push(($name, Box::new($f), vec![$($p),*]))
        };
    }
    case!("matmul", [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], |_, v| probe(v[0].matmul(v[1])?));
    case!("add_bias", [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)], |_, v| probe(v[0].add_bias(v[1])?));
    case!(
        "linear",
        [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)],
        |_, v| probe(v[0].linear(v[1], v[2])?)
    );
    case!("add", [uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], |_, v| probe(v[0].add(v[1])?));
    case!("sub", [uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], |_, v| probe(v[0].sub(v[1])?));
    case!("mul", [uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], |_, v| probe(v[0].mul(v[1])?));
    case!("scale", [uniform(r, &[2, 3], -1.0, 1.0)], |_, v| probe(v[0].scale(-1.7)));
    case!("add_scalar", [uniform(r, &[2, 3], -1.0, 1.0)], |_, v| probe(v[0].add_scalar(0.3)));
    case!("affine_cols", [uniform(r, &[4, 3], -1.0, 1.0)], |_, v| probe(
        v[0].affine_cols(&[2.0, -0.5, 1.5], &[0.1, 0.2, -0.3])?
    ));
    case!("sigmoid", [uniform(r, &[3, 3], -3.0, 3.0)], |_, v| probe(v[0].sigmoid()));
    case!("relu", [off_zero(r, &[3, 4])], |_, v| probe(v[0].relu()));
    case!("exp", [uniform(r, &[3, 3], -2.0, 2.0)], |_, v| probe(v[0].exp()));
    case!("abs", [off_zero(r, &[3, 4])], |_, v| probe(v[0].abs()));
    case!("softmax", [uniform(r, &[3, 5], -2.0, 2.0)], |_, v| probe(v[0].softmax()));
    case!(
        "layer_norm",
        [uniform(r, &[3, 6], -2.0, 2.0), uniform(r, &[6], 0.5, 1.5), uniform(r, &[6], -0.5, 0.5)],
        |_, v| probe(v[0].layer_norm(v[1], v[2], 1e-5)?)
    );
    case!("sum", [uniform(r, &[2, 3], -1.0, 1.0)], |_, v| Ok(v[0].sum().scale(1.3)));
    case!("mean", [uniform(r, &[2, 3], -1.0, 1.0)], |_, v| Ok(v[0].mean().scale(1.3)));
    case!("transpose", [uniform(r, &[2, 5], -1.0, 1.0)], |_, v| probe(v[0].transpose()?));
    case!("slice_cols", [uniform(r, &[3, 6], -1.0, 1.0)], |_, v| probe(v[0].slice_cols(2, 3)?));
    case!("gather_rows", [uniform(r, &[4, 3], -1.0, 1.0)], |_, v| probe(v[0].gather_rows(&[3, 0, 3, 1])?));
    case!("mul_col", [uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], |_, v| probe(
        v[0].mul_col(v[1], 1)?
    ));
    case!("reshape", [uniform(r, &[2, 6], -1.0, 1.0)], |_, v| probe(v[0].reshape(&[3, 2, 2])?));
    case!("hcat", [uniform(r, &[3, 2], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |t, v| probe(
        t.hcat(&[v[0], v[1]])?
    ));
    case!(
        "bilinear_sample",
        [uniform(r, &[5, 6, 3], -1.0, 1.0), uniform(r, &[7, 2], 0.02, 0.98)],
        |_, v| probe(bilinear_sample(v[0], v[1], &[true, true, false, true, true, true, true])?)
    );
    case!("avg_pool_2x2", [uniform(r, &[5, 3, 2], -1.0, 1.0)], |_, v| probe(avg_pool_2x2(v[0])?));
    case!(
        "per_cell_linear",
        [uniform(r, &[3, 2, 4], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
        |_, v| probe(per_cell_linear(v[0], v[1], v[2])?)
    );
    let grid = BevGridSpec::new((-1.6, 1.6), (-1.6, 1.6), 0.4).expect("valid grid");
    let points = (0..60)
        .map(|_| [r.random_range(-1.6..1.6), r.random_range(-1.6..1.6), r.random_range(-1.0..1.0), r.random_range(0.0..1.0)])
        .collect();
    let pillars = pillarize(&PointCloud::new(points).expect("finite"), &grid, 8, 64).pillars;
    case!(
        "encode_pillars",
        [uniform(r, &[PILLAR_FEATURES, 4], -1.0, 1.0), uniform(r, &[4], -0.2, 0.2)],
        move |_, v| probe(encode_pillars(&pillars, &grid, v[0], v[1])?)
    );
    let mut store = ParamStore::new();
    let attn = SelfAttentionParams::register(&mut store, "attn", 6, 2, &mut uniform_init(r)).expect("fresh store");
    let x = store.add("x", uniform(r, &[4, 6], -1.0, 1.0)).expect("fresh name");
    let params: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
    cases.push((
        "self_attention",
        Box::new(move |_, v| {
            let b = Bound::from_vars(v.to_vec());
            probe(multi_head_self_attention(b.var(x), &attn, &b)?)
        }),
        params,
    ));
    let targets = vec![Some(2), None, Some(0), None];
    case!("focal_loss", [uniform(r, &[4, 3], -3.0, 3.0)], move |_, v| {
        focal_loss(v[0], &targets, &FocalParams::default(), 2)
    });
    cases
}

/// A small scene with one forward camera and random sensor features.
struct Sensors {
    cameras: Vec<CameraModel>,
    image: Vec<Tensor>,
    bev: Vec<Tensor>,
    bounds: SceneBounds,
    grid: BevGridSpec,
}

impl Sensors {
    fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let size = (64, 48);
        let cameras = vec![CameraModel::looking_at_yaw(40.0, size, 0.1, [0.0; 3]).expect("valid camera")];
        let image = [4, 8, 16, 32]
            .iter()
            .map(|&s| uniform(rng, &[size.1.div_ceil(s), size.0.div_ceil(s), d], -1.0, 1.0))
            .collect();
        let bev = [16, 8, 4, 2].iter().map(|&n| uniform(rng, &[n, n, d], -1.0, 1.0)).collect();
        Self {
            cameras,
            image,
            bev,
            bounds: SceneBounds::new([0.0, -4.0, -2.0], [8.0, 4.0, 2.0]).expect("valid bounds"),
            grid: BevGridSpec::new((0.0, 8.0), (-4.0, 4.0), 0.5).expect("valid grid"),
        }
    }

    fn ctx<'t>(&self, tape: &'t Tape) -> SensorContext<'t, '_> {
        SensorContext {
            cameras: &self.cameras,
            image: vec![self.image.iter().map(|t| tape.constant(t.clone())).collect()],
            bev: self.bev.iter().map(|t| tape.constant(t.clone())).collect(),
            bounds: self.bounds,
            grid: self.grid,
        }
    }
}

fn small_head(layers: usize) -> HeadConfig {
    HeadConfig {
        layers,
        queries: 5,
        hidden: 8,
        heads: 2,
        ffn_dim: 16,
        cameras: 1,
        top_k: 5,
        ..HeadConfig::default()
    }
}

fn composite_cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let d = 8;
    let sensors = std::rc::Rc::new(Sensors::new(d, &mut rng));
    let mut cases: Vec<Case> = Vec::new();

    let mut store = ParamStore::new();
    let q = store.add("q", uniform(&mut rng, &[5, d], -1.0, 1.0))?;
    let phi = Linear::register(&mut store, "phi", d, 3, &mut uniform_init(&mut rng))?;
    let cross = CrossAttentionParams::register(&mut store, "cross", d, 1, &mut uniform_init(&mut rng))?;
    let params: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
    let s = sensors.clone();
    cases.push((
        "msf_cross_attention",
        Box::new(move |tape, v| {
            let b = Bound::from_vars(v.to_vec());
            probe(msf_cross_attention(b.var(q), &s.ctx(tape), &phi, &cross, AttentionWeighting::Sigmoid, &b)?)
        }),
        params,
    ));

    let mut store = ParamStore::new();
    let head = HeadParams::random(&mut store, &small_head(1), &mut rng)?;
    let params: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
    let s = sensors.clone();
    cases.push((
        "msf_block",
        Box::new(move |tape, v| {
            let b = Bound::from_vars(v.to_vec());
            probe(msf_block(b.var(head.queries), &s.ctx(tape), &head.blocks[0], &head, &b)?)
        }),
        params,
    ));

    let mut store = ParamStore::new();
    let head = HeadParams::random(&mut store, &small_head(2), &mut rng)?;
    let params: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
    let gts = vec![
        Box3D {
            center: [3.0, 1.0, 0.0],
            size: [1.9, 4.5, 1.6],
            yaw: 0.3,
            velocity: [1.0, 0.0],
            class: 0,
            score: 1.0,
        },
        Box3D {
            center: [6.0, -2.0, -0.5],
            size: [0.7, 0.8, 1.8],
            yaw: -1.2,
            velocity: [0.0, 0.5],
            class: 8,
            score: 1.0,
        },
    ];
    let s = sensors;
    cases.push((
        "set_loss",
        Box::new(move |tape, v| {
            let b = Bound::from_vars(v.to_vec());
            let outs = run_head(b.var(head.queries), &s.ctx(tape), &head, &s.bounds, &b)?;
            Ok(set_loss(&outs, &gts, &CostWeights::default(), &FocalParams::default(), &s.bounds)?.0)
        }),
        params,
    ));
    Ok(cases)
}

fn run(cases: Vec<Case>, tolerance: f64) -> Result<Vec<CaseResult>> {
    cases
        .into_iter()
        .map(|(name, f, params)| {
            let r = grad_check(f, &params, EPS, COORDS_PER_GROUP)?;
            Ok(CaseResult {
                name: name.to_string(),
                tolerance,
                max_rel_err: r.max_rel_err,
                coords_checked: r.coords_checked,
            })
        })
        .collect()
}

pub fn run_primitives() -> Result<Vec<CaseResult>> {
    run(primitive_cases(), PRIMITIVE_TOLERANCE)
}

pub fn run_composites() -> Result<Vec<CaseResult>> {
    run(composite_cases()?, COMPOSITE_TOLERANCE)
}

/// Every case, primitives first.
pub fn run_suite() -> Result<Vec<CaseResult>> {
    let mut all = run_primitives()?;
    all.extend(run_composites()?);
    Ok(all)
}
