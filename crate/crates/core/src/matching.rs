//! Bipartite matching of predictions to ground truth and the set loss.

use serde::{Deserialize, Serialize};

use crate::boxes::{Box3D, REG_DIM};
use crate::error::{Error, Result};
use crate::geometry::SceneBounds;
use crate::head::LayerOutput;
use crate::tensor::{sigmoid, softplus, Tensor, Var};

/// Relative weights of the class and box terms, shared by cost and loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub w_cls: f64,
    pub w_box: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { w_cls: 2.0, w_box: 0.25 }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.w_cls) || !ok(self.w_box) || (self.w_cls == 0.0 && self.w_box == 0.0) {
            return Err(Error::contract(format!(
                "cost weights must be non-negative and not both zero, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::contract(format!(
                "focal needs alpha in (0, 1) and gamma ≥ 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Matched `(prediction, ground truth)` pairs, ordered by ground truth.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Target class per prediction; `None` for unmatched ones.
    pub fn targets(&self, n_pred: usize, gts: &[Box3D]) -> Vec<Option<usize>> {
        let mut t = vec![None; n_pred];
        for &(p, g) in &self.pairs {
            t[p] = Some(gts[g].class);
        }
        t
    }
}

/// Minimum-cost assignment of every row to a distinct column.
///
/// Shortest augmenting paths with row/column potentials, `O(M²N)`.
/// Returns the column chosen for each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let m = cost.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let n = cost[0].len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::dim("cost matrix rows differ in length"));
    }
    if m > n {
        return Err(Error::contract(format!("cannot assign {m} rows to {n} columns")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::input("cost matrix has non-finite entries"));
    }

    // 1-based arrays; column 0 is the virtual start of each augmentation.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; m];
    for j in 1..=n {
        if owner[j] != 0 {
            col[owner[j] - 1] = j - 1;
        }
    }
    Ok(col)
}

/// Sum of `cost[i][cols[i]]`.
pub fn assignment_cost(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Per-element focal terms and their logit derivatives.
fn focal_terms(x: f64, positive: bool, fp: &FocalParams) -> (f64, f64) {
    let (a, g) = (fp.alpha, fp.gamma);
    let p = sigmoid(x);
    let q = sigmoid(-x);
    if positive {
        let log_p = -softplus(-x);
        let w = q.powf(g);
        (-a * w * log_p, a * w * (g * p * log_p - q))
    } else {
        let log_q = -softplus(x);
        let w = p.powf(g);
        (-(1.0 - a) * w * log_q, (1.0 - a) * w * (p - g * q * log_q))
    }
}

/// Sigmoid focal loss over every logit, divided by `max(num_gt, 1)`.
///
/// `targets[i]` is the class of prediction `i`, or `None` when every class
/// of that row is a negative.
pub fn focal_loss<'t>(logits: Var<'t>, targets: &[Option<usize>], fp: &FocalParams, num_gt: usize) -> Result<Var<'t>> {
    fp.validate()?;
    let (n, c) = {
        let s = logits.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim(format!("{} targets for logits {s:?}", targets.len())));
        }
        (s[0], s[1])
    };
    if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
        return Err(Error::input(format!("target class {bad} with {c} logits")));
    }
    let norm = 1.0 / num_gt.max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; n * c];
    {
        let lv = logits.value();
        for i in 0..n {
            for k in 0..c {
                let (l, d) = focal_terms(lv.at2(i, k), targets[i] == Some(k), fp);
                total += l;
                grad[i * c + k] = d * norm;
            }
        }
    }
    let out = Tensor::scalar(total * norm);
    let shape = [n, c];
    Ok(logits.tape().custom("focal_loss", &[logits], out, move |g, _, _| {
        let s = g.data()[0];
        let gd = grad.iter().map(|d| d * s).collect();
        vec![Some(Tensor::new(&shape, gd).expect("shape"))]
    }))
}

/// Regression row mapped into the target encoding: sigmoid on the center
/// logits, everything else unchanged.
pub fn encode_prediction(raw: &[f64]) -> [f64; REG_DIM] {
    let mut e = [0.0; REG_DIM];
    for k in 0..REG_DIM {
        e[k] = if k < 3 { sigmoid(raw[k]) } else { raw[k] };
    }
    e
}

fn encode_target(gt: &Box3D, bounds: &SceneBounds) -> Result<[f64; REG_DIM]> {
    if !bounds.contains(&gt.center) {
        return Err(Error::contract(format!(
            "ground-truth center {:?} outside the scene bounds",
            gt.center
        )));
    }
    Ok(gt.encode(bounds))
}

/// Mean absolute difference over the 10 encoded values.
pub fn l1_box_loss(pred_raw: &[f64], gt: &Box3D, bounds: &SceneBounds) -> Result<f64> {
    if pred_raw.len() != REG_DIM {
        return Err(Error::dim(format!("regression row of length {}", pred_raw.len())));
    }
    let t = encode_target(gt, bounds)?;
    let p = encode_prediction(pred_raw);
    Ok(p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / REG_DIM as f64)
}

/// `cost[i][j]` between ground truth `i` and prediction `j`:
/// `−w_cls · p_j(class_i) + w_box · L1`.
pub fn pairwise_cost(
    reg_raw: &Tensor,
    cls_logits: &Tensor,
    gts: &[Box3D],
    w: &CostWeights,
    bounds: &SceneBounds,
) -> Result<Vec<Vec<f64>>> {
    let (n, c) = cls_logits.dims2();
    let preds: Vec<[f64; REG_DIM]> = (0..n).map(|j| encode_prediction(reg_raw.row(j))).collect();
    gts.iter()
        .map(|gt| {
            if gt.class >= c {
                return Err(Error::input(format!("ground-truth class {} with {c} logits", gt.class)));
            }
            let t = encode_target(gt, bounds)?;
            Ok((0..n)
                .map(|j| {
                    let l1 = preds[j].iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / REG_DIM as f64;
                    -w.w_cls * sigmoid(cls_logits.at2(j, gt.class)) + w.w_box * l1
                })
                .collect())
        })
        .collect()
}

/// Matches one layer's predictions to the ground truth.
pub fn match_layer(
    reg_raw: &Tensor,
    cls_logits: &Tensor,
    gts: &[Box3D],
    w: &CostWeights,
    bounds: &SceneBounds,
) -> Result<Assignment> {
    let cost = pairwise_cost(reg_raw, cls_logits, gts, w, bounds)?;
    let cols = hungarian(&cost)?;
    Ok(Assignment {
        pairs: cols.into_iter().enumerate().map(|(g, p)| (p, g)).collect(),
    })
}

/// Differentiable mean L1 over matched pairs; zero without pairs.
pub fn box_loss<'t>(reg_raw: Var<'t>, a: &Assignment, gts: &[Box3D], bounds: &SceneBounds) -> Result<Var<'t>> {
    let tape = reg_raw.tape();
    if a.pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let m = a.pairs.len();
    let rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
    let mut target = Vec::with_capacity(m * REG_DIM);
    for &(_, g) in &a.pairs {
        target.extend(encode_target(&gts[g], bounds)?);
    }
    let picked = reg_raw.gather_rows(&rows)?;
    let enc = tape.hcat(&[picked.slice_cols(0, 3)?.sigmoid(), picked.slice_cols(3, REG_DIM - 3)?])?;
    let diff = enc.sub(tape.constant(Tensor::new(&[m, REG_DIM], target)?))?;
    Ok(diff.abs().sum().scale(1.0 / (m * REG_DIM) as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `(cls, box)` per layer, unweighted.
    pub layers: Vec<(f64, f64)>,
}

/// Set loss summed over layers, each matched independently. The matching
/// is a constant of the step; gradients flow through the loss terms only.
pub fn set_loss<'t>(
    layers: &[LayerOutput<'t>],
    gts: &[Box3D],
    w: &CostWeights,
    fp: &FocalParams,
    bounds: &SceneBounds,
) -> Result<(Var<'t>, LossBreakdown, Vec<Assignment>)> {
    let Some(first) = layers.first() else {
        return Err(Error::contract("set loss needs at least one layer"));
    };
    w.validate()?;
    let tape = first.reg_raw.tape();
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut breakdown = LossBreakdown::default();
    let mut assignments = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        for (term, v) in [("classification", layer.cls_logits), ("box", layer.reg_raw)] {
            if !v.value().all_finite() {
                return Err(Error::Numeric(format!("layer {l} {term} outputs are not finite")));
            }
        }
        let a = match_layer(&layer.reg_raw.value(), &layer.cls_logits.value(), gts, w, bounds)?;
        let targets = a.targets(layer.cls_logits.rows(), gts);
        let cls = focal_loss(layer.cls_logits, &targets, fp, gts.len())?;
        let bx = box_loss(layer.reg_raw, &a, gts, bounds)?;
        for (term, v) in [("classification", cls.item()), ("box", bx.item())] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("layer {l} {term} loss is {v}")));
            }
        }
        breakdown.layers.push((cls.item(), bx.item()));
        total = total.add(cls.scale(w.w_cls))?.add(bx.scale(w.w_box))?;
        assignments.push(a);
    }
    breakdown.total = total.item();
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric("set loss is not finite".into()));
    }
    Ok((total, breakdown, assignments))
}
