//! Center-distance detection metrics: AP per class and threshold, the five
//! true-positive error means and the combined detection score.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{normalize_yaw, Box3D, CLASS_NAMES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample: String,
    pub det: Box3D,
    #[serde(default)]
    pub attribute: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub sample: String,
    pub gt: Box3D,
    #[serde(default)]
    pub attribute: Option<String>,
}

/// Half-open `[lo, hi)` bin; `hi = None` is unbounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: Option<f64>,
}

impl Bin {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && self.hi.is_none_or(|h| v < h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("[{}, {})", self.lo, h),
            None => format!("[{}, inf)", self.lo),
        }
    }
}

fn bins(edges: &[(f64, Option<f64>)]) -> Vec<Bin> {
    edges.iter().map(|&(lo, hi)| Bin { lo, hi }).collect()
}

pub fn default_distance_bins() -> Vec<Bin> {
    bins(&[(0.0, Some(20.0)), (20.0, Some(30.0)), (30.0, None)])
}

pub fn default_size_bins() -> Vec<Bin> {
    bins(&[(0.0, Some(4.0)), (4.0, None)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub min_recall: f64,
    pub min_precision: f64,
    pub tp_threshold: f64,
    pub classes: Vec<String>,
    /// AAE reported when no ground truth carries an attribute.
    pub default_aae: f64,
    pub distance_bins: Option<Vec<Bin>>,
    pub size_bins: Option<Vec<Bin>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            min_recall: 0.1,
            min_precision: 0.1,
            tp_threshold: 2.0,
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            default_aae: 0.0,
            distance_bins: None,
            size_bins: None,
        }
    }
}

impl EvalConfig {
    pub fn with_bins(mut self) -> Self {
        self.distance_bins = Some(default_distance_bins());
        self.size_bins = Some(default_size_bins());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|t| !(*t > 0.0) || !t.is_finite())
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::contract(format!(
                "distance thresholds must be positive and ascending, got {:?}",
                self.thresholds
            )));
        }
        if !(0.0..1.0).contains(&self.min_recall) || !(0.0..1.0).contains(&self.min_precision) {
            return Err(Error::contract("min_recall and min_precision must lie in [0, 1)"));
        }
        if !(self.tp_threshold > 0.0) {
            return Err(Error::contract("tp_threshold must be positive"));
        }
        for c in &self.classes {
            if !CLASS_NAMES.contains(&c.as_str()) {
                return Err(Error::input(format!("unknown class '{c}' in the evaluation config")));
            }
        }
        Ok(())
    }
}

/// Greedy matching outcome for one class at one threshold. `tp[k]` and the
/// pairs refer to positions in the score-sorted prediction list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassMatch {
    pub tp: Vec<bool>,
    /// `(prediction position, ground-truth position)`.
    pub pairs: Vec<(usize, usize)>,
    pub false_negatives: usize,
}

pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// Prediction order used everywhere: score descending, then sample id, then
/// input position.
pub fn sort_order(preds: &[&DetectionRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        preds[b]
            .det
            .score
            .total_cmp(&preds[a].det.score)
            .then_with(|| preds[a].sample.cmp(&preds[b].sample))
            .then(a.cmp(&b))
    });
    idx
}

/// Each prediction, in the given order, claims the nearest unclaimed ground
/// truth of its sample whose ground-plane center distance is below
/// `threshold`.
pub fn match_by_center_distance(
    preds: &[&DetectionRecord],
    gts: &[&GroundTruthRecord],
    threshold: f64,
) -> ClassMatch {
    let mut by_sample: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_sample.entry(g.sample.as_str()).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let mut out = ClassMatch {
        tp: Vec::with_capacity(preds.len()),
        ..ClassMatch::default()
    };
    for (k, p) in preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &g in by_sample.get(p.sample.as_str()).map_or(&[][..], |v| v.as_slice()) {
            if taken[g] {
                continue;
            }
            let d = center_distance(&p.det, &gts[g].gt);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((g, d));
            }
        }
        match best {
            Some((g, d)) if d < threshold => {
                taken[g] = true;
                out.pairs.push((k, g));
                out.tp.push(true);
            }
            _ => out.tp.push(false),
        }
    }
    out.false_negatives = gts.len() - out.pairs.len();
    out
}

/// `np.interp` on a non-decreasing `xp`, with `fp[0]` to the left and
/// `right` beyond the last sample.
fn interp(x: f64, xp: &[f64], fp: &[f64], right: f64) -> f64 {
    let last = xp.len() - 1;
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[last] {
        return right;
    }
    if x == xp[last] {
        return fp[last];
    }
    let j = xp.partition_point(|&v| v <= x) - 1;
    let t = (x - xp[j]) / (xp[j + 1] - xp[j]);
    fp[j] + t * (fp[j + 1] - fp[j])
}

/// Recall sampling points of the precision curve.
pub const RECALL_SAMPLES: usize = 101;

/// Normalized AP of a score-ordered TP/FP sequence over `npos` ground
/// truths.
///
/// Precision is interpolated onto 101 evenly spaced recall values (zero past
/// the highest recall reached); samples above `min_recall` contribute
/// `max(p − min_precision, 0)` and the mean is rescaled by
/// `1 / (1 − min_precision)`.
pub fn average_precision(tp: &[bool], npos: usize, min_recall: f64, min_precision: f64) -> f64 {
    if npos == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut rec = Vec::with_capacity(tp.len());
    let mut prec = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0.0, 0.0);
    for &t in tp {
        if t {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        rec.push(ctp / npos as f64);
        prec.push(ctp / (ctp + cfp));
    }
    let steps = (RECALL_SAMPLES - 1) as f64;
    let first = (steps * min_recall).round() as usize + 1;
    let kept: Vec<f64> = (first..RECALL_SAMPLES)
        .map(|i| (interp(i as f64 / steps, &rec, &prec, 0.0) - min_precision).max(0.0))
        .collect();
    if kept.is_empty() {
        return 0.0;
    }
    (kept.iter().sum::<f64>() / kept.len() as f64 / (1.0 - min_precision)).min(1.0)
}

/// Means of the true-positive errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
        aae: 1.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// `1 − IoU` of two boxes moved to a common center and heading.
pub fn scale_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|k| a.size[k].min(b.size[k])).product();
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// Smallest absolute heading difference, in `[0, π]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    normalize_yaw(a - b).abs().min(PI)
}

/// Error means over matched pairs; every error is 1 when there are none.
pub fn tp_errors(pairs: &[(&DetectionRecord, &GroundTruthRecord)], default_aae: f64) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&DetectionRecord, &GroundTruthRecord) -> f64| pairs.iter().map(|(p, g)| f(p, g)).sum::<f64>() / n;
    let with_attr: Vec<_> = pairs.iter().filter(|(_, g)| g.attribute.is_some()).collect();
    let aae = if with_attr.is_empty() {
        default_aae
    } else {
        let hits = with_attr.iter().filter(|(p, g)| p.attribute == g.attribute).count();
        1.0 - hits as f64 / with_attr.len() as f64
    };
    TpErrors {
        ate: mean(&|p, g| center_distance(&p.det, &g.gt)),
        ase: mean(&|p, g| scale_error(&p.det, &g.gt)),
        aoe: mean(&|p, g| yaw_error(p.det.yaw, g.gt.yaw)),
        ave: mean(&|p, g| (p.det.velocity[0] - g.gt.velocity[0]).hypot(p.det.velocity[1] - g.gt.velocity[1])),
        aae,
    }
}

/// `(5·mAP + Σ (1 − min(1, e))) / 10`.
pub fn nds(map: f64, tp_means: &[f64; 5]) -> f64 {
    (5.0 * map + tp_means.iter().map(|e| 1.0 - e.min(1.0)).sum::<f64>()) / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// AP at each distance threshold, in config order.
    pub ap: Vec<f64>,
    pub tp: TpErrors,
    pub num_gt: usize,
    pub num_pred: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedMap {
    pub bin: Bin,
    pub map: f64,
    pub num_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground truth.
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub nds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_by_distance: Option<Vec<BinnedMap>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_by_size: Option<Vec<BinnedMap>>,
}

impl MetricsReport {
    pub fn tp_means(&self) -> [f64; 5] {
        [self.mate, self.mase, self.maoe, self.mave, self.maae]
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}", "", "mAP", "mATE", "mASE", "mAOE", "mAVE", "mAAE", "NDS");
        let _ = writeln!(
            s,
            "{:<22}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}",
            "overall", self.map, self.mate, self.mase, self.maoe, self.mave, self.maae, self.nds
        );
        for (name, c) in &self.per_class {
            let ap = c.ap.iter().sum::<f64>() / c.ap.len() as f64;
            let t = &c.tp;
            let _ = writeln!(
                s,
                "{:<22}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}",
                name, ap, t.ate, t.ase, t.aoe, t.ave, t.aae
            );
        }
        for (title, table) in [("distance", &self.map_by_distance), ("size", &self.map_by_size)] {
            if let Some(rows) = table {
                let _ = writeln!(s, "mAP by {title}:");
                for r in rows {
                    let _ = writeln!(s, "  {:<18}{:>8.3}  ({} gt)", r.bin.label(), r.map, r.num_gt);
                }
            }
        }
        s
    }
}

fn check_inputs(preds: &[DetectionRecord], gts: &[GroundTruthRecord], cfg: &EvalConfig) -> Result<()> {
    cfg.validate()?;
    let mut unknown: Vec<String> = Vec::new();
    for p in preds {
        let label = CLASS_NAMES.get(p.det.class).map(|s| s.to_string());
        match label {
            Some(l) if cfg.classes.contains(&l) => {}
            Some(l) => unknown.push(l),
            None => unknown.push(format!("#{}", p.det.class)),
        }
        if !(0.0..=1.0).contains(&p.det.score) {
            return Err(Error::input(format!(
                "detection score {} outside [0, 1] in sample {}",
                p.det.score, p.sample
            )));
        }
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::input(format!("unknown detection classes: {}", unknown.join(", "))));
    }
    for g in gts {
        g.gt.validate()?;
        if CLASS_NAMES.get(g.gt.class).is_none_or(|l| !cfg.classes.iter().any(|c| c == l)) {
            return Err(Error::input(format!("ground truth with unknown class id {}", g.gt.class)));
        }
    }
    Ok(())
}

struct ClassData<'a> {
    preds: Vec<&'a DetectionRecord>,
    gts: Vec<&'a GroundTruthRecord>,
}

fn split_by_class<'a>(preds: &'a [DetectionRecord], gts: &'a [GroundTruthRecord], class: usize) -> ClassData<'a> {
    let p: Vec<&DetectionRecord> = preds.iter().filter(|p| p.det.class == class).collect();
    let order = sort_order(&p);
    ClassData {
        preds: order.into_iter().map(|i| p[i]).collect(),
        gts: gts.iter().filter(|g| g.gt.class == class).collect(),
    }
}

fn class_ids(cfg: &EvalConfig) -> Vec<usize> {
    CLASS_NAMES
        .iter()
        .enumerate()
        .filter(|(_, n)| cfg.classes.iter().any(|c| c == *n))
        .map(|(i, _)| i)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// mAP restricted to each bin of `key`. Ground truths fall in the bin of
/// their own key; a prediction takes the bin of the ground truth it matched,
/// or its own when unmatched.
pub fn binned_map(
    preds: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    cfg: &EvalConfig,
    bins: &[Bin],
    key: impl Fn(&Box3D) -> f64,
) -> Result<Vec<BinnedMap>> {
    check_inputs(preds, gts, cfg)?;
    let mut aps: Vec<Vec<f64>> = vec![Vec::new(); bins.len()];
    let mut counts = vec![0; bins.len()];
    let bin_of = |b: &Box3D| bins.iter().position(|x| x.contains(key(b)));
    for class in class_ids(cfg) {
        let cd = split_by_class(preds, gts, class);
        let gt_bins: Vec<Option<usize>> = cd.gts.iter().map(|g| bin_of(&g.gt)).collect();
        for (b, count) in counts.iter_mut().enumerate() {
            *count += gt_bins.iter().filter(|x| **x == Some(b)).count();
        }
        for &th in &cfg.thresholds {
            let m = match_by_center_distance(&cd.preds, &cd.gts, th);
            let mut pred_bins: Vec<Option<usize>> = cd.preds.iter().map(|p| bin_of(&p.det)).collect();
            for &(k, g) in &m.pairs {
                pred_bins[k] = gt_bins[g];
            }
            for b in 0..bins.len() {
                let npos = gt_bins.iter().filter(|x| **x == Some(b)).count();
                if npos == 0 {
                    continue;
                }
                let tp: Vec<bool> = (0..cd.preds.len())
                    .filter(|&k| pred_bins[k] == Some(b))
                    .map(|k| m.tp[k])
                    .collect();
                aps[b].push(average_precision(&tp, npos, cfg.min_recall, cfg.min_precision));
            }
        }
    }
    Ok(bins
        .iter()
        .zip(aps.iter().zip(counts))
        .map(|(bin, (a, n))| BinnedMap {
            bin: bin.clone(),
            map: mean(a),
            num_gt: n,
        })
        .collect())
}

/// Full evaluation. Classes without ground truth are left out of every mean.
pub fn evaluate(preds: &[DetectionRecord], gts: &[GroundTruthRecord], cfg: &EvalConfig) -> Result<MetricsReport> {
    check_inputs(preds, gts, cfg)?;
    let mut per_class = BTreeMap::new();
    for class in class_ids(cfg) {
        let cd = split_by_class(preds, gts, class);
        if cd.gts.is_empty() {
            continue;
        }
        let ap = cfg
            .thresholds
            .iter()
            .map(|&th| {
                let m = match_by_center_distance(&cd.preds, &cd.gts, th);
                average_precision(&m.tp, cd.gts.len(), cfg.min_recall, cfg.min_precision)
            })
            .collect();
        let m = match_by_center_distance(&cd.preds, &cd.gts, cfg.tp_threshold);
        let pairs: Vec<_> = m.pairs.iter().map(|&(k, g)| (cd.preds[k], cd.gts[g])).collect();
        per_class.insert(
            CLASS_NAMES[class].to_string(),
            ClassMetrics {
                ap,
                tp: tp_errors(&pairs, cfg.default_aae),
                num_gt: cd.gts.len(),
                num_pred: cd.preds.len(),
            },
        );
    }
    let all_ap: Vec<f64> = per_class.values().flat_map(|c| c.ap.iter().copied()).collect();
    let map = mean(&all_ap);
    let tp_mean = |f: fn(&TpErrors) -> f64| mean(&per_class.values().map(|c| f(&c.tp)).collect::<Vec<_>>());
    let means = [
        tp_mean(|t| t.ate),
        tp_mean(|t| t.ase),
        tp_mean(|t| t.aoe),
        tp_mean(|t| t.ave),
        tp_mean(|t| t.aae),
    ];
    let map_by_distance = match &cfg.distance_bins {
        Some(b) => Some(binned_map(preds, gts, cfg, b, Box3D::ego_distance)?),
        None => None,
    };
    let map_by_size = match &cfg.size_bins {
        Some(b) => Some(binned_map(preds, gts, cfg, b, Box3D::longest_edge)?),
        None => None,
    };
    Ok(MetricsReport {
        thresholds: cfg.thresholds.clone(),
        per_class,
        map,
        mate: means[0],
        mase: means[1],
        maoe: means[2],
        mave: means[3],
        maae: means[4],
        nds: nds(map, &means),
        map_by_distance,
        map_by_size,
    })
}

#[cfg(test)]
mod tests;
