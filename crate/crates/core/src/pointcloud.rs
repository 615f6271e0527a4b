//! Toy LiDAR encoders: pillarization, a max-pooled pillar feature encoder,
//! voxelization, and a four-level BEV pyramid.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, SceneBounds};
use crate::tensor::{ParamId, ParamStore, Tensor, Var};

/// Number of values per augmented pillar point.
pub const PILLAR_FEATURES: usize = 9;
pub const PYRAMID_LEVELS: usize = 4;

/// LiDAR returns as `(x, y, z, intensity)` rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::input("point cloud contains non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flat little-endian dump: `u32` count, `u32` channel count (4), then
    /// `count × 4` `f32` values.
    pub fn write_bin(&self, mut w: impl Write) -> Result<()> {
        let count = u32::try_from(self.points.len())
            .map_err(|_| Error::input("too many points for the binary dump"))?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&4u32.to_le_bytes())?;
        for p in &self.points {
            for v in p {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_bin(mut r: impl Read) -> Result<Self> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let channels = u32::from_le_bytes(word);
        if channels != 4 {
            return Err(Error::input(format!("point dump has {channels} channels, expected 4")));
        }
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let mut p = [0.0; 4];
            for v in &mut p {
                r.read_exact(&mut word)?;
                *v = f32::from_le_bytes(word) as f64;
            }
            points.push(p);
        }
        Self::new(points)
    }
}

/// Points of one BEV cell with their augmented features
/// `(x, y, z, intensity, x−x̄, y−ȳ, z−z̄, x−x_c, y−y_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pillar {
    /// `(i, j)`: x index, y index.
    pub cell: (usize, usize),
    pub points: Vec<[f64; 4]>,
    pub features: Vec<[f64; PILLAR_FEATURES]>,
}

/// Result of [`pillarize`] together with the point accounting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pillarization {
    pub pillars: Vec<Pillar>,
    /// Dropped because a pillar was full or the pillar budget was spent.
    pub dropped_by_cap: usize,
    pub out_of_range: usize,
}

impl Pillarization {
    pub fn retained(&self) -> usize {
        self.pillars.iter().map(|p| p.points.len()).sum()
    }
}

/// Sum that does not depend on the order of `values`.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Groups points into BEV pillars.
///
/// Points are visited in input order. A point whose cell already holds
/// `max_points` points, or which would open a pillar beyond `max_pillars`,
/// is dropped. Pillars appear in the order their cells are first seen.
pub fn pillarize(cloud: &PointCloud, grid: &BevGridSpec, max_points: usize, max_pillars: usize) -> Pillarization {
    let mut out = Pillarization::default();
    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    for p in &cloud.points {
        let Some(cell) = grid.cell_of(p[0], p[1]) else {
            out.out_of_range += 1;
            continue;
        };
        let idx = match slot.get(&cell) {
            Some(&i) => i,
            None => {
                if out.pillars.len() >= max_pillars {
                    out.dropped_by_cap += 1;
                    continue;
                }
                slot.insert(cell, out.pillars.len());
                out.pillars.push(Pillar {
                    cell,
                    points: Vec::new(),
                    features: Vec::new(),
                });
                out.pillars.len() - 1
            }
        };
        let pillar = &mut out.pillars[idx];
        if pillar.points.len() >= max_points {
            out.dropped_by_cap += 1;
            continue;
        }
        pillar.points.push(*p);
    }
    for pillar in &mut out.pillars {
        let n = pillar.points.len() as f64;
        let mut mean = [0.0; 3];
        for (k, m) in mean.iter_mut().enumerate() {
            let mut col: Vec<f64> = pillar.points.iter().map(|p| p[k]).collect();
            *m = order_free_sum(&mut col) / n;
        }
        let (xc, yc) = grid.cell_center(pillar.cell.0, pillar.cell.1);
        pillar.features = pillar
            .points
            .iter()
            .map(|p| {
                [
                    p[0],
                    p[1],
                    p[2],
                    p[3],
                    p[0] - mean[0],
                    p[1] - mean[1],
                    p[2] - mean[2],
                    p[0] - xc,
                    p[1] - yc,
                ]
            })
            .collect();
    }
    out
}

/// Dense BEV map `[ny, nx, c]` where each occupied cell holds the
/// element-wise max over its points of `relu(aug · W + b)`.
pub fn encode_pillars<'t>(
    pillars: &[Pillar],
    grid: &BevGridSpec,
    weight: Var<'t>,
    bias: Var<'t>,
) -> Result<Var<'t>> {
    let ws = weight.shape();
    if ws.len() != 2 || ws[0] != PILLAR_FEATURES {
        return Err(Error::dim(format!("pillar encoder weight must be [9, c], got {ws:?}")));
    }
    let c = ws[1];
    let (h, w) = (grid.ny(), grid.nx());
    let tape = weight.tape();
    let total: usize = pillars.iter().map(|p| p.features.len()).sum();
    if total == 0 {
        return Ok(tape.constant(Tensor::zeros(&[h, w, c])));
    }
    let aug = Tensor::new(
        &[total, PILLAR_FEATURES],
        pillars.iter().flat_map(|p| p.features.iter().flatten().copied()).collect(),
    )?;
    let per_point = tape.constant(aug).linear(weight, bias)?.relu();

    // (flat cell, first row, row count) per pillar
    let mut groups = Vec::with_capacity(pillars.len());
    let mut row = 0;
    for p in pillars {
        if p.features.is_empty() {
            continue;
        }
        let (i, j) = p.cell;
        groups.push((j * w + i, row, p.features.len()));
        row += p.features.len();
    }
    let mut map = vec![0.0; h * w * c];
    let mut argmax = vec![0usize; groups.len() * c];
    {
        let pv = per_point.value();
        let pd = pv.data();
        for (g, &(cell, start, count)) in groups.iter().enumerate() {
            for k in 0..c {
                let mut best = start;
                for r in start + 1..start + count {
                    if pd[r * c + k] > pd[best * c + k] {
                        best = r;
                    }
                }
                argmax[g * c + k] = best;
                map[cell * c + k] = pd[best * c + k];
            }
        }
    }
    let out = Tensor::new(&[h, w, c], map)?;
    Ok(tape.custom("pillar_max_scatter", &[per_point], out, move |g, _, _| {
        let gd = g.data();
        let mut gp = vec![0.0; total * c];
        for (gi, &(cell, _, _)) in groups.iter().enumerate() {
            for k in 0..c {
                gp[argmax[gi * c + k] * c + k] += gd[cell * c + k];
            }
        }
        vec![Some(Tensor::new(&[total, c], gp).expect("shape"))]
    }))
}

/// One occupied voxel: integer index, mean `(x, y, z, intensity)` and count.
#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub index: [i64; 3],
    pub mean: [f64; 4],
    pub count: usize,
}

/// Groups the points inside `bounds` into cubic voxels of side `voxel_size`.
/// Member points are summed in input order; voxels come back sorted by index.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64, bounds: &SceneBounds) -> Result<Vec<Voxel>> {
    if !(voxel_size > 0.0) {
        return Err(Error::contract("voxel size must be positive"));
    }
    let mut acc: BTreeMap<[i64; 3], ([f64; 4], usize)> = BTreeMap::new();
    for p in &cloud.points {
        let xyz = [p[0], p[1], p[2]];
        if !bounds.contains(&xyz) {
            continue;
        }
        let index = voxel_index(&xyz, voxel_size, bounds);
        let e = acc.entry(index).or_insert(([0.0; 4], 0));
        for k in 0..4 {
            e.0[k] += p[k];
        }
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(index, (sum, count))| Voxel {
            index,
            mean: sum.map(|s| s / count as f64),
            count,
        })
        .collect())
}

pub fn voxel_index(p: &[f64; 3], voxel_size: f64, bounds: &SceneBounds) -> [i64; 3] {
    [0, 1, 2].map(|k| ((p[k] - bounds.min[k]) / voxel_size).floor() as i64)
}

/// Height-compressed BEV map `[ny, nx, 4]`: each cell holds the mean of the
/// voxel means whose voxel center falls in it.
pub fn voxel_bev_map(voxels: &[Voxel], voxel_size: f64, bounds: &SceneBounds, grid: &BevGridSpec) -> Tensor {
    let (h, w) = (grid.ny(), grid.nx());
    let mut sum = vec![0.0; h * w * 4];
    let mut count = vec![0usize; h * w];
    for v in voxels {
        let cx = bounds.min[0] + (v.index[0] as f64 + 0.5) * voxel_size;
        let cy = bounds.min[1] + (v.index[1] as f64 + 0.5) * voxel_size;
        if let Some((i, j)) = grid.cell_of(cx, cy) {
            let cell = j * w + i;
            for k in 0..4 {
                sum[cell * 4 + k] += v.mean[k];
            }
            count[cell] += 1;
        }
    }
    for (cell, &n) in count.iter().enumerate() {
        if n > 0 {
            for k in 0..4 {
                sum[cell * 4 + k] /= n as f64;
            }
        }
    }
    Tensor::new(&[h, w, 4], sum).expect("grid extents are positive")
}

/// 2×2 average pooling of `[h, w, c]` to `[ceil(h/2), ceil(w/2), c]`; edge
/// windows average only the cells that exist.
pub fn avg_pool_2x2(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("avg_pool_2x2 expects [h, w, c], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; ho * wo * c];
    {
        let xv = x.value();
        let xd = xv.data();
        for oy in 0..ho {
            for ox in 0..wo {
                let ys = 2 * oy..(2 * oy + 2).min(h);
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let n = (ys.len() * xs.len()) as f64;
                let o = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                for y in ys {
                    for xx in xs.clone() {
                        let src = &xd[(y * w + xx) * c..(y * w + xx + 1) * c];
                        for (ov, sv) in o.iter_mut().zip(src) {
                            *ov += sv;
                        }
                    }
                }
                for ov in o.iter_mut() {
                    *ov /= n;
                }
            }
        }
    }
    let t = Tensor::new(&[ho, wo, c], out)?;
    Ok(x.tape().custom("avg_pool_2x2", &[x], t, move |g, _, _| {
        let gd = g.data();
        let mut gx = vec![0.0; h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let (oy, ox) = (y / 2, xx / 2);
                let n = (((2 * oy + 2).min(h) - 2 * oy) * ((2 * ox + 2).min(w) - 2 * ox)) as f64;
                for k in 0..c {
                    gx[(y * w + xx) * c + k] = gd[(oy * wo + ox) * c + k] / n;
                }
            }
        }
        vec![Some(Tensor::new(&[h, w, c], gx).expect("shape"))]
    }))
}

/// Applies the same linear map to the channel vector of every cell.
pub fn per_cell_linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("per-cell linear expects [h, w, c], got {s:?}")));
    }
    let flat = x.reshape(&[s[0] * s[1], s[2]])?;
    let y = flat.linear(weight, bias)?;
    let c_out = y.cols();
    y.reshape(&[s[0], s[1], c_out])
}

/// Four BEV maps with successive 2× downsampling.
#[derive(Clone, Debug)]
pub struct BevFeaturePyramid<'t> {
    pub levels: Vec<Var<'t>>,
}

/// `level 1 = T₁(base)`, `level k+1 = T_{k+1}(avgpool(level k))`, where each
/// `T` is a per-cell linear map given as `(weight, bias)`.
pub fn build_bev_pyramid<'t>(base: Var<'t>, transforms: &[(Var<'t>, Var<'t>)]) -> Result<BevFeaturePyramid<'t>> {
    let s = base.shape();
    if s.len() != 3 || s[0] < 8 || s[1] < 8 {
        return Err(Error::dim(format!("BEV base map must be at least [8, 8, c], got {s:?}")));
    }
    if transforms.len() != PYRAMID_LEVELS {
        return Err(Error::dim(format!("need {PYRAMID_LEVELS} level transforms, got {}", transforms.len())));
    }
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    let mut cur = per_cell_linear(base, transforms[0].0, transforms[0].1)?;
    levels.push(cur);
    for (w, b) in &transforms[1..] {
        cur = per_cell_linear(avg_pool_2x2(cur)?, *w, *b)?;
        levels.push(cur);
    }
    Ok(BevFeaturePyramid { levels })
}

/// Which LiDAR stand-in produces the BEV base map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LidarEncoder {
    #[default]
    Pillars,
    Voxels,
}

/// Parameter handles of the LiDAR branch.
#[derive(Clone, Debug)]
pub struct BevEncoderParams {
    pub kind: LidarEncoder,
    /// Pillar point encoder `9 → c` (unused for voxels).
    pub point: Option<(ParamId, ParamId)>,
    pub levels: Vec<(ParamId, ParamId)>,
}

impl BevEncoderParams {
    pub fn register(
        store: &mut ParamStore,
        kind: LidarEncoder,
        channels: usize,
        init: &mut impl FnMut(usize, usize) -> Tensor,
    ) -> Result<Self> {
        let point = match kind {
            LidarEncoder::Pillars => Some((
                store.add("bev.pillar.weight", init(PILLAR_FEATURES, channels))?,
                store.add("bev.pillar.bias", Tensor::zeros(&[channels]))?,
            )),
            LidarEncoder::Voxels => None,
        };
        let base_c = match kind {
            LidarEncoder::Pillars => channels,
            LidarEncoder::Voxels => 4,
        };
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        for l in 0..PYRAMID_LEVELS {
            let cin = if l == 0 { base_c } else { channels };
            levels.push((
                store.add(format!("bev.level{l}.weight"), init(cin, channels))?,
                store.add(format!("bev.level{l}.bias"), Tensor::zeros(&[channels]))?,
            ));
        }
        Ok(Self { kind, point, levels })
    }
}

/// Per-scene LiDAR input, prepared once since grouping has no parameters.
#[derive(Clone, Debug)]
pub enum LidarInput {
    Pillars(Vec<Pillar>),
    VoxelMap(Tensor),
}

impl LidarInput {
    pub fn prepare(
        kind: LidarEncoder,
        cloud: &PointCloud,
        grid: &BevGridSpec,
        bounds: &SceneBounds,
        caps: (usize, usize),
        voxel_size: f64,
    ) -> Result<Self> {
        Ok(match kind {
            LidarEncoder::Pillars => LidarInput::Pillars(pillarize(cloud, grid, caps.0, caps.1).pillars),
            LidarEncoder::Voxels => {
                let vox = voxelize(cloud, voxel_size, bounds)?;
                LidarInput::VoxelMap(voxel_bev_map(&vox, voxel_size, bounds, grid))
            }
        })
    }
}

/// Runs the LiDAR branch end to end on bound parameters.
pub fn encode_bev<'t>(
    input: &LidarInput,
    params: &BevEncoderParams,
    grid: &BevGridSpec,
    var: impl Fn(ParamId) -> Var<'t>,
) -> Result<BevFeaturePyramid<'t>> {
    let transforms: Vec<_> = params.levels.iter().map(|&(w, b)| (var(w), var(b))).collect();
    let tape = transforms[0].0.tape();
    let base = match input {
        LidarInput::Pillars(pillars) => {
            let (w, b) = params
                .point
                .ok_or_else(|| Error::contract("pillar input given to a voxel encoder"))?;
            encode_pillars(pillars, grid, var(w), var(b))?
        }
        LidarInput::VoxelMap(map) => tape.constant(map.clone()),
    };
    build_bev_pyramid(base, &transforms)
}
