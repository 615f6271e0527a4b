//! Camera models, scene bounds, reference-point decoding and the
//! projection + bilinear sampling used to pull image and BEV features for a
//! set of 3D points.
//!
//! Normalized coordinates are `(x, y)` pairs in `[0, 1]`, `x` running along
//! the map width and `y` along its height. Sampling uses the align-corners
//! convention: `0` lands on the first cell center, `1` on the last.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Points closer than this (meters along the optical axis) are not projected.
pub const MIN_DEPTH: f64 = 0.1;

const ORTHO_TOL: f64 = 1e-9;

pub(crate) fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose3(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation about the vertical (z) axis.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Ego-to-camera rotation for a camera looking horizontally along ego yaw
/// `yaw`. Ego frame: x forward, y left, z up. Camera frame: x right, y down,
/// z along the optical axis.
pub fn camera_rotation_for_yaw(yaw: f64) -> Mat3 {
    let axes: Mat3 = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
    mat_mul(&axes, &rot_z(-yaw))
}

/// Pinhole camera with ego-to-camera extrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl CameraModel {
    pub fn new(intrinsics: Mat3, rotation: Mat3, translation: Vec3, image_size: (usize, usize)) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            image_size,
        };
        cam.validate(false)?;
        Ok(cam)
    }

    /// Like [`CameraModel::new`] but accepts a nonzero skew term `K[0][1]`.
    pub fn with_skew(intrinsics: Mat3, rotation: Mat3, translation: Vec3, image_size: (usize, usize)) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            image_size,
        };
        cam.validate(true)?;
        Ok(cam)
    }

    /// Zero-skew camera with square pixels.
    pub fn pinhole(
        focal: f64,
        principal: (f64, f64),
        image_size: (usize, usize),
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        let k = [
            [focal, 0.0, principal.0],
            [0.0, focal, principal.1],
            [0.0, 0.0, 1.0],
        ];
        Self::new(k, rotation, translation, image_size)
    }

    /// Camera mounted at ego position `position`, looking along ego yaw `yaw`.
    pub fn looking_at_yaw(
        focal: f64,
        image_size: (usize, usize),
        yaw: f64,
        position: Vec3,
    ) -> Result<Self> {
        let r = camera_rotation_for_yaw(yaw);
        let rp = mat_vec(&r, &position);
        let t = [-rp[0], -rp[1], -rp[2]];
        let principal = (image_size.0 as f64 / 2.0, image_size.1 as f64 / 2.0);
        Self::pinhole(focal, principal, image_size, r, t)
    }

    /// Checks the intrinsics layout and that the rotation is proper.
    pub fn validate(&self, allow_skew: bool) -> Result<()> {
        let k = &self.intrinsics;
        if k[2] != [0.0, 0.0, 1.0] || k[1][0] != 0.0 {
            return Err(Error::input(format!("malformed intrinsics {k:?}")));
        }
        if !allow_skew && k[0][1] != 0.0 {
            return Err(Error::input("nonzero skew in intrinsics"));
        }
        if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
            return Err(Error::input("focal lengths must be positive"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::input("image size must be positive"));
        }
        let rrt = mat_mul(&self.rotation, &transpose3(&self.rotation));
        for (i, row) in rrt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > ORTHO_TOL {
                    return Err(Error::input("camera rotation is not orthonormal"));
                }
            }
        }
        if (det3(&self.rotation) - 1.0).abs() > ORTHO_TOL {
            return Err(Error::input("camera rotation has determinant != 1"));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Pixel coordinates of an ego-frame point, or `None` when it is behind
    /// the camera (depth ≤ [`MIN_DEPTH`]) or lands outside the image.
    pub fn project_pixel(&self, p: &Vec3) -> Option<(f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= MIN_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        let u = (k[0][0] * c[0] + k[0][1] * c[1]) / c[2] + k[0][2];
        let v = k[1][1] * c[1] / c[2] + k[1][2];
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        if !(0.0..=w).contains(&u) || !(0.0..=h).contains(&v) {
            return None;
        }
        Some((u, v))
    }

    /// Ego-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        let c = [x * depth, y * depth, depth];
        let d = [
            c[0] - self.translation[0],
            c[1] - self.translation[1],
            c[2] - self.translation[2],
        ];
        mat_vec(&transpose3(&self.rotation), &d)
    }
}

/// Axis-aligned detection volume in the ego frame (meters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for SceneBounds {
    fn default() -> Self {
        Self {
            min: [-51.2, -51.2, -5.0],
            max: [51.2, 51.2, 3.0],
        }
    }
}

impl SceneBounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|i| !(self.min[i] < self.max[i])) {
            return Err(Error::input(format!(
                "scene bounds need min < max, got {:?} / {:?}",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Maps a point to `[0, 1]³`.
    pub fn normalize(&self, p: &Vec3) -> Vec3 {
        let e = self.extent();
        [
            (p[0] - self.min[0]) / e[0],
            (p[1] - self.min[1]) / e[1],
            (p[2] - self.min[2]) / e[2],
        ]
    }
}

/// Bird's-eye-view raster. Cell `(i, j)` covers
/// `[x_min + i·cell, x_min + (i+1)·cell) × [y_min + j·cell, …)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub cell_size: f64,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self {
            x_range: (-51.2, 51.2),
            y_range: (-51.2, 51.2),
            cell_size: 0.2,
        }
    }
}

impl BevGridSpec {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), cell_size: f64) -> Result<Self> {
        let g = Self {
            x_range,
            y_range,
            cell_size,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) {
            return Err(Error::input("BEV cell size must be positive"));
        }
        for (lo, hi) in [self.x_range, self.y_range] {
            if !(lo < hi) {
                return Err(Error::input(format!("BEV range ({lo}, {hi}) is empty")));
            }
            let cells = (hi - lo) / self.cell_size;
            if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0) {
                return Err(Error::input(format!(
                    "BEV range ({lo}, {hi}) is not a multiple of cell size {}",
                    self.cell_size
                )));
            }
        }
        Ok(())
    }

    /// Number of cells along x.
    pub fn nx(&self) -> usize {
        ((self.x_range.1 - self.x_range.0) / self.cell_size).round() as usize
    }

    /// Number of cells along y.
    pub fn ny(&self) -> usize {
        ((self.y_range.1 - self.y_range.0) / self.cell_size).round() as usize
    }

    /// Cell holding `(x, y)` using `floor((v − min) / cell)`; the upper range
    /// edge is exclusive.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.x_range.0) / self.cell_size).floor();
        let fj = ((y - self.y_range.0) / self.cell_size).floor();
        if fi < 0.0 || fj < 0.0 || !fi.is_finite() || !fj.is_finite() {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        (i < self.nx() && j < self.ny()).then_some((i, j))
    }

    /// Ego-frame center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_range.0 + (i as f64 + 0.5) * self.cell_size,
            self.y_range.0 + (j as f64 + 0.5) * self.cell_size,
        )
    }
}

/// Multi-scale stack of dense `[h, w, c]` feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

/// Decoded 3D anchor points, one per query.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePoints {
    pub points: Vec<Vec3>,
    pub layer: usize,
}

impl ReferencePoints {
    pub fn from_tensor(t: &Tensor, layer: usize) -> Self {
        let (n, _) = t.dims2();
        Self {
            points: (0..n).map(|i| [t.at2(i, 0), t.at2(i, 1), t.at2(i, 2)]).collect(),
            layer,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&[self.points.len(), 3], self.points.iter().flatten().copied().collect())
    }
}

/// `min + sigmoid(q·W + b) ⊙ (max − min)`, one point per query row.
pub fn decode_reference_points<'t>(
    queries: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
    bounds: &SceneBounds,
) -> Result<Var<'t>> {
    if weight.cols() != 3 {
        return Err(Error::dim(format!(
            "reference-point projection must map to 3 values, got {:?}",
            weight.shape()
        )));
    }
    queries
        .linear(weight, bias)?
        .sigmoid()
        .affine_cols(&bounds.extent(), &bounds.min)
}

/// Projects `points[n×3]` into `cam`, returning normalized image coordinates
/// (`u / width`, `v / height`) and a validity mask. Invalid rows carry
/// `(0, 0)` and receive no gradient.
pub fn project_to_image<'t>(points: Var<'t>, cam: &CameraModel) -> Result<(Var<'t>, Vec<bool>)> {
    let s = points.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::dim(format!("points must be [n, 3], got {s:?}")));
    }
    let n = s[0];
    let (w, h) = (cam.image_size.0 as f64, cam.image_size.1 as f64);
    let k = cam.intrinsics;
    let r = cam.rotation;
    let mut coords = vec![0.0; n * 2];
    let mut valid = vec![false; n];
    // d(u/w, v/h)/d(p_ego) per valid row
    let mut jac = vec![[0.0f64; 6]; n];
    {
        let pv = points.value();
        for i in 0..n {
            let p = [pv.at2(i, 0), pv.at2(i, 1), pv.at2(i, 2)];
            let Some((u, v)) = cam.project_pixel(&p) else {
                continue;
            };
            let c = cam.to_camera(&p);
            valid[i] = true;
            coords[2 * i] = u / w;
            coords[2 * i + 1] = v / h;
            let z = c[2];
            let du = [k[0][0] / z, k[0][1] / z, -(k[0][0] * c[0] + k[0][1] * c[1]) / (z * z)];
            let dv = [0.0, k[1][1] / z, -k[1][1] * c[1] / (z * z)];
            for a in 0..3 {
                let mut gu = 0.0;
                let mut gv = 0.0;
                for b in 0..3 {
                    gu += du[b] * r[b][a];
                    gv += dv[b] * r[b][a];
                }
                jac[i][a] = gu / w;
                jac[i][3 + a] = gv / h;
            }
        }
    }
    let out = Tensor::new(&[n, 2], coords)?;
    let var = points.tape().custom("project_image", &[points], out, move |g, _, _| {
        let gd = g.data();
        let mut gp = vec![0.0; n * 3];
        for i in 0..n {
            for a in 0..3 {
                gp[i * 3 + a] = gd[2 * i] * jac[i][a] + gd[2 * i + 1] * jac[i][3 + a];
            }
        }
        vec![Some(Tensor::new(&[n, 3], gp).expect("shape"))]
    });
    Ok((var, valid))
}

/// Projects `points[n×3]` onto the BEV plane: `((x − x_min)/(x_max − x_min),
/// (y − y_min)/(y_max − y_min))`, valid when inside both ranges (inclusive).
/// Height is ignored.
pub fn project_to_bev<'t>(points: Var<'t>, grid: &BevGridSpec) -> Result<(Var<'t>, Vec<bool>)> {
    let s = points.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::dim(format!("points must be [n, 3], got {s:?}")));
    }
    let n = s[0];
    let sx = 1.0 / (grid.x_range.1 - grid.x_range.0);
    let sy = 1.0 / (grid.y_range.1 - grid.y_range.0);
    let mut coords = vec![0.0; n * 2];
    let mut valid = vec![false; n];
    {
        let pv = points.value();
        for i in 0..n {
            let cx = (pv.at2(i, 0) - grid.x_range.0) * sx;
            let cy = (pv.at2(i, 1) - grid.y_range.0) * sy;
            if (0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy) {
                valid[i] = true;
                coords[2 * i] = cx;
                coords[2 * i + 1] = cy;
            }
        }
    }
    let mask = valid.clone();
    let out = Tensor::new(&[n, 2], coords)?;
    let var = points.tape().custom("project_bev", &[points], out, move |g, _, _| {
        let gd = g.data();
        let mut gp = vec![0.0; n * 3];
        for i in 0..n {
            if mask[i] {
                gp[i * 3] = gd[2 * i] * sx;
                gp[i * 3 + 1] = gd[2 * i + 1] * sy;
            }
        }
        vec![Some(Tensor::new(&[n, 3], gp).expect("shape"))]
    });
    Ok((var, valid))
}

struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    // d(fx)/d(coord x), d(fy)/d(coord y); zero where the coordinate was clamped
    dfx: f64,
    dfy: f64,
}

fn taps(cx: f64, cy: f64, h: usize, w: usize) -> Taps {
    let axis = |c: f64, n: usize| -> (usize, usize, f64, f64) {
        if n == 1 {
            return (0, 0, 0.0, 0.0);
        }
        let span = (n - 1) as f64;
        let raw = c * span;
        let (p, d) = if raw < 0.0 {
            (0.0, 0.0)
        } else if raw > span {
            (span, 0.0)
        } else {
            (raw, span)
        };
        let i0 = (p.floor() as usize).min(n - 2);
        (i0, i0 + 1, p - i0 as f64, d)
    };
    let (x0, x1, fx, dfx) = axis(cx, w);
    let (y0, y1, fy, dfy) = axis(cy, h);
    Taps {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        dfx,
        dfy,
    }
}

/// Bilinear lookup of `map[h×w×c]` at normalized `coords[n×2]`.
///
/// Rows with `valid[i] == false` produce zero vectors. Differentiable with
/// respect to both the map and the coordinates.
pub fn bilinear_sample<'t>(map: Var<'t>, coords: Var<'t>, valid: &[bool]) -> Result<Var<'t>> {
    let ms = map.shape();
    let cs = coords.shape();
    if ms.len() != 3 {
        return Err(Error::dim(format!("feature map must be [h, w, c], got {ms:?}")));
    }
    if cs.len() != 2 || cs[1] != 2 || valid.len() != cs[0] {
        return Err(Error::dim(format!(
            "coords must be [n, 2] with n mask entries, got {cs:?} and {}",
            valid.len()
        )));
    }
    let (h, w, c) = (ms[0], ms[1], ms[2]);
    let n = cs[0];
    let mut out = vec![0.0; n * c];
    let mut all_taps = Vec::with_capacity(n);
    {
        let mv = map.value();
        let md = mv.data();
        let cv = coords.value();
        for i in 0..n {
            let cx = cv.at2(i, 0);
            let cy = cv.at2(i, 1);
            if !valid[i] || !cx.is_finite() || !cy.is_finite() {
                all_taps.push(None);
                continue;
            }
            let t = taps(cx, cy, h, w);
            let wts = [
                (1.0 - t.fx) * (1.0 - t.fy),
                t.fx * (1.0 - t.fy),
                (1.0 - t.fx) * t.fy,
                t.fx * t.fy,
            ];
            let cells = [(t.y0, t.x0), (t.y0, t.x1), (t.y1, t.x0), (t.y1, t.x1)];
            let o = &mut out[i * c..(i + 1) * c];
            for (wt, (y, x)) in wts.iter().zip(cells) {
                let src = &md[(y * w + x) * c..(y * w + x + 1) * c];
                for (ov, sv) in o.iter_mut().zip(src) {
                    *ov += wt * sv;
                }
            }
            all_taps.push(Some(t));
        }
    }
    let map_needs_grad = map.requires_grad();
    let coords_need_grad = coords.requires_grad();
    let result = Tensor::new(&[n, c], out)?;
    Ok(map.tape().custom("bilinear_sample", &[map, coords], result, move |g, inputs, _| {
        let gd = g.data();
        let md = inputs[0].data();
        let mut gmap = map_needs_grad.then(|| vec![0.0; h * w * c]);
        let mut gcoord = coords_need_grad.then(|| vec![0.0; n * 2]);
        for (i, t) in all_taps.iter().enumerate() {
            let Some(t) = t else { continue };
            let gr = &gd[i * c..(i + 1) * c];
            let cells = [(t.y0, t.x0), (t.y0, t.x1), (t.y1, t.x0), (t.y1, t.x1)];
            if let Some(gm) = gmap.as_mut() {
                let wts = [
                    (1.0 - t.fx) * (1.0 - t.fy),
                    t.fx * (1.0 - t.fy),
                    (1.0 - t.fx) * t.fy,
                    t.fx * t.fy,
                ];
                for (wt, (y, x)) in wts.iter().zip(cells) {
                    let dst = &mut gm[(y * w + x) * c..(y * w + x + 1) * c];
                    for (d, gv) in dst.iter_mut().zip(gr) {
                        *d += wt * gv;
                    }
                }
            }
            if let Some(gc) = gcoord.as_mut() {
                let cell = |(y, x): (usize, usize)| &md[(y * w + x) * c..(y * w + x + 1) * c];
                let (m00, m01, m10, m11) = (cell(cells[0]), cell(cells[1]), cell(cells[2]), cell(cells[3]));
                let mut sx = 0.0;
                let mut sy = 0.0;
                for k in 0..c {
                    let dx = (1.0 - t.fy) * (m01[k] - m00[k]) + t.fy * (m11[k] - m10[k]);
                    let dy = (1.0 - t.fx) * (m10[k] - m00[k]) + t.fx * (m11[k] - m01[k]);
                    sx += gr[k] * dx;
                    sy += gr[k] * dy;
                }
                gc[2 * i] = sx * t.dfx;
                gc[2 * i + 1] = sy * t.dfy;
            }
        }
        vec![
            gmap.map(|d| Tensor::new(&[h, w, c], d).expect("shape")),
            gcoord.map(|d| Tensor::new(&[n, 2], d).expect("shape")),
        ]
    }))
}
