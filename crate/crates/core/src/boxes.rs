//! Oriented 3D boxes and their 10-value regression encoding.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SceneBounds, Vec3};
use crate::tensor::sigmoid;

/// Detection taxonomy, indexed by class id.
pub const CLASS_NAMES: [&str; 10] = [
    "car",
    "truck",
    "construction_vehicle",
    "bus",
    "trailer",
    "barrier",
    "motorcycle",
    "bicycle",
    "pedestrian",
    "traffic_cone",
];

/// Width of the raw regression vector:
/// `(cx, cy, cz) logits, ln w, ln l, ln h, sin yaw, cos yaw, vx, vy`.
pub const REG_DIM: usize = 10;

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|n| *n == name)
}

/// Wraps an angle into `(−π, π]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// 9-parameter box in the ego frame plus class and confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    /// `(w, l, h)` in meters.
    pub size: Vec3,
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class: usize,
    pub score: f64,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::input(format!("box sizes must be positive, got {:?}", self.size)));
        }
        let all = self
            .center
            .iter()
            .chain(&self.size)
            .chain(&self.velocity)
            .chain([&self.yaw, &self.score]);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::input("box has non-finite values"));
        }
        Ok(())
    }

    /// The 9 box values in file order: `x y z w l h yaw vx vy`.
    pub fn params(&self) -> [f64; 9] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.size[0],
            self.size[1],
            self.size[2],
            self.yaw,
            self.velocity[0],
            self.velocity[1],
        ]
    }

    pub fn from_params(p: [f64; 9], class: usize, score: f64) -> Self {
        Self {
            center: [p[0], p[1], p[2]],
            size: [p[3], p[4], p[5]],
            yaw: p[6],
            velocity: [p[7], p[8]],
            class,
            score,
        }
    }

    pub fn longest_edge(&self) -> f64 {
        self.size.iter().cloned().fold(0.0, f64::max)
    }

    /// Planar distance of the center from the ego origin.
    pub fn ego_distance(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }

    /// Regression target: bounds-normalized center, log sizes, sin/cos yaw,
    /// velocity. The predicted counterpart applies a sigmoid to the first
    /// three raw values.
    pub fn encode(&self, bounds: &SceneBounds) -> [f64; REG_DIM] {
        let c = bounds.normalize(&self.center);
        let (s, co) = self.yaw.sin_cos();
        [
            c[0],
            c[1],
            c[2],
            self.size[0].ln(),
            self.size[1].ln(),
            self.size[2].ln(),
            s,
            co,
            self.velocity[0],
            self.velocity[1],
        ]
    }
}

/// Maps a raw regression vector to box geometry. Class and score are left
/// to the caller.
pub fn decode_raw(raw: &[f64], bounds: &SceneBounds) -> Box3D {
    let e = bounds.extent();
    let center = [0, 1, 2].map(|k| bounds.min[k] + sigmoid(raw[k]) * e[k]);
    Box3D {
        center,
        size: [raw[3].exp(), raw[4].exp(), raw[5].exp()],
        yaw: normalize_yaw(raw[6].atan2(raw[7])),
        velocity: [raw[8], raw[9]],
        class: 0,
        score: 0.0,
    }
}

/// Inverse of the sigmoid used for centers: the raw values that decode
/// exactly to `b` (up to the logit's precision).
pub fn raw_for_box(b: &Box3D, bounds: &SceneBounds) -> [f64; REG_DIM] {
    let mut r = b.encode(bounds);
    for v in &mut r[..3] {
        *v = (*v / (1.0 - *v)).ln();
    }
    r
}
