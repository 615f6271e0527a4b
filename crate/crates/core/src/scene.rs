//! Seeded synthetic scenes: boxes, a yaw-spaced camera rig, simulated LiDAR
//! returns and image feature pyramids with a learnable signal.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::boxes::{normalize_yaw, Box3D, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::geometry::{mat_vec, rot_z, CameraModel, FeaturePyramid, SceneBounds, Vec3};
use crate::pointcloud::{PointCloud, PYRAMID_LEVELS};
use crate::tensor::Tensor;

/// Image pyramid strides, finest first.
pub const IMAGE_STRIDES: [usize; PYRAMID_LEVELS] = [4, 8, 16, 32];
/// Spatial sigma of a feature blob, in cells of the level it is drawn on.
pub const BLOB_SIGMA: f64 = 2.0;

/// Mean `(w, l, h)` per class, in meters.
pub const SIZE_PRIORS: [Vec3; 10] = [
    [1.95, 4.6, 1.7],
    [2.5, 6.9, 2.8],
    [2.8, 6.4, 3.2],
    [2.9, 11.0, 3.5],
    [2.9, 12.3, 3.9],
    [2.5, 0.5, 1.0],
    [0.8, 2.1, 1.5],
    [0.6, 1.7, 1.3],
    [0.7, 0.7, 1.8],
    [0.4, 0.4, 1.1],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub cameras: usize,
    pub focal: f64,
    /// Nominal `(width, height)` in pixels.
    pub image_size: (usize, usize),
    pub mount_height: f64,
    /// Yaw of camera 0; the others follow at `2π / cameras` spacing.
    pub yaw_offset: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            cameras: 6,
            focal: 400.0,
            image_size: (800, 448),
            mount_height: 0.0,
            yaw_offset: 0.0,
        }
    }
}

impl RigSpec {
    pub fn build(&self) -> Result<Vec<CameraModel>> {
        (0..self.cameras)
            .map(|v| {
                let yaw = normalize_yaw(self.yaw_offset + 2.0 * PI * v as f64 / self.cameras as f64);
                CameraModel::looking_at_yaw(self.focal, self.image_size, yaw, [0.0, 0.0, self.mount_height])
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Relative class frequencies, one per class.
    pub class_weights: Vec<f64>,
    pub bounds: SceneBounds,
    pub rig: RigSpec,
    pub points_per_object: usize,
    pub ground_points: usize,
    pub noise_sigma: f64,
    pub velocity_sigma: f64,
    pub ground_z: f64,
    /// Minimum planar distance between object centers; best effort.
    pub min_separation: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            min_objects: 5,
            max_objects: 20,
            class_weights: vec![1.0; CLASS_NAMES.len()],
            bounds: SceneBounds::default(),
            rig: RigSpec::default(),
            points_per_object: 200,
            ground_points: 2000,
            noise_sigma: 0.02,
            velocity_sigma: 0.5,
            ground_z: -1.8,
            min_separation: 2.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.min_objects > self.max_objects {
            return Err(Error::input(format!(
                "min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        if self.rig.cameras == 0 {
            return Err(Error::input("the camera rig needs at least one camera"));
        }
        if self.rig.image_size.0 == 0 || self.rig.image_size.1 == 0 || !(self.rig.focal > 0.0) {
            return Err(Error::input("camera focal length and image size must be positive"));
        }
        if self.class_weights.len() != CLASS_NAMES.len()
            || self.class_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite())
            || !self.class_weights.iter().any(|w| *w > 0.0)
        {
            return Err(Error::input(format!(
                "class_weights needs {} non-negative entries, not all zero",
                CLASS_NAMES.len()
            )));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("velocity_sigma", self.velocity_sigma),
            ("min_separation", self.min_separation),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::input(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(self.bounds.min[2]..=self.bounds.max[2]).contains(&self.ground_z) {
            return Err(Error::input("ground_z lies outside the scene bounds"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub sample: String,
    pub seed: u64,
    pub gt: Vec<Box3D>,
    pub cameras: Vec<CameraModel>,
    pub cloud: PointCloud,
}

pub fn sample_id(seed: u64) -> String {
    format!("scene-{seed:06}")
}

/// Independent RNG stream per purpose so boxes and points do not shift
/// each other.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated")
}

/// Boxes, cameras and LiDAR for one seed. Identical inputs give identical
/// scenes.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = stream(seed, 1);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let classes = WeightedIndex::new(&spec.class_weights).map_err(|e| Error::input(e.to_string()))?;
    let jitter = normal(0.1);
    let vel = normal(spec.velocity_sigma);
    let b = &spec.bounds;
    let mut gt: Vec<Box3D> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = classes.sample(&mut rng);
        let mut center = [0.0; 3];
        for attempt in 0..100 {
            center[0] = rng.random_range(b.min[0]..=b.max[0]);
            center[1] = rng.random_range(b.min[1]..=b.max[1]);
            let clear = gt
                .iter()
                .all(|o| (o.center[0] - center[0]).hypot(o.center[1] - center[1]) >= spec.min_separation);
            if clear || attempt == 99 {
                break;
            }
        }
        let prior = SIZE_PRIORS[class];
        let size = prior.map(|s| s * jitter.sample(&mut rng).exp());
        center[2] = (spec.ground_z + size[2] / 2.0).clamp(b.min[2], b.max[2]);
        let yaw = normalize_yaw(rng.random_range(-PI..PI));
        let velocity = [vel.sample(&mut rng), vel.sample(&mut rng)];
        gt.push(Box3D {
            center,
            size,
            yaw,
            velocity,
            class,
            score: 1.0,
        });
    }
    let cloud = simulate_lidar(&gt, spec, seed)?;
    Ok(Scene {
        sample: sample_id(seed),
        seed,
        gt,
        cameras: spec.rig.build()?,
        cloud,
    })
}

/// LiDAR intensity carried by returns from an object of `class`.
pub fn class_intensity(class: usize) -> f64 {
    (class + 1) as f64 / (CLASS_NAMES.len() + 1) as f64
}

/// Intensity of ground returns.
pub const GROUND_INTENSITY: f64 = 0.0;

/// `points_per_object` returns on the top and four side faces of every box
/// (face chosen by area), each coordinate perturbed by `noise_sigma`, then
/// `ground_points` returns uniform over the ground plane.
pub fn simulate_lidar(boxes: &[Box3D], spec: &SceneSpec, seed: u64) -> Result<PointCloud> {
    let mut rng = stream(seed, 2);
    let noise = normal(spec.noise_sigma);
    let mut points = Vec::with_capacity(boxes.len() * spec.points_per_object + spec.ground_points);
    for b in boxes {
        let [w, l, h] = b.size;
        let (hx, hy, hz) = (l / 2.0, w / 2.0, h / 2.0);
        // top, +x, −x, +y, −y
        let faces = WeightedIndex::new([l * w, w * h, w * h, l * h, l * h]).expect("positive box sizes");
        let rot = rot_z(b.yaw);
        for _ in 0..spec.points_per_object {
            let u = rng.random_range(-1.0..=1.0);
            let v = rng.random_range(-1.0..=1.0);
            let local = match faces.sample(&mut rng) {
                0 => [u * hx, v * hy, hz],
                1 => [hx, u * hy, v * hz],
                2 => [-hx, u * hy, v * hz],
                3 => [u * hx, hy, v * hz],
                _ => [u * hx, -hy, v * hz],
            };
            let p = mat_vec(&rot, &local);
            points.push([
                b.center[0] + p[0] + noise.sample(&mut rng),
                b.center[1] + p[1] + noise.sample(&mut rng),
                b.center[2] + p[2] + noise.sample(&mut rng),
                class_intensity(b.class),
            ]);
        }
    }
    let bd = &spec.bounds;
    for _ in 0..spec.ground_points {
        points.push([
            rng.random_range(bd.min[0]..=bd.max[0]),
            rng.random_range(bd.min[1]..=bd.max[1]),
            spec.ground_z + noise.sample(&mut rng),
            GROUND_INTENSITY,
        ]);
    }
    PointCloud::new(points)
}

/// Extents `(h, w)` of pyramid level `stride` for a nominal image size.
pub fn level_extent(image_size: (usize, usize), stride: usize) -> (usize, usize) {
    (image_size.1.div_ceil(stride), image_size.0.div_ceil(stride))
}

/// Depth squashed into `[0, 1)`.
pub fn depth_code(depth: f64) -> f64 {
    depth / (depth + 10.0)
}

/// Per camera, four `[h, w, channels]` maps at strides 4/8/16/32. Each box
/// whose center projects into the camera adds a Gaussian blob (sigma of 2
/// cells) centered where bilinear sampling reads that projection. Channel
/// 0 carries the blob itself, channel 1 the blob times the depth code, and
/// channel `2 + class` (folded modulo `channels − 2`) the blob again.
pub fn synthesize_image_pyramids(scene: &Scene, channels: usize) -> Result<Vec<FeaturePyramid>> {
    if channels < 4 {
        return Err(Error::contract(format!("image pyramids need at least 4 channels, got {channels}")));
    }
    let class_slots = channels - 2;
    let reach = (4.0 * BLOB_SIGMA).ceil() as isize;
    scene
        .cameras
        .iter()
        .map(|cam| {
            let (iw, ih) = (cam.image_size.0 as f64, cam.image_size.1 as f64);
            let hits: Vec<(f64, f64, f64, usize)> = scene
                .gt
                .iter()
                .filter_map(|b| {
                    let (u, v) = cam.project_pixel(&b.center)?;
                    let depth = cam.to_camera(&b.center)[2];
                    Some((u / iw, v / ih, depth_code(depth), b.class))
                })
                .collect();
            let levels = IMAGE_STRIDES
                .iter()
                .map(|&s| {
                    let (h, w) = level_extent(cam.image_size, s);
                    let mut data = vec![0.0; h * w * channels];
                    for &(nu, nv, dc, class) in &hits {
                        let cx = nu * (w - 1) as f64;
                        let cy = nv * (h - 1) as f64;
                        let (ci, cj) = (cy.round() as isize, cx.round() as isize);
                        for r in (ci - reach).max(0)..=(ci + reach).min(h as isize - 1) {
                            for c in (cj - reach).max(0)..=(cj + reach).min(w as isize - 1) {
                                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                                let g = (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                                let base = (r as usize * w + c as usize) * channels;
                                data[base] += g;
                                data[base + 1] += g * dc;
                                data[base + 2 + class % class_slots] += g;
                            }
                        }
                    }
                    Tensor::new(&[h, w, channels], data)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FeaturePyramid { levels })
        })
        .collect()
}
