//! The full detector: LiDAR BEV branch plus the fusion head, with its
//! parameters in one store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::Box3D;
use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraModel, FeaturePyramid, SceneBounds};
use crate::head::{run_head, select_top_k, uniform_init, HeadConfig, HeadParams, LayerOutput, SensorContext};
use crate::pointcloud::{encode_bev, BevEncoderParams, LidarEncoder, LidarInput};
use crate::scene::{synthesize_image_pyramids, Scene};
use crate::tensor::{Bound, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub head: HeadConfig,
    pub bounds: SceneBounds,
    pub grid: BevGridSpec,
    pub lidar: LidarEncoder,
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
    pub voxel_size: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            bounds: SceneBounds::default(),
            grid: BevGridSpec::new((-51.2, 51.2), (-51.2, 51.2), 0.8).expect("valid grid"),
            lidar: LidarEncoder::Pillars,
            max_points_per_pillar: 32,
            max_pillars: 12000,
            voxel_size: 0.8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.bounds.validate()?;
        self.grid.validate()?;
        if self.max_points_per_pillar == 0 || self.max_pillars == 0 {
            return Err(Error::contract("pillar caps must be positive"));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::contract("voxel_size must be positive"));
        }
        if self.head.hidden < 4 {
            return Err(Error::contract("hidden width must be at least 4 to carry image features"));
        }
        Ok(())
    }
}

/// Per-scene inputs that carry no parameters, prepared once.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub sample: String,
    pub cameras: Vec<CameraModel>,
    pub images: Vec<FeaturePyramid>,
    pub lidar: LidarInput,
}

impl SceneInputs {
    pub fn prepare(scene: &Scene, config: &ModelConfig) -> Result<Self> {
        if scene.cameras.len() != config.head.cameras {
            return Err(Error::contract(format!(
                "scene {} has {} cameras, the model expects {}",
                scene.sample,
                scene.cameras.len(),
                config.head.cameras
            )));
        }
        Ok(Self {
            sample: scene.sample.clone(),
            cameras: scene.cameras.clone(),
            images: synthesize_image_pyramids(scene, config.head.hidden)?,
            lidar: LidarInput::prepare(
                config.lidar,
                &scene.cloud,
                &config.grid,
                &config.bounds,
                (config.max_points_per_pillar, config.max_pillars),
                config.voxel_size,
            )?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub bev: BevEncoderParams,
    pub head: HeadParams,
}

impl Detector {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bev = BevEncoderParams::register(&mut store, config.lidar, config.head.hidden, &mut uniform_init(&mut rng))?;
        let head = HeadParams::random(&mut store, &config.head, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            bev,
            head,
        })
    }

    /// Rebuilds the layout for `config` and fills it from named tensors,
    /// which must match the layout name for name and shape for shape.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut det = Self::new(config, 0)?;
        if tensors.len() != det.store.len() {
            return Err(Error::input(format!(
                "{} parameter tensors for a model with {}",
                tensors.len(),
                det.store.len()
            )));
        }
        for (p, (name, t)) in det.store.iter_mut().zip(tensors) {
            if p.name != name {
                return Err(Error::input(format!("parameter {name} where {} was expected", p.name)));
            }
            if p.tensor.shape() != t.shape() {
                return Err(Error::input(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
        Ok(det)
    }

    /// Binds the parameters to `tape` and runs every head layer.
    pub fn forward<'t>(&self, tape: &'t Tape, inputs: &SceneInputs) -> Result<(Bound<'t>, Vec<LayerOutput<'t>>)> {
        let bound = self.store.bind(tape);
        let outs = self.forward_bound(tape, &bound, inputs)?;
        Ok((bound, outs))
    }

    pub fn forward_bound<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, inputs: &SceneInputs) -> Result<Vec<LayerOutput<'t>>> {
        let cfg = &self.config;
        let bev = encode_bev(&inputs.lidar, &self.bev, &cfg.grid, |id| bound.var(id))?;
        let image = inputs
            .images
            .iter()
            .map(|p| p.levels.iter().map(|l| tape.constant(l.clone())).collect())
            .collect();
        let ctx = SensorContext {
            cameras: &inputs.cameras,
            image,
            bev: bev.levels,
            bounds: cfg.bounds,
            grid: cfg.grid,
        };
        run_head(bound.var(self.head.queries), &ctx, &self.head, &cfg.bounds, bound)
    }

    /// Last-layer boxes, the `top_k` best first.
    pub fn detect(&self, inputs: &SceneInputs) -> Result<Vec<Box3D>> {
        let tape = Tape::new();
        let (_, outs) = self.forward(&tape, inputs)?;
        let last = outs.last().expect("run_head returns every layer");
        Ok(select_top_k(&last.boxes, self.config.head.top_k)?
            .into_iter()
            .map(|(_, b)| b)
            .collect())
    }
}
