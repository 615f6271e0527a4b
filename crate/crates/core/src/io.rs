//! Text formats for detections and ground truth, and scene files.
//!
//! Detection files start with the header line `# msf3d detections v1`,
//! ground-truth files with `# msf3d ground-truth v1`. Every other line is a
//! record, a comment starting with `#`, or blank. A record is whitespace
//! separated:
//!
//! ```text
//! sample class [score] x y z w l h yaw vx vy
//! ```
//!
//! Ground truth omits the score. Numbers are written in the shortest form
//! that reads back to the same `f64`.
//!
//! A scene is a JSON file (`sample`, `seed`, `cameras`, `gt`, and `points`
//! naming the binary point dump next to it).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::{class_id, Box3D, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::metrics::{DetectionRecord, GroundTruthRecord};
use crate::pointcloud::PointCloud;
use crate::scene::Scene;

pub const DETECTIONS_HEADER: &str = "# msf3d detections v1";
pub const GROUND_TRUTH_HEADER: &str = "# msf3d ground-truth v1";
const COLUMNS: &str = "x y z w l h yaw vx vy";

fn push_box(line: &mut String, b: &Box3D) {
    for v in b.params() {
        let _ = write!(line, " {v}");
    }
}

pub fn format_detections(records: &[DetectionRecord]) -> String {
    let mut s = format!("{DETECTIONS_HEADER}\n# sample class score {COLUMNS}\n");
    for r in records {
        let _ = write!(s, "{} {} {}", r.sample, CLASS_NAMES[r.det.class], r.det.score);
        push_box(&mut s, &r.det);
        s.push('\n');
    }
    s
}

pub fn format_ground_truth(records: &[GroundTruthRecord]) -> String {
    let mut s = format!("{GROUND_TRUTH_HEADER}\n# sample class {COLUMNS}\n");
    for r in records {
        let _ = write!(s, "{} {}", r.sample, CLASS_NAMES[r.gt.class]);
        push_box(&mut s, &r.gt);
        s.push('\n');
    }
    s
}

/// `(line number, fields)` of every record line after checking the header.
fn records<'a>(text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(header) {
        return Err(Error::input(format!("missing header line `{header}`")));
    }
    Ok(lines
        .enumerate()
        .map(|(i, l)| (i + 2, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(n, l)| (n, l.split_whitespace().collect()))
        .collect())
}

fn parse_number(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::input(format!("line {line}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::input(format!("line {line}: non-finite value `{field}`")));
    }
    Ok(v)
}

fn parse_record(fields: &[&str], line: usize, with_score: bool) -> Result<(String, Box3D)> {
    let want = if with_score { 12 } else { 11 };
    if fields.len() != want {
        return Err(Error::input(format!("line {line}: expected {want} fields, found {}", fields.len())));
    }
    let class = class_id(fields[1]).ok_or_else(|| {
        Error::input(format!(
            "line {line}: unknown class label `{}` (known: {})",
            fields[1],
            CLASS_NAMES.join(", ")
        ))
    })?;
    let nums = fields[2..].iter().map(|f| parse_number(f, line)).collect::<Result<Vec<_>>>()?;
    let (score, p) = if with_score { (nums[0], &nums[1..]) } else { (1.0, &nums[..]) };
    let b = Box3D::from_params(p.try_into().expect("nine values"), class, score);
    b.validate().map_err(|e| Error::input(format!("line {line}: {e}")))?;
    Ok((fields[0].to_string(), b))
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>> {
    records(text, DETECTIONS_HEADER)?
        .into_iter()
        .map(|(n, f)| {
            let (sample, det) = parse_record(&f, n, true)?;
            if !(0.0..=1.0).contains(&det.score) {
                return Err(Error::input(format!("line {n}: score {} outside [0, 1]", det.score)));
            }
            Ok(DetectionRecord {
                sample,
                det,
                attribute: None,
            })
        })
        .collect()
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruthRecord>> {
    records(text, GROUND_TRUTH_HEADER)?
        .into_iter()
        .map(|(n, f)| {
            let (sample, gt) = parse_record(&f, n, false)?;
            Ok(GroundTruthRecord {
                sample,
                gt,
                attribute: None,
            })
        })
        .collect()
}

pub fn ground_truth_of(scenes: &[Scene]) -> Vec<GroundTruthRecord> {
    scenes
        .iter()
        .flat_map(|s| {
            s.gt.iter().map(|g| GroundTruthRecord {
                sample: s.sample.clone(),
                gt: g.clone(),
                attribute: None,
            })
        })
        .collect()
}

pub const SCENE_FORMAT: &str = "msf3d-scene-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    format: String,
    sample: String,
    seed: u64,
    cameras: Vec<CameraModel>,
    gt: Vec<GtEntry>,
    /// Binary point dump, relative to the scene file.
    points: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtEntry {
    class: String,
    /// `x y z w l h yaw vx vy`
    #[serde(rename = "box")]
    values: [f64; 9],
}

/// Writes `<sample>.json` and `<sample>.bin` into `dir`; returns the JSON path.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<PathBuf> {
    let bin = format!("{}.bin", scene.sample);
    let file = SceneFile {
        format: SCENE_FORMAT.into(),
        sample: scene.sample.clone(),
        seed: scene.seed,
        cameras: scene.cameras.clone(),
        gt: scene
            .gt
            .iter()
            .map(|b| GtEntry {
                class: CLASS_NAMES[b.class].into(),
                values: b.params(),
            })
            .collect(),
        points: bin.clone(),
    };
    let mut out = Vec::new();
    scene.cloud.write_bin(&mut out)?;
    fs::write(dir.join(&bin), out)?;
    let path = dir.join(format!("{}.json", scene.sample));
    let text = serde_json::to_string_pretty(&file).expect("scene serializes");
    fs::write(&path, text + "\n")?;
    Ok(path)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path)?;
    let file: SceneFile =
        serde_json::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    if file.format != SCENE_FORMAT {
        return Err(Error::input(format!("{}: unknown scene format {}", path.display(), file.format)));
    }
    let gt = file
        .gt
        .iter()
        .map(|g| {
            let class = class_id(&g.class)
                .ok_or_else(|| Error::input(format!("{}: unknown class label `{}`", path.display(), g.class)))?;
            let b = Box3D::from_params(g.values, class, 1.0);
            b.validate()?;
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    for c in &file.cameras {
        c.validate(false)?;
    }
    let bin = path.parent().unwrap_or(Path::new(".")).join(&file.points);
    let cloud = PointCloud::read_bin(fs::File::open(&bin)?)?;
    Ok(Scene {
        sample: file.sample,
        seed: file.seed,
        gt,
        cameras: file.cameras,
        cloud,
    })
}

/// Every `*.json` scene in `dir`, in file-name order.
pub fn read_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
    paths.sort();
    paths.iter().map(|p| read_scene(p)).collect()
}
