use std::ffi::{CStr, CString};
use std::ptr;

use msf3d_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(msf3d_last_error()) }.to_string_lossy().into_owned()
}

const SMALL_SCENE: &str = r#"
[scene]
min_objects = 3
max_objects = 3
ground_points = 100
points_per_object = 20
"#;

#[test]
fn nds_matches_reported_rows() {
    let mut out = 0.0;
    let tp = [0.334, 0.258, 0.288, 0.283, 0.193];
    assert_eq!(unsafe { msf3d_nds(0.606, tp.as_ptr(), &mut out) }, Msf3dStatus::Ok);
    assert!((out - 0.667).abs() < 1e-3, "{out}");
    assert_eq!(unsafe { msf3d_nds(0.5, ptr::null(), &mut out) }, Msf3dStatus::NullPointer);
    assert!(last_error().contains("tp_errors"));
    let bad = [f64::NAN; 5];
    assert_eq!(unsafe { msf3d_nds(0.5, bad.as_ptr(), &mut out) }, Msf3dStatus::InputError);
}

#[test]
fn hungarian_assigns_rows() {
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0];
    let mut cols = [usize::MAX; 2];
    assert_eq!(unsafe { msf3d_hungarian(cost.as_ptr(), 2, 3, cols.as_mut_ptr()) }, Msf3dStatus::Ok);
    assert_eq!(cols, [1, 0]);
    assert_eq!(unsafe { msf3d_hungarian(cost.as_ptr(), 3, 2, cols.as_mut_ptr()) }, Msf3dStatus::ContractViolation);
    assert!(!last_error().is_empty());
}

#[test]
fn scene_lifecycle_and_buffer_contract() {
    let toml = CString::new(SMALL_SCENE).unwrap();
    let mut scene = ptr::null_mut();
    assert_eq!(unsafe { msf3d_scene_generate(toml.as_ptr(), 3, &mut scene) }, Msf3dStatus::Ok);
    assert!(!scene.is_null());
    assert_eq!(unsafe { msf3d_scene_point_count(scene) }, 160);

    let mut n = 0;
    assert_eq!(unsafe { msf3d_scene_ground_truth(scene, ptr::null_mut(), 0, &mut n) }, Msf3dStatus::Ok);
    assert_eq!(n, 3);
    let mut small = [Msf3dBox::default(); 2];
    assert_eq!(
        unsafe { msf3d_scene_ground_truth(scene, small.as_mut_ptr(), 2, &mut n) },
        Msf3dStatus::ContractViolation
    );
    assert!(last_error().contains("3 needed"), "{}", last_error());
    let mut boxes = [Msf3dBox::default(); 3];
    assert_eq!(unsafe { msf3d_scene_ground_truth(scene, boxes.as_mut_ptr(), 3, &mut n) }, Msf3dStatus::Ok);
    assert!(boxes.iter().all(|b| b.score == 1.0 && b.size.iter().all(|s| *s > 0.0) && b.class_id < 10));
    unsafe { msf3d_scene_free(scene) };
    unsafe { msf3d_scene_free(ptr::null_mut()) };
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let mut scene = ptr::null_mut();
    let unknown = CString::new("[scene]\nbogus = 1\n").unwrap();
    assert_eq!(unsafe { msf3d_scene_generate(unknown.as_ptr(), 0, &mut scene) }, Msf3dStatus::InputError);
    assert!(scene.is_null());

    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { msf3d_model_load(missing.as_ptr(), &mut model) }, Msf3dStatus::InputError);
    assert_eq!(unsafe { msf3d_model_load(ptr::null(), &mut model) }, Msf3dStatus::NullPointer);
    assert_eq!(unsafe { msf3d_model_top_k(ptr::null()) }, 0);

    let mut n = 0;
    assert_eq!(
        unsafe { msf3d_model_detect(ptr::null(), ptr::null(), ptr::null_mut(), 0, &mut n) },
        Msf3dStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { msf3d_model_load(junk.as_ptr(), &mut model) }, Msf3dStatus::InputError);
    assert!(model.is_null());
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(msf3d_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/msf3d.h")).unwrap();
    for name in [
        "msf3d_last_error",
        "msf3d_version",
        "msf3d_model_load",
        "msf3d_model_free",
        "msf3d_model_top_k",
        "msf3d_model_detect",
        "msf3d_scene_generate",
        "msf3d_scene_read",
        "msf3d_scene_free",
        "msf3d_scene_ground_truth",
        "msf3d_scene_point_count",
        "msf3d_nds",
        "msf3d_hungarian",
        "MSF3D_STATUS_CONTRACT_VIOLATION",
        "typedef struct Msf3dModel Msf3dModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

const SMALL_MODEL: &str = r#"
[model.head]
layers = 1
queries = 8
hidden = 8
heads = 2
ffn_dim = 16
cameras = 1
top_k = 8

[model.bounds]
min = [-12.8, -12.8, -5.0]
max = [12.8, 12.8, 3.0]

[model.grid]
x_range = [-12.8, 12.8]
y_range = [-12.8, 12.8]
cell_size = 1.6

[scene]
min_objects = 2
max_objects = 2
ground_points = 100
points_per_object = 20
bounds = { min = [-12.8, -12.8, -5.0], max = [12.8, 12.8, 3.0] }
rig = { cameras = 1, focal = 64.0, image_size = [128, 64] }
"#;

#[test]
fn model_round_trip_through_checkpoint_file() {
    let cfg = msf3d::train::TrainConfig::from_toml(SMALL_MODEL).unwrap();
    let trainer = msf3d::train::Trainer::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.ckpt");
    std::fs::write(&path, trainer.checkpoint().to_bytes()).unwrap();

    let path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { msf3d_model_load(path.as_ptr(), &mut model) }, Msf3dStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { msf3d_model_top_k(model) }, 8);

    let toml = CString::new(SMALL_MODEL).unwrap();
    let mut scene = ptr::null_mut();
    assert_eq!(unsafe { msf3d_scene_generate(toml.as_ptr(), 5, &mut scene) }, Msf3dStatus::Ok);
    let mut boxes = [Msf3dBox::default(); 8];
    let mut n = 0;
    assert_eq!(
        unsafe { msf3d_model_detect(model, scene, boxes.as_mut_ptr(), boxes.len(), &mut n) },
        Msf3dStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(n, 8);
    assert!(boxes.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(boxes.iter().all(|b| (0.0..=1.0).contains(&b.score) && b.class_id < 10));

    let mut again = [Msf3dBox::default(); 8];
    unsafe { msf3d_model_detect(model, scene, again.as_mut_ptr(), again.len(), &mut n) };
    assert_eq!(boxes, again);

    // A six-camera scene cannot feed a one-camera model.
    let mut wide = ptr::null_mut();
    assert_eq!(unsafe { msf3d_scene_generate(ptr::null(), 1, &mut wide) }, Msf3dStatus::Ok);
    assert_eq!(
        unsafe { msf3d_model_detect(model, wide, boxes.as_mut_ptr(), boxes.len(), &mut n) },
        Msf3dStatus::ContractViolation
    );
    unsafe {
        msf3d_scene_free(wide);
        msf3d_scene_free(scene);
        msf3d_model_free(model);
    }
}

#[test]
fn header_compiles_as_c99() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"msf3d.h\"\n\
         int main(void) {\n\
           double tp[5] = {0.3, 0.25, 0.3, 0.3, 0.2};\n\
           double out = 0.0;\n\
           Msf3dStatus s = msf3d_nds(0.6, tp, &out);\n\
           return s == MSF3D_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .expect("a C compiler named cc on PATH");
    assert!(status.success());
}
