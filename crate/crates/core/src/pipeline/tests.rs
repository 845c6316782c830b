use super::*;
use crate::frame_io::{orbit_trajectory, SceneBox, SceneSpec, SynthSettings};

fn scene(noise: f64) -> SceneSpec {
    let labels = LabelSpace::new(&["wall", "floor", "ceiling", "table", "box"], &["table", "box"]).unwrap();
    SceneSpec {
        room: [2.0, 2.0, 1.5],
        floor_label: 1,
        wall_label: 0,
        ceiling_label: 2,
        boxes: vec![
            SceneBox {
                label: 3,
                instance: 1,
                min: [0.7, 0.7, 0.0],
                max: [1.1, 1.1, 0.4],
            },
            SceneBox {
                label: 4,
                instance: 2,
                min: [1.3, 0.6, 0.0],
                max: [1.5, 0.8, 0.2],
            },
        ],
        labels,
        noise,
    }
}

fn source(noise: f64, frames: usize) -> FrameSource {
    let settings = SynthSettings {
        intrinsics: CameraIntrinsics::from_fov(64, 48, 60.0, 0.1, 4.0),
        prediction_stride: 2,
        seed: 3,
    };
    let traj = orbit_trajectory([1.0, 1.0, 0.2], 0.8, 0.9, 0.0, 40.0, frames).unwrap();
    FrameSource::rendered(scene(noise), settings, traj).unwrap()
}

fn config(dir: &Path) -> PipelineConfig {
    PipelineConfig {
        out_dir: dir.to_path_buf(),
        map: crate::voxel_map::MapParams {
            voxel_size: 0.02,
            truncation: 0.06,
            ..Default::default()
        },
        cluster: crate::supervoxel::ClusterParams::with_spacing(0.12),
        ..Default::default()
    }
}

#[test]
fn single_clean_frame_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let src = source(0.0, 1);
    let engine = stream(&config(dir.path()), &src, None).unwrap();
    let ev = engine.evaluate();
    assert!(ev.evaluated > 0);
    assert_eq!(ev.accuracy, Some(1.0));
}

#[test]
fn node_count_tracks_supervoxels_not_voxels() {
    let dir = tempfile::tempdir().unwrap();
    let src = source(0.3, 6);
    let engine = stream(&config(dir.path()), &src, None).unwrap();
    let last = *engine.node_counts().last().unwrap();
    assert!(last > 0 && last <= engine.supervoxels().len());
    assert!(last * 10 < engine.map().len());
}

#[test]
fn pairwise_only_reproduces_dense_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let src = source(0.3, 6);
    let mut full = config(dir.path());
    full.enable_obj = false;
    full.enable_cons = false;
    full.enable_rel = false;
    let mut dense = config(dir.path());
    dense.weights = dense.weights.dense_only();
    let a = stream(&full, &src, None).unwrap().evaluate();
    let b = stream(&dense, &src, None).unwrap().evaluate();
    assert_eq!(a.points, b.points);
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let src = source(0.3, 6);
    let mut cfg = config(dir.path());
    cfg.mode = Mode::SemanticInstance;
    let a = stream(&cfg, &src, None).unwrap().evaluate();
    let b = stream(&cfg, &src, None).unwrap().evaluate();
    assert_eq!(a.points, b.points);
    assert_eq!(a.accuracy, b.accuracy);
}

#[test]
fn checkpoint_resume_matches_map() {
    let dir = tempfile::tempdir().unwrap();
    let src = source(0.3, 4);
    let cfg = config(dir.path());
    let mut engine = stream(&cfg, &src, None).unwrap();
    let cp = dir.path().join("cp");
    engine.write_checkpoint(&cp).unwrap();
    let mut resumed = Engine::new(cfg.clone(), src.labels().clone(), *src.intrinsics(), 2).unwrap();
    resumed.resume(&cp).unwrap();
    assert_eq!(resumed.next_frame(), 4);
    assert_eq!(resumed.map().voxels(), engine.map().voxels());
    assert_eq!(resumed.supervoxels().len(), engine.supervoxels().len());
    assert_eq!(resumed.gt_tally().observed(), engine.gt_tally().observed());
    // Both continue identically apart from the temporal beliefs.
    let f = src.frame(0).unwrap();
    engine.step(&f).unwrap();
    resumed.step(&f).unwrap();
    assert_eq!(resumed.map().len(), engine.map().len());
}

#[test]
fn mesh_level_cap_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let src = source(0.0, 2);
    let mut cfg = config(dir.path());
    cfg.mesh_cap = 10;
    let mut engine = stream(&cfg, &src, None).unwrap();
    assert!(matches!(engine.refine_offline(true), Err(Error::TooLarge(_))));
}

#[test]
fn offline_clean_scene_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let src = source(0.0, 1);
    let mut engine = stream(&config(dir.path()), &src, None).unwrap();
    engine.refine_offline(false).unwrap();
    assert_eq!(engine.evaluate().accuracy, Some(1.0));
}

#[test]
fn failing_frame_reports_index_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let src = source(0.0, 3);
    let cfg = config(dir.path());
    let mut engine = Engine::new(cfg, src.labels().clone(), *src.intrinsics(), 2).unwrap();
    let mut bad = src.frame(1).unwrap();
    bad.depth = crate::frame_io::Image::filled(3, 3, 0.0);
    engine.step(&src.frame(0).unwrap()).unwrap();
    assert!(matches!(engine.step(&bad), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn tally_majority_breaks_ties_low() {
    let mut t = GtTally::default();
    t.vote(2, 4, 1);
    t.vote(2, 3, 7);
    assert_eq!(t.majority(2), Some((3, 7)));
    t.vote(2, 4, 2);
    t.vote(2, 4, 2);
    assert_eq!(t.majority(2), Some((4, 2)));
    assert_eq!(t.majority(0), None);
    assert_eq!(t.observed(), 1);
}
