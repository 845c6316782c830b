use std::path::Path;

use crate::error::{Error, Result};
use crate::frame_io::{
    load_frame, read_manifest, read_poses, read_scene_file, FrameBundle, SceneSpec, SequenceMeta, SynthSettings,
};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::labels::LabelSpace;

/// Where frames come from: a sequence on disk or a scene rendered on demand.
pub enum FrameSource {
    Disk {
        meta: SequenceMeta,
        poses: Vec<Pose>,
    },
    Rendered {
        scene: Box<SceneSpec>,
        settings: SynthSettings,
        trajectory: Vec<Pose>,
    },
}

impl FrameSource {
    /// Opens `path`: files ending in `.scene` are rendered in memory (with
    /// `seed` replacing the file's seed when given), anything else is read as
    /// a sequence.
    pub fn open(path: &Path, seed: Option<u64>) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "scene") {
            let (scene, mut settings, trajectory) = read_scene_file(path)?;
            if let Some(s) = seed {
                settings.seed = s;
            }
            return Self::rendered(scene, settings, trajectory);
        }
        let meta = read_manifest(path)?;
        let poses = read_poses(&meta)?;
        if poses.len() < meta.frames {
            return Err(Error::invalid(
                "sequence",
                format!("{} poses for {} frames", poses.len(), meta.frames),
            ));
        }
        Ok(FrameSource::Disk { meta, poses })
    }

    pub fn rendered(scene: SceneSpec, settings: SynthSettings, trajectory: Vec<Pose>) -> Result<Self> {
        scene.validate()?;
        settings.intrinsics.validate()?;
        if trajectory.is_empty() {
            return Err(Error::invalid("trajectory", "no poses"));
        }
        Ok(FrameSource::Rendered {
            scene: Box::new(scene),
            settings,
            trajectory,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            FrameSource::Disk { meta, .. } => meta.frames,
            FrameSource::Rendered { trajectory, .. } => trajectory.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        match self {
            FrameSource::Disk { meta, .. } => &meta.intrinsics,
            FrameSource::Rendered { settings, .. } => &settings.intrinsics,
        }
    }

    pub fn labels(&self) -> &LabelSpace {
        match self {
            FrameSource::Disk { meta, .. } => &meta.labels,
            FrameSource::Rendered { scene, .. } => &scene.labels,
        }
    }

    pub fn prediction_stride(&self) -> usize {
        match self {
            FrameSource::Disk { meta, .. } => meta.prediction_stride,
            FrameSource::Rendered { settings, .. } => settings.prediction_stride,
        }
    }

    pub fn frame(&self, index: usize) -> Result<FrameBundle> {
        match self {
            FrameSource::Disk { meta, poses } => load_frame(meta, poses, index),
            FrameSource::Rendered {
                scene,
                settings,
                trajectory,
            } => {
                let pose = trajectory.get(index).ok_or(Error::FrameOutOfRange {
                    index,
                    count: trajectory.len(),
                })?;
                Ok(scene.render_frame(settings, pose, index))
            }
        }
    }
}
