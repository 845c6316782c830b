//! Synthetic RGB-D sequences: raycast axis-aligned boxes inside a room,
//! flat Lambertian shading, exact ground truth and noisy top-1 predictions.

use std::fs;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    depth_to_mm, write_frame, write_poses, FileLayout, FrameBundle, GtPixel, Image, Prediction, SequenceMeta,
    MANIFEST_NAME,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::kv::KvFile;
use crate::labels::{Label, LabelSpace};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox {
    pub label: Label,
    /// Ground-truth instance id, nonzero.
    pub instance: u16,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// A room spanning `[0, room]` on each axis (z up) holding labeled boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub room: [f64; 3],
    pub floor_label: Label,
    pub wall_label: Label,
    pub ceiling_label: Label,
    pub boxes: Vec<SceneBox>,
    pub labels: LabelSpace,
    /// Probability that a predicted pixel is replaced by a wrong label.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub intrinsics: CameraIntrinsics,
    pub prediction_stride: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    normal: Vector3<f64>,
    label: Label,
    instance: u16,
}

const LIGHT_DIR: [f64; 3] = [0.3, -0.45, 0.84];

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&r| r <= 0.0) {
            return Err(Error::invalid("scene", "room extents must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("scene", "noise rate must lie in [0, 1]"));
        }
        let n = self.labels.len() as Label;
        for l in [self.floor_label, self.wall_label, self.ceiling_label] {
            if l >= n {
                return Err(Error::invalid("scene", format!("label {l} outside label space")));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.label >= n {
                return Err(Error::invalid("scene", format!("box {i} label outside label space")));
            }
            if b.instance == 0 {
                return Err(Error::invalid("scene", format!("box {i} needs a nonzero instance")));
            }
            for a in 0..3 {
                if !(b.min[a] < b.max[a]) || b.min[a] < 0.0 || b.max[a] > self.room[a] {
                    return Err(Error::invalid("scene", format!("box {i} must lie inside the room")));
                }
            }
        }
        Ok(())
    }

    fn ray_box(b: &SceneBox, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut tmin = f64::NEG_INFINITY;
        let mut tmax = f64::INFINITY;
        let mut axis = 0;
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < b.min[a] || o[a] > b.max[a] {
                    return None;
                }
                continue;
            }
            let t1 = (b.min[a] - o[a]) / d[a];
            let t2 = (b.max[a] - o[a]) / d[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > tmin {
                tmin = lo;
                axis = a;
            }
            tmax = tmax.min(hi);
        }
        (tmin <= tmax && tmin > 1e-9).then_some((tmin, axis))
    }

    fn raycast(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        // Room interior: the ray leaves through the nearest bounding plane.
        let mut best: Option<Hit> = None;
        let mut texit = f64::INFINITY;
        let mut exit_axis = 0;
        for a in 0..3 {
            if d[a] == 0.0 {
                continue;
            }
            let t = if d[a] > 0.0 {
                (self.room[a] - o[a]) / d[a]
            } else {
                -o[a] / d[a]
            };
            if t < texit {
                texit = t;
                exit_axis = a;
            }
        }
        if texit.is_finite() && texit > 0.0 {
            let mut normal = Vector3::zeros();
            normal[exit_axis] = -d[exit_axis].signum();
            let label = match (exit_axis, d[2] > 0.0) {
                (2, false) => self.floor_label,
                (2, true) => self.ceiling_label,
                _ => self.wall_label,
            };
            best = Some(Hit {
                t: texit,
                normal,
                label,
                instance: 0,
            });
        }
        for b in &self.boxes {
            if let Some((t, axis)) = Self::ray_box(b, o, d) {
                if best.is_none_or(|h| t < h.t) {
                    let mut normal = Vector3::zeros();
                    normal[axis] = -d[axis].signum();
                    best = Some(Hit {
                        t,
                        normal,
                        label: b.label,
                        instance: b.instance,
                    });
                }
            }
        }
        best
    }

    /// Distance from `p` to the nearest scene surface.
    pub fn surface_distance(&self, p: &Point3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..3 {
            best = best.min(p[a].abs()).min((self.room[a] - p[a]).abs());
        }
        for b in &self.boxes {
            let mut outside = 0.0f64;
            let mut inside = f64::INFINITY;
            for a in 0..3 {
                let below = b.min[a] - p[a];
                let above = p[a] - b.max[a];
                let gap = below.max(above).max(0.0);
                outside += gap * gap;
                inside = inside.min((-below).min(-above));
            }
            let d = if outside > 0.0 { outside.sqrt() } else { inside.max(0.0) };
            best = best.min(d);
        }
        best
    }

    /// Flat base color for a surface class, varied per instance.
    pub fn base_color(&self, label: Label, instance: u16) -> [f64; 3] {
        let hue = (f64::from(label) * 0.618_033_988_75).fract();
        let value = 0.8 - 0.1 * f64::from(instance % 3);
        hsv_to_rgb(hue, 0.55, value)
    }

    /// Renders one frame: depth, shaded color, ground truth and, on
    /// prediction frames, noisy top-1 predictions.
    pub fn render_frame(&self, settings: &SynthSettings, pose: &Pose, index: usize) -> FrameBundle {
        let k = &settings.intrinsics;
        let (w, h) = (k.width, k.height);
        let mut depth = Image::filled(w, h, 0.0f32);
        let mut color = Image::filled(w, h, [0u8; 3]);
        let mut gt = Image::filled(w, h, GtPixel::NONE);
        let light = Vector3::from(LIGHT_DIR).normalize();
        let rot = pose.rotation();
        let origin = Point3::from(pose.translation());
        for v in 0..h {
            for u in 0..w {
                let dir = rot * k.ray(u as f64, v as f64);
                let Some(hit) = self.raycast(&origin, &dir) else {
                    continue;
                };
                let z = hit.t;
                let mm = depth_to_mm(z as f32);
                let zq = f64::from(mm) / 1000.0;
                if zq < k.near || zq > k.far {
                    continue;
                }
                depth.set(u, v, zq as f32);
                let shade = 0.35 + 0.65 * hit.normal.dot(&light).max(0.0);
                let base = self.base_color(hit.label, hit.instance);
                color.set(u, v, base.map(|c| (c * shade * 255.0).round().clamp(0.0, 255.0) as u8));
                gt.set(
                    u,
                    v,
                    GtPixel {
                        label: hit.label,
                        instance: hit.instance,
                    },
                );
            }
        }
        let prediction = index
            .is_multiple_of(settings.prediction_stride)
            .then(|| self.predict(&gt, settings.seed, index));
        FrameBundle {
            index,
            depth,
            color,
            pose: *pose,
            prediction,
            gt: Some(gt),
        }
    }

    fn predict(&self, gt: &Image<GtPixel>, seed: u64, index: usize) -> Image<Prediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let n = self.labels.len() as Label;
        let data = gt
            .data
            .iter()
            .map(|g| {
                let corrupt = rng.gen_bool(self.noise);
                let other: Label = rng.gen_range(0..n - 1);
                let prob: f32 = rng.gen_range(0.5..1.0);
                if g.label == crate::labels::NO_LABEL {
                    return Prediction::NONE;
                }
                let label = if corrupt {
                    if other >= g.label {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    g.label
                };
                Prediction { label, prob }
            })
            .collect();
        Image {
            width: gt.width,
            height: gt.height,
            data,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders every pose of `trajectory` and writes a complete sequence
/// directory at `out`. Frames that see nothing are still written, with a
/// warning.
pub fn generate_synthetic_sequence(
    scene: &SceneSpec,
    settings: &SynthSettings,
    trajectory: &[Pose],
    out: &Path,
) -> Result<SequenceMeta> {
    scene.validate()?;
    settings.intrinsics.validate()?;
    if trajectory.is_empty() {
        return Err(Error::invalid("trajectory", "no poses"));
    }
    if settings.prediction_stride == 0 {
        return Err(Error::invalid("synth settings", "prediction stride must be >= 1"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let meta = SequenceMeta {
        root: out.to_path_buf(),
        intrinsics: settings.intrinsics,
        frames: trajectory.len(),
        prediction_stride: settings.prediction_stride,
        labels: scene.labels.clone(),
        layout: FileLayout::default(),
    };
    meta.write_manifest()?;
    write_poses(&meta, trajectory)?;
    for (index, pose) in trajectory.iter().enumerate() {
        let frame = scene.render_frame(settings, pose, index);
        if frame.depth.data.iter().all(|&d| d == 0.0) {
            log::warn!("synthetic frame {index} sees no valid surface");
        }
        write_frame(&meta, &frame)?;
    }
    debug_assert!(out.join(MANIFEST_NAME).exists());
    Ok(meta)
}

/// Camera circling `center` at `radius` and absolute height `height`, looking
/// at `center`, sweeping from `start_deg` to `end_deg`.
pub fn orbit_trajectory(
    center: [f64; 3],
    radius: f64,
    height: f64,
    start_deg: f64,
    end_deg: f64,
    frames: usize,
) -> Result<Vec<Pose>> {
    let target = Point3::from(center);
    (0..frames)
        .map(|i| {
            let s = if frames > 1 {
                i as f64 / (frames - 1) as f64
            } else {
                0.0
            };
            let a = (start_deg + s * (end_deg - start_deg)).to_radians();
            let eye = Point3::new(center[0] + radius * a.cos(), center[1] + radius * a.sin(), height);
            Pose::look_at(eye, target, Vector3::z())
        })
        .collect()
}

/// Camera moving linearly from `eye0` to `eye1` while its look-at target
/// moves from `target0` to `target1`.
pub fn sweep_trajectory(
    eye0: [f64; 3],
    eye1: [f64; 3],
    target0: [f64; 3],
    target1: [f64; 3],
    frames: usize,
) -> Result<Vec<Pose>> {
    let lerp = |a: [f64; 3], b: [f64; 3], s: f64| {
        Point3::new(
            a[0] + s * (b[0] - a[0]),
            a[1] + s * (b[1] - a[1]),
            a[2] + s * (b[2] - a[2]),
        )
    };
    (0..frames)
        .map(|i| {
            let s = if frames > 1 {
                i as f64 / (frames - 1) as f64
            } else {
                0.0
            };
            Pose::look_at(lerp(eye0, eye1, s), lerp(target0, target1, s), Vector3::z())
        })
        .collect()
}

/// Scene description file: scene, camera settings and trajectory.
///
/// ```text
/// labels = wall,floor,ceiling,table,chair
/// object_labels = table,chair
/// room = 3.0 3.0 2.5
/// floor = floor
/// wall = wall
/// ceiling = ceiling
/// box = table 1 0.8 0.8 0.0 1.6 1.4 0.72
/// noise = 0.3
/// seed = 7
/// width = 160
/// height = 120
/// hfov = 60
/// near = 0.1
/// far = 4.0
/// prediction_stride = 10
/// frames = 200
/// orbit = 1.5 1.5 0.5 1.2 1.5 0 360
/// ```
///
/// Instead of `orbit = cx cy cz radius height start_deg end_deg` a file may
/// give `sweep = eye0(3) eye1(3) target0(3) target1(3)` or explicit
/// `pose = <16 row-major values>` lines.
pub fn read_scene_file(path: &Path) -> Result<(SceneSpec, SynthSettings, Vec<Pose>)> {
    let kv = KvFile::read(path)?;
    let labels = LabelSpace::new(&kv.list("labels"), &kv.list("object_labels"))?;
    let label_of = |key: &str| -> Result<Label> {
        let e = kv
            .get(key)
            .ok_or_else(|| kv.error(None, format!("missing field `{key}`")))?;
        labels
            .id(&e.value)
            .ok_or_else(|| kv.error(Some(e), format!("unknown label `{}`", e.value)))
    };
    let room_entry = kv.get("room").ok_or_else(|| kv.error(None, "missing field `room`"))?;
    let room = kv.floats(room_entry)?;
    if room.len() != 3 {
        return Err(kv.error(Some(room_entry), "room needs 3 extents"));
    }
    let mut boxes = Vec::new();
    for e in kv.all("box") {
        let toks: Vec<&str> = e.value.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(kv.error(Some(e), "box = <label> <instance> minx miny minz maxx maxy maxz"));
        }
        let label = labels
            .id(toks[0])
            .ok_or_else(|| kv.error(Some(e), format!("unknown label `{}`", toks[0])))?;
        let nums = toks[1..]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| kv.error(Some(e), "malformed box number"))?;
        boxes.push(SceneBox {
            label,
            instance: nums[0] as u16,
            min: [nums[1], nums[2], nums[3]],
            max: [nums[4], nums[5], nums[6]],
        });
    }
    let scene = SceneSpec {
        room: [room[0], room[1], room[2]],
        floor_label: label_of("floor")?,
        wall_label: label_of("wall")?,
        ceiling_label: label_of("ceiling")?,
        boxes,
        labels,
        noise: kv.optional("noise")?.unwrap_or(0.0),
    };
    scene.validate()?;
    let width: usize = kv.optional("width")?.unwrap_or(160);
    let height: usize = kv.optional("height")?.unwrap_or(120);
    let intrinsics = CameraIntrinsics::from_fov(
        width,
        height,
        kv.optional("hfov")?.unwrap_or(60.0),
        kv.optional("near")?.unwrap_or(0.1),
        kv.optional("far")?.unwrap_or(4.0),
    );
    let settings = SynthSettings {
        intrinsics,
        prediction_stride: kv.optional("prediction_stride")?.unwrap_or(10),
        seed: kv.optional("seed")?.unwrap_or(0),
    };
    let frames: usize = kv.optional("frames")?.unwrap_or(0);
    let trajectory = if let Some(e) = kv.get("orbit") {
        let v = kv.floats(e)?;
        if v.len() != 7 {
            return Err(kv.error(Some(e), "orbit = cx cy cz radius height start_deg end_deg"));
        }
        orbit_trajectory([v[0], v[1], v[2]], v[3], v[4], v[5], v[6], frames)?
    } else if let Some(e) = kv.get("sweep") {
        let v = kv.floats(e)?;
        if v.len() != 12 {
            return Err(kv.error(Some(e), "sweep needs 12 values"));
        }
        sweep_trajectory(
            [v[0], v[1], v[2]],
            [v[3], v[4], v[5]],
            [v[6], v[7], v[8]],
            [v[9], v[10], v[11]],
            frames,
        )?
    } else {
        kv.all("pose")
            .map(|e| Pose::from_row_major(&kv.floats(e)?))
            .collect::<Result<Vec<_>>>()?
    };
    Ok((scene, settings, trajectory))
}
