//! Frame sequences on disk: manifest, raw depth/prediction/ground-truth maps,
//! PPM color, labeled PLY clouds and the synthetic scene generator.
//!
//! Layout of a sequence directory:
//!
//! ```text
//! manifest.txt          key = value metadata
//! poses.txt             one line of 16 row-major floats per frame
//! depth/000000.depth    "DPTH" u16 width u16 height, then u16 millimeters
//! color/000000.ppm      binary P6
//! pred/000000.pred      "PRED" header, then (u16 label, f32 prob) per pixel
//! gt/000000.gt          "GTLB" header, then (u16 label, u16 instance) per pixel
//! ```
//!
//! All integers are little-endian.

mod ply;
mod synth;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use ply::{read_labeled_cloud, write_labeled_cloud, LabeledPoint, PLY_RECORD_SIZE};
pub use synth::{
    generate_synthetic_sequence, orbit_trajectory, read_scene_file, sweep_trajectory, SceneBox, SceneSpec,
    SynthSettings,
};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::kv::KvFile;
use crate::labels::{Label, LabelSpace, NO_LABEL};

pub const MANIFEST_NAME: &str = "manifest.txt";

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
const PRED_MAGIC: &[u8; 4] = b"PRED";
const GT_MAGIC: &[u8; 4] = b"GTLB";

/// Dense row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Image<T> {
    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Top-1 per-pixel class prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub prob: f32,
}

impl Prediction {
    pub const NONE: Prediction = Prediction {
        label: NO_LABEL,
        prob: 0.0,
    };

    pub fn is_valid(&self) -> bool {
        self.label != NO_LABEL && self.prob > 0.0
    }
}

/// Ground-truth class and instance at a pixel. Instance 0 is "no instance".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtPixel {
    pub label: Label,
    pub instance: u16,
}

impl GtPixel {
    pub const NONE: GtPixel = GtPixel {
        label: NO_LABEL,
        instance: 0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub index: usize,
    /// Z-depth in meters, 0 where invalid.
    pub depth: Image<f32>,
    pub color: Image<[u8; 3]>,
    pub pose: Pose,
    pub prediction: Option<Image<Prediction>>,
    pub gt: Option<Image<GtPixel>>,
}

impl FrameBundle {
    pub fn check_dims(&self, intrinsics: &CameraIntrinsics) -> Result<()> {
        let expected = (intrinsics.width, intrinsics.height);
        let check = |what: &str, dims: (usize, usize)| {
            if dims != expected {
                Err(Error::DimensionMismatch {
                    what: format!("frame {} {what}", self.index),
                    expected,
                    found: dims,
                })
            } else {
                Ok(())
            }
        };
        check("depth", self.depth.dims())?;
        check("color", self.color.dims())?;
        if let Some(p) = &self.prediction {
            check("prediction", p.dims())?;
        }
        if let Some(g) = &self.gt {
            check("ground truth", g.dims())?;
        }
        Ok(())
    }
}

/// Everything needed to load any frame of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMeta {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub frames: usize,
    /// Predictions exist for frames whose index is a multiple of this.
    pub prediction_stride: usize,
    pub labels: LabelSpace,
    pub layout: FileLayout,
}

/// Sequence-relative file locations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileLayout {
    pub poses: PathBuf,
    pub depth_dir: PathBuf,
    pub color_dir: PathBuf,
    pub prediction_dir: PathBuf,
    pub gt_dir: PathBuf,
}

impl Default for FileLayout {
    fn default() -> Self {
        FileLayout {
            poses: "poses.txt".into(),
            depth_dir: "depth".into(),
            color_dir: "color".into(),
            prediction_dir: "pred".into(),
            gt_dir: "gt".into(),
        }
    }
}

impl SequenceMeta {
    pub fn is_prediction_frame(&self, index: usize) -> bool {
        index.is_multiple_of(self.prediction_stride)
    }

    pub fn depth_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.layout.depth_dir).join(format!("{index:06}.depth"))
    }

    pub fn color_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.layout.color_dir).join(format!("{index:06}.ppm"))
    }

    pub fn prediction_path(&self, index: usize) -> PathBuf {
        self.root
            .join(&self.layout.prediction_dir)
            .join(format!("{index:06}.pred"))
    }

    pub fn gt_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.layout.gt_dir).join(format!("{index:06}.gt"))
    }

    pub fn poses_path(&self) -> PathBuf {
        self.root.join(&self.layout.poses)
    }

    /// Manifest text for this sequence.
    pub fn manifest_text(&self) -> String {
        let k = &self.intrinsics;
        let mut s = String::new();
        s.push_str(&format!("width = {}\nheight = {}\n", k.width, k.height));
        s.push_str(&format!(
            "fx = {}\nfy = {}\ncx = {}\ncy = {}\nnear = {}\nfar = {}\n",
            k.fx, k.fy, k.cx, k.cy, k.near, k.far
        ));
        s.push_str(&format!(
            "frames = {}\nprediction_stride = {}\n",
            self.frames, self.prediction_stride
        ));
        s.push_str(&format!("labels = {}\n", self.labels.names().join(",")));
        s.push_str(&format!("object_labels = {}\n", self.labels.object_names().join(",")));
        let l = &self.layout;
        if *l != FileLayout::default() {
            s.push_str(&format!(
                "poses = {}\ndepth_dir = {}\ncolor_dir = {}\nprediction_dir = {}\ngt_dir = {}\n",
                l.poses.display(),
                l.depth_dir.display(),
                l.color_dir.display(),
                l.prediction_dir.display(),
                l.gt_dir.display()
            ));
        }
        s
    }

    pub fn write_manifest(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_NAME);
        fs::write(&path, self.manifest_text()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a sequence manifest. `path` may be the manifest file or the sequence
/// directory containing `manifest.txt`. Referenced frame files are not
/// checked here; a missing file surfaces from [`load_frame`].
pub fn read_manifest(path: &Path) -> Result<SequenceMeta> {
    let (root, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_NAME))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    let kv = KvFile::read(&file)?;
    let intrinsics = CameraIntrinsics {
        width: kv.require("width")?,
        height: kv.require("height")?,
        fx: kv.require("fx")?,
        fy: kv.require("fy")?,
        cx: kv.require("cx")?,
        cy: kv.require("cy")?,
        near: kv.require("near")?,
        far: kv.require("far")?,
    };
    intrinsics.validate()?;
    let frames: usize = kv.require("frames")?;
    let prediction_stride: usize = kv.optional("prediction_stride")?.unwrap_or(10);
    if prediction_stride == 0 {
        return Err(kv.error(kv.get("prediction_stride"), "prediction_stride must be >= 1"));
    }
    let names = kv.list("labels");
    if names.is_empty() {
        return Err(kv.error(kv.get("labels"), "label space is empty"));
    }
    let objects = kv.list("object_labels");
    let labels = LabelSpace::new(&names, &objects)?;
    let mut layout = FileLayout::default();
    for (key, slot) in [
        ("poses", &mut layout.poses),
        ("depth_dir", &mut layout.depth_dir),
        ("color_dir", &mut layout.color_dir),
        ("prediction_dir", &mut layout.prediction_dir),
        ("gt_dir", &mut layout.gt_dir),
    ] {
        if let Some(e) = kv.get(key) {
            *slot = PathBuf::from(&e.value);
        }
    }
    Ok(SequenceMeta {
        root,
        intrinsics,
        frames,
        prediction_stride,
        labels,
        layout,
    })
}

/// Reads all poses of a sequence.
pub fn read_poses(meta: &SequenceMeta) -> Result<Vec<Pose>> {
    let path = meta.poses_path();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv_err = |line: usize, msg: String| Error::Parse {
        path: path.clone(),
        line,
        msg,
    };
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| kv_err(i + 1, e.to_string()))?;
        poses.push(Pose::from_row_major(&values).map_err(|e| kv_err(i + 1, e.to_string()))?);
    }
    Ok(poses)
}

pub fn write_poses(meta: &SequenceMeta, poses: &[Pose]) -> Result<()> {
    let mut s = String::new();
    for p in poses {
        let row: Vec<String> = p.row_major().iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    let path = meta.poses_path();
    fs::write(&path, s).map_err(|e| Error::io(path, e))
}

/// Loads frame `index`; `poses` is the sequence's pose list from
/// [`read_poses`].
pub fn load_frame(meta: &SequenceMeta, poses: &[Pose], index: usize) -> Result<FrameBundle> {
    if index >= meta.frames {
        return Err(Error::FrameOutOfRange {
            index,
            count: meta.frames,
        });
    }
    let pose = *poses.get(index).ok_or_else(|| {
        Error::format(
            meta.poses_path().display().to_string(),
            format!("no pose for frame {index}"),
        )
    })?;
    let k = &meta.intrinsics;
    let depth = read_depth(&meta.depth_path(index), k)?;
    let color = read_ppm(&meta.color_path(index))?;
    let prediction = if meta.is_prediction_frame(index) {
        Some(read_prediction(&meta.prediction_path(index))?)
    } else {
        None
    };
    let gt_path = meta.gt_path(index);
    let gt = if gt_path.exists() {
        Some(read_gt(&gt_path)?)
    } else {
        None
    };
    let frame = FrameBundle {
        index,
        depth,
        color,
        pose,
        prediction,
        gt,
    };
    frame.check_dims(k)?;
    Ok(frame)
}

/// Writes the per-frame files of `frame` into the sequence directory.
pub fn write_frame(meta: &SequenceMeta, frame: &FrameBundle) -> Result<()> {
    write_depth(&meta.depth_path(frame.index), &frame.depth)?;
    write_ppm(&meta.color_path(frame.index), &frame.color)?;
    if let Some(p) = &frame.prediction {
        write_prediction(&meta.prediction_path(frame.index), p)?;
    }
    if let Some(g) = &frame.gt {
        write_gt(&meta.gt_path(frame.index), g)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn header(magic: &[u8; 4], width: usize, height: usize, record: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + width * height * record);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&(height as u16).to_le_bytes());
    out
}

fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 4], record: usize) -> Result<(usize, usize, &'a [u8])> {
    let what = || path.display().to_string();
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::format(what(), "bad magic"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() != width * height * record {
        return Err(Error::format(
            what(),
            format!(
                "expected {} payload bytes, found {}",
                width * height * record,
                body.len()
            ),
        ));
    }
    Ok((width, height, body))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Millimeter quantization used by the depth format.
pub fn depth_to_mm(depth: f32) -> u16 {
    (f64::from(depth) * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
}

pub fn write_depth(path: &Path, depth: &Image<f32>) -> Result<()> {
    let mut out = header(DEPTH_MAGIC, depth.width, depth.height, 2);
    for &d in &depth.data {
        out.extend_from_slice(&depth_to_mm(d).to_le_bytes());
    }
    write_file(path, &out)
}

/// Reads a depth map, converting to meters. Values outside `[near, far]`
/// become 0 (invalid).
pub fn read_depth(path: &Path, k: &CameraIntrinsics) -> Result<Image<f32>> {
    let bytes = read_bytes(path)?;
    let (width, height, body) = parse_header(path, &bytes, DEPTH_MAGIC, 2)?;
    let data = body
        .chunks_exact(2)
        .map(|c| {
            let d = f64::from(u16::from_le_bytes([c[0], c[1]])) / 1000.0;
            if d >= k.near && d <= k.far {
                d as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(Image { width, height, data })
}

pub fn write_prediction(path: &Path, pred: &Image<Prediction>) -> Result<()> {
    let mut out = header(PRED_MAGIC, pred.width, pred.height, 6);
    for p in &pred.data {
        out.extend_from_slice(&p.label.to_le_bytes());
        out.extend_from_slice(&p.prob.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn read_prediction(path: &Path) -> Result<Image<Prediction>> {
    let bytes = read_bytes(path)?;
    let (width, height, body) = parse_header(path, &bytes, PRED_MAGIC, 6)?;
    let data = body
        .chunks_exact(6)
        .map(|c| Prediction {
            label: u16::from_le_bytes([c[0], c[1]]),
            prob: f32::from_le_bytes([c[2], c[3], c[4], c[5]]),
        })
        .collect();
    Ok(Image { width, height, data })
}

pub fn write_gt(path: &Path, gt: &Image<GtPixel>) -> Result<()> {
    let mut out = header(GT_MAGIC, gt.width, gt.height, 4);
    for g in &gt.data {
        out.extend_from_slice(&g.label.to_le_bytes());
        out.extend_from_slice(&g.instance.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn read_gt(path: &Path) -> Result<Image<GtPixel>> {
    let bytes = read_bytes(path)?;
    let (width, height, body) = parse_header(path, &bytes, GT_MAGIC, 4)?;
    let data = body
        .chunks_exact(4)
        .map(|c| GtPixel {
            label: u16::from_le_bytes([c[0], c[1]]),
            instance: u16::from_le_bytes([c[2], c[3]]),
        })
        .collect();
    Ok(Image { width, height, data })
}

pub fn write_ppm(path: &Path, color: &Image<[u8; 3]>) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", color.width, color.height).into_bytes();
    for px in &color.data {
        out.extend_from_slice(px);
    }
    write_file(path, &out)
}

/// Reads a binary (P6) PPM with maxval 255.
pub fn read_ppm(path: &Path) -> Result<Image<[u8; 3]>> {
    let bytes = read_bytes(path)?;
    let bad = |msg: &str| Error::format(path.display().to_string(), msg.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != width * height * 3 {
        return Err(bad("payload size mismatch"));
    }
    let data = body.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Image { width, height, data })
}
