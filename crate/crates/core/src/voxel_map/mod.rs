//! Sparse hashed voxel grid: TSDF integration, per-voxel label fusion,
//! objectness accumulation, frustum queries, normals and surface points.

mod snapshot;

use nalgebra::{Point3, Vector3};
use rustc_hash::{FxHashMap, FxHashSet};

pub use snapshot::{read_snapshot, write_snapshot};

use crate::frame_io::{FrameBundle, LabeledPoint};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::labels::{Label, LabelSpace, NO_LABEL};

/// Integer grid coordinates; the voxel center is `key * voxel_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

const KEY_BITS: u32 = 21;
const KEY_OFFSET: i64 = 1 << (KEY_BITS - 1);
const KEY_MASK: u64 = (1 << KEY_BITS) - 1;

impl VoxelKey {
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        VoxelKey { i, j, k }
    }

    pub fn containing(p: &Point3<f64>, voxel_size: f64) -> Self {
        VoxelKey {
            i: (p.x / voxel_size).round() as i32,
            j: (p.y / voxel_size).round() as i32,
            k: (p.z / voxel_size).round() as i32,
        }
    }

    /// Packs the key into 64 bits, 21 bits per axis.
    #[inline]
    pub fn pack(self) -> u64 {
        let f = |v: i32| ((i64::from(v) + KEY_OFFSET) as u64) & KEY_MASK;
        f(self.i) | (f(self.j) << KEY_BITS) | (f(self.k) << (2 * KEY_BITS))
    }

    pub fn unpack(packed: u64) -> Self {
        let f = |s: u32| (((packed >> s) & KEY_MASK) as i64 - KEY_OFFSET) as i32;
        VoxelKey {
            i: f(0),
            j: f(KEY_BITS),
            k: f(2 * KEY_BITS),
        }
    }

    pub fn center(self, voxel_size: f64) -> Point3<f64> {
        Point3::new(
            f64::from(self.i) * voxel_size,
            f64::from(self.j) * voxel_size,
            f64::from(self.k) * voxel_size,
        )
    }

    #[inline]
    pub fn offset(self, di: i32, dj: i32, dk: i32) -> Self {
        VoxelKey {
            i: self.i + di,
            j: self.j + dj,
            k: self.k + dk,
        }
    }

    pub fn neighbors6(self) -> [VoxelKey; 6] {
        [
            self.offset(1, 0, 0),
            self.offset(-1, 0, 0),
            self.offset(0, 1, 0),
            self.offset(0, -1, 0),
            self.offset(0, 0, 1),
            self.offset(0, 0, -1),
        ]
    }

    fn block(self) -> u64 {
        VoxelKey {
            i: self.i.div_euclid(BLOCK_SIDE),
            j: self.j.div_euclid(BLOCK_SIDE),
            k: self.k.div_euclid(BLOCK_SIDE),
        }
        .pack()
    }
}

/// Side of the coarse blocks used to cull the frustum query.
const BLOCK_SIDE: i32 = 8;

/// Index of a voxel in its map. Voxels are never removed, so ids are stable.
pub type VoxelId = u32;

/// Marker for "no super-voxel".
pub const NO_CLUSTER: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voxel {
    /// Signed distance normalized by the truncation distance, in [-1, 1].
    pub tsdf: f32,
    pub weight: u16,
    /// Running-mean RGB in [0, 255].
    pub color: [f32; 3],
    /// Best fused semantic label, `NO_LABEL` before the first prediction.
    pub label: Label,
    pub label_conf: f32,
    pub objectness: f32,
    /// Fused instance id; 0 is unknown.
    pub instance: u16,
    pub instance_conf: f32,
    /// Label assigned by CRF refinement, `NO_LABEL` until refined.
    pub segment: Label,
    /// Owning super-voxel or `NO_CLUSTER`.
    pub cluster: u32,
    /// Normal cached by the last frustum query that saw this voxel.
    pub normal: Option<[f32; 3]>,
}

impl Voxel {
    fn new(objectness: f32) -> Self {
        Voxel {
            tsdf: 1.0,
            weight: 0,
            color: [0.0; 3],
            label: NO_LABEL,
            label_conf: 0.0,
            objectness,
            instance: 0,
            instance_conf: 0.0,
            segment: NO_LABEL,
            cluster: NO_CLUSTER,
            normal: None,
        }
    }

    /// Label reported for this voxel: the refined one when available.
    pub fn output_label(&self) -> Label {
        if self.segment != NO_LABEL {
            self.segment
        } else {
            self.label
        }
    }
}

/// Best-label fusion: agreement adds `p` to the confidence, disagreement
/// subtracts it, and a negative confidence swaps in the incoming label.
#[inline]
pub fn fuse_label(label: &mut Label, conf: &mut f32, incoming: Label, p: f32) {
    if incoming == *label {
        *conf += p;
    } else {
        *conf -= p;
        if *conf < 0.0 {
            *label = incoming;
            *conf = -*conf;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapParams {
    pub voxel_size: f64,
    /// Truncation distance in meters.
    pub truncation: f64,
    pub weight_cap: u16,
    /// |tsdf| bound for frustum-active voxels.
    pub surface_band: f32,
    /// |tsdf| bound for extracted surface points.
    pub extract_band: f32,
    pub objectness_init: f32,
    pub objectness_step: f32,
}

impl Default for MapParams {
    fn default() -> Self {
        MapParams {
            voxel_size: 0.008,
            truncation: 0.04,
            weight_cap: 255,
            surface_band: 0.5,
            extract_band: 0.25,
            objectness_init: 0.5,
            objectness_step: 0.1,
        }
    }
}

/// Voxels touched by a frame or visible in the current frustum.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActiveSet {
    pub ids: Vec<VoxelId>,
}

impl ActiveSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct VoxelMap {
    params: MapParams,
    keys: Vec<VoxelKey>,
    voxels: Vec<Voxel>,
    index: FxHashMap<u64, VoxelId>,
    blocks: FxHashMap<u64, Vec<VoxelId>>,
    block_order: Vec<u64>,
}

impl VoxelMap {
    pub fn new(params: MapParams) -> Self {
        VoxelMap {
            params,
            keys: Vec::new(),
            voxels: Vec::new(),
            index: FxHashMap::default(),
            blocks: FxHashMap::default(),
            block_order: Vec::new(),
        }
    }

    pub fn params(&self) -> &MapParams {
        &self.params
    }

    pub fn voxel_size(&self) -> f64 {
        self.params.voxel_size
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn id_of(&self, key: VoxelKey) -> Option<VoxelId> {
        self.index.get(&key.pack()).copied()
    }

    pub fn get(&self, key: VoxelKey) -> Option<&Voxel> {
        self.id_of(key).map(|id| &self.voxels[id as usize])
    }

    pub fn get_mut(&mut self, key: VoxelKey) -> Option<&mut Voxel> {
        self.id_of(key).map(|id| &mut self.voxels[id as usize])
    }

    #[inline]
    pub fn voxel(&self, id: VoxelId) -> &Voxel {
        &self.voxels[id as usize]
    }

    #[inline]
    pub fn voxel_mut(&mut self, id: VoxelId) -> &mut Voxel {
        &mut self.voxels[id as usize]
    }

    #[inline]
    pub fn key(&self, id: VoxelId) -> VoxelKey {
        self.keys[id as usize]
    }

    pub fn position(&self, id: VoxelId) -> Point3<f64> {
        self.keys[id as usize].center(self.params.voxel_size)
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn keys(&self) -> &[VoxelKey] {
        &self.keys
    }

    /// Inserts a default voxel if `key` is absent and returns its id.
    pub fn insert(&mut self, key: VoxelKey) -> VoxelId {
        if let Some(&id) = self.index.get(&key.pack()) {
            return id;
        }
        let id = self.voxels.len() as VoxelId;
        self.keys.push(key);
        self.voxels.push(Voxel::new(self.params.objectness_init));
        self.index.insert(key.pack(), id);
        let block = key.block();
        self.blocks
            .entry(block)
            .or_insert_with(|| {
                self.block_order.push(block);
                Vec::new()
            })
            .push(id);
        id
    }

    pub(crate) fn insert_voxel(&mut self, key: VoxelKey, voxel: Voxel) -> VoxelId {
        let id = self.insert(key);
        self.voxels[id as usize] = voxel;
        id
    }

    /// Projective TSDF integration. Voxels within the truncation band along
    /// each valid depth ray are allocated; every touched voxel is updated
    /// once per frame from the depth at the pixel its center projects to.
    /// Returns the touched voxels in allocation order.
    pub fn integrate_depth(&mut self, frame: &FrameBundle, k: &CameraIntrinsics) -> ActiveSet {
        let vs = self.params.voxel_size;
        let t = self.params.truncation;
        let rot = frame.pose.rotation();
        let origin = frame.pose.translation();

        let mut seen: FxHashSet<u64> = FxHashSet::default();
        let mut candidates: Vec<VoxelKey> = Vec::new();
        for v in 0..k.height {
            for u in 0..k.width {
                let d = f64::from(*frame.depth.get(u, v));
                if d <= 0.0 {
                    continue;
                }
                let ray = k.ray(u as f64, v as f64);
                let step = vs / ray.norm();
                let steps = (2.0 * t / step).ceil() as i32;
                for s in 0..=steps {
                    let z = d - t + f64::from(s) * step;
                    if z <= 0.0 {
                        continue;
                    }
                    let p = Point3::from(rot * (ray * z) + origin);
                    let key = VoxelKey::containing(&p, vs);
                    if seen.insert(key.pack()) {
                        candidates.push(key);
                    }
                }
            }
        }

        let to_cam = frame.pose.world_to_camera_transform();
        let cap = self.params.weight_cap;
        let mut active = Vec::with_capacity(candidates.len());
        for key in candidates {
            let pc = to_cam.apply(&key.center(vs));
            let Some((u, v)) = k.project_to_pixel(&pc) else {
                continue;
            };
            let d = f64::from(*frame.depth.get(u, v));
            if d <= 0.0 {
                continue;
            }
            let sdf = d - pc.z;
            if sdf < -t {
                continue;
            }
            let sample = (sdf / t).clamp(-1.0, 1.0) as f32;
            let rgb = frame.color.get(u, v).map(f32::from);
            let id = self.insert(key);
            let vox = &mut self.voxels[id as usize];
            let w = f32::from(vox.weight);
            vox.tsdf = ((w * vox.tsdf + sample) / (w + 1.0)).clamp(-1.0, 1.0);
            for (c, x) in vox.color.iter_mut().zip(rgb) {
                *c = (w * *c + x) / (w + 1.0);
            }
            vox.weight = vox.weight.saturating_add(1).min(cap);
            active.push(id);
        }
        ActiveSet { ids: active }
    }

    /// Pixel whose observed surface explains voxel `id`: the center must
    /// project inside the image onto a valid depth within the truncation
    /// band, which also rejects voxels hidden behind an occluder.
    fn observed_pixel(
        &self,
        id: VoxelId,
        to_cam: &crate::geometry::WorldToCamera,
        frame: &FrameBundle,
        k: &CameraIntrinsics,
    ) -> Option<(usize, usize)> {
        let pc = to_cam.apply(&self.position(id));
        let (u, v) = k.project_to_pixel(&pc)?;
        let d = f64::from(*frame.depth.get(u, v));
        (d > 0.0 && (d - pc.z).abs() <= self.params.truncation).then_some((u, v))
    }

    /// Active voxels that the frame observes, with their pixel.
    pub fn visible_pixels(
        &self,
        active: &ActiveSet,
        frame: &FrameBundle,
        k: &CameraIntrinsics,
    ) -> Vec<(VoxelId, usize, usize)> {
        let to_cam = frame.pose.world_to_camera_transform();
        active
            .ids
            .iter()
            .filter_map(|&id| self.observed_pixel(id, &to_cam, frame, k).map(|(u, v)| (id, u, v)))
            .collect()
    }

    /// Best-label fusion of the frame's predictions into the active voxels.
    /// Frames without predictions are ignored.
    pub fn fuse_semantic(&mut self, active: &ActiveSet, frame: &FrameBundle, k: &CameraIntrinsics) {
        let Some(pred) = &frame.prediction else {
            return;
        };
        let to_cam = frame.pose.world_to_camera_transform();
        for &id in &active.ids {
            let Some((u, v)) = self.observed_pixel(id, &to_cam, frame, k) else {
                continue;
            };
            let p = pred.get(u, v);
            if !p.is_valid() {
                continue;
            }
            let vox = &mut self.voxels[id as usize];
            fuse_label(&mut vox.label, &mut vox.label_conf, p.label, p.prob);
        }
    }

    /// Raises objectness by the step where the prediction is an object class
    /// and lowers it otherwise, clamped to [0, 1].
    pub fn update_objectness(
        &mut self,
        active: &ActiveSet,
        frame: &FrameBundle,
        k: &CameraIntrinsics,
        labels: &LabelSpace,
    ) {
        let Some(pred) = &frame.prediction else {
            return;
        };
        let to_cam = frame.pose.world_to_camera_transform();
        let step = self.params.objectness_step;
        for &id in &active.ids {
            let Some((u, v)) = self.observed_pixel(id, &to_cam, frame, k) else {
                continue;
            };
            let p = pred.get(u, v);
            if !p.is_valid() {
                continue;
            }
            let vox = &mut self.voxels[id as usize];
            let delta = if labels.is_object(p.label) { step } else { -step };
            vox.objectness = (vox.objectness + delta).clamp(0.0, 1.0);
        }
    }

    /// Normalized central-difference TSDF gradient. `None` unless all six
    /// axis neighbors exist with positive weight.
    pub fn voxel_normal(&self, key: VoxelKey) -> Option<Vector3<f64>> {
        let sample = |k: VoxelKey| self.get(k).filter(|v| v.weight > 0).map(|v| f64::from(v.tsdf));
        let n = key.neighbors6();
        let mut g = Vector3::zeros();
        for axis in 0..3 {
            let plus = sample(n[2 * axis])?;
            let minus = sample(n[2 * axis + 1])?;
            g[axis] = (plus - minus) / 2.0;
        }
        let norm = g.norm();
        (norm > 1e-12).then(|| g / norm)
    }

    /// Voxels whose centers project inside the image at a depth in
    /// `[near, far]` with `|tsdf|` below the surface band. Refreshes the
    /// cached normal of every returned voxel.
    pub fn frustum_active(&mut self, pose: &Pose, k: &CameraIntrinsics) -> ActiveSet {
        let ids = self.frustum_query(pose, k);
        for &id in &ids {
            let normal = self
                .voxel_normal(self.keys[id as usize])
                .map(|n| [n.x as f32, n.y as f32, n.z as f32]);
            self.voxels[id as usize].normal = normal;
        }
        ActiveSet { ids }
    }

    /// Read-only part of [`frustum_active`](Self::frustum_active).
    pub fn frustum_query(&self, pose: &Pose, k: &CameraIntrinsics) -> Vec<VoxelId> {
        let vs = self.params.voxel_size;
        let to_cam = pose.world_to_camera_transform();
        let band = self.params.surface_band;
        let half_diag = f64::from(BLOCK_SIDE) * vs * 3f64.sqrt() / 2.0;
        // Inward normals of the four side planes of the viewing frustum.
        let a_min = (-0.5 - k.cx) / k.fx;
        let a_max = (k.width as f64 - 0.5 - k.cx) / k.fx;
        let b_min = (-0.5 - k.cy) / k.fy;
        let b_max = (k.height as f64 - 0.5 - k.cy) / k.fy;
        let planes = [
            Vector3::new(1.0, 0.0, -a_min).normalize(),
            Vector3::new(-1.0, 0.0, a_max).normalize(),
            Vector3::new(0.0, 1.0, -b_min).normalize(),
            Vector3::new(0.0, -1.0, b_max).normalize(),
        ];
        let mut out = Vec::new();
        for block in &self.block_order {
            // Cull whole blocks by their bounding sphere.
            let bk = VoxelKey::unpack(*block);
            let side = f64::from(BLOCK_SIDE) * vs;
            let center = Point3::new(
                (f64::from(bk.i) + 0.5) * side - vs / 2.0,
                (f64::from(bk.j) + 0.5) * side - vs / 2.0,
                (f64::from(bk.k) + 0.5) * side - vs / 2.0,
            );
            let cc = to_cam.apply(&center);
            if cc.z + half_diag < k.near
                || cc.z - half_diag > k.far
                || planes.iter().any(|n| n.dot(&cc.coords) < -half_diag)
            {
                continue;
            }
            for &id in &self.blocks[block] {
                let vox = &self.voxels[id as usize];
                if vox.weight == 0 || vox.tsdf.abs() >= band {
                    continue;
                }
                let pc = to_cam.apply(&self.position(id));
                if pc.z < k.near || pc.z > k.far {
                    continue;
                }
                if k.project_to_pixel(&pc).is_some() {
                    out.push(id);
                }
            }
        }
        out
    }

    /// One point per observed voxel near the zero crossing.
    pub fn extract_surface_points(&self) -> Vec<LabeledPoint> {
        self.surface_ids()
            .into_iter()
            .map(|id| {
                let v = &self.voxels[id as usize];
                let p = self.position(id);
                LabeledPoint {
                    position: [p.x as f32, p.y as f32, p.z as f32],
                    color: v.color.map(|c| c.round().clamp(0.0, 255.0) as u8),
                    label: v.output_label(),
                    instance: v.instance,
                    confidence: v.label_conf,
                }
            })
            .collect()
    }

    /// Ids of the voxels [`extract_surface_points`](Self::extract_surface_points) reports, in the same order.
    pub fn surface_ids(&self) -> Vec<VoxelId> {
        let band = self.params.extract_band;
        (0..self.voxels.len() as VoxelId)
            .filter(|&id| {
                let v = &self.voxels[id as usize];
                v.weight > 0 && v.tsdf.abs() < band
            })
            .collect()
    }

    /// Checks every voxel's field bounds; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (id, v) in self.voxels.iter().enumerate() {
            let bad = |what: &str| Err(format!("voxel {id} ({:?}): {what}: {v:?}", self.keys[id]));
            if !(v.tsdf.abs() <= 1.0) {
                return bad("tsdf out of [-1, 1]");
            }
            if v.weight > self.params.weight_cap {
                return bad("weight above cap");
            }
            if !(v.label_conf >= 0.0) || !(v.instance_conf >= 0.0) {
                return bad("negative confidence");
            }
            if !(0.0..=1.0).contains(&v.objectness) {
                return bad("objectness out of [0, 1]");
            }
            if self.index.get(&self.keys[id].pack()) != Some(&(id as VoxelId)) {
                return bad("index does not map back");
            }
        }
        if self.index.len() != self.voxels.len() {
            return Err("index size differs from voxel count".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame_io::{Image, Prediction};
    use proptest::prelude::*;

    fn cam(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: ((w - 1) / 2) as f64,
            cy: ((h - 1) / 2) as f64,
            width: w,
            height: h,
            near: 0.1,
            far: 5.0,
        }
    }

    fn frame(k: &CameraIntrinsics, depth: impl Fn(usize, usize) -> f32) -> FrameBundle {
        let mut d = Image::filled(k.width, k.height, 0.0f32);
        for v in 0..k.height {
            for u in 0..k.width {
                d.set(u, v, depth(u, v));
            }
        }
        FrameBundle {
            index: 0,
            depth: d,
            color: Image::filled(k.width, k.height, [100, 150, 200]),
            pose: Pose::identity(),
            prediction: None,
            gt: None,
        }
    }

    fn with_prediction(mut f: FrameBundle, label: Label, prob: f32) -> FrameBundle {
        f.prediction = Some(Image::filled(f.depth.width, f.depth.height, Prediction { label, prob }));
        f
    }

    fn labels() -> LabelSpace {
        LabelSpace::new(&["wall", "floor", "chair", "table"], &["chair", "table"]).unwrap()
    }

    #[test]
    fn key_packing_roundtrip() {
        for key in [
            VoxelKey::new(0, 0, 0),
            VoxelKey::new(-1, 2, -3),
            VoxelKey::new(1_000_000, -1_000_000, 7),
        ] {
            assert_eq!(VoxelKey::unpack(key.pack()), key);
        }
        assert_ne!(VoxelKey::new(1, 0, 0).pack(), VoxelKey::new(0, 1, 0).pack());
    }

    #[test]
    fn single_center_pixel() {
        let k = cam(9, 9);
        let f = frame(&k, |u, v| if (u, v) == (4, 4) { 1.0 } else { 0.0 });
        let mut map = VoxelMap::new(MapParams::default());
        let active = map.integrate_depth(&f, &k);
        assert!(!active.is_empty());
        let vox = map.get(VoxelKey::new(0, 0, 125)).expect("voxel at (0,0,1.0)");
        assert!(vox.tsdf.abs() < 1.0);
        assert_eq!(vox.weight, 1);
        for &id in &active.ids {
            assert_eq!(map.voxel(id).weight, 1);
        }
    }

    #[test]
    fn identical_frame_twice() {
        let k = cam(21, 21);
        let f = frame(&k, |_, _| 1.0);
        let mut map = VoxelMap::new(MapParams::default());
        map.integrate_depth(&f, &k);
        let before: Vec<f32> = map.voxels().iter().map(|v| v.tsdf).collect();
        map.integrate_depth(&f, &k);
        let after: Vec<f32> = map.voxels().iter().map(|v| v.tsdf).collect();
        assert_eq!(before, after);
        assert!(map.voxels().iter().all(|v| v.weight == 2));
    }

    #[test]
    fn voxel_on_surface_has_zero_tsdf() {
        let k = cam(21, 21);
        let f = frame(&k, |_, _| 1.0);
        let mut map = VoxelMap::new(MapParams::default());
        map.integrate_depth(&f, &k);
        let p = MapParams::default();
        let tol = (p.voxel_size / p.truncation) as f32;
        assert!(map.get(VoxelKey::new(0, 0, 125)).unwrap().tsdf.abs() <= tol);
        assert!(map.get(VoxelKey::new(1, -1, 125)).unwrap().tsdf.abs() <= tol);
        // One voxel in front of the plane: sdf = +0.008 -> 0.2.
        assert!((map.get(VoxelKey::new(0, 0, 124)).unwrap().tsdf - 0.2).abs() < 1e-5);
    }

    #[test]
    fn all_invalid_depth_gives_empty_active_set() {
        let k = cam(9, 9);
        let f = frame(&k, |_, _| 0.0);
        let mut map = VoxelMap::new(MapParams::default());
        assert!(map.integrate_depth(&f, &k).is_empty());
        assert!(map.is_empty());
    }

    fn seeded(label: Label, conf: f32) -> (VoxelMap, ActiveSet, CameraIntrinsics) {
        let k = cam(9, 9);
        let f = frame(&k, |u, v| if (u, v) == (4, 4) { 1.0 } else { 0.0 });
        let mut map = VoxelMap::new(MapParams::default());
        map.integrate_depth(&f, &k);
        let id = map.id_of(VoxelKey::new(0, 0, 125)).unwrap();
        let v = map.voxel_mut(id);
        v.label = label;
        v.label_conf = conf;
        (map, ActiveSet { ids: vec![id] }, k)
    }

    #[test]
    fn fusion_rules() {
        let (chair, table) = (2, 3);
        let center = |l, p| {
            let k = cam(9, 9);
            with_prediction(frame(&k, |u, v| if (u, v) == (4, 4) { 1.0 } else { 0.0 }), l, p)
        };
        let cases = [
            ((chair, 0.6), (chair, 0.3), (chair, 0.9)),
            ((chair, 0.2), (table, 0.5), (table, 0.3)),
            ((chair, 0.7), (table, 0.5), (chair, 0.2)),
        ];
        for ((l0, c0), (l, p), (l1, c1)) in cases {
            let (mut map, active, k) = seeded(l0, c0);
            map.fuse_semantic(&active, &center(l, p), &k);
            let v = map.voxel(active.ids[0]);
            assert_eq!(v.label, l1);
            assert!((v.label_conf - c1).abs() < 1e-6, "{} vs {c1}", v.label_conf);
        }
    }

    #[test]
    fn fusion_skips_voxels_outside_image() {
        let (mut map, _, k) = seeded(2, 0.5);
        let id = map.insert(VoxelKey::new(-1000, 0, 125));
        let f = with_prediction(frame(&k, |_, _| 1.0), 3, 1.0);
        map.fuse_semantic(&ActiveSet { ids: vec![id] }, &f, &k);
        assert_eq!(map.voxel(id).label, NO_LABEL);
    }

    #[test]
    fn objectness_rules() {
        let space = labels();
        let (chair, wall) = (2, 0);
        let k = cam(9, 9);
        let base = frame(&k, |u, v| if (u, v) == (4, 4) { 1.0 } else { 0.0 });
        let (mut map, active, _) = seeded(chair, 0.0);
        map.update_objectness(&active, &with_prediction(base.clone(), chair, 0.9), &k, &space);
        assert!((map.voxel(active.ids[0]).objectness - 0.6).abs() < 1e-6);

        map.voxel_mut(active.ids[0]).objectness = 0.95;
        map.update_objectness(&active, &with_prediction(base.clone(), chair, 0.9), &k, &space);
        assert_eq!(map.voxel(active.ids[0]).objectness, 1.0);

        map.voxel_mut(active.ids[0]).objectness = 0.5;
        for _ in 0..10 {
            map.update_objectness(&active, &with_prediction(base.clone(), wall, 0.9), &k, &space);
        }
        assert_eq!(map.voxel(active.ids[0]).objectness, 0.0);
        map.update_objectness(&active, &with_prediction(base, wall, 0.9), &k, &space);
        assert_eq!(map.voxel(active.ids[0]).objectness, 0.0);
    }

    fn field_map(f: impl Fn(f64, f64, f64) -> f32, r: i32) -> VoxelMap {
        let mut map = VoxelMap::new(MapParams::default());
        let vs = map.voxel_size();
        for i in -r..=r {
            for j in -r..=r {
                for k in -r..=r {
                    let key = VoxelKey::new(i, j, k);
                    let p = key.center(vs);
                    let id = map.insert(key);
                    let v = map.voxel_mut(id);
                    v.weight = 1;
                    v.tsdf = f(p.x, p.y, p.z);
                }
            }
        }
        map
    }

    #[test]
    fn normal_of_planar_ramp() {
        let map = field_map(|_, _, z| (z / 0.04) as f32, 3);
        let n = map.voxel_normal(VoxelKey::new(0, 0, 0)).unwrap();
        assert!((n - Vector3::z()).norm() < 1e-6);
    }

    #[test]
    fn normal_of_isolated_voxel_is_absent() {
        let mut map = VoxelMap::new(MapParams::default());
        map.insert(VoxelKey::new(0, 0, 0));
        assert!(map.voxel_normal(VoxelKey::new(0, 0, 0)).is_none());
    }

    #[test]
    fn normal_of_sphere_field() {
        // Sphere of radius 0.1 around c; the normal at q must point along q - c.
        let c = Vector3::new(0.013, -0.021, 0.007);
        let map = field_map(|x, y, z| (((Vector3::new(x, y, z) - c).norm() - 0.1) / 0.5) as f32, 20);
        let vs = map.voxel_size();
        for key in [
            VoxelKey::new(12, 2, -1),
            VoxelKey::new(-3, 11, 4),
            VoxelKey::new(2, 2, -12),
        ] {
            let q = key.center(vs).coords;
            let expected = (q - c).normalize();
            let n = map.voxel_normal(key).unwrap();
            assert!((n - expected).norm() < 1e-3, "{key:?}: {n:?} vs {expected:?}");
        }
    }

    #[test]
    fn frustum_filters() {
        let k = cam(21, 21);
        let mut map = VoxelMap::new(MapParams::default());
        let mut add = |key: VoxelKey, tsdf: f32| {
            let id = map.insert(key);
            let v = map.voxel_mut(id);
            v.weight = 1;
            v.tsdf = tsdf;
            id
        };
        let center = add(VoxelKey::new(0, 0, 250), 0.0);
        let behind = add(VoxelKey::new(0, 0, -250), 0.0);
        // u = 100 * x / z + 10 = -5  ->  x / z = -0.15
        let off_image = add(VoxelKey::new(-30, 0, 200), 0.0);
        let far_from_surface = add(VoxelKey::new(1, 0, 250), 0.9);
        let active = map.frustum_active(&Pose::identity(), &k);
        assert!(active.ids.contains(&center));
        assert!(!active.ids.contains(&behind));
        assert!(!active.ids.contains(&off_image));
        assert!(!active.ids.contains(&far_from_surface));
    }

    #[test]
    fn frustum_block_culling_matches_brute_force() {
        let k = cam(31, 23);
        let mut map = VoxelMap::new(MapParams::default());
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((rng_state >> 33) % 600) as i32 - 300
        };
        for _ in 0..20000 {
            let key = VoxelKey::new(next(), next(), next());
            let id = map.insert(key);
            map.voxel_mut(id).weight = 1;
            map.voxel_mut(id).tsdf = 0.1;
        }
        let pose = Pose::look_at(Point3::new(0.1, -0.2, -1.0), Point3::new(0.0, 0.3, 1.0), Vector3::y()).unwrap();
        let mut fast = map.frustum_query(&pose, &k);
        fast.sort_unstable();
        let to_cam = pose.world_to_camera_transform();
        let brute: Vec<VoxelId> = (0..map.len() as VoxelId)
            .filter(|&id| {
                let pc = to_cam.apply(&map.position(id));
                pc.z >= k.near && pc.z <= k.far && k.project_to_pixel(&pc).is_some()
            })
            .collect();
        assert!(!brute.is_empty());
        assert_eq!(fast, brute);
    }

    #[test]
    fn extraction() {
        let map = VoxelMap::new(MapParams::default());
        assert!(map.extract_surface_points().is_empty());

        let k = cam(41, 41);
        let f = frame(&k, |_, _| 1.0);
        let mut map = VoxelMap::new(MapParams::default());
        map.integrate_depth(&f, &k);
        let pts = map.extract_surface_points();
        assert!(!pts.is_empty());
        for p in pts {
            assert!((f64::from(p.position[2]) - 1.0).abs() <= 2.0 * 0.008);
        }
    }

    #[test]
    fn repeated_same_label_is_additive() {
        let (mut map, active, k) = seeded(2, 0.25);
        let probs = [0.5f32, 0.75, 0.625, 0.875];
        for p in probs {
            let f = with_prediction(frame(&k, |u, v| if (u, v) == (4, 4) { 1.0 } else { 0.0 }), 2, p);
            map.fuse_semantic(&active, &f, &k);
        }
        let v = map.voxel(active.ids[0]);
        assert_eq!(v.label, 2);
        assert!((v.label_conf - (0.25 + probs.iter().sum::<f32>())).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn fusion_never_negative(ops in prop::collection::vec((0u16..5, 0.01f32..1.0), 1..60)) {
            let (mut label, mut conf) = (NO_LABEL, 0.0f32);
            for (l, p) in ops {
                fuse_label(&mut label, &mut conf, l, p);
                prop_assert!(conf >= 0.0);
                prop_assert!(label != NO_LABEL);
            }
        }

        #[test]
        fn weight_counts_frames(n in 1usize..6, depth in 0.5f32..2.0) {
            let k = cam(11, 11);
            let f = frame(&k, |_, _| depth);
            let mut map = VoxelMap::new(MapParams { weight_cap: 3, ..MapParams::default() });
            for _ in 0..n {
                map.integrate_depth(&f, &k);
            }
            for v in map.voxels() {
                prop_assert_eq!(usize::from(v.weight), n.min(3));
            }
            prop_assert!(map.check_invariants().is_ok());
        }
    }
}
