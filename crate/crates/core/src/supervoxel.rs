//! Progressive super-voxels: a local k-means over the active voxels that runs
//! one seed/assign/update iteration per frame.
//!
//! Centroids are indexed on a coarse grid with cell side `S` (the seed
//! spacing). Assignment only considers centroids within `2S` of a voxel, so
//! a frame costs `O(|active| x centroids-in-window)` regardless of how large
//! the map has grown.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::color::{rgb_to_lab, Lab};
use crate::labels::NO_LABEL;
use crate::voxel_map::{ActiveSet, VoxelId, VoxelKey, VoxelMap, NO_CLUSTER};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    /// Color weight.
    pub alpha: f64,
    /// Spatial weight.
    pub beta: f64,
    /// Color normalizer, squared Lab units.
    pub color_norm: f64,
    /// Spatial normalizer, squared meters.
    pub spatial_norm: f64,
    /// Seed spacing `S` in meters.
    pub spacing: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams::with_spacing(0.08)
    }
}

impl ClusterParams {
    /// Unit weights, `n_c = 400` and `n_s = S^2`.
    pub fn with_spacing(spacing: f64) -> Self {
        ClusterParams {
            alpha: 1.0,
            beta: 1.0,
            color_norm: 400.0,
            spatial_norm: spacing * spacing,
            spacing,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.alpha, self.beta, self.color_norm, self.spatial_norm, self.spacing];
        if all.iter().all(|&v| v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(crate::Error::invalid(
                "cluster params",
                "all parameters must be strictly positive",
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperVoxel {
    pub id: u32,
    pub centroid_pos: Point3<f64>,
    pub centroid_color: Lab,
    /// Mean of the members' cached normals, renormalized.
    pub centroid_normal: Option<Vector3<f64>>,
    pub members: Vec<VoxelId>,
    /// Sum of member label confidences per label.
    pub label_hist: Vec<f64>,
    pub mean_objectness: f64,
    cell: u64,
}

/// Color/spatial distance between a voxel and a centroid:
/// `sqrt(alpha * Dc / n_c + beta * Ds / n_s)` with squared Lab and squared
/// Euclidean distances.
pub fn cluster_distance(position: &Point3<f64>, color: &Lab, centroid: &SuperVoxel, params: &ClusterParams) -> f64 {
    let dc = color.distance_squared(&centroid.centroid_color);
    let ds = (position - centroid.centroid_pos).norm_squared();
    (params.alpha * dc / params.color_norm + params.beta * ds / params.spatial_norm).sqrt()
}

/// Work counters for one assignment step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssignStats {
    pub voxels: usize,
    pub distance_evaluations: usize,
    pub changed: usize,
    pub unassigned: usize,
}

#[derive(Debug, Clone)]
pub struct SuperVoxelSet {
    params: ClusterParams,
    num_labels: usize,
    clusters: Vec<Option<SuperVoxel>>,
    live: usize,
    grid: FxHashMap<u64, Vec<u32>>,
    dirty: FxHashSet<u32>,
}

fn cell_of(p: &Point3<f64>, spacing: f64) -> VoxelKey {
    VoxelKey::new(
        (p.x / spacing).floor() as i32,
        (p.y / spacing).floor() as i32,
        (p.z / spacing).floor() as i32,
    )
}

pub(crate) fn voxel_lab(map: &VoxelMap, id: VoxelId) -> Lab {
    rgb_to_lab(map.voxel(id).color)
}

impl SuperVoxelSet {
    pub fn new(params: ClusterParams, num_labels: usize) -> Self {
        SuperVoxelSet {
            params,
            num_labels,
            clusters: Vec::new(),
            live: 0,
            grid: FxHashMap::default(),
            dirty: FxHashSet::default(),
        }
    }

    pub fn params(&self) -> &ClusterParams {
        &self.params
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Number of live super-voxels.
    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn get(&self, id: u32) -> Option<&SuperVoxel> {
        self.clusters.get(id as usize).and_then(Option::as_ref)
    }

    /// Live super-voxels in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &SuperVoxel> {
        self.clusters.iter().filter_map(Option::as_ref)
    }

    /// One past the largest id ever handed out.
    pub fn id_bound(&self) -> u32 {
        self.clusters.len() as u32
    }

    fn grid_insert(&mut self, cell: u64, id: u32) {
        let ids = self.grid.entry(cell).or_default();
        let at = ids.partition_point(|&x| x < id);
        ids.insert(at, id);
    }

    fn grid_remove(&mut self, cell: u64, id: u32) {
        if let Some(ids) = self.grid.get_mut(&cell) {
            ids.retain(|&x| x != id);
            if ids.is_empty() {
                self.grid.remove(&cell);
            }
        }
    }

    /// Centroid ids in the `(2r+1)^3` cells around `cell`, ascending.
    fn ids_near(&self, cell: VoxelKey, r: i32) -> Vec<u32> {
        let mut out = Vec::new();
        for di in -r..=r {
            for dj in -r..=r {
                for dk in -r..=r {
                    if let Some(ids) = self.grid.get(&cell.offset(di, dj, dk).pack()) {
                        out.extend_from_slice(ids);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn create(&mut self, map: &mut VoxelMap, seed: VoxelId) -> u32 {
        let id = self.clusters.len() as u32;
        let pos = map.position(seed);
        let cell = cell_of(&pos, self.params.spacing).pack();
        let vox = map.voxel(seed);
        let mut label_hist = vec![0.0; self.num_labels];
        if vox.label != NO_LABEL {
            label_hist[vox.label as usize] += f64::from(vox.label_conf);
        }
        let sv = SuperVoxel {
            id,
            centroid_pos: pos,
            centroid_color: rgb_to_lab(vox.color),
            centroid_normal: vox.normal.map(|n| Vector3::new(n[0], n[1], n[2]).cast()),
            members: vec![seed],
            label_hist,
            mean_objectness: f64::from(vox.objectness),
            cell,
        };
        self.clusters.push(Some(sv));
        self.live += 1;
        self.grid_insert(cell, id);
        map.voxel_mut(seed).cluster = id;
        id
    }

    /// Seeds a super-voxel at every unassigned active voxel that is farther
    /// than `S` from all existing centroids, including seeds placed earlier
    /// in the same pass. Returns the new ids.
    pub fn seed(&mut self, map: &mut VoxelMap, active: &ActiveSet) -> Vec<u32> {
        let s = self.params.spacing;
        let mut created = Vec::new();
        for &vid in &active.ids {
            if map.voxel(vid).cluster != NO_CLUSTER {
                continue;
            }
            let p = map.position(vid);
            let covered = self
                .ids_near(cell_of(&p, s), 1)
                .into_iter()
                .any(|c| (self.clusters[c as usize].as_ref().unwrap().centroid_pos - p).norm() <= s);
            if !covered {
                created.push(self.create(map, vid));
            }
        }
        created
    }

    /// One assignment pass: every active voxel moves to the centroid within
    /// `2S` with the smallest [`cluster_distance`], lowest id on ties. Voxels
    /// with no centroid in range become unassigned.
    pub fn assign_step(&mut self, map: &mut VoxelMap, active: &ActiveSet) -> AssignStats {
        let s = self.params.spacing;
        let window = 2.0 * s;
        // Group voxels by grid cell so each cell gathers its candidates once.
        let mut by_cell: Vec<(u64, VoxelId)> = active
            .ids
            .iter()
            .map(|&v| (cell_of(&map.position(v), s).pack(), v))
            .collect();
        by_cell.sort_unstable();
        let groups: Vec<&[(u64, VoxelId)]> = by_cell.chunk_by(|a, b| a.0 == b.0).collect();

        let this = &*self;
        let map_ref = &*map;
        let results: Vec<(Vec<(VoxelId, u32)>, usize)> = groups
            .par_iter()
            .map(|group| {
                let cell = VoxelKey::unpack(group[0].0);
                let candidates: Vec<&SuperVoxel> = this
                    .ids_near(cell, 2)
                    .into_iter()
                    .map(|c| this.clusters[c as usize].as_ref().unwrap())
                    .collect();
                let mut evals = 0;
                let out = group
                    .iter()
                    .map(|&(_, vid)| {
                        let p = map_ref.position(vid);
                        let lab = voxel_lab(map_ref, vid);
                        let mut best = (f64::INFINITY, NO_CLUSTER);
                        for c in &candidates {
                            if (c.centroid_pos - p).norm() > window {
                                continue;
                            }
                            evals += 1;
                            let d = cluster_distance(&p, &lab, c, &this.params);
                            if d < best.0 {
                                best = (d, c.id);
                            }
                        }
                        (vid, best.1)
                    })
                    .collect();
                (out, evals)
            })
            .collect();

        let mut stats = AssignStats {
            voxels: active.len(),
            ..AssignStats::default()
        };
        for (assignments, evals) in results {
            stats.distance_evaluations += evals;
            for (vid, new) in assignments {
                let old = map.voxel(vid).cluster;
                if old != NO_CLUSTER {
                    self.dirty.insert(old);
                }
                if new == NO_CLUSTER {
                    stats.unassigned += 1;
                } else {
                    self.dirty.insert(new);
                }
                if new != old {
                    stats.changed += 1;
                    map.voxel_mut(vid).cluster = new;
                    if new != NO_CLUSTER {
                        self.clusters[new as usize].as_mut().unwrap().members.push(vid);
                    }
                }
            }
        }
        stats
    }

    /// Recomputes every cluster touched since the last update from its
    /// current members and drops clusters left without members. Returns the
    /// ids of removed clusters.
    pub fn update_centroids(&mut self, map: &VoxelMap) -> Vec<u32> {
        let mut dirty: Vec<u32> = self.dirty.drain().collect();
        dirty.sort_unstable();
        let spacing = self.params.spacing;
        let num_labels = self.num_labels;
        let updates: Vec<(u32, Option<SuperVoxel>)> = dirty
            .par_iter()
            .map(|&id| {
                let old = self.clusters[id as usize].as_ref().unwrap();
                let mut members: Vec<VoxelId> = old
                    .members
                    .iter()
                    .copied()
                    .filter(|&v| map.voxel(v).cluster == id)
                    .collect();
                members.sort_unstable();
                members.dedup();
                if members.is_empty() {
                    return (id, None);
                }
                let n = members.len() as f64;
                let mut pos = Vector3::zeros();
                let (mut l, mut a, mut b) = (0.0, 0.0, 0.0);
                let mut normal = Vector3::zeros();
                let mut normals = 0;
                let mut objectness = 0.0;
                let mut label_hist = vec![0.0; num_labels];
                for &v in &members {
                    pos += map.position(v).coords;
                    let lab = voxel_lab(map, v);
                    l += lab.l;
                    a += lab.a;
                    b += lab.b;
                    let vox = map.voxel(v);
                    if let Some(nv) = vox.normal {
                        normal += Vector3::new(nv[0], nv[1], nv[2]).cast::<f64>();
                        normals += 1;
                    }
                    objectness += f64::from(vox.objectness);
                    if vox.label != NO_LABEL {
                        label_hist[vox.label as usize] += f64::from(vox.label_conf);
                    }
                }
                let centroid_pos = Point3::from(pos / n);
                let centroid_normal = if normals > 0 && normal.norm() > 1e-12 {
                    Some(normal.normalize())
                } else {
                    old.centroid_normal
                };
                let sv = SuperVoxel {
                    id,
                    centroid_pos,
                    centroid_color: Lab {
                        l: l / n,
                        a: a / n,
                        b: b / n,
                    },
                    centroid_normal,
                    members,
                    label_hist,
                    mean_objectness: objectness / n,
                    cell: cell_of(&centroid_pos, spacing).pack(),
                };
                (id, Some(sv))
            })
            .collect();

        let mut removed = Vec::new();
        for (id, update) in updates {
            let old_cell = self.clusters[id as usize].as_ref().unwrap().cell;
            match update {
                None => {
                    self.grid_remove(old_cell, id);
                    self.clusters[id as usize] = None;
                    self.live -= 1;
                    removed.push(id);
                }
                Some(sv) => {
                    if sv.cell != old_cell {
                        self.grid_remove(old_cell, id);
                        self.grid_insert(sv.cell, id);
                    }
                    self.clusters[id as usize] = Some(sv);
                }
            }
        }
        removed
    }

    /// Marks the clusters owning `active` voxels for recomputation, for
    /// frames where member attributes changed without reassignment.
    pub fn touch(&mut self, map: &VoxelMap, active: &ActiveSet) {
        for &v in &active.ids {
            let c = map.voxel(v).cluster;
            if c != NO_CLUSTER {
                self.dirty.insert(c);
            }
        }
    }

    /// Sorted ids of the super-voxels owning at least one of `voxels`.
    pub fn clusters_of(&self, map: &VoxelMap, voxels: &[VoxelId]) -> Vec<u32> {
        let mut ids: Vec<u32> = voxels
            .iter()
            .map(|&v| map.voxel(v).cluster)
            .filter(|&c| c != NO_CLUSTER && self.get(c).is_some())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Super-voxel adjacency over the whole map: `(a, b)` with `a < b` iff a
    /// member of `a` is a 6-neighbor of a member of `b`.
    pub fn adjacency(&self, map: &VoxelMap) -> Vec<(u32, u32)> {
        let voxels: Vec<VoxelId> = self.iter().flat_map(|sv| sv.members.iter().copied()).collect();
        adjacency_of(map, &voxels)
    }

    /// Adjacency restricted to edges incident to the given voxels.
    pub fn adjacency_near(&self, map: &VoxelMap, active: &ActiveSet) -> Vec<(u32, u32)> {
        adjacency_of(map, &active.ids)
    }

    /// Index of the cluster owning each voxel, in voxel-id order, for debug
    /// dumps alongside a map snapshot.
    pub fn assignment_stream(map: &VoxelMap) -> Vec<u32> {
        map.voxels().iter().map(|v| v.cluster).collect()
    }

    /// Rebuilds the set from the per-voxel cluster ids stored in `map`.
    pub fn from_assignments(map: &VoxelMap, params: ClusterParams, num_labels: usize) -> Self {
        let mut set = SuperVoxelSet::new(params, num_labels);
        let bound = map
            .voxels()
            .iter()
            .filter(|v| v.cluster != NO_CLUSTER)
            .map(|v| v.cluster + 1)
            .max()
            .unwrap_or(0);
        let mut members: Vec<Vec<VoxelId>> = vec![Vec::new(); bound as usize];
        for (id, v) in map.voxels().iter().enumerate() {
            if v.cluster != NO_CLUSTER {
                members[v.cluster as usize].push(id as VoxelId);
            }
        }
        for (cid, m) in members.into_iter().enumerate() {
            if m.is_empty() {
                set.clusters.push(None);
                continue;
            }
            let sv = SuperVoxel {
                id: cid as u32,
                centroid_pos: map.position(m[0]),
                centroid_color: Lab::default(),
                centroid_normal: None,
                members: m,
                label_hist: vec![0.0; num_labels],
                mean_objectness: 0.0,
                cell: u64::MAX,
            };
            set.clusters.push(Some(sv));
            set.live += 1;
            set.dirty.insert(cid as u32);
        }
        // Placeholder cells are replaced by the recomputation below.
        for sv in set.clusters.iter_mut().flatten() {
            sv.cell = cell_of(&sv.centroid_pos, set.params.spacing).pack();
        }
        let cells: Vec<(u64, u32)> = set.iter().map(|sv| (sv.cell, sv.id)).collect();
        for (cell, id) in cells {
            set.grid_insert(cell, id);
        }
        set.update_centroids(map);
        set
    }
}

#[cfg(test)]
impl SuperVoxelSet {
    pub(crate) fn force_centroid(&mut self, id: u32, color: Lab, normal: Option<Vector3<f64>>, objectness: f64) {
        let sv = self.clusters[id as usize].as_mut().unwrap();
        sv.centroid_color = color;
        sv.centroid_normal = normal;
        sv.mean_objectness = objectness;
    }
}

fn adjacency_of(map: &VoxelMap, voxels: &[VoxelId]) -> Vec<(u32, u32)> {
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for &v in voxels {
        let a = map.voxel(v).cluster;
        if a == NO_CLUSTER {
            continue;
        }
        for nk in map.key(v).neighbors6() {
            if let Some(n) = map.get(nk) {
                let b = n.cluster;
                if b != NO_CLUSTER && b != a {
                    edges.push((a.min(b), a.max(b)));
                }
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel_map::MapParams;
    use proptest::prelude::*;

    fn sv_at(id: u32, pos: [f64; 3], lab: Lab) -> SuperVoxel {
        SuperVoxel {
            id,
            centroid_pos: Point3::from(pos),
            centroid_color: lab,
            centroid_normal: None,
            members: vec![],
            label_hist: vec![],
            mean_objectness: 0.5,
            cell: 0,
        }
    }

    #[test]
    fn distance_examples() {
        let lab = Lab {
            l: 50.0,
            a: 10.0,
            b: -5.0,
        };
        let c = sv_at(0, [0.1, 0.2, 0.3], lab);
        let p = ClusterParams {
            alpha: 1.0,
            beta: 1.0,
            color_norm: 1.0,
            spatial_norm: 1.0,
            spacing: 0.08,
        };
        assert_eq!(cluster_distance(&Point3::new(0.1, 0.2, 0.3), &lab, &c, &p), 0.0);

        // Dc = n_c and Ds = n_s -> sqrt(2)
        let q = ClusterParams {
            color_norm: 4.0,
            spatial_norm: 0.25,
            ..p.clone()
        };
        let lab2 = Lab { l: 52.0, ..lab };
        let d = cluster_distance(&Point3::new(0.6, 0.2, 0.3), &lab2, &c, &q);
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);

        // Dc = 0.25, Ds = 0.09 -> sqrt(0.34)
        let lab3 = Lab { l: 50.5, ..lab };
        let d = cluster_distance(&Point3::new(0.4, 0.2, 0.3), &lab3, &c, &p);
        assert!((d - 0.34f64.sqrt()).abs() < 1e-12);
        assert!((d - 0.58310).abs() < 1e-5);
    }

    fn plane_map(n: i32, color: impl Fn(i32, i32) -> [f32; 3]) -> (VoxelMap, ActiveSet) {
        let mut map = VoxelMap::new(MapParams::default());
        let mut ids = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let id = map.insert(VoxelKey::new(i, j, 0));
                let v = map.voxel_mut(id);
                v.weight = 1;
                v.tsdf = 0.0;
                v.color = color(i, j);
                ids.push(id);
            }
        }
        (map, ActiveSet { ids })
    }

    #[test]
    fn seeds_cover_a_plane() {
        // 2S x 2S plane at S = 10 voxels.
        let (mut map, active) = plane_map(21, |_, _| [128.0; 3]);
        let mut set = SuperVoxelSet::new(ClusterParams::default(), 3);
        let created = set.seed(&mut map, &active);
        assert!(created.len() >= 4, "{}", created.len());
        // Every voxel is within S of some seed.
        for &v in &active.ids {
            let p = map.position(v);
            assert!(set.iter().any(|c| (c.centroid_pos - p).norm() <= 0.08 + 1e-12));
        }
    }

    #[test]
    fn no_seeds_when_all_assigned() {
        let (mut map, active) = plane_map(5, |_, _| [128.0; 3]);
        let mut set = SuperVoxelSet::new(ClusterParams::default(), 3);
        set.seed(&mut map, &active);
        set.assign_step(&mut map, &active);
        set.update_centroids(&map);
        assert!(set.seed(&mut map, &active).is_empty());
    }

    #[test]
    fn isolated_voxel_gets_one_seed() {
        let mut map = VoxelMap::new(MapParams::default());
        let id = map.insert(VoxelKey::new(3, 4, 5));
        let mut set = SuperVoxelSet::new(ClusterParams::default(), 3);
        let created = set.seed(&mut map, &ActiveSet { ids: vec![id] });
        assert_eq!(created.len(), 1);
        let sv = set.get(created[0]).unwrap();
        assert_eq!(sv.centroid_pos, map.position(id));
        assert_eq!(map.voxel(id).cluster, created[0]);
    }

    #[test]
    fn tie_goes_to_lower_id_and_colocated_wins() {
        let mut map = VoxelMap::new(MapParams::default());
        let a = map.insert(VoxelKey::new(-5, 0, 0));
        let b = map.insert(VoxelKey::new(5, 0, 0));
        let mid = map.insert(VoxelKey::new(0, 0, 0));
        let mut set = SuperVoxelSet::new(ClusterParams::default(), 3);
        let ca = set.seed(&mut map, &ActiveSet { ids: vec![a] })[0];
        let cb = set.create(&mut map, b);
        assert!(ca < cb);
        let stats = set.assign_step(&mut map, &ActiveSet { ids: vec![mid, b] });
        assert_eq!(map.voxel(mid).cluster, ca);
        assert_eq!(map.voxel(b).cluster, cb);
        assert_eq!(stats.distance_evaluations, 4);
    }

    #[test]
    fn out_of_range_voxel_is_unassigned() {
        let mut map = VoxelMap::new(MapParams::default());
        let a = map.insert(VoxelKey::new(0, 0, 0));
        let far = map.insert(VoxelKey::new(100, 0, 0));
        let mut set = SuperVoxelSet::new(ClusterParams::default(), 3);
        set.seed(&mut map, &ActiveSet { ids: vec![a] });
        let stats = set.assign_step(&mut map, &ActiveSet { ids: vec![far] });
        assert_eq!(stats.unassigned, 1);
        assert_eq!(map.voxel(far).cluster, NO_CLUSTER);
    }

    #[test]
    fn centroid_is_member_mean_and_empty_clusters_drop() {
        let mut map = VoxelMap::new(MapParams::default());
        let a = map.insert(VoxelKey::new(0, 0, 0));
        let b = map.insert(VoxelKey::new(0, 0, 125)); // z = 1.0
        for (id, l, c) in [(a, 1u16, 0.5f32), (b, 2, 0.25)] {
            let v = map.voxel_mut(id);
            v.label = l;
            v.label_conf = c;
        }
        let mut set = SuperVoxelSet::new(ClusterParams::default(), 3);
        let c = set.create(&mut map, a);
        map.voxel_mut(b).cluster = c;
        set.clusters[c as usize].as_mut().unwrap().members.push(b);
        set.dirty.insert(c);
        set.update_centroids(&map);
        let sv = set.get(c).unwrap();
        assert!((sv.centroid_pos.z - 0.5).abs() < 1e-12);
        assert_eq!(sv.label_hist, vec![0.0, 0.5, 0.25]);

        map.voxel_mut(a).cluster = NO_CLUSTER;
        map.voxel_mut(b).cluster = NO_CLUSTER;
        set.dirty.insert(c);
        assert_eq!(set.update_centroids(&map), vec![c]);
        assert!(set.get(c).is_none());
        assert!(set.is_empty());
    }

    #[test]
    fn adjacency_examples() {
        let mut map = VoxelMap::new(MapParams::default());
        let mut put = |i: i32, cluster: u32| {
            let id = map.insert(VoxelKey::new(i, 0, 0));
            map.voxel_mut(id).cluster = cluster;
        };
        // line: 0 0 | 1 1 | 2 2, then a gap, then cluster 3
        put(0, 0);
        put(1, 0);
        put(2, 1);
        put(3, 1);
        put(4, 2);
        put(5, 2);
        put(9, 3);
        let set = SuperVoxelSet::from_assignments(&map, ClusterParams::default(), 2);
        assert_eq!(set.len(), 4);
        assert_eq!(set.adjacency(&map), vec![(0, 1), (1, 2)]);
    }

    /// Voxel block with two color halves for k-means runs.
    fn block_map() -> (VoxelMap, ActiveSet) {
        let mut map = VoxelMap::new(MapParams::default());
        let mut ids = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    let id = map.insert(VoxelKey::new(i, j, k));
                    let v = map.voxel_mut(id);
                    v.weight = 1;
                    v.color = if i + j < 9 {
                        [200.0, 40.0, 40.0]
                    } else {
                        [40.0, 40.0, 200.0]
                    };
                    ids.push(id);
                }
            }
        }
        (map, ActiveSet { ids })
    }

    #[test]
    fn static_block_reaches_fixed_point() {
        let (mut map, active) = block_map();
        let mut set = SuperVoxelSet::new(ClusterParams::with_spacing(0.03), 2);
        set.seed(&mut map, &active);
        let mut converged_at = None;
        for it in 1..=20 {
            let stats = set.assign_step(&mut map, &active);
            set.update_centroids(&map);
            if stats.changed == 0 {
                converged_at = Some(it);
                break;
            }
        }
        assert!(converged_at.is_some(), "no fixed point within 20 iterations");
    }

    #[test]
    fn assignment_is_locally_optimal() {
        let (mut map, active) = block_map();
        let mut set = SuperVoxelSet::new(ClusterParams::with_spacing(0.03), 2);
        set.seed(&mut map, &active);
        set.assign_step(&mut map, &active);
        set.update_centroids(&map);
        let snapshot = set.clone();
        set.assign_step(&mut map, &active);
        let window = 2.0 * set.params.spacing;
        for &v in &active.ids {
            let p = map.position(v);
            let lab = voxel_lab(&map, v);
            let own = snapshot.get(map.voxel(v).cluster).unwrap();
            let own_d = cluster_distance(&p, &lab, own, &set.params);
            for c in snapshot.iter() {
                if (c.centroid_pos - p).norm() <= window {
                    assert!(cluster_distance(&p, &lab, c, &set.params) >= own_d);
                }
            }
        }
    }

    #[test]
    fn work_is_independent_of_scene_size() {
        // Same active patch; the second map has a large untouched region.
        let run = |extra: i32| {
            let (mut map, active) = plane_map(30, |_, _| [90.0; 3]);
            let far: Vec<VoxelId> = (0..extra)
                .flat_map(|i| (0..30).map(move |j| (i, j)))
                .map(|(i, j)| map.insert(VoxelKey::new(1000 + i, j, 0)))
                .collect();
            let mut set = SuperVoxelSet::new(ClusterParams::default(), 2);
            let far = ActiveSet { ids: far };
            set.seed(&mut map, &far);
            set.assign_step(&mut map, &far);
            set.update_centroids(&map);
            set.seed(&mut map, &active);
            let stats = set.assign_step(&mut map, &active);
            (stats, set.len())
        };
        let (small, n_small) = run(0);
        let (large, n_large) = run(300);
        assert!(n_large > 10 * n_small);
        assert_eq!(small.distance_evaluations, large.distance_evaluations);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn distance_ignores_normals(
            dx in -0.1f64..0.1, dl in -20f64..20.0,
            n1 in prop::array::uniform3(-1f64..1.0), n2 in prop::array::uniform3(-1f64..1.0),
        ) {
            let lab = Lab { l: 40.0, a: 0.0, b: 0.0 };
            let mut c = sv_at(0, [0.0, 0.0, 0.0], lab);
            let p = Point3::new(dx, 0.0, 0.0);
            let v = Lab { l: 40.0 + dl, ..lab };
            let params = ClusterParams::default();
            c.centroid_normal = Some(Vector3::from(n1));
            let d1 = cluster_distance(&p, &v, &c, &params);
            c.centroid_normal = Some(Vector3::from(n2));
            let d2 = cluster_distance(&p, &v, &c, &params);
            prop_assert_eq!(d1, d2);
        }
    }
}
