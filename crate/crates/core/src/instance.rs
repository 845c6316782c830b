//! Instance segmentation on top of the semantic CRF: a growing registry of
//! instance ids, per-frame reduction of the id space to what the camera
//! sees, CRF inference over ids and spawning of new instances out of the
//! unknown id.

use std::fmt::Write as _;

use rustc_hash::FxHashMap;

use crate::crf::{self, CooccurrenceMatrix, CrfWeights, MeanFieldState};
use crate::error::{Error, Result};
use crate::labels::{Label, LabelSpace, NO_LABEL};
use crate::supervoxel::SuperVoxelSet;
use crate::voxel_map::{fuse_label, ActiveSet, VoxelMap};

/// Id of the unknown instance.
pub const UNKNOWN: u16 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceEntry {
    pub id: u16,
    /// Semantic category, `NO_LABEL` for the unknown instance.
    pub category: Label,
    /// Member super-voxels at the last update.
    pub size: usize,
    pub alive: bool,
}

/// All instance ids ever created. Ids are dense, start at 1 and are never
/// reused; id 0 is the unknown instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceRegistry {
    entries: Vec<InstanceEntry>,
}

impl Default for InstanceRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl InstanceRegistry {
    pub fn new() -> Self {
        InstanceRegistry {
            entries: vec![InstanceEntry {
                id: UNKNOWN,
                category: NO_LABEL,
                size: 0,
                alive: true,
            }],
        }
    }

    /// Number of ids including unknown.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, id: u16) -> Option<&InstanceEntry> {
        self.entries.get(id as usize)
    }

    pub fn entries(&self) -> &[InstanceEntry] {
        &self.entries
    }

    pub fn next_id(&self) -> u16 {
        self.entries.len() as u16
    }

    pub fn spawn(&mut self, category: Label, size: usize) -> Result<u16> {
        if self.entries.len() >= u16::MAX as usize {
            return Err(Error::TooLarge("instance id space exhausted".into()));
        }
        let id = self.next_id();
        self.entries.push(InstanceEntry {
            id,
            category,
            size,
            alive: true,
        });
        Ok(id)
    }

    /// Recounts member super-voxels per id from the current clusters; ids
    /// with no members are marked dead but keep their slot.
    pub fn refresh_sizes(&mut self, map: &VoxelMap, set: &SuperVoxelSet) {
        let mut sizes = vec![0usize; self.entries.len()];
        for sv in set.iter() {
            let id = majority_instance(map, &sv.members);
            if let Some(s) = sizes.get_mut(id as usize) {
                *s += 1;
            }
        }
        for (e, s) in self.entries.iter_mut().zip(sizes) {
            e.size = s;
            e.alive = e.id == UNKNOWN || s > 0;
        }
    }

    /// One `id category size` line per instance, unknown first. The category
    /// of the unknown instance is written as `-`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            if e.category == NO_LABEL {
                let _ = writeln!(s, "{} - {}", e.id, e.size);
            } else {
                let _ = writeln!(s, "{} {} {}", e.id, e.category, e.size);
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format("instance registry", msg);
        let mut entries = Vec::new();
        for (n, line) in text.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(format!("line {}: expected 3 fields", n + 1)));
            }
            let id: u16 = f[0].parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
            if id as usize != n {
                return Err(bad(format!("line {}: ids must be dense from 0", n + 1)));
            }
            let category = if f[1] == "-" {
                NO_LABEL
            } else {
                f[1].parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?
            };
            let size: usize = f[2].parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
            entries.push(InstanceEntry {
                id,
                category,
                size,
                alive: id == UNKNOWN || size > 0,
            });
        }
        if entries.first().map(|e| e.category) != Some(NO_LABEL) {
            return Err(bad("first entry must be the unknown instance".into()));
        }
        Ok(InstanceRegistry { entries })
    }
}

/// Most confident instance among `voxels`, by summed confidence; lowest id
/// on ties.
pub fn majority_instance(map: &VoxelMap, voxels: &[u32]) -> u16 {
    let mut votes: FxHashMap<u16, f64> = FxHashMap::default();
    for &v in voxels {
        let vox = map.voxel(v);
        *votes.entry(vox.instance).or_default() += f64::from(vox.instance_conf);
    }
    let mut best = (UNKNOWN, f64::NEG_INFINITY);
    let mut ids: Vec<_> = votes.into_iter().collect();
    ids.sort_by_key(|e| e.0);
    for (id, v) in ids {
        if v > best.1 {
            best = (id, v);
        }
    }
    best.0
}

/// Instance ids present on the current frustum's voxels, always with
/// unknown, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReducedLabelSpace {
    pub ids: Vec<u16>,
}

impl ReducedLabelSpace {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u16) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }
}

pub fn reduce_labels(registry: &InstanceRegistry, active: &ActiveSet, map: &VoxelMap) -> ReducedLabelSpace {
    let mut ids = vec![UNKNOWN];
    for &v in &active.ids {
        let id = map.voxel(v).instance;
        if registry.get(id).is_some() {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    ids.dedup();
    ReducedLabelSpace { ids }
}

/// Confidence-weighted instance histogram of each node over `space`.
/// Voxels carrying ids outside `space` do not vote.
pub fn instance_histograms(
    set: &SuperVoxelSet,
    nodes: &[u32],
    map: &VoxelMap,
    space: &ReducedLabelSpace,
) -> Vec<Vec<f64>> {
    nodes
        .iter()
        .map(|&id| {
            let mut h = vec![0.0; space.len()];
            for &v in &set.get(id).expect("live super-voxel").members {
                let vox = map.voxel(v);
                if let Some(i) = space.index_of(vox.instance) {
                    h[i] += f64::from(vox.instance_conf);
                }
            }
            h
        })
        .collect()
}

/// Object mask over the reduced space: every real instance counts as an
/// object, the unknown instance does not.
pub fn instance_object_mask(space: &ReducedLabelSpace) -> Vec<bool> {
    space.ids.iter().map(|&id| id != UNKNOWN).collect()
}

/// Mean-field inference over instance ids with an inert relationship term.
/// Returns instance ids per node. With only the unknown id in play every
/// node is unknown.
pub fn instance_infer(
    state: &mut MeanFieldState,
    space: &ReducedLabelSpace,
    w: &CrfWeights,
    iterations: usize,
) -> Vec<u16> {
    if space.len() < 2 {
        return vec![UNKNOWN; state.len()];
    }
    let lambda = CooccurrenceMatrix::uniform(space.len());
    crf::infer(state, w, &lambda, iterations)
        .into_iter()
        .map(|i| space.ids[i as usize])
        .collect()
}

/// Spawns at most one instance: among nodes labeled unknown whose category
/// is an object class, the largest connected component of equal category
/// (over `adjacency`, in node indices) with at least `min_spawn` nodes gets
/// a fresh id. Ties in size go to the component containing the lowest node.
/// Returns the new id.
pub fn spawn_unknown(
    labeling: &mut [u16],
    categories: &[Label],
    adjacency: &[(u32, u32)],
    labels: &LabelSpace,
    registry: &mut InstanceRegistry,
    min_spawn: usize,
) -> Result<Option<u16>> {
    let n = labeling.len();
    assert_eq!(categories.len(), n, "one category per node");
    let eligible = |i: usize| labeling[i] == UNKNOWN && categories[i] != NO_LABEL && labels.is_object(categories[i]);
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
    for &(a, b) in adjacency {
        let (a, b) = (a as usize, b as usize);
        if a != b && eligible(a) && eligible(b) && categories[a] == categories[b] {
            neighbors[a].push(b as u32);
            neighbors[b].push(a as u32);
        }
    }
    let mut seen = vec![false; n];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..n {
        if seen[start] || !eligible(start) {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut head = 0;
        while head < comp.len() {
            let i = comp[head];
            head += 1;
            for &j in &neighbors[i] {
                if !seen[j as usize] {
                    seen[j as usize] = true;
                    comp.push(j as usize);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    if best.len() < min_spawn.max(1) {
        return Ok(None);
    }
    let id = registry.spawn(categories[best[0]], best.len())?;
    for i in best {
        labeling[i] = id;
    }
    Ok(Some(id))
}

/// Fuses each node's instance id into all member voxels with the best-label
/// rule, using `conf[i]` as the increment. Voxels still unknown under a node
/// carrying the freshly `spawned` id take that id outright.
pub fn fuse_instances(
    map: &mut VoxelMap,
    set: &SuperVoxelSet,
    nodes: &[u32],
    ids: &[u16],
    conf: &[f64],
    spawned: Option<u16>,
) {
    for ((&node, &id), &p) in nodes.iter().zip(ids).zip(conf) {
        let claim = spawned == Some(id);
        for &v in &set.get(node).expect("live super-voxel").members {
            let vox = map.voxel_mut(v);
            if claim && vox.instance == UNKNOWN {
                vox.instance = id;
                vox.instance_conf = p as f32;
            } else {
                fuse_label(&mut vox.instance, &mut vox.instance_conf, id, p as f32);
            }
        }
    }
}
