//! Per-frame orchestration: integration, fusion, clustering, proposals,
//! CRF refinement and instance tracking, plus evaluation, offline
//! refinement and checkpoints.

mod checkpoint;
mod config;
mod source;
mod timing;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rustc_hash::FxHashMap;

use crate::crf::{
    self, build_unary, pairwise_edges, predicted_distribution, BeliefMap, CooccurrenceMatrix, CrfClique, CrfWeights,
    MeanFieldState,
};
use crate::error::{Error, Result};
use crate::frame_io::{write_labeled_cloud, FrameBundle, LabeledPoint};
use crate::geometry::CameraIntrinsics;
use crate::instance::{self, InstanceRegistry, UNKNOWN};
use crate::labels::{Label, LabelSpace, NO_LABEL};
use crate::metrics::{self, ApReport, ReportRow};
use crate::proposal::{propose, CliqueSet};
use crate::supervoxel::SuperVoxelSet;
use crate::voxel_map::{ActiveSet, VoxelMap, NO_CLUSTER};

pub use checkpoint::Checkpoint;
pub use config::{Mode, PipelineConfig};
pub use source::FrameSource;
pub use timing::{
    ls_slope, median, percentile, read_timing_log, report_timings, write_timing_log, StageSummary, StageTimings,
    TimingReport, STAGES,
};

/// Ground-truth observations per voxel, gathered from the frames' label
/// maps: `(label, instance, count)` triples.
#[derive(Debug, Clone, Default)]
pub struct GtTally {
    pub(crate) votes: Vec<Vec<(Label, u16, u32)>>,
}

impl GtTally {
    pub fn vote(&mut self, voxel: u32, label: Label, instance: u16) {
        let v = voxel as usize;
        if self.votes.len() <= v {
            self.votes.resize_with(v + 1, Vec::new);
        }
        let list = &mut self.votes[v];
        match list.iter_mut().find(|e| e.0 == label && e.1 == instance) {
            Some(e) => e.2 += 1,
            None => list.push((label, instance, 1)),
        }
    }

    /// Majority label and, among that label's votes, majority instance.
    /// Lowest values win ties.
    pub fn majority(&self, voxel: u32) -> Option<(Label, u16)> {
        let list = self.votes.get(voxel as usize)?;
        let mut by_label: BTreeMap<Label, u32> = BTreeMap::new();
        for &(l, _, c) in list {
            *by_label.entry(l).or_default() += c;
        }
        let label = by_label
            .iter()
            .fold(None, |best: Option<(Label, u32)>, (&l, &c)| match best {
                Some(b) if b.1 >= c => Some(b),
                _ => Some((l, c)),
            })?;
        let mut inst: Vec<(u16, u32)> = list.iter().filter(|e| e.0 == label.0).map(|e| (e.1, e.2)).collect();
        inst.sort_unstable();
        let mut merged: Vec<(u16, u32)> = Vec::new();
        for (i, c) in inst {
            match merged.last_mut() {
                Some(m) if m.0 == i => m.1 += c,
                _ => merged.push((i, c)),
            }
        }
        let best = merged
            .iter()
            .fold((0u16, 0u32), |b, &(i, c)| if c > b.1 { (i, c) } else { b });
        Some((label.0, best.0))
    }

    /// Number of voxels with at least one vote.
    pub fn observed(&self) -> usize {
        self.votes.iter().filter(|v| !v.is_empty()).count()
    }
}

/// Results of evaluating the current map against the ground-truth tally.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub points: Vec<LabeledPoint>,
    /// Ground truth of each point, when observed.
    pub gt: Vec<Option<(Label, u16)>>,
    pub evaluated: usize,
    pub accuracy: Option<f64>,
    pub weighted_iou: Option<f64>,
    pub per_class: BTreeMap<Label, f64>,
    pub ap: Option<ApReport>,
    /// Per ground-truth object: dominant predicted id and its share.
    pub coverage: Vec<(u16, f64)>,
}

impl Evaluation {
    pub fn rows(&self, scene: &str, method: &str, labels: &LabelSpace) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        let name = |l: Label| labels.name(l).unwrap_or("?").to_string();
        if let Some(a) = self.accuracy {
            rows.push(ReportRow::new(scene, method, "accuracy", "all", a));
        }
        if let Some(w) = self.weighted_iou {
            rows.push(ReportRow::new(scene, method, "wiou", "all", w));
        }
        for (&l, &v) in &self.per_class {
            rows.push(ReportRow::new(scene, method, "class_accuracy", &name(l), v));
        }
        if let Some(ap) = &self.ap {
            for (&l, &v) in &ap.per_class {
                rows.push(ReportRow::new(scene, method, "ap50", &name(l), v));
            }
            if let Some(m) = ap.mean {
                rows.push(ReportRow::new(scene, method, "ap50", "all", m));
            }
        }
        rows
    }
}

/// Streaming state of one run.
pub struct Engine {
    config: PipelineConfig,
    weights: CrfWeights,
    labels: LabelSpace,
    intrinsics: CameraIntrinsics,
    stride: usize,
    lambda: CooccurrenceMatrix,
    map: VoxelMap,
    set: SuperVoxelSet,
    registry: InstanceRegistry,
    prev_q: BeliefMap,
    prev_labels: FxHashMap<u32, Label>,
    gt: GtTally,
    timings: Vec<StageTimings>,
    flip_rates: Vec<(usize, f64)>,
    node_counts: Vec<usize>,
    active_sizes: Vec<usize>,
    last_cliques: CliqueSet,
    next_frame: usize,
}

/// Node-index form of super-voxel adjacency restricted to sorted `nodes`.
fn local_adjacency(nodes: &[u32], adjacency: &[(u32, u32)]) -> Vec<(u32, u32)> {
    adjacency
        .iter()
        .filter_map(|&(a, b)| {
            let ia = nodes.binary_search(&a).ok()?;
            let ib = nodes.binary_search(&b).ok()?;
            Some((ia as u32, ib as u32))
        })
        .collect()
}

fn crf_cliques(nodes: &[u32], cliques: &CliqueSet) -> Vec<CrfClique> {
    cliques
        .cliques
        .iter()
        .map(|c| CrfClique {
            members: c
                .members
                .iter()
                .map(|m| nodes.binary_search(m).expect("clique member is a node") as u32)
                .collect(),
            object: c.objectness_flag,
        })
        .collect()
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Engine {
    pub fn new(
        config: PipelineConfig,
        labels: LabelSpace,
        intrinsics: CameraIntrinsics,
        stride: usize,
    ) -> Result<Self> {
        config.validate()?;
        intrinsics.validate()?;
        let lambda = match &config.cooccurrence {
            Some(p) => CooccurrenceMatrix::read(p, &labels)?,
            None => CooccurrenceMatrix::uniform(labels.len()),
        };
        let stride = config.prediction_stride.unwrap_or(stride).max(1);
        Ok(Engine {
            weights: config.effective_weights(),
            map: VoxelMap::new(config.map.clone()),
            set: SuperVoxelSet::new(config.cluster.clone(), labels.len()),
            registry: InstanceRegistry::new(),
            prev_q: BeliefMap::default(),
            prev_labels: FxHashMap::default(),
            gt: GtTally::default(),
            timings: Vec::new(),
            flip_rates: Vec::new(),
            node_counts: Vec::new(),
            active_sizes: Vec::new(),
            last_cliques: CliqueSet::default(),
            next_frame: 0,
            labels,
            intrinsics,
            stride,
            lambda,
            config,
        })
    }

    pub fn with_cooccurrence(mut self, lambda: CooccurrenceMatrix) -> Result<Self> {
        if lambda.len() != self.labels.len() {
            return Err(Error::invalid(
                "co-occurrence matrix",
                "size differs from the label space",
            ));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn labels(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    pub fn supervoxels(&self) -> &SuperVoxelSet {
        &self.set
    }

    pub fn registry(&self) -> &InstanceRegistry {
        &self.registry
    }

    pub fn gt_tally(&self) -> &GtTally {
        &self.gt
    }

    pub fn timings(&self) -> &[StageTimings] {
        &self.timings
    }

    /// `(frame, share of nodes whose label changed since the previous frame)`.
    pub fn flip_rates(&self) -> &[(usize, f64)] {
        &self.flip_rates
    }

    /// CRF node count per processed frame.
    pub fn node_counts(&self) -> &[usize] {
        &self.node_counts
    }

    /// Active voxel count per processed frame.
    pub fn active_sizes(&self) -> &[usize] {
        &self.active_sizes
    }

    pub fn last_cliques(&self) -> &CliqueSet {
        &self.last_cliques
    }

    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    /// Processes one frame.
    pub fn step(&mut self, frame: &FrameBundle) -> Result<StageTimings> {
        let k = self.intrinsics;
        frame.check_dims(&k)?;
        let start = Instant::now();
        let mut t = StageTimings {
            frame: frame.index,
            ..Default::default()
        };

        let s = Instant::now();
        self.map.integrate_depth(frame, &k);
        let active = self.map.frustum_active(&frame.pose, &k);
        self.active_sizes.push(active.len());
        t.integration = ms(s);

        let s = Instant::now();
        if frame.index.is_multiple_of(self.stride) && frame.prediction.is_some() {
            self.map.fuse_semantic(&active, frame, &k);
            self.map.update_objectness(&active, frame, &k, &self.labels);
        }
        t.fusion = ms(s);

        let s = Instant::now();
        self.set.seed(&mut self.map, &active);
        self.set.assign_step(&mut self.map, &active);
        self.set.update_centroids(&self.map);
        let nodes = self.set.clusters_of(&self.map, &active.ids);
        let adjacency = self.set.adjacency_near(&self.map, &active);
        t.clustering = ms(s);

        let s = Instant::now();
        let cliques = propose(
            &self.set,
            &nodes,
            &adjacency,
            self.config.proposal_k,
            self.config.proposal_min_size,
        );
        t.proposal = ms(s);

        let s = Instant::now();
        let local_adj = local_adjacency(&nodes, &adjacency);
        let mut edges = Vec::new();
        let mut semantic: Vec<Label> = Vec::new();
        if !nodes.is_empty() {
            if self.weights.pair > 0.0 || self.config.mode == Mode::SemanticInstance {
                let radius = self.config.pair_radius * self.config.cluster.spacing;
                edges = pairwise_edges(&self.set, &nodes, &adjacency, radius, &self.weights);
            }
            semantic = if self.config.crf_enabled {
                self.semantic_crf(&nodes, &edges, &cliques, &local_adj)?
            } else {
                nodes
                    .iter()
                    .map(|&id| crf::argmax(&predicted_distribution(&self.set.get(id).unwrap().label_hist)))
                    .collect()
            };
        }
        self.node_counts.push(nodes.len());
        t.crf = ms(s);

        let s = Instant::now();
        if self.config.mode == Mode::SemanticInstance && !nodes.is_empty() {
            self.instance_step(&active, &nodes, &edges, &cliques, &local_adj, &semantic)?;
        }
        t.instance = ms(s);
        t.total = ms(start);

        if let Some(gt) = &frame.gt {
            for (id, u, v) in self.map.visible_pixels(&active, frame, &k) {
                let g = gt.get(u, v);
                if g.label != NO_LABEL {
                    self.gt.vote(id, g.label, g.instance);
                }
            }
        }
        self.last_cliques = cliques;
        self.timings.push(t);
        self.next_frame = frame.index + 1;
        Ok(t)
    }

    fn semantic_crf(
        &mut self,
        nodes: &[u32],
        edges: &[(u32, u32, f64)],
        cliques: &CliqueSet,
        local_adj: &[(u32, u32)],
    ) -> Result<Vec<Label>> {
        let unary = build_unary(&self.set, nodes, Some(&self.prev_q), self.config.tau);
        let mut state = MeanFieldState::new(self.labels.object_mask().to_vec(), unary)?;
        state.set_pairwise(edges);
        state.set_cliques(crf_cliques(nodes, cliques), local_adj)?;
        let out = crf::infer(&mut state, &self.weights, &self.lambda, self.config.crf_iterations);

        let mut changed = 0usize;
        let mut common = 0usize;
        let mut next_labels = FxHashMap::default();
        let mut next_q = BeliefMap::default();
        for (i, (&id, &l)) in nodes.iter().zip(&out).enumerate() {
            if let Some(&old) = self.prev_labels.get(&id) {
                common += 1;
                changed += usize::from(old != l);
            }
            next_labels.insert(id, l);
            next_q.insert(id, state.q_row(i).to_vec());
            for &v in &self.set.get(id).expect("live super-voxel").members {
                self.map.voxel_mut(v).segment = l;
            }
        }
        if common > 0 {
            self.flip_rates.push((self.next_frame, changed as f64 / common as f64));
        }
        self.prev_labels = next_labels;
        self.prev_q = next_q;
        Ok(out)
    }

    fn instance_step(
        &mut self,
        active: &ActiveSet,
        nodes: &[u32],
        edges: &[(u32, u32, f64)],
        cliques: &CliqueSet,
        local_adj: &[(u32, u32)],
        semantic: &[Label],
    ) -> Result<()> {
        let space = instance::reduce_labels(&self.registry, active, &self.map);
        let (mut ids, mut conf) = (vec![UNKNOWN; nodes.len()], vec![1.0; nodes.len()]);
        if space.len() >= 2 {
            let hists = instance::instance_histograms(&self.set, nodes, &self.map, &space);
            let refs: Vec<&[f64]> = hists.iter().map(Vec::as_slice).collect();
            let unary = crf::unary_from_histograms(&refs, nodes, None, 1.0);
            let mut state = MeanFieldState::new(instance::instance_object_mask(&space), unary)?;
            state.set_pairwise(edges);
            state.set_cliques(crf_cliques(nodes, cliques), local_adj)?;
            ids = instance::instance_infer(&mut state, &space, &self.weights, self.config.crf_iterations);
            conf = (0..nodes.len())
                .map(|i| state.q_row(i).iter().copied().fold(0.0, f64::max))
                .collect();
        }
        let spawned = instance::spawn_unknown(
            &mut ids,
            semantic,
            local_adj,
            &self.labels,
            &mut self.registry,
            self.config.min_spawn,
        )?;
        instance::fuse_instances(&mut self.map, &self.set, nodes, &ids, &conf, spawned);
        Ok(())
    }

    /// Refines all super-voxels at once with the offline iteration count,
    /// or every surface voxel when `mesh_level` is set. Returns the node
    /// count.
    pub fn refine_offline(&mut self, mesh_level: bool) -> Result<usize> {
        if self.set.is_empty() {
            return Ok(0);
        }
        let nodes: Vec<u32> = self.set.iter().map(|sv| sv.id).collect();
        let adjacency = self.set.adjacency(&self.map);
        let cliques = propose(
            &self.set,
            &nodes,
            &adjacency,
            self.config.proposal_k,
            self.config.proposal_min_size,
        );
        if mesh_level {
            return self.refine_mesh(&nodes, &cliques);
        }
        let unary = build_unary(&self.set, &nodes, None, 1.0);
        let mut state = MeanFieldState::new(self.labels.object_mask().to_vec(), unary)?;
        if self.weights.pair > 0.0 {
            let radius = self.config.pair_radius * self.config.cluster.spacing;
            state.set_pairwise(&pairwise_edges(&self.set, &nodes, &adjacency, radius, &self.weights));
        }
        state.set_cliques(crf_cliques(&nodes, &cliques), &local_adjacency(&nodes, &adjacency))?;
        let out = crf::infer(&mut state, &self.weights, &self.lambda, self.config.offline_iterations);
        for (&id, &l) in nodes.iter().zip(&out) {
            for &v in &self.set.get(id).expect("live super-voxel").members {
                self.map.voxel_mut(v).segment = l;
            }
        }
        Ok(nodes.len())
    }

    fn refine_mesh(&mut self, cluster_nodes: &[u32], cliques: &CliqueSet) -> Result<usize> {
        let ids = self.map.surface_ids();
        if ids.len() > self.config.mesh_cap {
            return Err(Error::TooLarge(format!(
                "{} surface voxels exceed the mesh-level cap of {}",
                ids.len(),
                self.config.mesh_cap
            )));
        }
        let l = self.labels.len();
        let index: FxHashMap<u32, u32> = ids.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
        let mut unary = Vec::with_capacity(ids.len() * l);
        for &v in &ids {
            let vox = self.map.voxel(v);
            let mut h = vec![0.0; l];
            if vox.label != NO_LABEL {
                h[vox.label as usize] = f64::from(vox.label_conf);
            }
            unary.extend(predicted_distribution(&h).iter().map(|p| -p.ln()));
        }
        let mut state = MeanFieldState::new(self.labels.object_mask().to_vec(), unary)?;
        let w = &self.weights;
        let mut edges = Vec::new();
        let mut adjacency = Vec::new();
        for (i, &v) in ids.iter().enumerate() {
            let key = self.map.key(v);
            for nk in [key.offset(1, 0, 0), key.offset(0, 1, 0), key.offset(0, 0, 1)] {
                let Some(&j) = self.map.id_of(nk).and_then(|n| index.get(&n)) else {
                    continue;
                };
                let (a, b) = (self.map.voxel(v), self.map.voxel(ids[j as usize]));
                let na = a.normal.map(|n| nalgebra::Vector3::new(n[0], n[1], n[2]).cast::<f64>());
                let nb = b.normal.map(|n| nalgebra::Vector3::new(n[0], n[1], n[2]).cast::<f64>());
                let dn2 = match (na, nb) {
                    (Some(x), Some(y)) => (x - y).norm_squared(),
                    _ => 0.0,
                };
                let dp2 = (self.map.position(v) - self.map.position(ids[j as usize])).norm_squared();
                edges.push((i as u32, j, crf::gaussian_kernel(dp2, dn2, w.theta_alpha, w.theta_beta)));
                adjacency.push((i as u32, j));
            }
        }
        state.set_pairwise(&edges);
        // Voxels inherit the clique of their super-voxel.
        let clique_of: FxHashMap<u32, usize> = cliques
            .cliques
            .iter()
            .flat_map(|c| c.members.iter().map(move |&m| (m, c.id)))
            .collect();
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); cliques.cliques.len()];
        for (i, &v) in ids.iter().enumerate() {
            let c = self.map.voxel(v).cluster;
            if c == NO_CLUSTER || cluster_nodes.binary_search(&c).is_err() {
                continue;
            }
            if let Some(&r) = clique_of.get(&c) {
                members[r].push(i as u32);
            }
        }
        let voxel_cliques = members
            .into_iter()
            .zip(&cliques.cliques)
            .filter(|(m, _)| !m.is_empty())
            .map(|(m, c)| CrfClique {
                members: m,
                object: c.objectness_flag,
            })
            .collect();
        state.set_cliques(voxel_cliques, &adjacency)?;
        let out = crf::infer(&mut state, w, &self.lambda, self.config.offline_iterations);
        for (&v, &l) in ids.iter().zip(&out) {
            self.map.voxel_mut(v).segment = l;
        }
        Ok(ids.len())
    }

    /// Surface points with their ground truth and the resulting metrics.
    pub fn evaluate(&self) -> Evaluation {
        let ids = self.map.surface_ids();
        let mut points = self.map.extract_surface_points();
        // Instance confidence: mean label confidence of the members.
        if self.config.mode == Mode::SemanticInstance {
            let mut sums: FxHashMap<u16, (f64, usize)> = FxHashMap::default();
            for p in &points {
                let e = sums.entry(p.instance).or_default();
                e.0 += f64::from(p.confidence);
                e.1 += 1;
            }
            for p in &mut points {
                let (s, n) = sums[&p.instance];
                p.confidence = (s / n as f64) as f32;
            }
        }
        let gt: Vec<Option<(Label, u16)>> = ids.iter().map(|&v| self.gt.majority(v)).collect();
        let mut ev = Evaluation {
            evaluated: gt.iter().filter(|g| g.is_some()).count(),
            ..Default::default()
        };
        if ev.evaluated > 0 {
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            let (mut pi, mut gi, mut pc) = (Vec::new(), Vec::new(), Vec::new());
            for (p, g) in points.iter().zip(&gt) {
                if let Some((l, inst)) = *g {
                    pred.push(p.label);
                    truth.push(l);
                    pi.push(p.instance);
                    gi.push(inst);
                    pc.push(p.confidence);
                }
            }
            ev.accuracy = metrics::accuracy(&pred, &truth).ok();
            ev.weighted_iou = metrics::weighted_iou(&pred, &truth).ok();
            ev.per_class = metrics::per_class_accuracy(&pred, &truth).unwrap_or_default();
            if self.config.mode == Mode::SemanticInstance {
                let gts = metrics::gt_instances(&gi, &truth);
                let category: Vec<Label> = pi
                    .iter()
                    .zip(&pred)
                    .map(|(&i, &p)| match self.registry.get(i) {
                        Some(e) if e.category != NO_LABEL => e.category,
                        _ => p,
                    })
                    .collect();
                let preds = metrics::pred_instances(&pi, &category, &pc);
                ev.ap = Some(metrics::average_precision_50(&preds, &gts));
                ev.coverage = metrics::dominant_coverage(&gts, &pi);
            }
        }
        ev.points = points;
        ev.gt = gt;
        ev
    }

    /// Writes a checkpoint under `dir`.
    pub fn write_checkpoint(&self, dir: &Path) -> Result<()> {
        Checkpoint::write(dir, &self.map, &self.registry, &self.gt, self.next_frame)
    }

    /// Restores map, super-voxels, registry and ground-truth tally from a
    /// checkpoint; the next frame to process is returned by
    /// [`next_frame`](Self::next_frame). Temporal beliefs start empty.
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let cp = Checkpoint::read(dir)?;
        if cp.map.params() != &self.config.map {
            return Err(Error::invalid("checkpoint", "map parameters differ from the config"));
        }
        self.set = SuperVoxelSet::from_assignments(&cp.map, self.config.cluster.clone(), self.labels.len());
        self.map = cp.map;
        self.registry = cp.registry;
        self.gt = cp.gt;
        self.next_frame = cp.next_frame;
        self.prev_q.clear();
        self.prev_labels.clear();
        Ok(())
    }

    /// Refreshes instance sizes and returns the registry dump.
    pub fn registry_dump(&mut self) -> String {
        self.registry.refresh_sizes(&self.map, &self.set);
        self.registry.dump()
    }
}

/// Files written by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub evaluation: Evaluation,
    pub timings: Vec<StageTimings>,
    pub flip_rates: Vec<(usize, f64)>,
    pub node_counts: Vec<usize>,
    pub map_size: usize,
    pub cloud: Option<PathBuf>,
    pub report: PathBuf,
    pub timing_log: PathBuf,
}

fn output_stem(config: &PipelineConfig) -> String {
    format!("{}_{}", config.scene_name, config.method)
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("threads", e.to_string()))?;
    Ok(pool.install(f))
}

/// Fresh engine for `source` under `config`.
pub fn engine_for(config: &PipelineConfig, source: &FrameSource, lambda: Option<CooccurrenceMatrix>) -> Result<Engine> {
    let engine = Engine::new(
        config.clone(),
        source.labels().clone(),
        *source.intrinsics(),
        source.prediction_stride(),
    )?;
    match lambda {
        Some(l) => engine.with_cooccurrence(l),
        None => Ok(engine),
    }
}

/// Feeds the remaining frames of `source` (from the engine's next frame on)
/// through `engine`. A failing frame writes a checkpoint and aborts with
/// the frame index.
pub fn advance(engine: &mut Engine, source: &FrameSource) -> Result<()> {
    let config = engine.config.clone();
    let frames = config.max_frames.map_or(source.len(), |m| m.min(source.len()));
    let checkpoint_dir = config.out_dir.join("checkpoint");
    for index in engine.next_frame..frames {
        let result = source.frame(index).and_then(|f| engine.step(&f));
        if let Err(e) = result {
            if let Err(ce) = engine.write_checkpoint(&checkpoint_dir) {
                log::error!("writing checkpoint after failure: {ce}");
            }
            return Err(Error::AtFrame {
                index,
                source: Box::new(e),
            });
        }
        if config.checkpoint_every.is_some_and(|n| n > 0 && (index + 1) % n == 0) {
            engine.write_checkpoint(&checkpoint_dir)?;
        }
        if index % 50 == 0 {
            log::info!(
                "frame {index}/{frames}: {} voxels, {} super-voxels",
                engine.map.len(),
                engine.set.len()
            );
        }
    }
    Ok(())
}

/// Streams every frame of the configured sequence through a fresh engine.
pub fn stream(config: &PipelineConfig, source: &FrameSource, lambda: Option<CooccurrenceMatrix>) -> Result<Engine> {
    let mut engine = engine_for(config, source, lambda)?;
    advance(&mut engine, source)?;
    Ok(engine)
}

/// Writes the cloud, metrics report, timing log and (in instance mode) the
/// registry for a finished engine.
pub fn write_outputs(engine: &mut Engine, evaluation: &Evaluation) -> Result<RunOutput> {
    let config = engine.config.clone();
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let stem = output_stem(&config);
    let cloud = if config.write_cloud && !evaluation.points.is_empty() {
        let p = config.out_dir.join(format!("{stem}.ply"));
        write_labeled_cloud(&evaluation.points, &p)?;
        Some(p)
    } else {
        None
    };
    let report = config.out_dir.join(format!("{stem}_metrics.csv"));
    metrics::write_report(
        &report,
        &evaluation.rows(&config.scene_name, &config.method, &engine.labels),
    )?;
    let timing_log = config.out_dir.join(format!("{stem}_timings.csv"));
    write_timing_log(&timing_log, &engine.timings)?;
    if config.mode == Mode::SemanticInstance {
        let p = config.out_dir.join(format!("{stem}_instances.txt"));
        let dump = engine.registry_dump();
        std::fs::write(&p, dump).map_err(|e| Error::io(&p, e))?;
    }
    if config.write_cloud && evaluation.evaluated > 0 {
        let gt_points: Vec<LabeledPoint> = evaluation
            .points
            .iter()
            .zip(&evaluation.gt)
            .filter_map(|(p, g)| {
                g.map(|(label, instance)| LabeledPoint {
                    label,
                    instance,
                    confidence: 1.0,
                    ..*p
                })
            })
            .collect();
        write_labeled_cloud(&gt_points, &config.out_dir.join(format!("{stem}_gt.ply")))?;
    }
    let p = config.out_dir.join(format!("{stem}_cliques.txt"));
    std::fs::write(&p, engine.last_cliques.dump()).map_err(|e| Error::io(&p, e))?;
    Ok(RunOutput {
        evaluation: evaluation.clone(),
        timings: engine.timings.clone(),
        flip_rates: engine.flip_rates.clone(),
        node_counts: engine.node_counts.clone(),
        map_size: engine.map.len(),
        cloud,
        report,
        timing_log,
    })
}

/// Refinement applied after streaming.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refinement {
    Online,
    /// One CRF over all super-voxels.
    Offline,
    /// One CRF over all surface voxels.
    MeshLevel,
}

/// Streams the configured sequence, optionally continuing from a
/// checkpoint, refines as requested and writes the outputs. Offline
/// refinements suffix the method name with `_offline` or `_mesh`.
pub fn run_with(config: &PipelineConfig, resume: Option<&Path>, refinement: Refinement) -> Result<RunOutput> {
    config.validate()?;
    with_threads(config.threads, || {
        let source = FrameSource::open(&config.sequence, config.seed)?;
        let mut engine = engine_for(config, &source, None)?;
        if let Some(dir) = resume {
            engine.resume(dir)?;
            log::info!("resuming at frame {}", engine.next_frame);
        }
        advance(&mut engine, &source)?;
        match refinement {
            Refinement::Online => {}
            Refinement::Offline => {
                engine.refine_offline(false)?;
                engine.config.method = format!("{}_offline", config.method);
            }
            Refinement::MeshLevel => {
                engine.refine_offline(true)?;
                engine.config.method = format!("{}_mesh", config.method);
            }
        }
        let ev = engine.evaluate();
        write_outputs(&mut engine, &ev)
    })?
}

/// Online run over the whole sequence, writing outputs to `out_dir`.
pub fn run(config: &PipelineConfig) -> Result<RunOutput> {
    run_with(config, None, Refinement::Online)
}

/// Online integration followed by one offline CRF refinement.
pub fn run_offline(config: &PipelineConfig, mesh_level: bool) -> Result<RunOutput> {
    let r = if mesh_level {
        Refinement::MeshLevel
    } else {
        Refinement::Offline
    };
    run_with(config, None, r)
}

/// Evaluates a predicted cloud against a ground-truth cloud. Each predicted
/// point takes the label and instance of the nearest ground-truth point
/// within `max_dist`; points without one are left out.
pub fn evaluate_clouds(pred: &[LabeledPoint], gt: &[LabeledPoint], max_dist: f64) -> Evaluation {
    let q: Vec<[f32; 3]> = pred.iter().map(|p| p.position).collect();
    let r: Vec<[f32; 3]> = gt.iter().map(|p| p.position).collect();
    let matches = metrics::nearest_within(&q, &r, max_dist);
    let mut ev = Evaluation {
        gt: matches
            .iter()
            .map(|m| m.map(|j| (gt[j].label, gt[j].instance)))
            .collect(),
        ..Default::default()
    };
    let kept: Vec<(usize, (Label, u16))> = ev
        .gt
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|g| (i, g)))
        .collect();
    ev.evaluated = kept.len();
    if !kept.is_empty() {
        let pl: Vec<Label> = kept.iter().map(|&(i, _)| pred[i].label).collect();
        let gl: Vec<Label> = kept.iter().map(|&(_, g)| g.0).collect();
        ev.accuracy = metrics::accuracy(&pl, &gl).ok();
        ev.weighted_iou = metrics::weighted_iou(&pl, &gl).ok();
        ev.per_class = metrics::per_class_accuracy(&pl, &gl).unwrap_or_default();
        let pi: Vec<u16> = kept.iter().map(|&(i, _)| pred[i].instance).collect();
        if pi.iter().any(|&i| i != UNKNOWN) {
            let gi: Vec<u16> = kept.iter().map(|&(_, g)| g.1).collect();
            let pc: Vec<f32> = kept.iter().map(|&(i, _)| pred[i].confidence).collect();
            let gts = metrics::gt_instances(&gi, &gl);
            ev.ap = Some(metrics::average_precision_50(
                &metrics::pred_instances(&pi, &pl, &pc),
                &gts,
            ));
            ev.coverage = metrics::dominant_coverage(&gts, &pi);
        }
    }
    ev.points = pred.to_vec();
    ev
}

/// Label pairs of adjacent proposal regions in a finished engine, each
/// region labeled by the ground-truth majority of its voxels.
pub fn region_label_pairs(engine: &Engine) -> Vec<(Label, Label)> {
    let set = &engine.set;
    let nodes: Vec<u32> = set.iter().map(|sv| sv.id).collect();
    let adjacency = set.adjacency(&engine.map);
    let cliques = propose(
        set,
        &nodes,
        &adjacency,
        engine.config.proposal_k,
        engine.config.proposal_min_size,
    );
    let l = engine.labels.len();
    let mut region_of: FxHashMap<u32, usize> = FxHashMap::default();
    let region_labels: Vec<Option<Label>> = cliques
        .cliques
        .iter()
        .enumerate()
        .map(|(r, c)| {
            let mut votes = vec![0usize; l];
            for &m in &c.members {
                region_of.insert(m, r);
                for &v in &set.get(m).unwrap().members {
                    if let Some((g, _)) = engine.gt.majority(v) {
                        votes[g as usize] += 1;
                    }
                }
            }
            let best = crf::argmax(&votes.iter().map(|&x| x as f64).collect::<Vec<_>>());
            (votes[best as usize] > 0).then_some(best)
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = adjacency
        .iter()
        .filter_map(|(a, b)| {
            let (ra, rb) = (region_of[a], region_of[b]);
            (ra != rb).then_some((ra.min(rb), ra.max(rb)))
        })
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    crf::cooccurrence_pairs(&region_labels, &pairs)
}

/// Learns a co-occurrence matrix from a labeled training sequence.
pub fn learn_from_sequence(config: &PipelineConfig) -> Result<(CooccurrenceMatrix, LabelSpace)> {
    let mut cfg = config.clone();
    cfg.crf_enabled = false;
    cfg.mode = Mode::Semantic;
    cfg.validate()?;
    with_threads(cfg.threads, || {
        let source = FrameSource::open(&cfg.sequence, cfg.seed)?;
        let engine = stream(&cfg, &source, None)?;
        let pairs = region_label_pairs(&engine);
        Ok((
            crf::learn_cooccurrence(&pairs, engine.labels.len()),
            engine.labels.clone(),
        ))
    })?
}

#[cfg(test)]
mod tests;
