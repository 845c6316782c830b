//! Higher-order CRF over super-voxels: unary and Gaussian pairwise terms plus
//! clique objectness, label consistency and region relationship terms,
//! optimized by synchronous mean-field sweeps.

mod cooccurrence;
mod energy;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::labels::Label;
use crate::supervoxel::{SuperVoxel, SuperVoxelSet};

pub use cooccurrence::{cooccurrence_pairs, learn_cooccurrence, CooccurrenceMatrix};
pub use energy::{brute_force_map, term_energies, TermEnergies, MAX_ENUMERATION};

/// Smoothing added to every bin of a label histogram before normalization.
pub const HIST_EPS: f64 = 0.01;
/// Guard inside logarithms of clique frequencies.
pub const LOG_EPS: f64 = 1e-6;

/// Marker for a node outside every clique.
const NO_CLIQUE: u32 = u32::MAX;

/// How the region relationship term couples two neighboring cliques.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RelationForm {
    /// `-sum f_r(l) f_q(l') log L(l, l')`.
    #[default]
    Coupled,
    /// `-sum log(f_r(l) f_q(l') L(l, l'))`, summed independently over both
    /// label indices.
    Separable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfWeights {
    pub unary: f64,
    pub pair: f64,
    pub obj: f64,
    pub cons: f64,
    pub rel: f64,
    /// Spatial bandwidth in meters.
    pub theta_alpha: f64,
    /// Normal bandwidth.
    pub theta_beta: f64,
    pub relation: RelationForm,
}

impl Default for CrfWeights {
    fn default() -> Self {
        CrfWeights {
            unary: 1.0,
            pair: 1.0,
            obj: 0.5,
            cons: 0.5,
            rel: 0.25,
            theta_alpha: 0.2,
            theta_beta: 0.5,
            relation: RelationForm::Coupled,
        }
    }
}

impl CrfWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.unary, self.pair, self.obj, self.cons, self.rel];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(
                "crf weights",
                "term weights must be finite and non-negative",
            ));
        }
        if !(self.theta_alpha > 0.0 && self.theta_beta > 0.0) {
            return Err(Error::invalid("crf weights", "kernel bandwidths must be positive"));
        }
        Ok(())
    }

    /// Pairwise-only weights with the same unary, pairwise and bandwidths.
    pub fn dense_only(&self) -> Self {
        CrfWeights {
            obj: 0.0,
            cons: 0.0,
            rel: 0.0,
            ..*self
        }
    }

    fn has_higher_order(&self) -> bool {
        self.obj > 0.0 || self.cons > 0.0 || self.rel > 0.0
    }
}

/// `exp(-|dp|^2 / (2 ta^2) - |dn|^2 / (2 tb^2))`.
pub fn gaussian_kernel(dp2: f64, dn2: f64, theta_alpha: f64, theta_beta: f64) -> f64 {
    (-dp2 / (2.0 * theta_alpha * theta_alpha) - dn2 / (2.0 * theta_beta * theta_beta)).exp()
}

/// Pairwise kernel between two super-voxel centroids. The normal term is
/// dropped when either normal is unknown.
pub fn pairwise_kernel(a: &SuperVoxel, b: &SuperVoxel, w: &CrfWeights) -> f64 {
    kernel_between(
        &a.centroid_pos,
        a.centroid_normal,
        &b.centroid_pos,
        b.centroid_normal,
        w,
    )
}

fn kernel_between(
    pa: &Point3<f64>,
    na: Option<Vector3<f64>>,
    pb: &Point3<f64>,
    nb: Option<Vector3<f64>>,
    w: &CrfWeights,
) -> f64 {
    let dn2 = match (na, nb) {
        (Some(x), Some(y)) => (x - y).norm_squared(),
        _ => 0.0,
    };
    gaussian_kernel((pa - pb).norm_squared(), dn2, w.theta_alpha, w.theta_beta)
}

/// A clique over node indices with its objectness flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrfClique {
    pub members: Vec<u32>,
    pub object: bool,
}

/// Per-node label beliefs carried from one frame to the next, keyed by
/// super-voxel id.
pub type BeliefMap = FxHashMap<u32, Vec<f64>>;

/// `normalize(hist + HIST_EPS)`.
pub fn predicted_distribution(hist: &[f64]) -> Vec<f64> {
    let total: f64 = hist.iter().map(|h| h.max(0.0) + HIST_EPS).sum();
    hist.iter().map(|h| (h.max(0.0) + HIST_EPS) / total).collect()
}

/// Row-major unary table for `nodes` (super-voxel ids). Where `prev` holds
/// a belief for the node the prediction is blended as
/// `tau * predicted + (1 - tau) * prev`. Entries are `-ln` of the result.
pub fn build_unary(set: &SuperVoxelSet, nodes: &[u32], prev: Option<&BeliefMap>, tau: f64) -> Vec<f64> {
    let histograms: Vec<&[f64]> = nodes
        .iter()
        .map(|&id| set.get(id).expect("live super-voxel").label_hist.as_slice())
        .collect();
    unary_from_histograms(&histograms, nodes, prev, tau)
}

/// [`build_unary`] over explicit histograms; `keys[i]` looks up `prev`.
pub fn unary_from_histograms(histograms: &[&[f64]], keys: &[u32], prev: Option<&BeliefMap>, tau: f64) -> Vec<f64> {
    assert!((0.0..=1.0).contains(&tau), "blend factor must lie in [0, 1]");
    let mut out = Vec::with_capacity(histograms.iter().map(|h| h.len()).sum());
    for (hist, key) in histograms.iter().zip(keys) {
        let pred = predicted_distribution(hist);
        match prev.and_then(|p| p.get(key)).filter(|q| q.len() == pred.len()) {
            Some(q) => out.extend(pred.iter().zip(q).map(|(a, b)| -(tau * a + (1.0 - tau) * b).ln())),
            None => out.extend(pred.iter().map(|a| -a.ln())),
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Lowest label with the largest value.
pub fn argmax(row: &[f64]) -> Label {
    let mut best = 0;
    for (l, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = l;
        }
    }
    best as Label
}

#[derive(Debug, Clone)]
pub struct MeanFieldState {
    num_labels: usize,
    object_mask: Vec<bool>,
    unary: Vec<f64>,
    q: Vec<f64>,
    neighbors: Vec<Vec<(u32, f64)>>,
    cliques: Vec<CrfClique>,
    clique_of: Vec<u32>,
    clique_adjacency: Vec<Vec<u32>>,
    freq: Vec<f64>,
}

impl MeanFieldState {
    /// State with the given row-major unary table, no edges and no cliques.
    /// Q starts at `softmax(-U)`.
    pub fn new(object_mask: Vec<bool>, unary: Vec<f64>) -> Result<Self> {
        let num_labels = object_mask.len();
        if num_labels < 2 {
            return Err(Error::invalid("crf state", "need at least two labels"));
        }
        if !unary.len().is_multiple_of(num_labels) {
            return Err(Error::invalid("crf state", "unary table is not a whole number of rows"));
        }
        if unary.iter().any(|u| !u.is_finite()) {
            return Err(Error::invalid("crf state", "unary values must be finite"));
        }
        let n = unary.len() / num_labels;
        let mut q: Vec<f64> = unary.iter().map(|u| -u).collect();
        for row in q.chunks_mut(num_labels) {
            softmax_in_place(row);
        }
        Ok(MeanFieldState {
            num_labels,
            object_mask,
            unary,
            q,
            neighbors: vec![Vec::new(); n],
            cliques: Vec::new(),
            clique_of: vec![NO_CLIQUE; n],
            clique_adjacency: Vec::new(),
            freq: Vec::new(),
        })
    }

    /// Replaces the pairwise graph. Each `(i, j, k)` is added in both
    /// directions; self-loops are ignored.
    pub fn set_pairwise(&mut self, edges: &[(u32, u32, f64)]) {
        let n = self.len();
        self.neighbors = vec![Vec::new(); n];
        for &(i, j, k) in edges {
            if i == j {
                continue;
            }
            assert!((i as usize) < n && (j as usize) < n, "edge endpoint out of range");
            self.neighbors[i as usize].push((j, k));
            self.neighbors[j as usize].push((i, k));
        }
        for list in &mut self.neighbors {
            list.sort_by_key(|e| e.0);
        }
    }

    /// Replaces the cliques. `adjacency` lists node pairs; two cliques are
    /// neighbors iff some pair connects them.
    pub fn set_cliques(&mut self, cliques: Vec<CrfClique>, adjacency: &[(u32, u32)]) -> Result<()> {
        let n = self.len();
        let mut clique_of = vec![NO_CLIQUE; n];
        for (r, c) in cliques.iter().enumerate() {
            if c.members.is_empty() {
                return Err(Error::invalid("crf cliques", "empty clique"));
            }
            for &m in &c.members {
                let slot = clique_of
                    .get_mut(m as usize)
                    .ok_or_else(|| Error::invalid("crf cliques", format!("node {m} out of range")))?;
                if *slot != NO_CLIQUE {
                    return Err(Error::invalid("crf cliques", format!("node {m} in two cliques")));
                }
                *slot = r as u32;
            }
        }
        let mut adj = vec![Vec::new(); cliques.len()];
        for &(a, b) in adjacency {
            let (ra, rb) = (clique_of[a as usize], clique_of[b as usize]);
            if ra != NO_CLIQUE && rb != NO_CLIQUE && ra != rb {
                adj[ra as usize].push(rb);
                adj[rb as usize].push(ra);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        self.cliques = cliques;
        self.clique_of = clique_of;
        self.clique_adjacency = adj;
        self.refresh_frequencies();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clique_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn object_mask(&self) -> &[bool] {
        &self.object_mask
    }

    pub fn unary(&self) -> &[f64] {
        &self.unary
    }

    pub fn unary_row(&self, i: usize) -> &[f64] {
        &self.unary[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn q_row(&self, i: usize) -> &[f64] {
        &self.q[i * self.num_labels..(i + 1) * self.num_labels]
    }

    /// Overwrites Q; rows are renormalized.
    pub fn set_q(&mut self, q: Vec<f64>) {
        assert_eq!(q.len(), self.q.len(), "Q shape mismatch");
        self.q = q;
        for row in self.q.chunks_mut(self.num_labels) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.refresh_frequencies();
    }

    pub fn neighbors(&self, i: usize) -> &[(u32, f64)] {
        &self.neighbors[i]
    }

    pub fn cliques(&self) -> &[CrfClique] {
        &self.cliques
    }

    pub fn clique_of(&self, i: usize) -> Option<usize> {
        let r = self.clique_of[i];
        (r != NO_CLIQUE).then_some(r as usize)
    }

    pub fn clique_adjacency(&self, r: usize) -> &[u32] {
        &self.clique_adjacency[r]
    }

    /// Cached mean of Q over the members of clique `r`.
    pub fn frequencies(&self, r: usize) -> &[f64] {
        &self.freq[r * self.num_labels..(r + 1) * self.num_labels]
    }

    fn refresh_frequencies(&mut self) {
        let l = self.num_labels;
        let q = &self.q;
        self.freq = self
            .cliques
            .par_iter()
            .flat_map_iter(|c| {
                let mut f = vec![0.0; l];
                for &m in &c.members {
                    let row = &q[m as usize * l..(m as usize + 1) * l];
                    f.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                let n = c.members.len() as f64;
                f.into_iter().map(move |x| x / n)
            })
            .collect();
    }

    /// Weighted clique message per label, subtracted from every member's
    /// log-belief.
    fn clique_messages(&self, w: &CrfWeights, lambda: &CooccurrenceMatrix) -> Vec<f64> {
        let l = self.num_labels;
        let mut out = vec![0.0; self.cliques.len() * l];
        out.par_chunks_mut(l).enumerate().for_each(|(r, msg)| {
            let c = &self.cliques[r];
            let inv = 1.0 / c.members.len() as f64;
            let f = self.frequencies(r);
            if w.obj > 0.0 {
                for (lab, m) in msg.iter_mut().enumerate() {
                    let penalized = self.object_mask[lab] != c.object;
                    if penalized {
                        *m += w.obj * inv;
                    }
                }
            }
            if w.cons > 0.0 {
                for (lab, m) in msg.iter_mut().enumerate() {
                    *m += w.cons * (-inv * ((f[lab] + LOG_EPS).ln() + 1.0));
                }
            }
            if w.rel > 0.0 {
                let adj = &self.clique_adjacency[r];
                match w.relation {
                    RelationForm::Coupled => {
                        for (lab, m) in msg.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for &q in adj {
                                let fq = self.frequencies(q as usize);
                                for (l2, &fv) in fq.iter().enumerate() {
                                    s += fv * lambda.ln(lab as Label, l2 as Label);
                                }
                            }
                            *m += w.rel * (-inv * s);
                        }
                    }
                    RelationForm::Separable => {
                        let scale = l as f64 * adj.len() as f64 * inv;
                        for (lab, m) in msg.iter_mut().enumerate() {
                            *m += w.rel * (-scale / (f[lab] + LOG_EPS));
                        }
                    }
                }
            }
        });
        out
    }
}

/// One synchronous mean-field sweep. Every node reads the previous Q and the
/// clique frequencies computed from it; frequencies are refreshed after the
/// sweep. Terms with zero weight are skipped entirely.
pub fn mean_field_step(state: &mut MeanFieldState, w: &CrfWeights, lambda: &CooccurrenceMatrix) {
    let l = state.num_labels;
    let higher = w.has_higher_order() && !state.cliques.is_empty();
    let messages = if higher {
        state.clique_messages(w, lambda)
    } else {
        Vec::new()
    };
    let old = &state.q;
    let mut next = vec![0.0; old.len()];
    next.par_chunks_mut(l).enumerate().for_each(|(i, row)| {
        let u = &state.unary[i * l..(i + 1) * l];
        for (a, &ui) in row.iter_mut().zip(u) {
            *a = -w.unary * ui;
        }
        if w.pair > 0.0 {
            pairwise_update(row, &state.neighbors[i], old, l, w.pair);
        }
        if higher {
            let r = state.clique_of[i];
            if r != NO_CLIQUE {
                let msg = &messages[r as usize * l..(r as usize + 1) * l];
                row.iter_mut().zip(msg).for_each(|(a, m)| *a -= m);
            }
        }
        softmax_in_place(row);
    });
    state.q = next;
    if !state.cliques.is_empty() {
        state.refresh_frequencies();
    }
}

#[inline]
fn pairwise_update(row: &mut [f64], neighbors: &[(u32, f64)], q: &[f64], l: usize, w_pair: f64) {
    for (lab, a) in row.iter_mut().enumerate() {
        let mut s = 0.0;
        for &(j, k) in neighbors {
            s += k * (1.0 - q[j as usize * l + lab]);
        }
        *a -= w_pair * s;
    }
}

/// Argmax labeling of the current Q.
pub fn labeling(state: &MeanFieldState) -> Vec<Label> {
    state.q.chunks(state.num_labels).map(argmax).collect()
}

/// `iterations` mean-field sweeps followed by argmax with lowest-id ties.
pub fn infer(state: &mut MeanFieldState, w: &CrfWeights, lambda: &CooccurrenceMatrix, iterations: usize) -> Vec<Label> {
    assert!(iterations >= 1, "at least one iteration");
    for _ in 0..iterations {
        mean_field_step(state, w, lambda);
    }
    labeling(state)
}

/// Plain dense CRF (unary plus Potts pairwise) with the same update order as
/// [`infer`], used as the reference for the pairwise-only ablation.
pub fn dense_crf(
    unary: &[f64],
    num_labels: usize,
    edges: &[(u32, u32, f64)],
    w_unary: f64,
    w_pair: f64,
    iterations: usize,
) -> (Vec<Label>, Vec<f64>) {
    let n = unary.len() / num_labels;
    let mut neighbors: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for &(i, j, k) in edges {
        if i != j {
            neighbors[i as usize].push((j, k));
            neighbors[j as usize].push((i, k));
        }
    }
    for list in &mut neighbors {
        list.sort_by_key(|e| e.0);
    }
    let mut q: Vec<f64> = unary.iter().map(|u| -u).collect();
    for row in q.chunks_mut(num_labels) {
        softmax_in_place(row);
    }
    for _ in 0..iterations {
        let mut next = vec![0.0; q.len()];
        for (i, row) in next.chunks_mut(num_labels).enumerate() {
            for (a, &u) in row.iter_mut().zip(&unary[i * num_labels..(i + 1) * num_labels]) {
                *a = -w_unary * u;
            }
            if w_pair > 0.0 {
                pairwise_update(row, &neighbors[i], &q, num_labels, w_pair);
            }
            softmax_in_place(row);
        }
        q = next;
    }
    (q.chunks(num_labels).map(argmax).collect(), q)
}

/// Pairwise edges over `nodes`: the given adjacency pairs plus every pair of
/// centroids closer than `radius`. Returned as node-index triples with
/// kernel values, sorted and unique.
pub fn pairwise_edges(
    set: &SuperVoxelSet,
    nodes: &[u32],
    adjacency: &[(u32, u32)],
    radius: f64,
    w: &CrfWeights,
) -> Vec<(u32, u32, f64)> {
    let index: FxHashMap<u32, u32> = nodes.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
    let mut pairs: Vec<(u32, u32)> = adjacency
        .iter()
        .filter_map(|(a, b)| Some((*index.get(a)?, *index.get(b)?)))
        .filter(|(a, b)| a != b)
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    // Radius neighbors through a hash grid with cell size `radius`.
    let cell = |p: &Point3<f64>| {
        [
            (p.x / radius).floor() as i64,
            (p.y / radius).floor() as i64,
            (p.z / radius).floor() as i64,
        ]
    };
    let svs: Vec<&SuperVoxel> = nodes.iter().map(|&id| set.get(id).expect("live super-voxel")).collect();
    let mut grid: FxHashMap<[i64; 3], Vec<u32>> = FxHashMap::default();
    for (i, sv) in svs.iter().enumerate() {
        grid.entry(cell(&sv.centroid_pos)).or_default().push(i as u32);
    }
    let r2 = radius * radius;
    for (i, sv) in svs.iter().enumerate() {
        let c = cell(&sv.centroid_pos);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &j in list {
                        if j as usize > i && (svs[j as usize].centroid_pos - sv.centroid_pos).norm_squared() <= r2 {
                            pairs.push((i as u32, j));
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
        .into_iter()
        .map(|(a, b)| (a, b, pairwise_kernel(svs[a as usize], svs[b as usize], w)))
        .collect()
}

#[cfg(test)]
mod tests;
