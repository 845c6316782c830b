//! Object proposals over the super-voxel graph: edge weights from centroid
//! color, normal and objectness, then Felzenszwalb-Huttenlocher segmentation.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::supervoxel::SuperVoxelSet;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEdge {
    pub a: u32,
    pub b: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedGraph {
    /// Super-voxel ids, ascending.
    pub nodes: Vec<u32>,
    pub edges: Vec<WeightedEdge>,
}

/// Color, normal and objectness dissimilarities, each in [0, 1].
pub fn edge_components(set: &SuperVoxelSet, a: u32, b: u32) -> [f64; 3] {
    let (sa, sb) = (
        set.get(a).expect("live super-voxel"),
        set.get(b).expect("live super-voxel"),
    );
    let color = (sa.centroid_color.distance(&sb.centroid_color) / 100.0).clamp(0.0, 1.0);
    let normal = match (sa.centroid_normal, sb.centroid_normal) {
        (Some(na), Some(nb)) => ((1.0 - na.dot(&nb)) / 2.0).clamp(0.0, 1.0),
        _ => 0.5,
    };
    let objectness = (sa.mean_objectness - sb.mean_objectness).abs().clamp(0.0, 1.0);
    [color, normal, objectness]
}

/// Builds the proposal graph on `nodes` from adjacency pairs; pairs touching
/// a super-voxel outside `nodes` are dropped.
pub fn edge_weights(set: &SuperVoxelSet, nodes: &[u32], adjacency: &[(u32, u32)]) -> WeightedGraph {
    let mut nodes = nodes.to_vec();
    nodes.sort_unstable();
    nodes.dedup();
    let edges = adjacency
        .iter()
        .filter(|(a, b)| a != b && nodes.binary_search(a).is_ok() && nodes.binary_search(b).is_ok())
        .map(|&(a, b)| WeightedEdge {
            a,
            b,
            weight: edge_components(set, a, b).iter().sum(),
        })
        .collect();
    WeightedGraph { nodes, edges }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clique {
    pub id: usize,
    /// Super-voxel ids, ascending.
    pub members: Vec<u32>,
    /// 1 when the region is judged to be an object.
    pub objectness_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CliqueSet {
    pub cliques: Vec<Clique>,
}

impl CliqueSet {
    /// Map from node to clique index, as `(node, clique)` pairs sorted by node.
    pub fn membership(&self) -> Vec<(u32, usize)> {
        let mut out: Vec<(u32, usize)> = self
            .cliques
            .iter()
            .flat_map(|c| c.members.iter().map(move |&m| (m, c.id)))
            .collect();
        out.sort_unstable();
        out
    }

    /// Text dump, one clique per line: `clique_id y_r member_ids...`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for c in &self.cliques {
            let _ = write!(s, "{} {}", c.id, u8::from(c.objectness_flag));
            for m in &c.members {
                let _ = write!(s, " {m}");
            }
            s.push('\n');
        }
        s
    }
}

struct Components {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl Components {
    fn new(n: usize) -> Self {
        Components {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, w: f64) -> usize {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = self.internal[big].max(self.internal[small]).max(w);
        big
    }
}

fn edge_order(x: &WeightedEdge, y: &WeightedEdge) -> Ordering {
    let key = |e: &WeightedEdge| (e.a.min(e.b), e.a.max(e.b));
    x.weight.total_cmp(&y.weight).then_with(|| key(x).cmp(&key(y)))
}

/// Outcome of one edge during the main pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeDecision {
    pub a: u32,
    pub b: u32,
    pub weight: f64,
    /// Minimum internal difference of the two components when the edge was
    /// considered; `None` when both ends were already in one component.
    pub mint: Option<f64>,
    pub merged: bool,
}

fn segment(
    graph: &WeightedGraph,
    k: f64,
    min_size: usize,
    mut trace: Option<&mut Vec<MergeDecision>>,
) -> Vec<Vec<u32>> {
    let n = graph.nodes.len();
    if n == 0 {
        return Vec::new();
    }
    let index = |id: u32| graph.nodes.binary_search(&id).expect("edge endpoint is a node");
    let mut edges: Vec<&WeightedEdge> = graph.edges.iter().collect();
    edges.sort_by(|x, y| edge_order(x, y));

    let mut comps = Components::new(n);
    for e in &edges {
        let (ra, rb) = (comps.find(index(e.a)), comps.find(index(e.b)));
        if ra == rb {
            if let Some(t) = trace.as_deref_mut() {
                t.push(MergeDecision {
                    a: e.a,
                    b: e.b,
                    weight: e.weight,
                    mint: None,
                    merged: false,
                });
            }
            continue;
        }
        let mint = (comps.internal[ra] + k / comps.size[ra] as f64).min(comps.internal[rb] + k / comps.size[rb] as f64);
        let merged = e.weight <= mint;
        if merged {
            comps.union(ra, rb, e.weight);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(MergeDecision {
                a: e.a,
                b: e.b,
                weight: e.weight,
                mint: Some(mint),
                merged,
            });
        }
    }
    // Small components join their cheapest neighbor, in edge order.
    for e in &edges {
        let (ra, rb) = (comps.find(index(e.a)), comps.find(index(e.b)));
        if ra != rb && (comps.size[ra] < min_size || comps.size[rb] < min_size) {
            comps.union(ra, rb, e.weight);
        }
    }

    let mut groups: Vec<Vec<u32>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = comps.find(i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(graph.nodes[i]);
    }
    groups
}

/// Felzenszwalb-Huttenlocher segmentation. Edges are processed by ascending
/// `(weight, min id, max id)`; components `A`, `B` merge on edge `w` iff
/// `w <= min(Int(A) + k/|A|, Int(B) + k/|B|)`. Components smaller than
/// `min_size` are then merged into their lowest-weight neighbor. All flags
/// start cleared; see [`flag_objectness`].
pub fn fh_segment(graph: &WeightedGraph, k: f64, min_size: usize) -> CliqueSet {
    assert!(k > 0.0, "FH threshold constant must be positive");
    cliques_from(segment(graph, k, min_size, None))
}

/// [`fh_segment`] without the small-component pass, also returning every
/// main-pass decision in processing order.
pub fn fh_segment_traced(graph: &WeightedGraph, k: f64) -> (CliqueSet, Vec<MergeDecision>) {
    let mut trace = Vec::new();
    let groups = segment(graph, k, 1, Some(&mut trace));
    (cliques_from(groups), trace)
}

fn cliques_from(groups: Vec<Vec<u32>>) -> CliqueSet {
    CliqueSet {
        cliques: groups
            .into_iter()
            .enumerate()
            .map(|(id, members)| Clique {
                id,
                members,
                objectness_flag: false,
            })
            .collect(),
    }
}

/// Object flag of a clique: member-size-weighted mean objectness >= 0.5.
pub fn flag_objectness(members: &[u32], set: &SuperVoxelSet) -> bool {
    let (mut num, mut den) = (0.0, 0.0);
    for &m in members {
        let sv = set.get(m).expect("live super-voxel");
        let w = sv.members.len() as f64;
        num += w * sv.mean_objectness;
        den += w;
    }
    den > 0.0 && num / den >= 0.5
}

/// Runs edge weighting, segmentation and flagging on `nodes`.
pub fn propose(set: &SuperVoxelSet, nodes: &[u32], adjacency: &[(u32, u32)], k: f64, min_size: usize) -> CliqueSet {
    let graph = edge_weights(set, nodes, adjacency);
    let mut cliques = fh_segment(&graph, k, min_size);
    for c in &mut cliques.cliques {
        c.objectness_flag = flag_objectness(&c.members, set);
    }
    cliques
}
