use super::*;
use crate::supervoxel::ClusterParams;
use crate::voxel_map::{MapParams, VoxelKey, VoxelMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn state(mask: &[bool], unary: &[f64]) -> MeanFieldState {
    MeanFieldState::new(mask.to_vec(), unary.to_vec()).unwrap()
}

fn zero_weights() -> CrfWeights {
    CrfWeights {
        unary: 0.0,
        pair: 0.0,
        obj: 0.0,
        cons: 0.0,
        rel: 0.0,
        ..CrfWeights::default()
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = v.to_vec();
    softmax_in_place(&mut r);
    r
}

/// Random instance: up to `max_nodes` nodes, 3 labels, random unaries,
/// edges, cliques, flags, weights and co-occurrence.
fn random_instance(rng: &mut ChaCha8Rng, max_nodes: usize) -> (MeanFieldState, CrfWeights, CooccurrenceMatrix) {
    let n = rng.gen_range(2..=max_nodes);
    let l = 3;
    let unary: Vec<f64> = (0..n * l).map(|_| rng.gen_range(0.0..3.0)).collect();
    let mut s = state(&[true, true, false], &unary);
    let mut edges = Vec::new();
    for i in 0..n as u32 {
        for j in i + 1..n as u32 {
            if rng.gen_bool(0.5) {
                edges.push((i, j, rng.gen_range(0.05..1.0)));
            }
        }
    }
    s.set_pairwise(&edges);
    let groups = rng.gen_range(1..=n.min(3));
    let mut members = vec![Vec::new(); groups];
    for i in 0..n as u32 {
        members[if (i as usize) < groups {
            i as usize
        } else {
            rng.gen_range(0..groups)
        }]
        .push(i);
    }
    let cliques = members
        .into_iter()
        .map(|m| CrfClique {
            members: m,
            object: rng.gen_bool(0.5),
        })
        .collect();
    let adjacency: Vec<(u32, u32)> = edges.iter().map(|e| (e.0, e.1)).collect();
    s.set_cliques(cliques, &adjacency).unwrap();
    let pairs: Vec<(Label, Label)> = (0..20).map(|_| (rng.gen_range(0..3), rng.gen_range(0..3))).collect();
    let lambda = learn_cooccurrence(&pairs, l);
    let w = CrfWeights {
        unary: 1.0,
        pair: rng.gen_range(0.0..1.0),
        obj: rng.gen_range(0.0..1.0),
        cons: rng.gen_range(0.0..1.0),
        rel: rng.gen_range(0.0..0.5),
        ..CrfWeights::default()
    };
    (s, w, lambda)
}

#[test]
fn kernel_identity_is_one() {
    assert_eq!(gaussian_kernel(0.0, 0.0, 0.2, 0.5), 1.0);
}

#[test]
fn kernel_at_sqrt2_theta_is_exp_minus_one() {
    let ta = 0.2;
    let k = gaussian_kernel(2.0 * ta * ta, 0.0, ta, 0.5);
    assert_eq!(k, (-1.0f64).exp());
    assert!((k - 0.36788).abs() < 5e-6);
}

#[test]
fn kernel_antipodal_normals() {
    let k = gaussian_kernel(0.0, 4.0, 0.2, 1.0);
    assert_eq!(k, (-2.0f64).exp());
    assert!((k - 0.13534).abs() < 5e-6);
}

#[test]
fn kernel_from_super_voxels() {
    let mut map = VoxelMap::new(MapParams::default());
    let a = map.insert(VoxelKey::new(0, 0, 0));
    let b = map.insert(VoxelKey::new(25, 0, 0));
    for id in [a, b] {
        let v = map.voxel_mut(id);
        v.weight = 1;
        v.tsdf = 0.0;
        v.normal = Some([0.0, 0.0, 1.0]);
    }
    let mut set = SuperVoxelSet::new(ClusterParams::default(), 2);
    set.seed(&mut map, &crate::voxel_map::ActiveSet { ids: vec![a, b] });
    let w = CrfWeights::default();
    let (sa, sb) = (set.get(0).unwrap(), set.get(1).unwrap());
    let d2 = (sa.centroid_pos - sb.centroid_pos).norm_squared();
    let expected = (-d2 / (2.0 * 0.2 * 0.2)).exp();
    assert!((pairwise_kernel(sa, sb, &w) - expected).abs() < 1e-15);
    assert_eq!(pairwise_kernel(sa, sa, &w), 1.0);
}

#[test]
fn blend_tau_one_ignores_previous() {
    let hist = [0.79, 0.19];
    let mut prev = BeliefMap::default();
    prev.insert(7, vec![0.2, 0.8]);
    let with = unary_from_histograms(&[&hist], &[7], Some(&prev), 1.0);
    let without = unary_from_histograms(&[&hist], &[7], None, 1.0);
    assert_eq!(with, without);
}

#[test]
fn blend_tau_zero_is_previous() {
    let mut prev = BeliefMap::default();
    prev.insert(3, vec![0.2, 0.8]);
    let u = unary_from_histograms(&[&[5.0, 0.0]], &[3], Some(&prev), 0.0);
    assert_eq!(u, vec![-(0.2f64.ln()), -(0.8f64.ln())]);
}

#[test]
fn blend_half_gives_log_two() {
    let mut prev = BeliefMap::default();
    prev.insert(0, vec![0.2, 0.8]);
    let u = unary_from_histograms(&[&[0.79, 0.19]], &[0], Some(&prev), 0.5);
    for x in u {
        assert!((x - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn empty_histogram_is_uniform() {
    assert_eq!(predicted_distribution(&[0.0, 0.0, 0.0, 0.0]), vec![0.25; 4]);
}

#[test]
fn uniform_clique_has_zero_consistency_cost() {
    let mut s = state(&[true, false], &[0.0; 6]);
    s.set_cliques(
        vec![CrfClique {
            members: vec![0, 1, 2],
            object: true,
        }],
        &[],
    )
    .unwrap();
    let e = term_energies(&[1, 1, 1], &s, &CrfWeights::default(), &CooccurrenceMatrix::uniform(2));
    assert_eq!(e.cons, 0.0);
}

#[test]
fn half_half_clique_entropy_is_ln2() {
    let mut s = state(&[true, false], &[0.0; 4]);
    s.set_cliques(
        vec![CrfClique {
            members: vec![0, 1],
            object: true,
        }],
        &[],
    )
    .unwrap();
    let e = term_energies(&[0, 1], &s, &CrfWeights::default(), &CooccurrenceMatrix::uniform(2));
    assert_eq!(e.cons, std::f64::consts::LN_2);
}

#[test]
fn object_clique_labeled_wall_has_unit_penalty() {
    // Label 0 is "wall", label 1 is "chair".
    let mut s = state(&[false, true], &[0.0; 6]);
    s.set_cliques(
        vec![CrfClique {
            members: vec![0, 1, 2],
            object: true,
        }],
        &[],
    )
    .unwrap();
    let lambda = CooccurrenceMatrix::uniform(2);
    assert_eq!(term_energies(&[0, 0, 0], &s, &CrfWeights::default(), &lambda).obj, 1.0);
    assert_eq!(term_energies(&[1, 1, 1], &s, &CrfWeights::default(), &lambda).obj, 0.0);
}

#[test]
fn weighted_total_matches_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (s, w, lambda) = random_instance(&mut rng, 6);
    let lab: Vec<Label> = (0..s.len()).map(|i| (i % 3) as Label).collect();
    let e = term_energies(&lab, &s, &w, &lambda);
    let t = w.unary * e.unary + w.pair * e.pair + w.obj * e.obj + w.cons * e.cons + w.rel * e.rel;
    assert_eq!(e.total, t);
}

#[test]
fn unary_only_step_is_softmax() {
    let u = [0.3, 1.2, 2.0, 0.1, 0.1, 5.0];
    let mut s = state(&[true, true, false], &u);
    s.set_pairwise(&[(0, 1, 0.9)]);
    s.set_cliques(
        vec![CrfClique {
            members: vec![0, 1],
            object: false,
        }],
        &[],
    )
    .unwrap();
    let w = CrfWeights {
        unary: 1.0,
        ..zero_weights()
    };
    mean_field_step(&mut s, &w, &CooccurrenceMatrix::uniform(3));
    let neg: Vec<f64> = u.iter().map(|x| -x).collect();
    assert_eq!(s.q_row(0), softmax(&neg[0..3]).as_slice());
    assert_eq!(s.q_row(1), softmax(&neg[3..6]).as_slice());
}

#[test]
fn symmetric_pair_stays_symmetric() {
    let mut s = state(&[true, false], &[0.4, 0.9, 0.4, 0.9]);
    s.set_pairwise(&[(0, 1, 0.7)]);
    s.set_cliques(
        vec![CrfClique {
            members: vec![0, 1],
            object: true,
        }],
        &[],
    )
    .unwrap();
    let w = CrfWeights::default();
    let lambda = CooccurrenceMatrix::uniform(2);
    for _ in 0..10 {
        mean_field_step(&mut s, &w, &lambda);
        assert_eq!(s.q_row(0), s.q_row(1));
    }
}

#[test]
fn mean_field_mostly_matches_exhaustive_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut agree = 0;
    for _ in 0..100 {
        let (mut s, w, lambda) = random_instance(&mut rng, 5);
        let exact = brute_force_map(&s, &w, &lambda).unwrap();
        if infer(&mut s, &w, &lambda, 20) == exact {
            agree += 1;
        }
    }
    // 81 of 100 with this generator; exact max-marginals reach 76.
    assert!(agree >= 80, "only {agree} of 100 agree");
}

#[test]
fn one_iteration_is_step_then_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (s, w, lambda) = random_instance(&mut rng, 6);
    let mut a = s.clone();
    let mut b = s;
    let la = infer(&mut a, &w, &lambda, 1);
    mean_field_step(&mut b, &w, &lambda);
    assert_eq!(la, labeling(&b));
    assert_eq!(a.q(), b.q());
}

#[test]
fn pure_unary_takes_argmin() {
    let u = [2.0, 0.5, 1.0, 0.0, 3.0, 3.0, 1.0, 1.0, 1.0];
    let mut s = state(&[true, true, false], &u);
    let w = CrfWeights {
        unary: 1.0,
        ..zero_weights()
    };
    let lab = infer(&mut s, &w, &CooccurrenceMatrix::uniform(3), 3);
    assert_eq!(lab, vec![1, 0, 0]);
}

#[test]
fn constant_shift_leaves_labeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (s, w, lambda) = random_instance(&mut rng, 6);
        let mut shifted_u = s.unary().to_vec();
        for (i, row) in shifted_u.chunks_mut(3).enumerate() {
            row.iter_mut().for_each(|x| *x += 0.37 * i as f64 + 1.0);
        }
        let mut t = MeanFieldState::new(s.object_mask().to_vec(), shifted_u).unwrap();
        let edges: Vec<(u32, u32, f64)> = (0..s.len())
            .flat_map(|i| {
                s.neighbors(i)
                    .iter()
                    .filter(move |e| e.0 as usize > i)
                    .map(move |e| (i as u32, e.0, e.1))
            })
            .collect();
        t.set_pairwise(&edges);
        let adjacency: Vec<(u32, u32)> = edges.iter().map(|e| (e.0, e.1)).collect();
        t.set_cliques(s.cliques().to_vec(), &adjacency).unwrap();
        let mut s = s;
        assert_eq!(infer(&mut s, &w, &lambda, 5), infer(&mut t, &w, &lambda, 5));
    }
}

#[test]
fn brute_force_single_node() {
    let s = state(&[true, true, false], &[1.0, 0.2, 0.5]);
    let lab = brute_force_map(&s, &CrfWeights::default(), &CooccurrenceMatrix::uniform(3)).unwrap();
    assert_eq!(lab, vec![1]);
}

#[test]
fn brute_force_strong_potts_picks_lower_sum() {
    // Node 0 prefers 0 by 1.0, node 1 prefers 1 by 0.4: summed unary favors 0.
    let mut s = state(&[true, false], &[0.0, 1.0, 0.4, 0.0]);
    s.set_pairwise(&[(0, 1, 1.0)]);
    let w = CrfWeights {
        unary: 1.0,
        pair: 10.0,
        ..zero_weights()
    };
    // Labelings: 00 -> 0.4, 01 -> 10, 10 -> 11.4, 11 -> 1.0.
    let lab = brute_force_map(&s, &w, &CooccurrenceMatrix::uniform(2)).unwrap();
    assert_eq!(lab, vec![0, 0]);
}

#[test]
fn brute_force_beats_random_labelings() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (s, w, lambda) = random_instance(&mut rng, 6);
    let best = brute_force_map(&s, &w, &lambda).unwrap();
    let e_best = term_energies(&best, &s, &w, &lambda).total;
    for _ in 0..1000 {
        let lab: Vec<Label> = (0..s.len()).map(|_| rng.gen_range(0..3)).collect();
        assert!(e_best <= term_energies(&lab, &s, &w, &lambda).total);
    }
}

#[test]
fn brute_force_ties_are_lexicographic() {
    let s = state(&[true, false], &[0.0; 4]);
    let w = CrfWeights::default();
    assert_eq!(
        brute_force_map(&s, &w, &CooccurrenceMatrix::uniform(2)).unwrap(),
        vec![0, 0]
    );
}

#[test]
fn brute_force_rejects_large_instances() {
    let s = state(&[true, false, false, false], &[0.0; 4 * 11]);
    let r = brute_force_map(&s, &CrfWeights::default(), &CooccurrenceMatrix::uniform(4));
    assert!(matches!(r, Err(Error::TooLarge(_))));
}

#[test]
fn no_training_data_is_uniform() {
    let m = learn_cooccurrence(&[], 4);
    assert_eq!(m, CooccurrenceMatrix::uniform(4));
}

#[test]
fn learned_cooccurrence_values() {
    let (chair, floor, ceiling) = (0, 1, 2);
    let pairs = vec![(chair, floor); 99];
    let m = learn_cooccurrence(&pairs, 3);
    assert_eq!(m.get(chair, floor), 1.0);
    assert_eq!(m.get(chair, ceiling), 0.01);
    assert_eq!(m.get(floor, chair), m.get(chair, floor));
    assert_eq!(m.get(ceiling, ceiling), 1.0);
}

#[test]
fn cooccurrence_text_round_trip() {
    let labels = crate::labels::LabelSpace::new(&["wall", "floor", "chair"], &["chair"]).unwrap();
    let m = learn_cooccurrence(&[(0, 1), (0, 1), (1, 2)], 3);
    let back = CooccurrenceMatrix::parse(&m.to_text(&labels), &labels).unwrap();
    assert_eq!(back, m);
    // Header order differs from the label space order.
    let text = "chair wall floor\n1 0.5 0.25\n0.5 1 1\n0.25 1 1\n";
    let p = CooccurrenceMatrix::parse(text, &labels).unwrap();
    assert_eq!(p.get(2, 0), 0.5);
    assert_eq!(p.get(2, 1), 0.25);
    assert!(CooccurrenceMatrix::parse("chair wall\n1 1\n1 1\n", &labels).is_err());
}

#[test]
fn dense_baseline_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (s, w, lambda) = random_instance(&mut rng, 6);
        let w = w.dense_only();
        let edges: Vec<(u32, u32, f64)> = (0..s.len())
            .flat_map(|i| {
                s.neighbors(i)
                    .iter()
                    .filter(move |e| e.0 as usize > i)
                    .map(move |e| (i as u32, e.0, e.1))
            })
            .collect();
        let (lab, q) = dense_crf(s.unary(), 3, &edges, w.unary, w.pair, 4);
        let mut s = s;
        assert_eq!(infer(&mut s, &w, &lambda, 4), lab);
        assert_eq!(s.q(), q.as_slice());
    }
}

#[test]
fn separable_relation_runs_and_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut s, mut w, lambda) = random_instance(&mut rng, 6);
    w.relation = RelationForm::Separable;
    w.rel = 0.5;
    infer(&mut s, &w, &lambda, 5);
    for i in 0..s.len() {
        assert!((s.q_row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn frequencies_track_q() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (mut s, w, lambda) = random_instance(&mut rng, 6);
    infer(&mut s, &w, &lambda, 3);
    for (r, c) in s.cliques().iter().enumerate() {
        for l in 0..3 {
            let mean = c.members.iter().map(|&m| s.q_row(m as usize)[l]).sum::<f64>() / c.members.len() as f64;
            assert!((s.frequencies(r)[l] - mean).abs() < 1e-9);
        }
    }
}

#[test]
fn clique_validation() {
    let mut s = state(&[true, false], &[0.0; 4]);
    let dup = vec![
        CrfClique {
            members: vec![0],
            object: true,
        },
        CrfClique {
            members: vec![0, 1],
            object: true,
        },
    ];
    assert!(s.set_cliques(dup, &[]).is_err());
    assert!(s
        .set_cliques(
            vec![CrfClique {
                members: vec![],
                object: true
            }],
            &[]
        )
        .is_err());
    assert!(s
        .set_cliques(
            vec![CrfClique {
                members: vec![5],
                object: true
            }],
            &[]
        )
        .is_err());
}

#[test]
fn clique_adjacency_from_node_pairs() {
    let mut s = state(&[true, false], &[0.0; 8]);
    let cliques = vec![
        CrfClique {
            members: vec![0, 1],
            object: true,
        },
        CrfClique {
            members: vec![2],
            object: false,
        },
        CrfClique {
            members: vec![3],
            object: false,
        },
    ];
    s.set_cliques(cliques, &[(0, 1), (1, 2), (2, 1), (2, 3)]).unwrap();
    assert_eq!(s.clique_adjacency(0), &[1]);
    assert_eq!(s.clique_adjacency(1), &[0, 2]);
    assert_eq!(s.clique_adjacency(2), &[1]);
}

#[test]
fn pairwise_edges_include_radius_neighbors() {
    let mut map = VoxelMap::new(MapParams::default());
    // Three isolated voxels: 0 and 1 are 0.12 m apart, 2 is far away.
    let ids: Vec<_> = [(0, 0, 0), (15, 0, 0), (100, 0, 0)]
        .iter()
        .map(|&(i, j, k)| {
            let id = map.insert(VoxelKey::new(i, j, k));
            map.voxel_mut(id).weight = 1;
            id
        })
        .collect();
    let mut set = SuperVoxelSet::new(ClusterParams::default(), 2);
    set.seed(&mut map, &crate::voxel_map::ActiveSet { ids });
    let nodes = vec![0, 1, 2];
    let e = pairwise_edges(&set, &nodes, &[], 0.16, &CrfWeights::default());
    assert_eq!(e.len(), 1);
    assert_eq!((e[0].0, e[0].1), (0, 1));
    let e = pairwise_edges(&set, &nodes, &[(2, 0)], 0.16, &CrfWeights::default());
    assert_eq!(e.iter().map(|x| (x.0, x.1)).collect::<Vec<_>>(), vec![(0, 1), (0, 2)]);
}

proptest! {
    #[test]
    fn rows_stay_normalized(seed in 0u64..5000, iters in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut s, mut w, lambda) = random_instance(&mut rng, 6);
        w.pair = rng.gen_range(0.0..50.0);
        w.cons = rng.gen_range(0.0..50.0);
        w.rel = rng.gen_range(0.0..5.0);
        for _ in 0..iters {
            mean_field_step(&mut s, &w, &lambda);
            for i in 0..s.len() {
                let row = s.q_row(i);
                prop_assert!(row.iter().all(|x| x.is_finite() && *x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
