use super::{CooccurrenceMatrix, CrfWeights, MeanFieldState, RelationForm, LOG_EPS};
use crate::error::{Error, Result};
use crate::labels::Label;

/// Largest number of labelings [`brute_force_map`] will enumerate.
pub const MAX_ENUMERATION: u64 = 1_000_000;

/// Unweighted term energies of one hard labeling plus their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermEnergies {
    pub unary: f64,
    pub pair: f64,
    pub obj: f64,
    pub cons: f64,
    pub rel: f64,
    pub total: f64,
}

fn hard_frequencies(state: &MeanFieldState, labeling: &[Label]) -> Vec<Vec<f64>> {
    let l = state.num_labels();
    state
        .cliques()
        .iter()
        .map(|c| {
            let mut f = vec![0.0; l];
            for &m in &c.members {
                f[labeling[m as usize] as usize] += 1.0;
            }
            let n = c.members.len() as f64;
            f.iter_mut().for_each(|x| *x /= n);
            f
        })
        .collect()
}

pub fn term_energies(
    labeling: &[Label],
    state: &MeanFieldState,
    w: &CrfWeights,
    lambda: &CooccurrenceMatrix,
) -> TermEnergies {
    assert_eq!(labeling.len(), state.len(), "labeling must cover every node");
    let mut e = TermEnergies::default();
    for (i, &x) in labeling.iter().enumerate() {
        e.unary += state.unary_row(i)[x as usize];
        for &(j, k) in state.neighbors(i) {
            if (j as usize) > i && labeling[j as usize] != x {
                e.pair += k;
            }
        }
    }
    let freqs = hard_frequencies(state, labeling);
    let mask = state.object_mask();
    for (r, c) in state.cliques().iter().enumerate() {
        let off = c
            .members
            .iter()
            .filter(|&&m| mask[labeling[m as usize] as usize] != c.object)
            .count();
        e.obj += off as f64 / c.members.len() as f64;
        e.cons -= freqs[r].iter().filter(|&&f| f > 0.0).map(|f| f * f.ln()).sum::<f64>();
        for &q in state.clique_adjacency(r) {
            let q = q as usize;
            if q <= r {
                continue;
            }
            e.rel += relation_cost(&freqs[r], &freqs[q], lambda, w.relation);
        }
    }
    e.total = w.unary * e.unary + w.pair * e.pair + w.obj * e.obj + w.cons * e.cons + w.rel * e.rel;
    e
}

fn relation_cost(fr: &[f64], fq: &[f64], lambda: &CooccurrenceMatrix, form: RelationForm) -> f64 {
    let mut s = 0.0;
    for (a, &x) in fr.iter().enumerate() {
        for (b, &y) in fq.iter().enumerate() {
            s -= match form {
                RelationForm::Coupled => x * y * lambda.ln(a as Label, b as Label),
                RelationForm::Separable => (x + LOG_EPS).ln() + (y + LOG_EPS).ln() + lambda.ln(a as Label, b as Label),
            };
        }
    }
    s
}

/// Exhaustive minimum of the weighted energy. Ties go to the
/// lexicographically smallest labeling.
pub fn brute_force_map(state: &MeanFieldState, w: &CrfWeights, lambda: &CooccurrenceMatrix) -> Result<Vec<Label>> {
    let (n, l) = (state.len(), state.num_labels());
    let count = (l as u64).checked_pow(n as u32).filter(|&c| c <= MAX_ENUMERATION);
    let Some(count) = count else {
        return Err(Error::TooLarge(format!("{l}^{n} labelings exceed {MAX_ENUMERATION}")));
    };
    let mut current = vec![0 as Label; n];
    let mut best = current.clone();
    let mut best_e = f64::INFINITY;
    for _ in 0..count {
        let e = term_energies(&current, state, w, lambda).total;
        if e < best_e {
            best_e = e;
            best.copy_from_slice(&current);
        }
        // Odometer increment, last node fastest: lexicographic order.
        for x in current.iter_mut().rev() {
            *x += 1;
            if (*x as usize) < l {
                break;
            }
            *x = 0;
        }
    }
    Ok(best)
}
