//! Query-aware nucleus filtering of enhanced frame or caption sequences.
//!
//! Each candidate row is scored by cosine against the query's EOS
//! embedding, the scores go through a temperature softmax, and rows are
//! taken in descending probability until the running total reaches `p`.
//! The chosen rows keep their probabilities, renormalized to sum to one.

use serde::Serialize;

use crate::error::{NarvidError, Result};
use crate::numerics::{cosine, softmax_temp, Graph, Tensor, Var};

/// How the candidate rows are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Smallest descending-probability prefix with cumulative mass `>= p`.
    Nucleus(f64),
    /// The `k` most probable rows (clamped to `K`). Ablation only.
    TopK(usize),
}

impl FilterMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FilterMode::Nucleus(p) if !(p > 0.0 && p <= 1.0) => {
                Err(NarvidError::Config(format!("nucleus threshold p must lie in (0, 1], got {p}")))
            }
            FilterMode::TopK(0) => Err(NarvidError::Config("top-k filtering needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Filtering outcome for one (query, candidate sequence) pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterSelection {
    pub raw_sims: Vec<f64>,
    pub probs: Vec<f64>,
    /// Selected row indices in the order they were taken.
    pub selected: Vec<usize>,
    /// `probs[selected]` renormalized to sum to one.
    pub weights: Vec<f64>,
}

/// Row indices sorted by descending probability, lower index first on ties.
fn descending_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Indices chosen from a probability vector under `mode`.
pub fn select_indices(probs: &[f64], mode: FilterMode) -> Result<Vec<usize>> {
    mode.validate()?;
    if probs.is_empty() {
        return Err(NarvidError::Shape("cannot filter an empty sequence".into()));
    }
    let order = descending_order(probs);
    let count = match mode {
        FilterMode::TopK(k) => k.min(order.len()),
        FilterMode::Nucleus(p) => {
            let mut total = 0.0;
            let mut n = 0;
            for &i in &order {
                total += probs[i];
                n += 1;
                if total >= p {
                    break;
                }
            }
            n
        }
    };
    Ok(order[..count].to_vec())
}

fn renormalize(probs: &[f64], selected: &[usize]) -> Vec<f64> {
    let total: f64 = selected.iter().map(|&i| probs[i]).sum();
    selected.iter().map(|&i| probs[i] / total).collect()
}

/// Nucleus selection over a probability vector; `raw_sims` is left empty.
pub fn nucleus_select(probs: &[f64], p: f64) -> Result<FilterSelection> {
    let selected = select_indices(probs, FilterMode::Nucleus(p))?;
    let weights = renormalize(probs, &selected);
    Ok(FilterSelection { raw_sims: Vec::new(), probs: probs.to_vec(), selected, weights })
}

/// Cosine of the EOS embedding against every feature row.
pub fn raw_similarities(eos: &[f64], features: &Tensor) -> Result<Vec<f64>> {
    features.row_iter().map(|row| cosine(eos, row)).collect()
}

/// `softmax(cos(eos, f_k) / tau)` over the rows of `features`.
pub fn relevance_scores(eos: &[f64], features: &Tensor, tau: f64) -> Result<Vec<f64>> {
    softmax_temp(&raw_similarities(eos, features)?, tau)
}

/// Scores, selects and reweights the rows of one candidate sequence.
pub fn filter_features(eos: &[f64], features: &Tensor, mode: FilterMode, tau: f64) -> Result<FilterSelection> {
    let raw_sims = raw_similarities(eos, features)?;
    let probs = softmax_temp(&raw_sims, tau)?;
    let selected = select_indices(&probs, mode)?;
    let weights = renormalize(&probs, &selected);
    Ok(FilterSelection { raw_sims, probs, selected, weights })
}

/// Filters the video and narration sequences independently against the
/// same EOS embedding.
pub fn filter_pair(
    eos: &[f64],
    v_check: &Tensor,
    n_check: &Tensor,
    mode: FilterMode,
    tau: f64,
) -> Result<(FilterSelection, FilterSelection)> {
    Ok((filter_features(eos, v_check, mode, tau)?, filter_features(eos, n_check, mode, tau)?))
}

/// Graph handles for a filtered sequence.
#[derive(Clone, Debug)]
pub struct FilteredVars {
    /// Detached record of the decision.
    pub selection: FilterSelection,
    /// Renormalized weights, `[K']`, differentiable through the softmax.
    pub weights: Var,
    /// The selected feature rows, `K' x D`.
    pub rows: Var,
}

/// Filtering inside a graph. The index set is decided on forward values
/// and treated as a constant; gradients reach the weights and rows.
pub fn filter_graph(g: &mut Graph, eos: Var, features: Var, mode: FilterMode, tau: f64) -> Result<FilteredVars> {
    let sims = g.cosine_rows(eos, features)?;
    let probs = g.softmax_rows(sims, tau)?;
    let probs_val = g.value(probs).data().to_vec();
    let selected = select_indices(&probs_val, mode)?;
    let picked = g.gather(probs, &selected)?;
    let weights = g.div_by_sum(picked)?;
    let rows = g.gather_rows(features, &selected)?;
    let selection = FilterSelection {
        raw_sims: g.value(sims).data().to_vec(),
        probs: probs_val,
        selected,
        weights: g.value(weights).data().to_vec(),
    };
    Ok(FilteredVars { selection, weights, rows })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn hand_cases() {
        let s = nucleus_select(&[0.5, 0.3, 0.2], 0.4).unwrap();
        assert_eq!((s.selected, s.weights), (vec![0], vec![1.0]));
        let s = nucleus_select(&[0.25; 4], 0.5).unwrap();
        assert_eq!((s.selected, s.weights), (vec![0, 1], vec![0.5, 0.5]));
        let probs = [0.1, 0.6, 0.3];
        let s = nucleus_select(&probs, 1.0).unwrap();
        assert_eq!(s.selected, vec![1, 2, 0]);
        for (w, want) in s.weights.iter().zip([0.6, 0.3, 0.1]) {
            assert!((w - want).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_is_validated() {
        for p in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(nucleus_select(&[1.0], p), Err(NarvidError::Config(_))), "{p}");
        }
        assert!(matches!(select_indices(&[1.0], FilterMode::TopK(0)), Err(NarvidError::Config(_))));
    }

    #[test]
    fn top_k_clamps_to_length() {
        assert_eq!(select_indices(&[0.2, 0.5, 0.3], FilterMode::TopK(2)).unwrap(), vec![1, 2]);
        assert_eq!(select_indices(&[0.2, 0.8], FilterMode::TopK(5)).unwrap(), vec![1, 0]);
    }

    #[test]
    fn relevance_cases() {
        let same = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        for p in relevance_scores(&[0.3, -1.0], &same, 0.1).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = Tensor::from_rows(&[[0.4, 0.1]]).unwrap();
        assert_eq!(relevance_scores(&[1.0, 0.0], &one, 0.1).unwrap(), vec![1.0]);

        // one aligned row among orthogonal ones
        let k = 16;
        let mut rows = vec![vec![0.0; k + 1]; k];
        rows[0][0] = 1.0;
        for (j, r) in rows.iter_mut().enumerate().skip(1) {
            r[j] = 1.0;
        }
        let mut eos = vec![0.0; k + 1];
        eos[0] = 1.0;
        let probs = relevance_scores(&eos, &Tensor::from_rows(&rows).unwrap(), 0.1).unwrap();
        let e10 = 10f64.exp();
        assert!((probs[0] - e10 / (e10 + (k - 1) as f64)).abs() < 1e-12);
        assert!(probs[0] > 0.999);
    }

    #[test]
    fn zeroed_caption_is_dropped() {
        let eos = [1.0, 0.2, 0.0];
        let n = Tensor::from_rows(&[[1.0, 0.1, 0.0], [0.0, 0.0, 0.0], [0.9, 0.3, 0.1]]).unwrap();
        let v = n.clone();
        let (sv, sn) = filter_pair(&eos, &v, &n, FilterMode::Nucleus(0.4), 0.1).unwrap();
        assert_eq!(sv, sn);
        assert!(!sn.selected.contains(&1));
        assert_eq!(sn.raw_sims[1], 0.0);
    }

    #[test]
    fn graph_and_tensor_paths_agree() {
        let feats = Tensor::from_rows(&[[0.3, 0.1, -0.2], [0.9, 0.5, 0.1], [-0.4, 0.2, 0.8], [0.5, 0.5, 0.5]]).unwrap();
        let eos = [0.7, 0.4, 0.2];
        let direct = filter_features(&eos, &feats, FilterMode::Nucleus(0.6), 0.1).unwrap();
        let mut g = Graph::new();
        let e = g.constant(Tensor::matrix(1, 3, eos.to_vec()).unwrap());
        let f = g.constant(feats);
        let fv = filter_graph(&mut g, e, f, FilterMode::Nucleus(0.6), 0.1).unwrap();
        assert_eq!(fv.selection.selected, direct.selected);
        for (a, b) in fv.selection.weights.iter().zip(&direct.weights) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(g.value(fv.rows).rows(), direct.selected.len());
    }

    fn distribution() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 1..16).prop_map(|v| softmax_temp(&v, 0.1).unwrap())
    }

    proptest! {
        #[test]
        fn selection_invariants(probs in distribution(), p in 0.01f64..=1.0) {
            let s = nucleus_select(&probs, p).unwrap();
            prop_assert!(!s.selected.is_empty());
            let mass: f64 = s.selected.iter().map(|&i| probs[i]).sum();
            // the final pick reaches p; the prefix before it did not
            let last = probs[*s.selected.last().unwrap()];
            prop_assert!(mass >= p || s.selected.len() == probs.len());
            prop_assert!(s.selected.len() == 1 || mass - last < p);
            prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for w in s.selected.windows(2) {
                prop_assert!(probs[w[0]] > probs[w[1]] || (probs[w[0]] == probs[w[1]] && w[0] < w[1]));
            }
        }

        #[test]
        fn selection_is_monotone_in_p(probs in distribution(), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = nucleus_select(&probs, lo).unwrap().selected;
            let large = nucleus_select(&probs, hi).unwrap().selected;
            prop_assert!(small.iter().all(|i| large.contains(i)));
        }

        #[test]
        fn selection_ignores_similarity_shift(sims in prop::collection::vec(-1.0f64..1.0, 1..12), c in -5.0f64..5.0) {
            let shifted: Vec<f64> = sims.iter().map(|s| s + c).collect();
            let a = nucleus_select(&softmax_temp(&sims, 0.1).unwrap(), 0.4).unwrap().selected;
            let b = nucleus_select(&softmax_temp(&shifted, 0.1).unwrap(), 0.4).unwrap().selected;
            prop_assert_eq!(a, b);
        }
    }
}
