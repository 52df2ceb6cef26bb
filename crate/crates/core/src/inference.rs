//! Score fusion, ranking and retrieval metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{NarvidError, Result};
use crate::filtering::FilterMode;
use crate::matching::{similarity_matrices, SimilarityMatrices};
use crate::model::ModelParams;
use crate::numerics::kernels::{cosine_unchecked, mean_std};
use crate::numerics::{Tensor, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Per-matrix z-scores, summed.
    Standardized,
    Sum,
    Qv,
    Qn,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::Standardized, FusionMode::Sum, FusionMode::Qv, FusionMode::Qn];
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Standardized => "standardized",
            FusionMode::Sum => "sum",
            FusionMode::Qv => "qv",
            FusionMode::Qn => "qn",
        })
    }
}

impl FromStr for FusionMode {
    type Err = NarvidError;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| NarvidError::Usage(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Rows are queries.
    T2v,
    /// Rows are candidates; scores the transpose.
    V2t,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::T2v => "t2v",
            Direction::V2t => "v2t",
        })
    }
}

impl FromStr for Direction {
    type Err = NarvidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2v" => Ok(Direction::T2v),
            "v2t" => Ok(Direction::V2t),
            _ => Err(NarvidError::Usage(format!("unknown direction {s:?}"))),
        }
    }
}

/// Matrix-level mean and population std of both score matrices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FusionStats {
    pub mu_qv: f64,
    pub sigma_qv: f64,
    pub mu_qn: f64,
    pub sigma_qn: f64,
}

impl FusionStats {
    pub fn of(qv: &Tensor, qn: &Tensor) -> Self {
        let (mu_qv, sigma_qv) = mean_std(qv.data());
        let (mu_qn, sigma_qn) = mean_std(qn.data());
        FusionStats { mu_qv, sigma_qv, mu_qn, sigma_qn }
    }
}

fn standardize(x: f64, mu: f64, sigma: f64) -> f64 {
    (x - mu) / sigma.max(NORM_EPS)
}

/// Combines the two score matrices under `mode`.
pub fn fuse(qv: &Tensor, qn: &Tensor, mode: FusionMode) -> Result<Tensor> {
    if qv.shape() != qn.shape() {
        return Err(NarvidError::Shape(format!("cannot fuse {:?} with {:?}", qv.shape(), qn.shape())));
    }
    let data = match mode {
        FusionMode::Qv => return Ok(qv.clone()),
        FusionMode::Qn => return Ok(qn.clone()),
        FusionMode::Sum => qv.data().iter().zip(qn.data()).map(|(a, b)| a + b).collect(),
        FusionMode::Standardized => {
            let st = FusionStats::of(qv, qn);
            qv.data()
                .iter()
                .zip(qn.data())
                .map(|(a, b)| standardize(*a, st.mu_qv, st.sigma_qv) + standardize(*b, st.mu_qn, st.sigma_qn))
                .collect()
        }
    };
    Tensor::new(qv.shape().to_vec(), data)
}

/// 1-based rank of each row's ground-truth column; every other column
/// scoring at least as high counts against it.
pub fn ranks(s: &Tensor, ground_truth: Option<&[usize]>) -> Result<Vec<usize>> {
    let (n, m) = (s.rows(), s.cols());
    let gt: Vec<usize> = match ground_truth {
        Some(g) => g.to_vec(),
        None if n == m => (0..n).collect(),
        None => return Err(NarvidError::Shape(format!("{n}x{m} scores need an explicit ground-truth mapping"))),
    };
    if gt.len() != n {
        return Err(NarvidError::Shape(format!("{} ground-truth entries for {n} rows", gt.len())));
    }
    gt.iter()
        .enumerate()
        .map(|(i, &g)| {
            if g >= m {
                return Err(NarvidError::Usage(format!("ground truth {g} for row {i} is out of range {m}")));
            }
            let row = s.row(i);
            Ok(1 + row.iter().enumerate().filter(|&(j, &v)| j != g && v >= row[g]).count())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
    pub mnr: f64,
    pub n: usize,
}

pub fn rank_metrics(s: &Tensor, ground_truth: Option<&[usize]>) -> Result<RankMetrics> {
    let r = ranks(s, ground_truth)?;
    let n = r.len();
    if n == 0 {
        return Err(NarvidError::Shape("no queries to rank".into()));
    }
    let recall = |k: usize| 100.0 * r.iter().filter(|&&x| x <= k).count() as f64 / n as f64;
    let mut sorted = r.clone();
    sorted.sort_unstable();
    let mdr = if n % 2 == 1 { sorted[n / 2] as f64 } else { (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0 };
    let mnr = r.iter().sum::<usize>() as f64 / n as f64;
    Ok(RankMetrics { r1: recall(1), r5: recall(5), r10: recall(10), mdr, mnr, n })
}

/// Retrieval report in its JSON form.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub mode: FusionMode,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
    pub mnr: f64,
    pub n: usize,
}

/// Fuses, orients and ranks a pair of score matrices.
pub fn report(m: &SimilarityMatrices, mode: FusionMode, direction: Direction) -> Result<RetrievalReport> {
    let fused = fuse(&m.qv, &m.qn, mode)?;
    let oriented = match direction {
        Direction::T2v => fused,
        Direction::V2t => fused.transpose(),
    };
    let RankMetrics { r1, r5, r10, mdr, mnr, n } = rank_metrics(&oriented, None)?;
    Ok(RetrievalReport { direction, mode, r1, r5, r10, mdr, mnr, n })
}

fn mean_rows(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for row in t.row_iter() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let k = t.rows() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    out
}

/// Untrained baseline: cosine of each query's EOS embedding with the
/// mean raw frame (and mean raw caption) of every episode.
pub fn zero_shot_matrices(ds: &Dataset) -> SimilarityMatrices {
    let frames: Vec<Vec<f64>> = ds.episodes().iter().map(|e| mean_rows(&e.frames)).collect();
    let captions: Vec<Vec<f64>> = ds.episodes().iter().map(|e| mean_rows(&e.captions)).collect();
    let n = ds.len();
    let mut qv = Vec::with_capacity(n * n);
    let mut qn = Vec::with_capacity(n * n);
    for q in ds.episodes() {
        for j in 0..n {
            qv.push(cosine_unchecked(q.eos(), &frames[j]));
            qn.push(cosine_unchecked(q.eos(), &captions[j]));
        }
    }
    SimilarityMatrices {
        qv: Tensor::matrix(n, n, qv).expect("n x n scores"),
        qn: Tensor::matrix(n, n, qn).expect("n x n scores"),
    }
}

/// Zero-shot reports for every fusion mode.
pub fn zero_shot_eval(ds: &Dataset, direction: Direction) -> Result<Vec<RetrievalReport>> {
    let m = zero_shot_matrices(ds);
    FusionMode::ALL.into_iter().map(|mode| report(&m, mode, direction)).collect()
}

/// Score matrices of a trained model over a whole dataset.
pub fn model_matrices(params: &ModelParams, ds: &Dataset, filter: FilterMode, tau: f64) -> Result<SimilarityMatrices> {
    similarity_matrices(params, ds.episodes(), filter, tau)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn metric_cases() {
        let dominant = m(&[&[0.9, 0.1, 0.2], &[0.0, 0.5, 0.4], &[0.3, 0.3, 0.8]]);
        let r = rank_metrics(&dominant, None).unwrap();
        assert_eq!((r.r1, r.mdr, r.mnr), (100.0, 1.0, 1.0));

        let mut d = vec![1.0; 16];
        for i in 0..4 {
            d[i * 4 + i] = 0.0;
        }
        let r = rank_metrics(&Tensor::matrix(4, 4, d).unwrap(), None).unwrap();
        assert_eq!((r.r1, r.mnr, r.mdr), (0.0, 4.0, 4.0));

        let tie = m(&[&[0.5, 0.5], &[0.0, 1.0]]);
        assert_eq!(ranks(&tie, None).unwrap(), vec![2, 1]);
        assert_eq!(rank_metrics(&tie, None).unwrap().mdr, 1.5);

        assert!(matches!(ranks(&tie, Some(&[0, 2])), Err(NarvidError::Usage(_))));
        assert_eq!(ranks(&m(&[&[0.1, 0.9, 0.3]]), Some(&[2])).unwrap(), vec![2]);
    }

    #[test]
    fn metrics_match_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.random_range(1..20);
            // coarse grid so ties occur
            let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let s = Tensor::matrix(n, n, data).unwrap();
            let r = rank_metrics(&s, None).unwrap();
            let rows: Vec<Vec<f64>> = s.row_iter().map(<[f64]>::to_vec).collect();
            assert_eq!((r.r1, r.r5, r.r10, r.mdr, r.mnr), narvid_oracle::metrics(&rows));
        }
    }

    #[test]
    fn fusion_cases() {
        let qv = m(&[&[0.3, 0.1], &[0.2, 0.7]]);
        let qn = qv.map(|v| 2.5 * v - 1.0).unwrap();
        let fused = fuse(&qv, &qn, FusionMode::Standardized).unwrap();
        let single = fuse(&qv, &qv, FusionMode::Standardized).unwrap();
        for (a, b) in fused.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = Tensor::matrix(2, 2, vec![0.4; 4]).unwrap();
        assert!(fuse(&flat, &flat, FusionMode::Standardized).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(fuse(&qv, &qn, FusionMode::Sum).unwrap().get(1, 1), 0.7 + qn.get(1, 1));
        assert_eq!(fuse(&qv, &qn, FusionMode::Qn).unwrap(), qn);
        assert!(fuse(&qv, &Tensor::zeros(vec![3, 2]), FusionMode::Sum).is_err());

        let (a, b) = (m(&[&[0.1, 0.5, 0.2], &[0.9, -0.3, 0.0]]), m(&[&[0.4, 0.4, 0.1], &[0.2, 0.6, 0.3]]));
        let want = narvid_oracle::standardized_fusion(
            &a.row_iter().map(<[f64]>::to_vec).collect::<Vec<_>>(),
            &b.row_iter().map(<[f64]>::to_vec).collect::<Vec<_>>(),
        );
        let got = fuse(&a, &b, FusionMode::Standardized).unwrap();
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((got.get(i, j) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_episode_is_perfect() {
        let ep = crate::dataio::Episode::new("a", m(&[&[1.0, 0.0], &[0.0, 1.0]]), m(&[&[0.3, 0.2]]), m(&[&[0.2, 0.3]]))
            .unwrap();
        let ds = Dataset::new(2, vec![ep]).unwrap();
        for r in zero_shot_eval(&ds, Direction::T2v).unwrap() {
            assert_eq!((r.r1, r.r5, r.r10), (100.0, 100.0, 100.0));
        }
    }

    #[test]
    fn names_round_trip() {
        for mode in FusionMode::ALL {
            assert_eq!(mode.to_string().parse::<FusionMode>().unwrap(), mode);
            assert_eq!(serde_json::to_string(&mode).unwrap(), format!("\"{mode}\""));
        }
        assert_eq!("v2t".parse::<Direction>().unwrap(), Direction::V2t);
        assert!("x".parse::<Direction>().is_err());
    }

    fn affine() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64)> {
        (prop::collection::vec(-1.0f64..1.0, 25), prop::collection::vec(-1.0f64..1.0, 25), 0.1f64..10.0, -5.0f64..5.0)
    }

    fn argmax(row: &[f64]) -> usize {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }

    proptest! {
        #[test]
        fn fused_argmax_survives_affine_maps((a, b, scale, shift) in affine()) {
            let qv = Tensor::matrix(5, 5, a).unwrap();
            let qn = Tensor::matrix(5, 5, b).unwrap();
            let moved = qn.map(|v| scale * v + shift).unwrap();
            let f1 = fuse(&qv, &qn, FusionMode::Standardized).unwrap();
            let f2 = fuse(&qv, &moved, FusionMode::Standardized).unwrap();
            for i in 0..5 {
                let (r1, r2) = (f1.row(i), f2.row(i));
                let top = argmax(r1);
                // allow a swap only if the top two are within rounding
                let near = r1.iter().enumerate().any(|(j, &v)| j != top && (v - r1[top]).abs() < 1e-9);
                prop_assert!(argmax(r2) == top || near);
            }
        }

        #[test]
        fn recall_is_monotone(data in prop::collection::vec(-1.0f64..1.0, 144)) {
            let r = rank_metrics(&Tensor::matrix(12, 12, data).unwrap(), None).unwrap();
            prop_assert!(r.r1 <= r.r5 && r.r5 <= r.r10);
            prop_assert!(r.mdr >= 1.0 && r.mnr >= 1.0);
        }

        #[test]
        fn permutation_ranks_are_exact(perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle()) {
            // row i scores column j by its position in a fixed order
            let data: Vec<f64> = (0..8).flat_map(|_| perm.iter().map(|&p| p as f64)).collect();
            let s = Tensor::matrix(8, 8, data).unwrap();
            let r = ranks(&s, None).unwrap();
            for i in 0..8 {
                prop_assert_eq!(r[i], 8 - perm[i]);
            }
        }
    }
}
