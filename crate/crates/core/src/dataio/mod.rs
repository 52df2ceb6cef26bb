//! Episodes, datasets, batching, and the `NRV1` embedding container.

mod container;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NarvidError, Result};
use crate::numerics::Tensor;

pub use container::{decode_container, encode_container, read_container, write_container, MAGIC, VERSION};

/// One retrieval unit: a query, its video frames, and the frame captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    /// `(L+1) x D`: word embeddings, then the EOS embedding as the last row.
    pub query_tokens: Tensor,
    /// `K x D` frame embeddings.
    pub frames: Tensor,
    /// `K x D` caption embeddings, row `k` describing frame `k`.
    pub captions: Tensor,
}

impl Episode {
    pub fn new(id: impl Into<String>, query_tokens: Tensor, frames: Tensor, captions: Tensor) -> Result<Self> {
        let ep = Episode { id: id.into(), query_tokens, frames, captions };
        ep.validate()?;
        Ok(ep)
    }

    /// Checks L >= 1, K >= 1, D >= 2 and consistent shapes.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NarvidError::Validation(format!("episode `{}`: {msg}", self.id)));
        for (name, t) in [("query_tokens", &self.query_tokens), ("frames", &self.frames), ("captions", &self.captions)]
        {
            if t.shape().len() != 2 {
                return bad(format!("{name} must be a matrix, got shape {:?}", t.shape()));
            }
        }
        let d = self.dim();
        if d < 2 {
            return bad(format!("dimension {d} < 2"));
        }
        if self.query_tokens.rows() < 2 {
            return bad("query needs at least one word plus EOS".into());
        }
        if self.frames.rows() == 0 {
            return bad("no frames".into());
        }
        if self.frames.cols() != d || self.captions.cols() != d {
            return bad("query, frame and caption dimensions differ".into());
        }
        if self.captions.rows() != self.frames.rows() {
            return bad(format!("{} captions for {} frames", self.captions.rows(), self.frames.rows()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.query_tokens.cols()
    }

    /// Number of content words L (EOS excluded).
    pub fn num_words(&self) -> usize {
        self.query_tokens.rows() - 1
    }

    /// Number of frames K.
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn eos(&self) -> &[f64] {
        self.query_tokens.row(self.num_words())
    }

    /// The L word rows, EOS excluded.
    pub fn words(&self) -> Tensor {
        let (l, d) = (self.num_words(), self.dim());
        Tensor::from_parts_unchecked(vec![l, d], self.query_tokens.data()[..l * d].to_vec())
    }
}

/// An ordered collection of episodes sharing one embedding dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(dim: usize, episodes: Vec<Episode>) -> Result<Self> {
        if dim < 2 {
            return Err(NarvidError::Validation(format!("dataset dimension {dim} < 2")));
        }
        let mut seen = HashSet::new();
        for ep in &episodes {
            ep.validate()?;
            if ep.dim() != dim {
                return Err(NarvidError::Validation(format!(
                    "episode `{}` has dimension {} in a dimension-{dim} dataset",
                    ep.id,
                    ep.dim()
                )));
            }
            if !seen.insert(ep.id.as_str()) {
                return Err(NarvidError::Validation(format!("duplicate episode id `{}`", ep.id)));
            }
        }
        Ok(Dataset { dim, episodes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.episodes.iter().map(Episode::num_frames).max().unwrap_or(0)
    }

    /// New dataset holding the episodes at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let eps = indices
            .iter()
            .map(|&i| {
                self.episodes
                    .get(i)
                    .cloned()
                    .ok_or_else(|| NarvidError::Usage(format!("episode index {i} out of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.dim, eps)
    }
}

/// Episode indices forming one batch; entry `i` pairs query `i` with
/// candidate `i` as the positive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Partitions `0..n` into `n / batch_size` full batches for one epoch.
///
/// The remainder is dropped. With `shuffle`, the order is a Fisher-Yates
/// permutation drawn from a ChaCha stream keyed by `(seed, epoch)`, using
/// integer arithmetic only.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(NarvidError::Usage("batch size must be at least 1".into()));
    }
    if batch_size > n {
        return Err(NarvidError::Usage(format!("batch size {batch_size} exceeds dataset size {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i as u64) as usize;
            order.swap(i, j);
        }
    }
    Ok(order.chunks_exact(batch_size).map(|c| Batch { indices: c.to_vec() }).collect())
}

/// Batches for epochs `0..epochs` in order.
pub fn batch_iter(
    n: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epochs: u64,
) -> Result<impl Iterator<Item = (u64, Batch)>> {
    // validate eagerly so the iterator itself is infallible
    epoch_batches(n, batch_size, seed, 0, false)?;
    Ok((0..epochs).flat_map(move |e| {
        epoch_batches(n, batch_size, seed, e, shuffle).expect("validated above").into_iter().map(move |b| (e, b))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_episode(id: &str, k: usize) -> Episode {
        let d = 3;
        let q = Tensor::matrix(2, d, vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0]).unwrap();
        let f = Tensor::matrix(k, d, (0..k * d).map(|i| i as f64 * 0.1).collect()).unwrap();
        Episode::new(id, q, f.clone(), f).unwrap()
    }

    #[test]
    fn episode_accessors() {
        let ep = tiny_episode("a", 4);
        assert_eq!(ep.num_words(), 1);
        assert_eq!(ep.num_frames(), 4);
        assert_eq!(ep.eos(), &[0.5, 0.5, 0.0]);
        assert_eq!(ep.words().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn episode_validation() {
        let q1 = Tensor::matrix(1, 3, vec![1.0; 3]).unwrap();
        let f = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        assert!(Episode::new("x", q1, f.clone(), f.clone()).is_err());
        let q = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        let c = Tensor::matrix(3, 3, vec![1.0; 9]).unwrap();
        assert!(matches!(Episode::new("x", q.clone(), f.clone(), c), Err(NarvidError::Validation(_))));
        let narrow = Tensor::matrix(2, 1, vec![1.0; 2]).unwrap();
        assert!(Episode::new("x", narrow.clone(), narrow.clone(), narrow).is_err());
    }

    #[test]
    fn dataset_rejects_duplicates_and_mixed_dims() {
        let a = tiny_episode("a", 2);
        assert!(Dataset::new(3, vec![a.clone(), a.clone()]).is_err());
        assert!(Dataset::new(4, vec![a]).is_err());
    }

    #[test]
    fn sequential_batches() {
        let b = epoch_batches(4, 2, 0, 0, false).unwrap();
        assert_eq!(b, vec![Batch { indices: vec![0, 1] }, Batch { indices: vec![2, 3] }]);
    }

    #[test]
    fn remainder_dropped() {
        let b = epoch_batches(5, 2, 7, 3, true).unwrap();
        assert_eq!(b.len(), 2);
        let used: HashSet<usize> = b.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(used.len(), 4);
    }

    #[test]
    fn shuffle_is_deterministic_and_epoch_dependent() {
        let a = epoch_batches(20, 4, 9, 1, true).unwrap();
        assert_eq!(a, epoch_batches(20, 4, 9, 1, true).unwrap());
        assert_ne!(a, epoch_batches(20, 4, 9, 2, true).unwrap());
        let all: Vec<(u64, Batch)> = batch_iter(20, 4, 9, true, 3).unwrap().collect();
        assert_eq!(all.len(), 15);
        assert_eq!(all[5].1, a[0]);
    }

    #[test]
    fn oversized_batch_is_usage_error() {
        assert!(matches!(epoch_batches(3, 4, 0, 0, false), Err(NarvidError::Usage(_))));
        assert!(batch_iter(3, 4, 0, false, 1).is_err());
    }
}
