//! Planted synthetic datasets with known ground truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Episode};
use crate::error::{NarvidError, Result};
use crate::numerics::Tensor;

/// Generator settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub episodes: usize,
    pub frames: usize,
    pub words: usize,
    pub dim: usize,
    pub seed: u64,
    /// Share of the topic in each frame, in [0, 1].
    pub signal: f64,
    /// Fraction of captions replaced by random vectors, in [0, 1].
    pub corrupt: f64,
    /// Fraction of frames drawn from another episode's topic, in [0, 1].
    pub overlap: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec { episodes: 64, frames: 12, words: 6, dim: 32, seed: 0, signal: 0.6, corrupt: 0.25, overlap: 0.25 }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("signal", self.signal), ("corrupt", self.corrupt), ("overlap", self.overlap)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(NarvidError::Usage(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.episodes == 0 || self.frames == 0 || self.words == 0 {
            return Err(NarvidError::Usage("episodes, frames and words must be positive".into()));
        }
        if self.dim < 2 {
            return Err(NarvidError::Usage(format!("dim must be at least 2, got {}", self.dim)));
        }
        Ok(())
    }

    /// Rows per episode affected by a rate, rounded up.
    pub fn count(&self, rate: f64) -> usize {
        // absorb rounding such as 0.7 * 10 = 7.000000000000001
        ((rate * self.frames as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

/// A planted dataset plus the rows each episode had altered.
#[derive(Clone, Debug)]
pub struct Planted {
    pub dataset: Dataset,
    /// Per episode, frame rows drawn from another topic.
    pub distractors: Vec<Vec<usize>>,
    /// Per episode, caption rows replaced by random vectors.
    pub corrupted: Vec<Vec<usize>>,
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Gaussian vector with expected unit norm.
fn noise(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn mix(rng: &mut ChaCha8Rng, topic: &[f64], s: f64) -> Vec<f64> {
    let n = noise(rng, topic.len());
    normalize(topic.iter().zip(n).map(|(t, e)| s * t + (1.0 - s) * e).collect())
}

fn chosen(rng: &mut ChaCha8Rng, k: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..k).collect();
    idx.shuffle(rng);
    let mut out = idx[..count].to_vec();
    out.sort_unstable();
    out
}

pub fn gen_planted(spec: &PlantSpec) -> Result<Dataset> {
    Ok(gen_planted_with_truth(spec)?.dataset)
}

pub fn gen_planted_with_truth(spec: &PlantSpec) -> Result<Planted> {
    spec.validate()?;
    let (n, k, d, s) = (spec.episodes, spec.frames, spec.dim, spec.signal);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topics: Vec<Vec<f64>> = (0..n).map(|_| normalize(noise(&mut rng, d))).collect();
    let mut episodes = Vec::with_capacity(n);
    let mut distractors = Vec::with_capacity(n);
    let mut corrupted = Vec::with_capacity(n);
    for (i, topic) in topics.iter().enumerate() {
        let mut query: Vec<Vec<f64>> = (0..spec.words)
            .map(|_| {
                let e = noise(&mut rng, d);
                normalize(topic.iter().zip(e).map(|(t, x)| t + (1.0 - s) * x).collect())
            })
            .collect();
        let mut eos = vec![0.0; d];
        for w in &query {
            eos.iter_mut().zip(w).for_each(|(e, x)| *e += x);
        }
        query.push(normalize(eos));

        let off = chosen(&mut rng, k, spec.count(spec.overlap));
        let mut frame_topics: Vec<Vec<f64>> = vec![topic.clone(); k];
        for &r in &off {
            frame_topics[r] = if n > 1 {
                let j = (i + rng.random_range(1..n)) % n;
                topics[j].clone()
            } else {
                normalize(noise(&mut rng, d))
            };
        }
        let frames: Vec<Vec<f64>> = frame_topics.iter().map(|t| mix(&mut rng, t, s)).collect();
        let mut captions: Vec<Vec<f64>> = frame_topics.iter().map(|t| mix(&mut rng, t, s)).collect();
        let bad = chosen(&mut rng, k, spec.count(spec.corrupt));
        for &r in &bad {
            captions[r] = normalize(noise(&mut rng, d));
        }

        episodes.push(Episode::new(
            format!("planted-{i:05}"),
            Tensor::from_rows(&query)?,
            Tensor::from_rows(&frames)?,
            Tensor::from_rows(&captions)?,
        )?);
        distractors.push(off);
        corrupted.push(bad);
    }
    Ok(Planted { dataset: Dataset::new(d, episodes)?, distractors, corrupted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::encode_container;
    use crate::inference::{report, zero_shot_matrices, Direction, FusionMode};

    fn zero_shot_r1(spec: &PlantSpec, mode: FusionMode) -> f64 {
        let ds = gen_planted(spec).unwrap();
        report(&zero_shot_matrices(&ds), mode, Direction::T2v).unwrap().r1
    }

    #[test]
    fn validation() {
        assert!(PlantSpec::default().validate().is_ok());
        for bad in [
            PlantSpec { corrupt: 1.5, ..PlantSpec::default() },
            PlantSpec { signal: -0.1, ..PlantSpec::default() },
            PlantSpec { overlap: f64::NAN, ..PlantSpec::default() },
            PlantSpec { episodes: 0, ..PlantSpec::default() },
            PlantSpec { dim: 1, ..PlantSpec::default() },
        ] {
            assert!(matches!(gen_planted(&bad), Err(NarvidError::Usage(_))), "{bad:?}");
        }
    }

    #[test]
    fn shapes_and_unit_rows() {
        let spec = PlantSpec { episodes: 5, frames: 7, words: 3, dim: 16, ..PlantSpec::default() };
        let ds = gen_planted(&spec).unwrap();
        assert_eq!((ds.len(), ds.dim()), (5, 16));
        for ep in ds.episodes() {
            assert_eq!((ep.num_words(), ep.num_frames()), (3, 7));
            for t in [&ep.query_tokens, &ep.frames, &ep.captions] {
                for row in t.row_iter() {
                    assert!((row.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn exact_altered_counts() {
        for (k, rate, want) in [(8, 0.25, 2), (12, 0.25, 3), (10, 0.7, 7), (5, 0.0, 0), (5, 1.0, 5), (7, 0.1, 1)] {
            let spec = PlantSpec { episodes: 4, frames: k, corrupt: rate, overlap: rate, ..PlantSpec::default() };
            let p = gen_planted_with_truth(&spec).unwrap();
            assert!(p.corrupted.iter().chain(&p.distractors).all(|r| r.len() == want), "{k} {rate}");
        }
        // with a clean signal the untouched captions equal their frames exactly
        let spec =
            PlantSpec { episodes: 6, frames: 8, signal: 1.0, corrupt: 0.25, overlap: 0.0, ..PlantSpec::default() };
        let p = gen_planted_with_truth(&spec).unwrap();
        for (ep, bad) in p.dataset.episodes().iter().zip(&p.corrupted) {
            let differing: Vec<usize> = (0..8).filter(|&r| ep.frames.row(r) != ep.captions.row(r)).collect();
            assert_eq!(&differing, bad);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = PlantSpec { episodes: 8, ..PlantSpec::default() };
        let a = encode_container(&gen_planted(&spec).unwrap()).unwrap();
        assert_eq!(a, encode_container(&gen_planted(&spec).unwrap()).unwrap());
        let b = encode_container(&gen_planted(&PlantSpec { seed: 1, ..spec }).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn clean_plant_is_solved_zero_shot() {
        let spec = PlantSpec { signal: 1.0, corrupt: 0.0, overlap: 0.0, ..PlantSpec::default() };
        assert_eq!(zero_shot_r1(&spec, FusionMode::Qv), 100.0);
    }

    #[test]
    fn corruption_lowers_narration_recall() {
        let means: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&rho| {
                (0..5)
                    .map(|seed| {
                        zero_shot_r1(
                            &PlantSpec { seed, corrupt: rho, signal: 0.3, ..PlantSpec::default() },
                            FusionMode::Qn,
                        )
                    })
                    .sum::<f64>()
                    / 5.0
            })
            .collect();
        assert!(means.windows(2).all(|w| w[0] > w[1]), "{means:?}");
    }
}
