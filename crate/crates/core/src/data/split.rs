use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::GroundTruth;
use crate::error::{Error, Result};

/// A labeled pixel; `label` is the 0-based class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sample {
    pub row: usize,
    pub col: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSplit {
    /// Training pixels of each class, row-major.
    pub train: Vec<Vec<Sample>>,
    pub test: Vec<Vec<Sample>>,
    pub seed: u64,
}

impl SampleSplit {
    pub fn train_samples(&self) -> Vec<Sample> {
        self.train.iter().flatten().copied().collect()
    }

    pub fn test_samples(&self) -> Vec<Sample> {
        self.test.iter().flatten().copied().collect()
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.train.iter().map(Vec::len).collect()
    }

    pub fn test_counts(&self) -> Vec<usize> {
        self.test.iter().map(Vec::len).collect()
    }
}

/// `max(1, round(fraction · count))`, rounding halves away from zero.
pub fn train_count(count: usize, fraction: f64) -> usize {
    ((fraction * count as f64).round() as usize).clamp(1, count.max(1))
}

/// Draws `train_count` pixels of every class uniformly without replacement;
/// everything else labeled is test.
pub fn stratified_split(gt: &GroundTruth, fraction: f64, seed: u64) -> Result<SampleSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "training fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut by_class = vec![Vec::new(); gt.num_classes()];
    for s in gt.labeled() {
        by_class[s.label].push(s);
    }
    if let Some(k) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(k + 1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(by_class.len());
    let mut test = Vec::with_capacity(by_class.len());
    for pixels in by_class {
        let m = train_count(pixels.len(), fraction);
        let mut chosen = vec![false; pixels.len()];
        for i in index::sample(&mut rng, pixels.len(), m) {
            chosen[i] = true;
        }
        let (tr, te): (Vec<_>, Vec<_>) = pixels.iter().zip(&chosen).partition(|(_, &c)| c);
        train.push(tr.into_iter().map(|(s, _)| *s).collect());
        test.push(te.into_iter().map(|(s, _)| *s).collect());
    }
    Ok(SampleSplit { train, test, seed })
}
