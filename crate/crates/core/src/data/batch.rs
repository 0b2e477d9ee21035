use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{DataError, EncodedDataset, Result, Split};
use crate::autodiff::Tensor;

/// Feature rows with their labels and sensitive attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    /// Dataset row of each batch row.
    pub rows: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y_column(&self) -> Tensor {
        Tensor::column(self.y.clone())
    }

    pub fn a_column(&self) -> Tensor {
        Tensor::column(self.a.clone())
    }
}

/// Draws batches with the same number of rows from each attribute group.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    groups: [Vec<usize>; 2],
}

impl BatchSampler {
    pub fn new(ds: &EncodedDataset, split: Split) -> Result<Self> {
        Self::from_rows(ds, &ds.indices(split))
    }

    pub fn from_rows(ds: &EncodedDataset, rows: &[usize]) -> Result<Self> {
        let mut groups = [vec![], vec![]];
        for &i in rows {
            groups[(ds.a[i] > 0.5) as usize].push(i);
        }
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(DataError::EmptyGroup(g as u8));
            }
        }
        Ok(Self { groups })
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    /// Dataset rows of one batch: `per_group` from each group, without
    /// replacement when the group is large enough, then shuffled together.
    pub fn sample_rows<R: Rng + ?Sized>(&self, per_group: usize, rng: &mut R) -> Vec<usize> {
        let mut rows = Vec::with_capacity(2 * per_group);
        for g in &self.groups {
            if g.len() >= per_group {
                rows.extend(index::sample(rng, g.len(), per_group).into_iter().map(|k| g[k]));
            } else {
                rows.extend((0..per_group).map(|_| g[rng.random_range(0..g.len())]));
            }
        }
        rows.shuffle(rng);
        rows
    }

    pub fn sample<R: Rng + ?Sized>(&self, ds: &EncodedDataset, per_group: usize, rng: &mut R) -> LabeledBatch {
        ds.rows(&self.sample_rows(per_group, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ds() -> EncodedDataset {
        synth_generate(&SynthSpec { n: 3000, correlation: 0.4, ..SynthSpec::default() }, 5).unwrap()
    }

    #[test]
    fn balanced_counts() {
        let ds = ds();
        let s = BatchSampler::new(&ds, Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for per in [1, 17, 500] {
            let b = s.sample(&ds, per, &mut rng);
            assert_eq!(b.len(), 2 * per);
            assert_eq!(b.a.iter().filter(|&&a| a > 0.5).count(), per);
            assert!(b.rows.iter().all(|&r| ds.split[r] == Split::Train));
        }
    }

    #[test]
    fn deterministic_given_rng() {
        let ds = ds();
        let s = BatchSampler::new(&ds, Split::Train).unwrap();
        let draw = |seed| s.sample_rows(50, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn small_group_is_sampled_with_replacement() {
        let mut ds = ds();
        let train = ds.indices(Split::Train);
        for &i in &train {
            ds.a[i] = 0.0;
        }
        ds.a[train[0]] = 1.0;
        let s = BatchSampler::new(&ds, Split::Train).unwrap();
        let b = s.sample_rows(4, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.iter().filter(|&&r| r == train[0]).count(), 4);
    }

    #[test]
    fn empty_group_is_an_error() {
        let mut ds = ds();
        ds.a.iter_mut().for_each(|a| *a = 0.0);
        assert!(matches!(BatchSampler::new(&ds, Split::Train), Err(DataError::EmptyGroup(1))));
    }

    #[test]
    fn inclusion_is_uniform_within_groups() {
        let ds = ds();
        let s = BatchSampler::new(&ds, Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hits = vec![0usize; ds.len()];
        let (draws, per) = (400, 100);
        for _ in 0..draws {
            for r in s.sample_rows(per, &mut rng) {
                hits[r] += 1;
            }
        }
        for g in 0..2 {
            let members = s.group(g);
            let expected = (draws * per) as f64 / members.len() as f64;
            let chi2: f64 = members.iter().map(|&r| (hits[r] as f64 - expected).powi(2) / expected).sum();
            let dof = (members.len() - 1) as f64;
            // 5 standard deviations of a chi-square with `dof` degrees of freedom
            assert!(chi2 < dof + 5.0 * (2.0 * dof).sqrt(), "group {g}: chi2 {chi2} dof {dof}");
        }
    }
}
