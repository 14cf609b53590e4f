use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};

/// Uniform negatives outside each user's training items, by rejection.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    num_items: usize,
    owned: Vec<HashSet<usize>>,
}

impl NegativeSampler {
    pub fn new(train: &[Vec<usize>], num_items: usize) -> Self {
        Self {
            num_items,
            owned: train.iter().map(|s| s.iter().copied().collect()).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, user: usize, rng: &mut R) -> Result<usize> {
        let owned = &self.owned[user];
        if owned.len() >= self.num_items {
            return Err(Error::Precondition(format!(
                "user {user} has interacted with every item; no negative exists"
            )));
        }
        loop {
            let j = rng.random_range(0..self.num_items);
            if !owned.contains(&j) {
                return Ok(j);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_items_forces_the_other() {
        let s = NegativeSampler::new(&[vec![0]], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| s.sample(0, &mut rng).unwrap() == 1));
        assert!(NegativeSampler::new(&[vec![0, 1]], 2)
            .sample(0, &mut rng)
            .is_err());
    }

    #[test]
    fn uniform_over_the_rest() {
        let s = NegativeSampler::new(&[vec![2, 7]], 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            counts[s.sample(0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[2] + counts[7], 0);
        for (i, &c) in counts.iter().enumerate().filter(|&(i, _)| i != 2 && i != 7) {
            assert!((c as f64 / n as f64 - 0.125).abs() < 0.01, "item {i}: {c}");
        }
    }

    #[test]
    fn fixed_seed_fixed_stream() {
        let s = NegativeSampler::new(&[vec![1, 3]], 50);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| s.sample(0, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }
}
