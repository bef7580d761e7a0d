//! Planted-pattern corpora for smoke tests and desk-scale runs.
//!
//! Every item has a fixed successor (a single random cycle over the
//! catalog). Each step follows the successor with probability `1 - noise`
//! and otherwise jumps to a uniformly random item.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, UserSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub items: usize,
    pub users: usize,
    pub length: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            items: 50,
            users: 500,
            length: 20,
            noise: 0.1,
            seed: 7,
        }
    }
}

/// `successor[i]` for items `1..=n`; index 0 is unused.
pub fn successor_map(items: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (1..=items).collect();
    order.shuffle(&mut rng);
    let mut next = vec![0; items + 1];
    for k in 0..items {
        next[order[k]] = order[(k + 1) % items];
    }
    next
}

pub fn planted_corpus(spec: &PlantedSpec) -> Result<Corpus> {
    if spec.items < 2 || spec.length < 3 || spec.users == 0 || !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::Config(format!("invalid planted corpus spec {spec:?}")));
    }
    let next = successor_map(spec.items, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let sequences = (0..spec.users)
        .map(|u| {
            let mut items = vec![rng.random_range(1..=spec.items)];
            while items.len() < spec.length {
                let prev = *items.last().expect("non-empty");
                let item = if rng.random::<f64>() < spec.noise {
                    rng.random_range(1..=spec.items)
                } else {
                    next[prev]
                };
                items.push(item);
            }
            UserSequence { user_index: u, items }
        })
        .collect();
    Ok(Corpus {
        item_count: spec.items,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn successor_is_single_cycle() {
        let next = successor_map(10, 3);
        let mut seen = vec![false; 11];
        let mut cur = 1;
        for _ in 0..10 {
            assert!(!seen[cur]);
            seen[cur] = true;
            cur = next[cur];
        }
        assert_eq!(cur, 1);
    }

    #[test]
    fn noiseless_follows_successor() {
        let spec = PlantedSpec {
            noise: 0.0,
            users: 20,
            ..PlantedSpec::default()
        };
        let next = successor_map(spec.items, spec.seed);
        let corpus = planted_corpus(&spec).unwrap();
        for s in &corpus.sequences {
            assert_eq!(s.items.len(), 20);
            assert!(s.items.windows(2).all(|w| next[w[0]] == w[1]));
        }
    }
}
