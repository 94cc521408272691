//! Synthetic implicit-feedback data with community structure and a long-tailed
//! item popularity, for experiments that need a trained model in seconds.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub communities: usize,
    /// Interactions per user are uniform on `min_user_degree..=max_user_degree`.
    pub min_user_degree: usize,
    pub max_user_degree: usize,
    /// Probability that an interaction stays inside the user's community.
    pub in_community: f64,
    /// Item weight within a community is `(rank + 1)^(-popularity_exponent)`.
    pub popularity_exponent: f64,
    /// Share of each user's interactions held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 1500,
            num_items: 2000,
            communities: 2,
            min_user_degree: 15,
            max_user_degree: 45,
            in_community: 0.9,
            popularity_exponent: 0.8,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: InteractionMatrix,
    pub test: InteractionMatrix,
    pub user_community: Vec<usize>,
    pub item_community: Vec<usize>,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.num_users == 0 || self.num_items == 0 {
            return bad("synthetic data needs users and items");
        }
        if self.communities == 0 || self.communities > self.num_items {
            return bad("communities must be in 1..=num_items");
        }
        if self.min_user_degree == 0 || self.min_user_degree > self.max_user_degree {
            return bad("user degree range is empty");
        }
        if self.max_user_degree > self.num_items {
            return bad("max_user_degree exceeds num_items");
        }
        if !(0.0..=1.0).contains(&self.in_community) || !(0.0..1.0).contains(&self.test_fraction) {
            return bad("in_community must be in [0,1] and test_fraction in [0,1)");
        }
        if !self.popularity_exponent.is_finite() || self.popularity_exponent < 0.0 {
            return bad("popularity_exponent must be finite and nonnegative");
        }
        Ok(())
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.communities;
    let user_community: Vec<usize> = (0..config.num_users)
        .map(|u| u * c / config.num_users)
        .collect();
    let item_community: Vec<usize> = (0..config.num_items).map(|i| i % c).collect();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &k) in item_community.iter().enumerate() {
        members[k].push(i);
    }
    let samplers = members
        .iter_mut()
        .map(|items| {
            items.shuffle(&mut rng);
            let weights =
                (0..items.len()).map(|r| ((r + 1) as f64).powf(-config.popularity_exponent));
            WeightedIndex::new(weights).map_err(|e| Error::InvalidArgument(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut picked = Vec::new();
    for (u, &home) in user_community.iter().enumerate() {
        let degree = rng.random_range(config.min_user_degree..=config.max_user_degree);
        picked.clear();
        let mut attempts = 0;
        while picked.len() < degree && attempts < 50 * degree {
            attempts += 1;
            let k = if c == 1 || rng.random::<f64>() < config.in_community {
                home
            } else {
                (home + rng.random_range(1..c)) % c
            };
            let item = members[k][samplers[k].sample(&mut rng)];
            if !picked.contains(&item) {
                picked.push(item);
            }
        }
        picked.shuffle(&mut rng);
        let held = ((picked.len() as f64) * config.test_fraction).round() as usize;
        let held = held.min(picked.len().saturating_sub(1));
        test.extend(picked[..held].iter().map(|&i| (u, i)));
        train.extend(picked[held..].iter().map(|&i| (u, i)));
    }
    Ok(SyntheticDataset {
        train: InteractionMatrix::from_pairs(config.num_users, config.num_items, train)?,
        test: InteractionMatrix::from_pairs(config.num_users, config.num_items, test)?,
        user_community,
        item_community,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_users: 200,
            num_items: 300,
            min_user_degree: 5,
            max_user_degree: 15,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint_split() {
        let a = generate(&small()).unwrap();
        assert_eq!(a, generate(&small()).unwrap());
        for (u, i) in a.test.pairs() {
            assert!(!a.train.contains(u, i));
        }
        for u in 0..200 {
            let total = a.train.user_degree(u) + a.test.user_degree(u);
            assert!((5..=15).contains(&total));
            assert!(a.train.user_degree(u) >= 1);
        }
    }

    #[test]
    fn mostly_in_community() {
        let d = generate(&small()).unwrap();
        let inside = d
            .train
            .pairs()
            .filter(|&(u, i)| d.user_community[u] == d.item_community[i])
            .count();
        let share = inside as f64 / d.train.nnz() as f64;
        assert!((0.85..0.95).contains(&share), "{share}");
    }

    #[test]
    fn popularity_is_skewed() {
        let d = generate(&small()).unwrap();
        let mut degrees: Vec<usize> = (0..300).map(|i| d.train.item_degree(i)).collect();
        degrees.sort_unstable();
        let top: usize = degrees[270..].iter().sum();
        let bottom: usize = degrees[..30].iter().sum();
        assert!(top > 5 * bottom.max(1));
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small();
        c.max_user_degree = 400;
        assert!(generate(&c).is_err());
        let mut c = small();
        c.communities = 0;
        assert!(generate(&c).is_err());
    }
}
