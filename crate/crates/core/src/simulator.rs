//! Synthetic world with a known preference oracle.
//!
//! Observational logs are produced by a confounded exposure policy that favours
//! popular items and items the user already likes. Randomized test logs expose
//! uniformly random items, so their labels follow the true preference.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, ItemId, UserId};
use crate::models::logistic;
use crate::seed::{self, stream};
use crate::{Error, Result};

const POSITIVE_RATING: i64 = 5;
const NEGATIVE_RATING: i64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub d_star: usize,
    pub scale: f64,
    pub lambda_pop: f64,
    pub lambda_pref: f64,
    pub zipf_exponent: f64,
    pub interactions_per_user: usize,
    pub test_per_user: usize,
    pub retry_cap: usize,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            num_users: 200,
            num_items: 300,
            d_star: 16,
            scale: 2.0,
            lambda_pop: 2.0,
            lambda_pref: 1.0,
            zipf_exponent: 1.0,
            interactions_per_user: 30,
            test_per_user: 20,
            retry_cap: 10,
            seed: 0,
        }
    }
}

impl SimulateConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimulateConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 || self.d_star == 0 {
            return Err(Error::invalid("num_users, num_items and d_star must be at least 1"));
        }
        if self.interactions_per_user == 0 || self.test_per_user == 0 || self.retry_cap == 0 {
            return Err(Error::invalid(
                "interactions_per_user, test_per_user and retry_cap must be at least 1",
            ));
        }
        if self.interactions_per_user + self.test_per_user > self.num_items {
            return Err(Error::invalid(format!(
                "{} observational + {} test items per user exceed the {} items",
                self.interactions_per_user, self.test_per_user, self.num_items
            )));
        }
        for (name, x) in [
            ("scale", self.scale),
            ("lambda_pop", self.lambda_pop),
            ("lambda_pref", self.lambda_pref),
            ("zipf_exponent", self.zipf_exponent),
        ] {
            if !x.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Ground-truth preferences `P*(y=1|u,v) = σ(scale·u*·v* + b*_v)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub user_vectors: Vec<Vec<f64>>,
    pub item_vectors: Vec<Vec<f64>>,
    pub item_bias: Vec<f64>,
    pub scale: f64,
    pub seed: u64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SyntheticWorld {
    pub fn num_users(&self) -> usize {
        self.user_vectors.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_vectors.len()
    }

    pub fn affinity(&self, user: UserId, item: ItemId) -> f64 {
        dot(&self.user_vectors[user], &self.item_vectors[item])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Coordinates of `u*`, `v*` have variance `1/√d*`; `b*` has standard deviation 0.5.
pub fn gen_world(num_users: usize, num_items: usize, d_star: usize, scale: f64, seed: u64) -> Result<SyntheticWorld> {
    if num_users == 0 || num_items == 0 || d_star == 0 {
        return Err(Error::invalid("world needs at least one user, item and dimension"));
    }
    let mut rng = seed::rng(seed, &[stream::WORLD]);
    let coord = Normal::new(0.0, (d_star as f64).powf(-0.25)).expect("valid std");
    let bias = Normal::new(0.0, 0.5).expect("valid std");
    let mut vectors = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d_star).map(|_| coord.sample(&mut rng)).collect())
            .collect()
    };
    let user_vectors = vectors(num_users);
    let item_vectors = vectors(num_items);
    let item_bias = (0..num_items).map(|_| bias.sample(&mut rng)).collect();
    Ok(SyntheticWorld {
        user_vectors,
        item_vectors,
        item_bias,
        scale,
        seed,
    })
}

/// `P(y=1 | u, do(v))`, which equals the true preference.
pub fn oracle_do_probability(world: &SyntheticWorld, user: UserId, item: ItemId) -> f64 {
    logistic(world.scale * world.affinity(user, item) + world.item_bias[item])
}

/// Exposure `softmax(λ_pop·pop_logits + λ_pref·u*·v*)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggingPolicy {
    pub lambda_pop: f64,
    pub lambda_pref: f64,
    pub pop_logits: Vec<f64>,
}

impl LoggingPolicy {
    /// Popularity logits `−exponent·ln(rank)` over a seeded random item ranking.
    pub fn zipf(num_items: usize, lambda_pop: f64, lambda_pref: f64, exponent: f64, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..num_items).collect();
        order.shuffle(&mut seed::rng(seed, &[stream::WORLD, 1]));
        let mut pop_logits = vec![0.0; num_items];
        for (rank, &item) in order.iter().enumerate() {
            pop_logits[item] = -exponent * ((rank + 1) as f64).ln();
        }
        LoggingPolicy {
            lambda_pop,
            lambda_pref,
            pop_logits,
        }
    }

    pub fn logits(&self, world: &SyntheticWorld, user: UserId) -> Vec<f64> {
        (0..world.num_items())
            .map(|v| self.lambda_pop * self.pop_logits[v] + self.lambda_pref * world.affinity(user, v))
            .collect()
    }

    /// The per-user exposure distribution.
    pub fn exposure(&self, world: &SyntheticWorld, user: UserId) -> Vec<f64> {
        let logits = self.logits(world, user);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }
}

fn label<R: Rng>(world: &SyntheticWorld, user: UserId, item: ItemId, rng: &mut R) -> bool {
    rng.random::<f64>() < oracle_do_probability(world, user, item)
}

fn interaction(user: UserId, item: ItemId, liked: bool, t: usize) -> Interaction {
    let rating = if liked { POSITIVE_RATING } else { NEGATIVE_RATING };
    Interaction::rated(user, item, rating, t as i64).expect("rating on scale")
}

/// Per user, draw items without replacement from the policy (Gumbel top-k);
/// timestamps are the draw order.
pub fn gen_observational(
    world: &SyntheticWorld,
    policy: &LoggingPolicy,
    per_user: usize,
    seed: u64,
) -> Result<Vec<Interaction>> {
    if per_user == 0 || per_user > world.num_items() {
        return Err(Error::invalid(format!(
            "interactions_per_user must be within 1..={}, got {per_user}",
            world.num_items()
        )));
    }
    let mut out = Vec::with_capacity(world.num_users() * per_user);
    for user in 0..world.num_users() {
        let mut rng = seed::rng(seed, &[stream::LOG, user as u64]);
        let mut keyed: Vec<(f64, ItemId)> = policy
            .logits(world, user)
            .into_iter()
            .enumerate()
            .map(|(v, l)| {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                (l - (-u.ln()).ln(), v)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (t, &(_, item)) in keyed.iter().take(per_user).enumerate() {
            out.push(interaction(user, item, label(world, user, item, &mut rng), t));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomizedLog {
    pub interactions: Vec<Interaction>,
    /// Users without a positive after `retry_cap` attempts.
    pub excluded_users: Vec<UserId>,
}

/// Per user, uniform items outside their observational set; retried until the
/// user has at least one positive or the cap is hit.
pub fn gen_randomized_test(
    world: &SyntheticWorld,
    observational: &[Interaction],
    per_user: usize,
    retry_cap: usize,
    seed: u64,
) -> Result<RandomizedLog> {
    if per_user == 0 {
        return Err(Error::invalid("test_per_user must be at least 1"));
    }
    let mut seen: Vec<HashSet<ItemId>> = vec![HashSet::new(); world.num_users()];
    for it in observational {
        seen[it.user].insert(it.item);
    }
    let mut interactions = Vec::new();
    let mut excluded_users = Vec::new();
    for user in 0..world.num_users() {
        let pool: Vec<ItemId> = (0..world.num_items()).filter(|v| !seen[user].contains(v)).collect();
        if per_user > pool.len() {
            return Err(Error::invalid(format!(
                "user {user} has only {} unseen items, {per_user} requested",
                pool.len()
            )));
        }
        let mut rng = seed::rng(seed, &[stream::RANDOMIZED, user as u64]);
        let mut accepted = None;
        for _ in 0..retry_cap {
            let draw: Vec<(ItemId, bool)> = index::sample(&mut rng, pool.len(), per_user)
                .into_iter()
                .map(|i| (pool[i], label(world, user, pool[i], &mut rng)))
                .collect();
            if draw.iter().any(|&(_, y)| y) {
                accepted = Some(draw);
                break;
            }
        }
        match accepted {
            Some(draw) => interactions.extend(
                draw.into_iter()
                    .enumerate()
                    .map(|(t, (item, y))| interaction(user, item, y, t)),
            ),
            None => excluded_users.push(user),
        }
    }
    if interactions.is_empty() {
        return Err(Error::invalid(
            "no user obtained a positive test label within the retry cap",
        ));
    }
    if !excluded_users.is_empty() {
        log::warn!("{} users excluded from the randomized test set", excluded_users.len());
    }
    Ok(RandomizedLog {
        interactions,
        excluded_users,
    })
}

/// Compares the observed positive rate of the most exposed items with their
/// population-average true preference.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfoundingWitness {
    pub over_exposed_items: Vec<ItemId>,
    pub observed_positive_rate: f64,
    pub interventional_rate: f64,
}

impl ConfoundingWitness {
    pub fn holds(&self) -> bool {
        self.observed_positive_rate > self.interventional_rate
    }
}

/// Over-exposed items are the top decile by exposure count.
pub fn confounding_witness(world: &SyntheticWorld, log: &[Interaction]) -> Result<ConfoundingWitness> {
    if log.is_empty() {
        return Err(Error::invalid("empty log"));
    }
    let mut counts = vec![0usize; world.num_items()];
    for it in log {
        counts[it.item] += 1;
    }
    let mut order: Vec<ItemId> = (0..world.num_items()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let top = (world.num_items() / 10).max(1);
    let over_exposed_items: Vec<ItemId> = order.into_iter().take(top).collect();
    let set: HashSet<ItemId> = over_exposed_items.iter().copied().collect();
    let (mut pos, mut total) = (0usize, 0usize);
    for it in log.iter().filter(|it| set.contains(&it.item)) {
        total += 1;
        pos += usize::from(it.label);
    }
    let interventional_rate = over_exposed_items
        .iter()
        .map(|&v| {
            (0..world.num_users())
                .map(|u| oracle_do_probability(world, u, v))
                .sum::<f64>()
        })
        .sum::<f64>()
        / (over_exposed_items.len() * world.num_users()) as f64;
    Ok(ConfoundingWitness {
        over_exposed_items,
        observed_positive_rate: pos as f64 / total.max(1) as f64,
        interventional_rate,
    })
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub world: SyntheticWorld,
    pub policy: LoggingPolicy,
    pub observational: Vec<Interaction>,
    pub randomized: RandomizedLog,
}

pub fn simulate(cfg: &SimulateConfig) -> Result<Simulation> {
    cfg.validate()?;
    let world = gen_world(cfg.num_users, cfg.num_items, cfg.d_star, cfg.scale, cfg.seed)?;
    let policy = LoggingPolicy::zipf(
        cfg.num_items,
        cfg.lambda_pop,
        cfg.lambda_pref,
        cfg.zipf_exponent,
        cfg.seed,
    );
    let observational = gen_observational(&world, &policy, cfg.interactions_per_user, cfg.seed)?;
    let randomized = gen_randomized_test(&world, &observational, cfg.test_per_user, cfg.retry_cap, cfg.seed)?;
    Ok(Simulation {
        world,
        policy,
        observational,
        randomized,
    })
}

/// Write `observational.tsv`, `randomized.tsv` and `world.json`.
pub fn write_simulation(dir: &Path, sim: &Simulation) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let obs = dir.join("observational.tsv");
    let rnd = dir.join("randomized.tsv");
    let world = dir.join("world.json");
    crate::dataset::write_log(&obs, &sim.observational)?;
    crate::dataset::write_log(&rnd, &sim.randomized.interactions)?;
    sim.world.save(&world)?;
    Ok(vec![obs, rnd, world])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worlds_are_seed_deterministic() {
        assert_eq!(gen_world(5, 7, 3, 2.0, 1).unwrap(), gen_world(5, 7, 3, 2.0, 1).unwrap());
        assert_ne!(gen_world(5, 7, 3, 2.0, 1).unwrap(), gen_world(5, 7, 3, 2.0, 2).unwrap());
    }

    #[test]
    fn zero_scale_is_user_independent() {
        let w = gen_world(4, 6, 3, 0.0, 1).unwrap();
        for v in 0..6 {
            let p0 = oracle_do_probability(&w, 0, v);
            assert!((1..4).all(|u| oracle_do_probability(&w, u, v) == p0));
            assert_eq!(p0, logistic(w.item_bias[v]));
        }
    }

    #[test]
    fn affinity_has_unit_scale() {
        let w = gen_world(200, 300, 16, 2.0, 3).unwrap();
        let xs: Vec<f64> = (0..200)
            .flat_map(|u| (0..300).map(move |v| (u, v)))
            .map(|(u, v)| w.affinity(u, v))
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((sd - 1.0).abs() < 0.15, "sd {sd}");
        assert!(xs.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn oracle_limits() {
        let mut w = gen_world(1, 1, 2, 1.0, 0).unwrap();
        w.user_vectors[0] = vec![1.0, 0.0];
        w.item_vectors[0] = vec![0.0, 1.0];
        w.item_bias[0] = 0.0;
        assert_eq!(oracle_do_probability(&w, 0, 0), 0.5);
        w.item_vectors[0] = vec![1.0, 0.0];
        w.scale = 1e6;
        assert!(oracle_do_probability(&w, 0, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn uniform_logging_recovers_true_preferences() {
        let (users, items) = (10, 20);
        let w = gen_world(users, items, 4, 2.0, 4).unwrap();
        let policy = LoggingPolicy::zipf(items, 0.0, 0.0, 1.0, 4);
        let mut pos = vec![0usize; users * items];
        let mut n = vec![0usize; users * items];
        for round in 0..500u64 {
            for it in gen_observational(&w, &policy, items, round).unwrap() {
                n[it.user * items + it.item] += 1;
                pos[it.user * items + it.item] += usize::from(it.label);
            }
        }
        assert_eq!(n.iter().sum::<usize>(), 100_000);
        let mae: f64 = (0..users * items)
            .map(|i| (pos[i] as f64 / n[i] as f64 - oracle_do_probability(&w, i / items, i % items)).abs())
            .sum::<f64>()
            / (users * items) as f64;
        assert!(mae < 0.05, "mae {mae}");
    }

    fn top_decile_share(lambda_pop: f64) -> f64 {
        let w = gen_world(100, 200, 8, 2.0, 5).unwrap();
        let policy = LoggingPolicy::zipf(200, lambda_pop, 0.0, 1.0, 5);
        let log = gen_observational(&w, &policy, 20, 5).unwrap();
        let mut order: Vec<usize> = (0..200).collect();
        order.sort_by(|&a, &b| policy.pop_logits[b].total_cmp(&policy.pop_logits[a]));
        let top: HashSet<usize> = order.into_iter().take(20).collect();
        log.iter().filter(|it| top.contains(&it.item)).count() as f64 / log.len() as f64
    }

    #[test]
    fn popularity_weight_concentrates_exposure() {
        let shares: Vec<f64> = [0.0, 1.0, 3.0].iter().map(|&l| top_decile_share(l)).collect();
        assert!(shares[0] < shares[1] && shares[1] < shares[2], "{shares:?}");
    }

    #[test]
    fn forced_preference_gives_all_positive_labels() {
        let mut w = gen_world(10, 50, 4, 2.0, 6).unwrap();
        w.item_bias.iter_mut().for_each(|b| *b = 1e3);
        let log = gen_randomized_test(&w, &[], 5, 1, 6).unwrap();
        assert!(log.interactions.iter().all(|it| it.label));
        assert!(log.excluded_users.is_empty());
    }

    #[test]
    fn impossible_preference_excludes_everyone() {
        let mut w = gen_world(3, 20, 4, 2.0, 6).unwrap();
        w.item_bias.iter_mut().for_each(|b| *b = -1e3);
        assert!(gen_randomized_test(&w, &[], 5, 3, 6).is_err());
    }

    #[test]
    fn randomized_items_are_unseen_and_near_uniform() {
        let w = gen_world(200, 300, 16, 2.0, 7).unwrap();
        let policy = LoggingPolicy::zipf(300, 2.0, 1.0, 1.0, 7);
        let obs = gen_observational(&w, &policy, 30, 7).unwrap();
        let test = gen_randomized_test(&w, &obs, 20, 10, 7).unwrap();
        let seen: HashSet<(usize, usize)> = obs.iter().map(|it| (it.user, it.item)).collect();
        assert!(test.interactions.iter().all(|it| !seen.contains(&(it.user, it.item))));
        let mut freq = vec![0f64; 300];
        for it in &test.interactions {
            freq[it.item] += 1.0;
        }
        let expected = test.interactions.len() as f64 / 300.0;
        let chi2: f64 = freq.iter().map(|f| (f - expected).powi(2) / expected).sum();
        // popular items are mostly already seen, so allow a loose bound on 299 dof
        assert!(chi2 < 3.0 * 299.0, "chi2 {chi2}");
    }

    #[test]
    fn confounded_logs_over_state_preference() {
        let cfg = SimulateConfig {
            seed: 8,
            ..Default::default()
        };
        let sim = simulate(&cfg).unwrap();
        let w = confounding_witness(&sim.world, &sim.observational).unwrap();
        assert!(w.holds(), "{w:?}");
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = SimulateConfig {
            num_users: 20,
            num_items: 60,
            seed: 9,
            ..Default::default()
        };
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.observational, b.observational);
        assert_eq!(a.randomized, b.randomized);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(SimulateConfig::from_json(r#"{"users": 3}"#).is_err());
        assert!(SimulateConfig::from_json(r#"{"num_items": 10}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn exposure_is_a_distribution(seed in 0u64..1000, lp in 0.0f64..4.0, lf in 0.0f64..4.0) {
            let w = gen_world(3, 25, 4, 2.0, seed).unwrap();
            let p = LoggingPolicy::zipf(25, lp, lf, 1.0, seed).exposure(&w, 1);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn observational_draws_are_distinct(seed in 0u64..1000, k in 1usize..25) {
            let w = gen_world(4, 25, 4, 2.0, seed).unwrap();
            let policy = LoggingPolicy::zipf(25, 2.0, 1.0, 1.0, seed);
            let log = gen_observational(&w, &policy, k, seed).unwrap();
            for u in 0..4 {
                let items: HashSet<_> = log.iter().filter(|it| it.user == u).map(|it| it.item).collect();
                prop_assert_eq!(items.len(), k);
            }
        }
    }
}
