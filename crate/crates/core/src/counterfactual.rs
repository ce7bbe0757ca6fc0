//! Counterfactual histories.
//!
//! Discrete counterfactuals are single-edit variants of a real history. They are
//! kept only when the target item would still be recommended under them, so the
//! constraint only ties predictions that the deployed policy would also have
//! produced. Continuous counterfactuals perturb the history representation
//! inside a small ball instead.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{History, ItemId, SplitDataset, UserId};
use crate::eval::{rank_from_scores, NUM_EVAL_NEGATIVES};
use crate::models::Model;
use crate::seed::{self, stream};
use crate::{Error, Result};

pub const DEFAULT_GENERATION_LIMIT: usize = 20;
pub const DEFAULT_REPLACEMENTS_PER_POSITION: usize = 5;
pub const DEFAULT_MAX_SELECTED: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.5;
const NEIGHBORS_PER_ITEM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeuristicRule {
    #[serde(rename = "K1")]
    KeepOne,
    #[serde(rename = "D1")]
    DeleteOne,
    #[serde(rename = "R1r")]
    ReplaceOneRandom,
    #[serde(rename = "R1n")]
    ReplaceOneNearest,
}

impl HeuristicRule {
    pub const ALL: [HeuristicRule; 4] = [
        HeuristicRule::KeepOne,
        HeuristicRule::DeleteOne,
        HeuristicRule::ReplaceOneRandom,
        HeuristicRule::ReplaceOneNearest,
    ];

    pub fn code(self) -> &'static str {
        match self {
            HeuristicRule::KeepOne => "K1",
            HeuristicRule::DeleteOne => "D1",
            HeuristicRule::ReplaceOneRandom => "R1r",
            HeuristicRule::ReplaceOneNearest => "R1n",
        }
    }
}

impl fmt::Display for HeuristicRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for HeuristicRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeuristicRule::ALL
            .into_iter()
            .find(|r| r.code() == s)
            .ok_or_else(|| Error::invalid(format!("invalid rule '{s}'; expected one of: K1, D1, R1r, R1n")))
    }
}

fn cosine_parts(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nearest items by cosine similarity of item embeddings.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    neighbors: Vec<Vec<ItemId>>,
}

impl NeighborIndex {
    pub fn from_model(model: &Model) -> Self {
        Self::from_embeddings(&model.item, NEIGHBORS_PER_ITEM)
    }

    /// Keep the `per_item` most similar items of each item, self excluded,
    /// ties by ascending id. Zero vectors have similarity 0 to everything.
    pub fn from_embeddings(items: &crate::models::Embedding, per_item: usize) -> Self {
        let n = items.rows();
        let norms: Vec<f64> = (0..n)
            .map(|i| cosine_parts(items.row(i), items.row(i)).sqrt())
            .collect();
        let mut neighbors = Vec::with_capacity(n);
        let mut sims: Vec<(f64, ItemId)> = Vec::with_capacity(n);
        for i in 0..n {
            sims.clear();
            for j in (0..n).filter(|&j| j != i) {
                let denom = norms[i] * norms[j];
                let s = if denom > 0.0 {
                    cosine_parts(items.row(i), items.row(j)) / denom
                } else {
                    0.0
                };
                sims.push((s, j));
            }
            let take = per_item.min(sims.len());
            let cmp = |a: &(f64, ItemId), b: &(f64, ItemId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if take > 0 && take < sims.len() {
                sims.select_nth_unstable_by(take - 1, cmp);
            }
            sims.truncate(take);
            sims.sort_by(cmp);
            neighbors.push(sims.iter().map(|&(_, j)| j).collect());
        }
        NeighborIndex { neighbors }
    }

    /// Neighbors of `item`, most similar first.
    pub fn neighbors(&self, item: ItemId) -> &[ItemId] {
        &self.neighbors[item]
    }

    pub fn nearest(&self, item: ItemId) -> Option<ItemId> {
        self.neighbors[item].first().copied()
    }

    /// Most similar item not contained in `exclude`.
    pub fn nearest_excluding(&self, item: ItemId, exclude: &[ItemId]) -> Option<ItemId> {
        self.neighbors[item].iter().copied().find(|j| !exclude.contains(j))
    }
}

/// Inputs shared by every generation call.
#[derive(Clone, Copy, Debug)]
pub struct GenerateContext<'a> {
    pub num_items: usize,
    pub neighbors: Option<&'a NeighborIndex>,
    pub limit: usize,
    pub replacements_per_position: usize,
}

impl<'a> GenerateContext<'a> {
    pub fn new(num_items: usize, neighbors: Option<&'a NeighborIndex>) -> Self {
        GenerateContext {
            num_items,
            neighbors,
            limit: DEFAULT_GENERATION_LIMIT,
            replacements_per_position: DEFAULT_REPLACEMENTS_PER_POSITION,
        }
    }
}

/// Keep `limit` of `items` by seeded uniform subsampling, preserving order.
pub(crate) fn subsample<T, R: Rng>(items: Vec<T>, limit: usize, rng: &mut R) -> Vec<T> {
    if items.len() <= limit {
        return items;
    }
    let mut keep = index::sample(rng, items.len(), limit).into_vec();
    keep.sort_unstable();
    let mut keep = keep.into_iter().peekable();
    items
        .into_iter()
        .enumerate()
        .filter_map(|(i, x)| {
            if keep.peek() == Some(&i) {
                keep.next();
                Some(x)
            } else {
                None
            }
        })
        .collect()
}

/// Candidate counterfactual histories of `history` under `rule`.
pub fn generate(rule: HeuristicRule, history: &[ItemId], ctx: &GenerateContext, seed: u64) -> Result<Vec<History>> {
    if ctx.limit == 0 {
        return Err(Error::invalid("generation limit must be at least 1"));
    }
    let mut rng = seed::rng(seed, &[stream::GENERATE]);
    let len = history.len();
    let mut out: Vec<History> = Vec::new();
    match rule {
        HeuristicRule::KeepOne => out.extend(history.iter().map(|&i| vec![i])),
        HeuristicRule::DeleteOne if len >= 2 => {
            for p in 0..len {
                let mut h = history.to_vec();
                h.remove(p);
                out.push(h);
            }
        }
        HeuristicRule::DeleteOne => {}
        HeuristicRule::ReplaceOneRandom => {
            let in_history: HashSet<ItemId> = history.iter().copied().collect();
            let available = ctx.num_items.saturating_sub(in_history.len());
            let per_position = ctx.replacements_per_position.min(available);
            for p in 0..len {
                let mut used = HashSet::with_capacity(per_position);
                while used.len() < per_position {
                    let item = rng.random_range(0..ctx.num_items);
                    if in_history.contains(&item) || !used.insert(item) {
                        continue;
                    }
                    let mut h = history.to_vec();
                    h[p] = item;
                    out.push(h);
                }
            }
        }
        HeuristicRule::ReplaceOneNearest => {
            let index = ctx
                .neighbors
                .ok_or_else(|| Error::invalid("R1n generation needs a neighbor index"))?;
            for p in 0..len {
                if let Some(nn) = index.nearest(history[p]) {
                    let mut h = history.to_vec();
                    h[p] = nn;
                    out.push(h);
                }
            }
        }
    }
    Ok(subsample(out, ctx.limit, &mut rng))
}

/// Selected counterfactual histories of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualBatch {
    pub user: UserId,
    pub real_history: History,
    pub target: ItemId,
    pub counterfactuals: Vec<History>,
    /// Candidates offered to the selector.
    pub generated: usize,
    /// Candidates whose target made the top-k, before the `max_selected` cap.
    pub passed: usize,
}

impl CounterfactualBatch {
    pub fn n(&self) -> usize {
        self.counterfactuals.len()
    }
}

/// The 101-item candidate set of one selection call: target first.
pub fn selection_candidates(ds: &SplitDataset, user: UserId, target: ItemId, seed: u64) -> Result<Vec<ItemId>> {
    let neg_seed = seed::derive(seed, &[stream::SELECT_NEGATIVES]);
    let mut candidates = vec![target];
    candidates.extend(ds.sample_negatives(user, target, NUM_EVAL_NEGATIVES, neg_seed)?);
    Ok(candidates)
}

/// Rank of `candidates[0]` among `candidates` under `history`.
pub fn target_rank(model: &Model, user: UserId, history: &[ItemId], candidates: &[ItemId]) -> usize {
    let repr = model.representation(user, history);
    let target = candidates[0];
    let target_score = model.score_repr(user, &repr, target);
    let others: Vec<(ItemId, f64)> = candidates[1..]
        .iter()
        .map(|&v| (v, model.score_repr(user, &repr, v)))
        .collect();
    rank_from_scores(target, target_score, &others)
}

/// Keep each candidate history under which `target` ranks within the top `k`
/// of a 101-item candidate set, then cap at `max_selected`.
#[allow(clippy::too_many_arguments)]
pub fn select(
    model: &Model,
    ds: &SplitDataset,
    user: UserId,
    real_history: &[ItemId],
    candidates: Vec<History>,
    target: ItemId,
    k: usize,
    max_selected: usize,
    seed: u64,
) -> Result<CounterfactualBatch> {
    if k == 0 || k > NUM_EVAL_NEGATIVES + 1 {
        return Err(Error::invalid(format!(
            "selection threshold k = {k} must be within 1..={}",
            NUM_EVAL_NEGATIVES + 1
        )));
    }
    let generated = candidates.len();
    let mut kept = Vec::new();
    if generated > 0 {
        let set = selection_candidates(ds, user, target, seed)?;
        kept = candidates
            .into_iter()
            .filter(|h| target_rank(model, user, h, &set) <= k)
            .collect();
    }
    let passed = kept.len();
    let mut rng = seed::rng(seed, &[stream::SUBSAMPLE]);
    Ok(CounterfactualBatch {
        user,
        real_history: real_history.to_vec(),
        target,
        counterfactuals: subsample(kept, max_selected, &mut rng),
        generated,
        passed,
    })
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Offsets `δ = √γ·θ/‖θ‖` with `γ ~ U[0, epsilon2]`, guaranteed `‖δ‖² ≤ epsilon2`.
pub fn sample_offsets<R: Rng>(dim: usize, epsilon2: f64, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let theta = loop {
                let t: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = sq_norm(&t).sqrt();
                if norm > 0.0 {
                    break t.into_iter().map(|x| x / norm).collect::<Vec<_>>();
                }
            };
            let gamma: f64 = if epsilon2 > 0.0 {
                rng.random_range(0.0..=epsilon2)
            } else {
                0.0
            };
            let mut radius = gamma.sqrt();
            loop {
                let delta: Vec<f64> = theta.iter().map(|x| radius * x).collect();
                if sq_norm(&delta) <= epsilon2 {
                    break delta;
                }
                radius *= 1.0 - 1e-12;
            }
        })
        .collect()
}

/// Perturbed copies of `x` inside the ball `‖x′ − x‖² ≤ epsilon2`.
pub fn sample_continuous(x: &[f64], epsilon2: f64, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(epsilon2 >= 0.0) || !epsilon2.is_finite() {
        return Err(Error::invalid(format!("epsilon2 must be >= 0, got {epsilon2}")));
    }
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let mut rng = seed::rng(seed, &[stream::CONTINUOUS]);
    Ok(sample_offsets(x.len(), epsilon2, count, &mut rng)
        .into_iter()
        .map(|mut delta| {
            let shifted = |d: &[f64]| x.iter().zip(d).map(|(a, b)| a + b).collect::<Vec<f64>>();
            let mut out = shifted(&delta);
            while sq_norm(&out.iter().zip(x).map(|(a, b)| a - b).collect::<Vec<_>>()) > epsilon2 {
                delta.iter_mut().for_each(|d| *d *= 1.0 - 1e-12);
                out = shifted(&delta);
            }
            out
        })
        .collect())
}

/// Piecewise-uniform distribution over the real history and `n` counterfactuals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoDistribution {
    alpha: f64,
    beta: f64,
    n: usize,
}

impl DoDistribution {
    pub fn new(alpha: f64, beta: f64, n: usize) -> Result<Self> {
        let ok = if n == 0 {
            alpha == 1.0
        } else {
            alpha > beta && beta > 0.0 && (alpha + n as f64 * beta - 1.0).abs() <= 1e-12
        };
        if !ok {
            return Err(Error::invalid(format!(
                "invalid do-distribution alpha={alpha}, beta={beta}, n={n}: need alpha + n*beta = 1 \
                 and alpha > beta > 0 (alpha = 1 when n = 0)"
            )));
        }
        Ok(DoDistribution { alpha, beta, n })
    }

    /// `β = (1 − α)/n`. When `alpha ≤ 1/(n+1)` would break `α > β`, `α = 2/(n+2)` is used.
    pub fn with_alpha(alpha: f64, n: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
        }
        if n == 0 {
            return Self::new(1.0, 0.0, 0);
        }
        let nf = n as f64;
        let alpha = if alpha > 1.0 / (nf + 1.0) {
            alpha
        } else {
            2.0 / (nf + 2.0)
        };
        Self::new(alpha, (1.0 - alpha) / nf, n)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// `α·p_real + β·Σ p_cf`.
pub fn do_expectation(dist: &DoDistribution, p_real: f64, p_cf: &[f64]) -> Result<f64> {
    if p_cf.len() != dist.n {
        return Err(Error::invalid(format!(
            "{} counterfactual probabilities for a distribution over {}",
            p_cf.len(),
            dist.n
        )));
    }
    if let Some(p) = std::iter::once(&p_real).chain(p_cf).find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    DoDistribution::new(dist.alpha, dist.beta, dist.n)?;
    Ok(dist.alpha * p_real + dist.beta * p_cf.iter().sum::<f64>())
}

fn join(items: &[ItemId]) -> String {
    items.iter().map(ItemId::to_string).collect::<Vec<_>>().join(",")
}

/// Write `user<TAB>target<TAB>real<TAB>counterfactual`, one line per selected counterfactual.
pub fn write_cache(path: &Path, batches: &[CounterfactualBatch]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        for b in batches {
            for cf in &b.counterfactuals {
                writeln!(w, "{}\t{}\t{}\t{}", b.user, b.target, join(&b.real_history), join(cf))?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Read a cache back, grouping consecutive lines of the same example.
pub fn read_cache(path: &Path) -> Result<Vec<CounterfactualBatch>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<CounterfactualBatch> = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad id {s:?}")));
        let list = |s: &str| -> Result<History> {
            if s.is_empty() {
                Ok(Vec::new())
            } else {
                s.split(',').map(num).collect()
            }
        };
        let (user, target) = (num(fields[0])?, num(fields[1])?);
        let real = list(fields[2])?;
        let cf = list(fields[3])?;
        match out.last_mut() {
            Some(b) if b.user == user && b.target == target && b.real_history == real => {
                b.counterfactuals.push(cf);
                b.generated += 1;
                b.passed += 1;
            }
            _ => out.push(CounterfactualBatch {
                user,
                real_history: real,
                target,
                counterfactuals: vec![cf],
                generated: 1,
                passed: 1,
            }),
        }
    }
    Ok(out)
}
