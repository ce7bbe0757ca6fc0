//! Pairwise ranking with a hinge-relaxed counterfactual constraint.
//!
//! Training runs in two phases. Phase one fits the base model with BPR and L2.
//! Phase two prepares counterfactuals with the phase-one model and continues
//! training on `bpr + l2 + ω·constraint`, evaluated per example.
//!
//! How counterfactual probabilities are obtained depends on the model:
//!
//! - AttnSeq, discrete rule: forward passes of the live model under each
//!   selected counterfactual history.
//! - MF, discrete rule: MF ignores its history, so the rule is applied to the
//!   training set itself and a frozen clone is retrained on it
//!   ([`matching_retrain_filter`]).
//! - Continuous: the history representation is perturbed inside an
//!   `ε₂`-ball and the constraint is a Monte Carlo mean.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{PropensityTable, DEFAULT_IPS_CLIP, DEFAULT_IPS_ETA};
use crate::counterfactual::{
    self, generate, sample_offsets, select, selection_candidates, target_rank, GenerateContext, HeuristicRule,
    NeighborIndex,
};
use crate::dataset::{sample_non_positive, History, ItemId, SplitDataset, UserId};
use crate::models::{logistic, Gradient, Model, ModelType, DEFAULT_DIM, LOGIT_CLAMP};
use crate::seed::{self, stream};
use crate::{Error, Result};

pub const RULE_CHOICES: &str = "none, K1, D1, R1r, R1n, C";

/// Which counterfactuals constrain training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RuleSpec {
    #[default]
    None,
    Discrete(HeuristicRule),
    Continuous,
}

impl RuleSpec {
    pub fn code(self) -> &'static str {
        match self {
            RuleSpec::None => "none",
            RuleSpec::Discrete(r) => r.code(),
            RuleSpec::Continuous => "C",
        }
    }
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for RuleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RuleSpec::None),
            "C" => Ok(RuleSpec::Continuous),
            other => HeuristicRule::ALL
                .into_iter()
                .find(|r| r.code() == other)
                .map(RuleSpec::Discrete)
                .ok_or_else(|| Error::invalid(format!("invalid rule '{other}'; expected one of: {RULE_CHOICES}"))),
        }
    }
}

impl TryFrom<String> for RuleSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RuleSpec> for String {
    fn from(r: RuleSpec) -> String {
        r.code().to_string()
    }
}

/// Training hyperparameters. Unknown JSON keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model_type: ModelType,
    pub rule: RuleSpec,
    pub k: usize,
    pub omega: f64,
    pub epsilon: f64,
    pub epsilon2: f64,
    pub mc_samples: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub refresh_interval: usize,
    pub seed: u64,
    pub dim: usize,
    pub alpha: f64,
    pub generation_limit: usize,
    pub replacements_per_position: usize,
    pub max_selected: usize,
    pub clone_rounds: usize,
    pub ips: bool,
    pub ips_eta: f64,
    pub ips_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model_type: ModelType::Mf,
            rule: RuleSpec::None,
            k: 50,
            omega: 0.1,
            epsilon: 0.1,
            epsilon2: 1.0,
            mc_samples: 10,
            learning_rate: 0.005,
            l2_lambda: 1e-4,
            epochs: 100,
            pretrain_epochs: 30,
            refresh_interval: 0,
            seed: 0,
            dim: DEFAULT_DIM,
            alpha: counterfactual::DEFAULT_ALPHA,
            generation_limit: counterfactual::DEFAULT_GENERATION_LIMIT,
            replacements_per_position: counterfactual::DEFAULT_REPLACEMENTS_PER_POSITION,
            max_selected: counterfactual::DEFAULT_MAX_SELECTED,
            clone_rounds: 3,
            ips: false,
            ips_eta: DEFAULT_IPS_ETA,
            ips_clip: DEFAULT_IPS_CLIP,
        }
    }
}

fn non_negative(name: &str, x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be a finite value >= 0, got {x}")))
    }
}

fn at_least_one(name: &str, x: usize) -> Result<()> {
    if x >= 1 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be at least 1")))
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        non_negative("omega", self.omega)?;
        non_negative("epsilon", self.epsilon)?;
        non_negative("epsilon2", self.epsilon2)?;
        non_negative("l2_lambda", self.l2_lambda)?;
        at_least_one("mc_samples", self.mc_samples)?;
        at_least_one("dim", self.dim)?;
        at_least_one("generation_limit", self.generation_limit)?;
        at_least_one("replacements_per_position", self.replacements_per_position)?;
        at_least_one("max_selected", self.max_selected)?;
        at_least_one("clone_rounds", self.clone_rounds)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(1..=101).contains(&self.k) {
            return Err(Error::invalid(format!("k must be within 1..=101, got {}", self.k)));
        }
        if self.pretrain_epochs > self.epochs {
            return Err(Error::invalid(format!(
                "pretrain_epochs ({}) exceeds epochs ({})",
                self.pretrain_epochs, self.epochs
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.ips {
            non_negative("ips_eta", self.ips_eta)?;
            if !(self.ips_clip >= 1.0) {
                return Err(Error::invalid(format!("ips_clip must be >= 1, got {}", self.ips_clip)));
            }
        }
        Ok(())
    }

    /// Whether phase two adds a constraint term at all.
    pub fn constrained(&self) -> bool {
        self.rule != RuleSpec::None && self.omega > 0.0
    }
}

/// `−ln σ(s_pos − s_neg)`, argument clamped to `[-30, 30]`.
pub fn bpr_step_loss(s_pos: f64, s_neg: f64) -> f64 {
    let d = (s_pos - s_neg).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    (-d).exp().ln_1p()
}

/// `max(0, Σ|p_cf − p_real| − ε)`.
pub fn constraint_loss_discrete(p_real: f64, p_cf: &[f64], epsilon: f64) -> f64 {
    let total: f64 = p_cf.iter().map(|p| (p - p_real).abs()).sum();
    (total - epsilon).max(0.0)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `max(0, mean_j |P(x + δ_j) − P(x)| − ε₁)` with `mc_samples` offsets drawn from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn constraint_loss_continuous(
    model: &Model,
    user: UserId,
    history: &[ItemId],
    target: ItemId,
    epsilon1: f64,
    epsilon2: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    non_negative("epsilon2", epsilon2)?;
    at_least_one("mc_samples", mc_samples)?;
    let mut rng = seed::rng(seed, &[stream::CONTINUOUS]);
    let offsets = sample_offsets(model.dim(), epsilon2, mc_samples, &mut rng);
    Ok(continuous_term(
        model, user, history, target, epsilon1, &offsets, 0.0, None,
    ))
}

/// Loss of the continuous constraint and, when `grad` is given and the hinge
/// is active, `omega·∂loss/∂θ`.
#[allow(clippy::too_many_arguments)]
fn continuous_term(
    model: &Model,
    user: UserId,
    history: &[ItemId],
    target: ItemId,
    epsilon1: f64,
    offsets: &[Vec<f64>],
    omega: f64,
    grad: Option<&mut Gradient>,
) -> f64 {
    let repr = model.representation(user, history);
    let p_real = logistic(model.score_repr(user, &repr, target));
    let perturbed: Vec<Vec<f64>> = offsets
        .iter()
        .map(|d| repr.iter().zip(d).map(|(a, b)| a + b).collect())
        .collect();
    let p_cf: Vec<f64> = perturbed
        .iter()
        .map(|x| logistic(model.score_repr(user, x, target)))
        .collect();
    let m = offsets.len() as f64;
    let mean: f64 = p_cf.iter().map(|p| (p - p_real).abs()).sum::<f64>() / m;
    let loss = (mean - epsilon1).max(0.0);
    if let Some(grad) = grad {
        if loss > 0.0 {
            let mut d_repr = vec![0.0; repr.len()];
            let mut d_real = 0.0;
            for (x, &p) in perturbed.iter().zip(&p_cf) {
                let s = sign(p - p_real) / m;
                d_real -= s;
                let up = omega * s * p * (1.0 - p);
                let d = model.grad_repr(user, x, target, up, grad);
                d_repr.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
            let up = omega * d_real * p_real * (1.0 - p_real);
            let d = model.grad_repr(user, &repr, target, up, grad);
            d_repr.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            model.backprop_repr(user, history, &d_repr, grad);
        }
    }
    loss
}

/// Per-epoch means; `constraint_max` is kept in memory only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub rank_loss: f64,
    pub constraint_loss: f64,
    pub constraint_max: f64,
}

/// `epoch,rank_loss,constraint_loss`.
pub fn trace_csv(trace: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,rank_loss,constraint_loss\n");
    for t in trace {
        let _ = writeln!(out, "{},{},{}", t.epoch, t.rank_loss, t.constraint_loss);
    }
    out
}

pub fn write_trace(path: &Path, trace: &[EpochTrace]) -> Result<()> {
    fs::write(path, trace_csv(trace)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SelectionStats {
    pub generated: usize,
    /// Candidates whose target stayed in the top-k.
    pub passed: usize,
    /// Counterfactuals retained after the per-example cap.
    pub selected: usize,
    /// Training examples with at least one counterfactual.
    pub constrained_examples: usize,
}

/// Counterfactual material for phase two, indexed like [`SplitDataset::train_examples`].
#[derive(Clone, Debug)]
pub enum Prepared {
    None,
    Histories(Vec<Vec<History>>),
    /// Frozen clone probabilities per example.
    Clone(Vec<Vec<f64>>),
    Continuous,
}

#[derive(Clone, Debug)]
pub struct Preparation {
    pub prepared: Prepared,
    pub stats: SelectionStats,
}

#[derive(Clone, Debug)]
pub struct PhaseOne {
    pub model: Model,
    pub trace: Vec<EpochTrace>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub config: TrainConfig,
    pub trace: Vec<EpochTrace>,
    /// Statistics of the last preparation round, if any.
    pub selection: Option<SelectionStats>,
}

struct Example {
    user: UserId,
    item: ItemId,
    history: History,
}

struct BprData {
    examples: Vec<Example>,
    positives: Vec<Vec<ItemId>>,
    num_items: usize,
}

impl BprData {
    fn from_dataset(ds: &SplitDataset) -> Self {
        let examples = ds
            .train_examples()
            .into_iter()
            .map(|e| Example {
                user: e.user,
                item: e.item,
                history: ds.history_of(e.user, e.position),
            })
            .collect();
        BprData {
            examples,
            positives: (0..ds.num_users()).map(|u| ds.train_positives(u).to_vec()).collect(),
            num_items: ds.num_items(),
        }
    }
}

struct EpochRun<'a> {
    cfg: &'a TrainConfig,
    ips: Option<&'a PropensityTable>,
    prepared: &'a Prepared,
    epoch: usize,
    rng_path: &'a [u64],
}

fn run_epoch(model: &mut Model, data: &BprData, run: &EpochRun) -> Result<EpochTrace> {
    let cfg = run.cfg;
    let mut rng = seed::rng(cfg.seed, run.rng_path);
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    order.shuffle(&mut rng);
    let constrained = cfg.omega > 0.0 && !matches!(run.prepared, Prepared::None);
    let mut grad = Gradient::new(model.dim());
    let mut repr = Vec::with_capacity(model.dim());
    let mut d_repr = vec![0.0; model.dim()];
    let (mut rank_total, mut cons_total, mut cons_max) = (0.0, 0.0, 0.0f64);

    for (step, &idx) in order.iter().enumerate() {
        let ex = &data.examples[idx];
        let neg = sample_non_positive(&data.positives[ex.user], data.num_items, &mut rng);
        grad.clear();

        let weight = run.ips.map_or(1.0, |t| t.weight(ex.item));
        model.representation_into(ex.user, &ex.history, &mut repr);
        let s_pos = model.score_repr(ex.user, &repr, ex.item);
        let s_neg = model.score_repr(ex.user, &repr, neg);
        let loss = weight * bpr_step_loss(s_pos, s_neg);
        let d = (s_pos - s_neg).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let up = -weight * logistic(-d);
        d_repr.iter_mut().for_each(|x| *x = 0.0);
        model.grad_repr_into(ex.user, &repr, ex.item, up, &mut grad, &mut d_repr);
        model.grad_repr_into(ex.user, &repr, neg, -up, &mut grad, &mut d_repr);
        model.backprop_repr(ex.user, &ex.history, &d_repr, &mut grad);
        grad.add_l2(model, cfg.l2_lambda);

        let mut c_loss = 0.0;
        if constrained {
            c_loss = constraint_step(model, ex, idx, run, &mut grad);
        }
        let total = loss + cfg.omega * c_loss;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: run.epoch,
                example: step,
                user: ex.user,
                item: ex.item,
            });
        }
        rank_total += loss;
        cons_total += c_loss;
        cons_max = cons_max.max(c_loss);
        model.apply(&grad, cfg.learning_rate);
    }
    let n = data.examples.len().max(1) as f64;
    Ok(EpochTrace {
        epoch: run.epoch,
        rank_loss: rank_total / n,
        constraint_loss: cons_total / n,
        constraint_max: cons_max,
    })
}

fn constraint_step(model: &Model, ex: &Example, idx: usize, run: &EpochRun, grad: &mut Gradient) -> f64 {
    let cfg = run.cfg;
    match run.prepared {
        Prepared::None => 0.0,
        Prepared::Continuous => {
            let mut rng = seed::rng(cfg.seed, &[stream::CONTINUOUS, run.epoch as u64, idx as u64]);
            let offsets = sample_offsets(model.dim(), cfg.epsilon2, cfg.mc_samples, &mut rng);
            continuous_term(
                model,
                ex.user,
                &ex.history,
                ex.item,
                cfg.epsilon,
                &offsets,
                cfg.omega,
                Some(grad),
            )
        }
        Prepared::Clone(probs) => {
            let p_cf = &probs[idx];
            if p_cf.is_empty() {
                return 0.0;
            }
            let repr = model.representation(ex.user, &ex.history);
            let p_real = logistic(model.score_repr(ex.user, &repr, ex.item));
            let loss = constraint_loss_discrete(p_real, p_cf, cfg.epsilon);
            if loss > 0.0 {
                let d_real: f64 = -p_cf.iter().map(|p| sign(p - p_real)).sum::<f64>();
                let up = cfg.omega * d_real * p_real * (1.0 - p_real);
                let d = model.grad_repr(ex.user, &repr, ex.item, up, grad);
                model.backprop_repr(ex.user, &ex.history, &d, grad);
            }
            loss
        }
        Prepared::Histories(histories) => {
            let cfs = &histories[idx];
            if cfs.is_empty() {
                return 0.0;
            }
            let repr = model.representation(ex.user, &ex.history);
            let p_real = logistic(model.score_repr(ex.user, &repr, ex.item));
            let p_cf: Vec<f64> = cfs
                .iter()
                .map(|h| logistic(model.score_unchecked(ex.user, h, ex.item)))
                .collect();
            let loss = constraint_loss_discrete(p_real, &p_cf, cfg.epsilon);
            if loss > 0.0 {
                let mut d_real = 0.0;
                for (h, &p) in cfs.iter().zip(&p_cf) {
                    let s = sign(p - p_real);
                    d_real -= s;
                    model.grad_items(ex.user, h, ex.item, cfg.omega * s * p * (1.0 - p), grad);
                }
                let up = cfg.omega * d_real * p_real * (1.0 - p_real);
                let d = model.grad_repr(ex.user, &repr, ex.item, up, grad);
                model.backprop_repr(ex.user, &ex.history, &d, grad);
            }
            loss
        }
    }
}

fn propensities(ds: &SplitDataset, cfg: &TrainConfig) -> Result<Option<PropensityTable>> {
    if cfg.ips {
        Ok(Some(PropensityTable::new(ds.popularity(), cfg.ips_eta, cfg.ips_clip)?))
    } else {
        Ok(None)
    }
}

fn main_epoch_path(epoch: usize) -> [u64; 2] {
    [stream::EPOCH, epoch as u64]
}

fn check_trainable(ds: &SplitDataset) -> Result<BprData> {
    let data = BprData::from_dataset(ds);
    if data.examples.is_empty() {
        return Err(Error::invalid("training partition has no positive interactions"));
    }
    ds.check_negatives_available()?;
    Ok(data)
}

/// Phase one: `pretrain_epochs` of BPR + L2 from a seeded initialisation.
pub fn pretrain(ds: &SplitDataset, cfg: &TrainConfig) -> Result<PhaseOne> {
    cfg.validate()?;
    let data = check_trainable(ds)?;
    let ips = propensities(ds, cfg)?;
    let mut model = Model::new(cfg.model_type, ds.num_users(), ds.num_items(), cfg.dim, cfg.seed)?;
    let mut trace = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 1..=cfg.pretrain_epochs {
        let path = main_epoch_path(epoch);
        let run = EpochRun {
            cfg,
            ips: ips.as_ref(),
            prepared: &Prepared::None,
            epoch,
            rng_path: &path,
        };
        trace.push(run_epoch(&mut model, &data, &run)?);
        log::debug!("epoch {epoch}: rank loss {:.5}", trace.last().unwrap().rank_loss);
    }
    Ok(PhaseOne { model, trace })
}

/// Build phase-two counterfactual material from `model` (round `round` of refreshing).
pub fn prepare(ds: &SplitDataset, cfg: &TrainConfig, model: &Model, round: usize) -> Result<Preparation> {
    cfg.validate()?;
    match (cfg.rule, cfg.model_type) {
        (RuleSpec::None, _) => Ok(Preparation {
            prepared: Prepared::None,
            stats: SelectionStats::default(),
        }),
        (RuleSpec::Continuous, _) => Ok(Preparation {
            prepared: Prepared::Continuous,
            stats: SelectionStats::default(),
        }),
        (RuleSpec::Discrete(rule), ModelType::Mf) => matching_retrain_filter(ds, cfg, rule, model, round),
        (RuleSpec::Discrete(rule), ModelType::AttnSeq) => select_histories(ds, cfg, rule, model, round),
    }
}

fn select_histories(
    ds: &SplitDataset,
    cfg: &TrainConfig,
    rule: HeuristicRule,
    model: &Model,
    round: usize,
) -> Result<Preparation> {
    let neighbors = (rule == HeuristicRule::ReplaceOneNearest).then(|| NeighborIndex::from_model(model));
    let ctx = GenerateContext {
        num_items: ds.num_items(),
        neighbors: neighbors.as_ref(),
        limit: cfg.generation_limit,
        replacements_per_position: cfg.replacements_per_position,
    };
    let mut stats = SelectionStats::default();
    let mut out = Vec::new();
    for (idx, ex) in ds.train_examples().into_iter().enumerate() {
        let history = ds.history_of(ex.user, ex.position);
        let ex_seed = seed::derive(cfg.seed, &[stream::GENERATE, round as u64, idx as u64]);
        let candidates = generate(rule, &history, &ctx, ex_seed)?;
        let batch = select(
            model,
            ds,
            ex.user,
            &history,
            candidates,
            ex.item,
            cfg.k,
            cfg.max_selected,
            ex_seed,
        )?;
        stats.generated += batch.generated;
        stats.passed += batch.passed;
        stats.selected += batch.n();
        stats.constrained_examples += usize::from(batch.n() > 0);
        out.push(batch.counterfactuals);
    }
    Ok(Preparation {
        prepared: Prepared::Histories(out),
        stats,
    })
}

/// Apply `rule` to the training set, retrain frozen MF clones on the edited
/// data, and keep the edited-away targets the clone still ranks in the top-k.
///
/// Round `r` of `clone_rounds` edits, for every user, the item at position `r`
/// of a seeded shuffle of their train positives. Returns clone probabilities
/// per training example.
pub fn matching_retrain_filter(
    ds: &SplitDataset,
    cfg: &TrainConfig,
    rule: HeuristicRule,
    model: &Model,
    round: usize,
) -> Result<Preparation> {
    let evidence = clone_evidence(ds, cfg, rule, model, round)?;
    filter_clone_evidence(ds, cfg, &evidence)
}

/// One edited-away target as judged by its frozen clone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloneVerdict {
    pub user: UserId,
    pub item: ItemId,
    /// Rank of the target among its 101 selection candidates.
    pub rank: usize,
    pub probability: f64,
}

/// Clone verdicts of one preparation round in generation order. Independent of `k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CloneEvidence {
    pub verdicts: Vec<CloneVerdict>,
}

/// Train the clones of [`matching_retrain_filter`] and rank every eligible target.
pub fn clone_evidence(
    ds: &SplitDataset,
    cfg: &TrainConfig,
    rule: HeuristicRule,
    model: &Model,
    round: usize,
) -> Result<CloneEvidence> {
    if cfg.model_type != ModelType::Mf {
        return Err(Error::invalid(
            "the clone procedure applies to matching (mf) models only",
        ));
    }
    let neighbors = (rule == HeuristicRule::ReplaceOneNearest).then(|| NeighborIndex::from_model(model));
    let orders: Vec<Vec<ItemId>> = (0..ds.num_users())
        .map(|u| {
            let mut items = ds.train_positives(u).to_vec();
            items.shuffle(&mut seed::rng(cfg.seed, &[stream::CLONE, round as u64, u as u64]));
            items
        })
        .collect();

    let mut verdicts = Vec::new();
    let clone_cfg = TrainConfig {
        model_type: ModelType::Mf,
        rule: RuleSpec::None,
        ips: false,
        ..cfg.clone()
    };
    for r in 0..cfg.clone_rounds {
        let mut edit_rng = seed::rng(cfg.seed, &[stream::CLONE, round as u64, r as u64, stream::GENERATE]);
        let mut positives: Vec<Vec<ItemId>> = Vec::with_capacity(ds.num_users());
        let mut targets: Vec<Vec<ItemId>> = Vec::with_capacity(ds.num_users());
        for (u, order) in orders.iter().enumerate() {
            let original = ds.train_positives(u);
            let Some(&e) = order.get(r) else {
                positives.push(original.to_vec());
                targets.push(Vec::new());
                continue;
            };
            let without: Vec<ItemId> = original.iter().copied().filter(|&i| i != e).collect();
            let (edited, t) = match rule {
                HeuristicRule::DeleteOne => (without, vec![e]),
                HeuristicRule::KeepOne => (vec![e], original.iter().copied().filter(|&i| i != e).collect()),
                HeuristicRule::ReplaceOneRandom => {
                    if original.len() >= ds.num_items() {
                        (original.to_vec(), Vec::new())
                    } else {
                        let mut edited = without;
                        edited.push(sample_non_positive(original, ds.num_items(), &mut edit_rng));
                        (edited, vec![e])
                    }
                }
                HeuristicRule::ReplaceOneNearest => {
                    match neighbors.as_ref().and_then(|n| n.nearest_excluding(e, original)) {
                        Some(nn) => {
                            let mut edited = without;
                            edited.push(nn);
                            (edited, vec![e])
                        }
                        None => (original.to_vec(), Vec::new()),
                    }
                }
            };
            let mut edited = edited;
            edited.sort_unstable();
            let t = if edited.is_empty() { Vec::new() } else { t };
            positives.push(edited);
            targets.push(t);
        }

        let clone = train_clone(ds, &clone_cfg, positives, &[round as u64, r as u64])?;
        let sel_seed = seed::derive(cfg.seed, &[stream::SELECT_NEGATIVES, round as u64, r as u64]);
        for (u, ts) in targets.iter().enumerate() {
            for &v in ts {
                let set = selection_candidates(ds, u, v, sel_seed)?;
                verdicts.push(CloneVerdict {
                    user: u,
                    item: v,
                    rank: target_rank(&clone, u, &[], &set),
                    probability: logistic(clone.score_unchecked(u, &[], v)),
                });
            }
        }
    }
    Ok(CloneEvidence { verdicts })
}

/// Keep verdicts ranked within `cfg.k` and attach them to their training examples.
pub fn filter_clone_evidence(ds: &SplitDataset, cfg: &TrainConfig, evidence: &CloneEvidence) -> Result<Preparation> {
    cfg.validate()?;
    let examples = ds.train_examples();
    let mut slot: HashMap<(UserId, ItemId), Vec<usize>> = HashMap::new();
    for (idx, e) in examples.iter().enumerate() {
        slot.entry((e.user, e.item)).or_default().push(idx);
    }
    let mut probs: Vec<Vec<f64>> = vec![Vec::new(); examples.len()];
    let mut stats = SelectionStats {
        generated: evidence.verdicts.len(),
        ..Default::default()
    };
    for v in evidence.verdicts.iter().filter(|v| v.rank <= cfg.k) {
        stats.passed += 1;
        for &idx in slot.get(&(v.user, v.item)).into_iter().flatten() {
            if probs[idx].len() < cfg.max_selected {
                probs[idx].push(v.probability);
            }
        }
    }
    stats.selected = probs.iter().map(Vec::len).sum();
    stats.constrained_examples = probs.iter().filter(|p| !p.is_empty()).count();
    Ok(Preparation {
        prepared: Prepared::Clone(probs),
        stats,
    })
}

fn train_clone(ds: &SplitDataset, cfg: &TrainConfig, positives: Vec<Vec<ItemId>>, path: &[u64]) -> Result<Model> {
    let examples = positives
        .iter()
        .enumerate()
        .flat_map(|(u, items)| {
            items.iter().map(move |&item| Example {
                user: u,
                item,
                history: Vec::new(),
            })
        })
        .collect();
    let data = BprData {
        examples,
        positives,
        num_items: ds.num_items(),
    };
    let init_seed = seed::derive(cfg.seed, &[&[stream::CLONE], path, &[stream::INIT]].concat());
    let mut clone = Model::new(ModelType::Mf, ds.num_users(), ds.num_items(), cfg.dim, init_seed)?;
    for epoch in 1..=cfg.pretrain_epochs {
        let rng_path = [&[stream::CLONE], path, &[stream::EPOCH, epoch as u64]].concat();
        let run = EpochRun {
            cfg,
            ips: None,
            prepared: &Prepared::None,
            epoch,
            rng_path: &rng_path,
        };
        run_epoch(&mut clone, &data, &run)?;
    }
    Ok(clone)
}

/// Phase two: continue from `phase_one` for the remaining epochs.
///
/// `initial` is the preparation computed from the phase-one model; when absent
/// it is computed here. With `refresh_interval > 0` the preparation is rebuilt
/// from the live model every `refresh_interval` epochs.
pub fn finetune(
    ds: &SplitDataset,
    cfg: &TrainConfig,
    phase_one: PhaseOne,
    initial: Option<Preparation>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let data = check_trainable(ds)?;
    let ips = propensities(ds, cfg)?;
    let PhaseOne { mut model, mut trace } = phase_one;
    let mut prep = if cfg.constrained() {
        Some(match initial {
            Some(p) => p,
            None => prepare(ds, cfg, &model, 0)?,
        })
    } else {
        None
    };
    if let Some(p) = &prep {
        log::info!(
            "counterfactuals: {} generated, {} passed top-{}, {} kept over {} examples",
            p.stats.generated,
            p.stats.passed,
            cfg.k,
            p.stats.selected,
            p.stats.constrained_examples
        );
    }
    let none = Preparation {
        prepared: Prepared::None,
        stats: SelectionStats::default(),
    };
    for (i, epoch) in (cfg.pretrain_epochs + 1..=cfg.epochs).enumerate() {
        if i > 0 && cfg.refresh_interval > 0 && i % cfg.refresh_interval == 0 && prep.is_some() {
            prep = Some(prepare(ds, cfg, &model, i / cfg.refresh_interval)?);
        }
        let path = main_epoch_path(epoch);
        let run = EpochRun {
            cfg,
            ips: ips.as_ref(),
            prepared: &prep.as_ref().unwrap_or(&none).prepared,
            epoch,
            rng_path: &path,
        };
        trace.push(run_epoch(&mut model, &data, &run)?);
    }
    Ok(TrainedModel {
        model,
        config: cfg.clone(),
        trace,
        selection: prep.map(|p| p.stats),
    })
}

/// Both phases with the configured schedule.
pub fn train(ds: &SplitDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let phase_one = pretrain(ds, cfg)?;
    finetune(ds, cfg, phase_one, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;
    use proptest::prelude::*;

    #[test]
    fn bpr_loss_values() {
        assert!((bpr_step_loss(1.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let oracle = -(1.0 / (1.0 + (-2.0f64).exp())).ln();
        assert!((bpr_step_loss(2.0, 0.0) - oracle).abs() < 1e-15);
        assert!((bpr_step_loss(2.0, 0.0) - 0.126928).abs() < 5e-7);
        assert!(bpr_step_loss(1e9, 0.0) < 1e-12);
    }

    #[test]
    fn discrete_hinge_values() {
        assert_eq!(constraint_loss_discrete(0.5, &[0.6, 0.3], 0.5), 0.0);
        assert!((constraint_loss_discrete(0.5, &[0.9, 0.1], 0.5) - 0.3).abs() < 1e-12);
        assert_eq!(constraint_loss_discrete(0.5, &[], 0.0), 0.0);
    }

    #[test]
    fn invalid_rule_message() {
        let err = TrainConfig::from_json(r#"{"rule": "R2"}"#).unwrap_err().to_string();
        assert!(err.contains("invalid rule 'R2'"), "{err}");
        assert!(err.contains(RULE_CHOICES), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_json(r#"{"omgea": 0.1}"#).is_err());
    }

    #[test]
    fn config_round_trip_is_idempotent() {
        let cfg = TrainConfig {
            rule: RuleSpec::Discrete(HeuristicRule::ReplaceOneNearest),
            omega: 0.5,
            ..Default::default()
        };
        let text = cfg.to_json().unwrap();
        let back = TrainConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn config_invariants() {
        for bad in [
            r#"{"omega": -1}"#,
            r#"{"epsilon": -0.1}"#,
            r#"{"epsilon2": -1}"#,
            r#"{"mc_samples": 0}"#,
            r#"{"learning_rate": 0}"#,
            r#"{"k": 102}"#,
        ] {
            assert!(TrainConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    fn toy() -> SplitDataset {
        let mut v = Vec::new();
        for u in 0..12usize {
            for t in 0..8usize {
                let item = (u * 3 + t * 5) % 150;
                let rating = if (u + t) % 4 == 0 { 2 } else { 5 };
                v.push(Interaction::rated(u, item, rating, t as i64).unwrap());
            }
        }
        let log = crate::dataset::RatingLog::new(v, 12, 150).unwrap();
        crate::dataset::leave_one_out_split(&log, 10).unwrap()
    }

    fn small_cfg(model_type: ModelType, rule: RuleSpec) -> TrainConfig {
        TrainConfig {
            model_type,
            rule,
            dim: 8,
            epochs: 6,
            pretrain_epochs: 3,
            learning_rate: 0.05,
            k: 101,
            ..Default::default()
        }
    }

    #[test]
    fn zero_omega_matches_base_training() {
        let ds = toy();
        for (t, rule) in [
            (ModelType::Mf, RuleSpec::Discrete(HeuristicRule::DeleteOne)),
            (ModelType::AttnSeq, RuleSpec::Discrete(HeuristicRule::ReplaceOneRandom)),
            (ModelType::AttnSeq, RuleSpec::Continuous),
        ] {
            let base = train(&ds, &small_cfg(t, RuleSpec::None)).unwrap();
            let zero = train(
                &ds,
                &TrainConfig {
                    omega: 0.0,
                    ..small_cfg(t, rule)
                },
            )
            .unwrap();
            assert_eq!(base.model.to_checkpoint().unwrap(), zero.model.to_checkpoint().unwrap());
        }
    }

    #[test]
    fn huge_epsilon_keeps_constraint_at_zero() {
        let ds = toy();
        for (t, rule) in [
            (ModelType::Mf, RuleSpec::Discrete(HeuristicRule::KeepOne)),
            (ModelType::AttnSeq, RuleSpec::Discrete(HeuristicRule::DeleteOne)),
            (ModelType::Mf, RuleSpec::Continuous),
        ] {
            let cfg = TrainConfig {
                epsilon: 1e9,
                omega: 1.0,
                ..small_cfg(t, rule)
            };
            let trained = train(&ds, &cfg).unwrap();
            assert!(trained
                .trace
                .iter()
                .all(|e| e.constraint_loss == 0.0 && e.constraint_max == 0.0));
            let base = train(&ds, &small_cfg(t, RuleSpec::None)).unwrap();
            assert_eq!(trained.model, base.model);
        }
    }

    #[test]
    fn constraint_is_active_when_threshold_is_zero() {
        let ds = toy();
        let cfg = TrainConfig {
            epsilon: 0.0,
            omega: 1.0,
            ..small_cfg(ModelType::AttnSeq, RuleSpec::Discrete(HeuristicRule::DeleteOne))
        };
        let trained = train(&ds, &cfg).unwrap();
        assert!(trained.trace[cfg.pretrain_epochs].constraint_loss > 0.0);
        assert!(trained.selection.unwrap().selected > 0);
    }

    #[test]
    fn continuous_zero_radius_is_zero() {
        let ds = toy();
        let m = Model::new(ModelType::AttnSeq, ds.num_users(), ds.num_items(), 8, 3).unwrap();
        let l = constraint_loss_continuous(&m, 0, &[1, 2], 3, 0.0, 0.0, 10, 5).unwrap();
        assert_eq!(l, 0.0);
        let l = constraint_loss_continuous(&m, 0, &[1, 2], 3, 1e9, 5.0, 10, 5).unwrap();
        assert_eq!(l, 0.0);
        let a = constraint_loss_continuous(&m, 0, &[1, 2], 3, 0.0, 5.0, 10, 5).unwrap();
        let b = constraint_loss_continuous(&m, 0, &[1, 2], 3, 0.0, 5.0, 10, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clone_filter_without_selection_keeps_most_targets() {
        let ds = toy();
        let cfg = small_cfg(ModelType::Mf, RuleSpec::Discrete(HeuristicRule::DeleteOne));
        let m = pretrain(&ds, &cfg).unwrap().model;
        let prep = matching_retrain_filter(&ds, &cfg, HeuristicRule::DeleteOne, &m, 0).unwrap();
        assert!(prep.stats.generated > 0);
        assert!(prep.stats.passed as f64 >= 0.9 * prep.stats.generated as f64);
    }

    #[test]
    fn continuous_gradient_matches_finite_differences() {
        let ds = toy();
        for t in [ModelType::Mf, ModelType::AttnSeq] {
            let mut m = Model::new(t, ds.num_users(), ds.num_items(), 4, 7).unwrap();
            let mut rng = seed::rng(2, &[]);
            let offsets = sample_offsets(4, 2.0, 5, &mut rng);
            let history = [3, 9, 4];
            let mut g = Gradient::new(4);
            let l = continuous_term(&m, 1, &history, 9, 0.0, &offsets, 1.0, Some(&mut g));
            assert!(l > 0.0);
            let analytic = g.to_dense(&m);
            let h = 1e-6;
            let mut err = 0.0f64;
            let mut norm = 0.0f64;
            for (i, a) in analytic.iter().enumerate() {
                let orig = *m.param_mut(i);
                *m.param_mut(i) = orig + h;
                let up = continuous_term(&m, 1, &history, 9, 0.0, &offsets, 1.0, None);
                *m.param_mut(i) = orig - h;
                let down = continuous_term(&m, 1, &history, 9, 0.0, &offsets, 1.0, None);
                *m.param_mut(i) = orig;
                let num = (up - down) / (2.0 * h);
                err += (a - num).powi(2);
                norm += a * a + num * num;
            }
            assert!(err.sqrt() / norm.sqrt() < 1e-4, "{t}: {}", err.sqrt() / norm.sqrt());
        }
    }

    #[test]
    fn inactive_hinge_leaves_update_unchanged() {
        let ds = toy();
        let base_cfg = small_cfg(ModelType::AttnSeq, RuleSpec::None);
        let phase_one = pretrain(&ds, &base_cfg).unwrap();
        let cfg = TrainConfig {
            epsilon: 1e9,
            omega: 1.0,
            ..small_cfg(ModelType::AttnSeq, RuleSpec::Discrete(HeuristicRule::DeleteOne))
        };
        let a = finetune(&ds, &cfg, phase_one.clone(), None).unwrap();
        let b = finetune(&ds, &base_cfg, phase_one, None).unwrap();
        assert_eq!(a.model, b.model);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn hinge_is_non_negative(p_real in 0.0f64..=1.0,
                                 p_cf in prop::collection::vec(0.0f64..=1.0, 0..10),
                                 eps in 0.0f64..3.0) {
            let l = constraint_loss_discrete(p_real, &p_cf, eps);
            prop_assert!(l >= 0.0);
            let dev: f64 = p_cf.iter().map(|p| (p - p_real).abs()).sum();
            if dev <= eps { prop_assert_eq!(l, 0.0); }
        }

        #[test]
        fn rule_codes_round_trip(code in prop::sample::select(vec!["none", "K1", "D1", "R1r", "R1n", "C"])) {
            let r: RuleSpec = code.parse().unwrap();
            prop_assert_eq!(r.code(), code);
        }
    }
}
