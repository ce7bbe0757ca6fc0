//! Grid search with validation-based model selection.
//!
//! Grid points are expanded in a fixed key order (rule, omega, epsilon,
//! epsilon2, k, learning_rate, l2_lambda), first key outermost. Phase-one
//! models and counterfactual preparations are shared between points that only
//! differ in phase-two settings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Partition, SplitDataset};
use crate::eval::{evaluate, report_csv, MetricsReport, ReportRow};
use crate::models::{Model, ModelType};
use crate::training::{
    clone_evidence, filter_clone_evidence, finetune, prepare, pretrain, CloneEvidence, PhaseOne, Preparation, RuleSpec,
    TrainConfig,
};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Vec<RuleSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon2: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_lambda: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub base: TrainConfig,
    pub grid: Grid,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let lens = [
            ("rule", g.rule.as_ref().map(Vec::len)),
            ("omega", g.omega.as_ref().map(Vec::len)),
            ("epsilon", g.epsilon.as_ref().map(Vec::len)),
            ("epsilon2", g.epsilon2.as_ref().map(Vec::len)),
            ("k", g.k.as_ref().map(Vec::len)),
            ("learning_rate", g.learning_rate.as_ref().map(Vec::len)),
            ("l2_lambda", g.l2_lambda.as_ref().map(Vec::len)),
        ];
        if let Some((name, _)) = lens.iter().find(|(_, l)| *l == Some(0)) {
            return Err(Error::invalid(format!("grid for {name} is empty")));
        }
        self.base.validate()?;
        for p in self.points() {
            p.config.validate()?;
        }
        Ok(())
    }

    /// The cartesian product of the grid applied to `base`.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut points = vec![GridPoint {
            config: self.base.clone(),
            label: Vec::new(),
        }];
        fn expand<T: Clone + ToString>(
            points: Vec<GridPoint>,
            name: &str,
            values: &Option<Vec<T>>,
            set: impl Fn(&mut TrainConfig, T),
        ) -> Vec<GridPoint> {
            let Some(values) = values else { return points };
            let mut out = Vec::with_capacity(points.len() * values.len());
            for p in points {
                for v in values {
                    let mut q = p.clone();
                    q.label.push(format!("{name}={}", v.to_string()));
                    set(&mut q.config, v.clone());
                    out.push(q);
                }
            }
            out
        }
        let g = &self.grid;
        points = expand(points, "rule", &g.rule, |c, v| c.rule = v);
        points = expand(points, "omega", &g.omega, |c, v| c.omega = v);
        points = expand(points, "epsilon", &g.epsilon, |c, v| c.epsilon = v);
        points = expand(points, "epsilon2", &g.epsilon2, |c, v| c.epsilon2 = v);
        points = expand(points, "k", &g.k, |c, v| c.k = v);
        points = expand(points, "learning_rate", &g.learning_rate, |c, v| c.learning_rate = v);
        points = expand(points, "l2_lambda", &g.l2_lambda, |c, v| c.l2_lambda = v);
        points
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub config: TrainConfig,
    pub label: Vec<String>,
}

#[derive(Clone, Debug)]
pub enum PointOutcome {
    Ok {
        validation: MetricsReport,
        test: MetricsReport,
    },
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub point: GridPoint,
    pub outcome: PointOutcome,
}

impl SweepRow {
    pub fn validation_ndcg(&self) -> Option<f64> {
        match &self.outcome {
            PointOutcome::Ok { validation, .. } => Some(validation.ndcg_at_10),
            PointOutcome::Failed(_) => None,
        }
    }

    pub fn test(&self) -> Option<&MetricsReport> {
        match &self.outcome {
            PointOutcome::Ok { test, .. } => Some(test),
            PointOutcome::Failed(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Index of the point with the best validation nDCG@10.
    pub best: usize,
    /// Base configuration (rule none) trained with the sweep's base settings.
    pub base_test: MetricsReport,
    /// Best point per rule present in the grid, in first-seen order.
    pub per_rule: Vec<(RuleSpec, usize)>,
}

/// Config key of everything phase one depends on.
fn phase_one_key(cfg: &TrainConfig) -> String {
    let normalized = TrainConfig {
        rule: RuleSpec::None,
        k: 0,
        omega: 0.0,
        epsilon: 0.0,
        epsilon2: 0.0,
        mc_samples: 0,
        epochs: 0,
        refresh_interval: 0,
        alpha: 0.0,
        generation_limit: 0,
        replacements_per_position: 0,
        max_selected: 0,
        clone_rounds: 0,
        ..cfg.clone()
    };
    format!("{normalized:?}")
}

fn evidence_key(cfg: &TrainConfig) -> String {
    format!("{}|{}|{}", phase_one_key(cfg), cfg.rule, cfg.clone_rounds)
}

fn preparation_key(cfg: &TrainConfig) -> String {
    format!(
        "{}|{}|{}|{}|{}|{}|{}",
        phase_one_key(cfg),
        cfg.rule,
        cfg.k,
        cfg.generation_limit,
        cfg.replacements_per_position,
        cfg.max_selected,
        cfg.clone_rounds
    )
}

/// `cfg` with the fields its rule and model ignore zeroed.
fn normalized(cfg: &TrainConfig) -> TrainConfig {
    let mut n = TrainConfig {
        alpha: 0.0,
        ..cfg.clone()
    };
    match cfg.rule {
        RuleSpec::None => {}
        RuleSpec::Discrete(_) => {
            n.epsilon2 = 0.0;
            n.mc_samples = 0;
            match cfg.model_type {
                ModelType::Mf => {
                    n.generation_limit = 0;
                    n.replacements_per_position = 0;
                }
                ModelType::AttnSeq => n.clone_rounds = 0,
            }
        }
        RuleSpec::Continuous => {
            n.k = 0;
            n.generation_limit = 0;
            n.replacements_per_position = 0;
            n.max_selected = 0;
            n.clone_rounds = 0;
        }
    }
    n
}

/// Key of the trained model; unconstrained configurations collapse onto the base.
fn effective_key(cfg: &TrainConfig) -> String {
    if cfg.constrained() {
        format!("{:?}", normalized(cfg))
    } else {
        format!(
            "{:?}",
            TrainConfig {
                rule: RuleSpec::None,
                omega: 0.0,
                ..phase_two_neutral(cfg)
            }
        )
    }
}

fn phase_two_neutral(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        k: 0,
        epsilon: 0.0,
        epsilon2: 0.0,
        mc_samples: 0,
        refresh_interval: 0,
        alpha: 0.0,
        generation_limit: 0,
        replacements_per_position: 0,
        max_selected: 0,
        clone_rounds: 0,
        ..cfg.clone()
    }
}

/// Key shared by configurations differing only in `omega` and `epsilon`.
fn hinge_key(cfg: &TrainConfig) -> String {
    format!(
        "{:?}",
        TrainConfig {
            omega: 1.0,
            epsilon: 0.0,
            ..normalized(cfg)
        }
    )
}

/// Trains configurations while sharing phase-one models and preparations.
///
/// A constrained run whose hinge never fires follows the base trajectory
/// exactly. So does every run with another `omega` or a larger `epsilon`, and
/// those reuse the base model.
#[derive(Default)]
pub struct TrainCache {
    phase_one: HashMap<String, PhaseOne>,
    prepared: HashMap<String, Preparation>,
    evidence: HashMap<String, CloneEvidence>,
    trained: HashMap<String, Model>,
    inactive: HashMap<String, f64>,
}

impl TrainCache {
    pub fn train(&mut self, ds: &SplitDataset, cfg: &TrainConfig) -> Result<Model> {
        let key = effective_key(cfg);
        if let Some(m) = self.trained.get(&key) {
            return Ok(m.clone());
        }
        if cfg.constrained() && self.inactive.get(&hinge_key(cfg)).is_some_and(|&e| cfg.epsilon >= e) {
            log::info!("hinge inactive at a smaller epsilon; reusing the base model");
            return self.train(
                ds,
                &TrainConfig {
                    omega: 0.0,
                    ..cfg.clone()
                },
            );
        }
        let p1_key = phase_one_key(cfg);
        if !self.phase_one.contains_key(&p1_key) {
            self.phase_one.insert(p1_key.clone(), pretrain(ds, cfg)?);
        }
        let phase_one = self.phase_one[&p1_key].clone();
        let prep = match (cfg.constrained(), cfg.rule, cfg.model_type) {
            (false, _, _) => None,
            (true, RuleSpec::Discrete(rule), ModelType::Mf) => {
                let ek = evidence_key(cfg);
                if !self.evidence.contains_key(&ek) {
                    let ev = clone_evidence(ds, cfg, rule, &phase_one.model, 0)?;
                    self.evidence.insert(ek.clone(), ev);
                }
                Some(filter_clone_evidence(ds, cfg, &self.evidence[&ek])?)
            }
            (true, _, _) => {
                let pk = preparation_key(cfg);
                if !self.prepared.contains_key(&pk) {
                    self.prepared.insert(pk.clone(), prepare(ds, cfg, &phase_one.model, 0)?);
                }
                Some(self.prepared[&pk].clone())
            }
        };
        let trained = finetune(ds, cfg, phase_one, prep)?;
        let phase_two = &trained.trace[cfg.pretrain_epochs.min(trained.trace.len())..];
        if cfg.constrained() && phase_two.iter().all(|t| t.constraint_max == 0.0) {
            let e = self.inactive.entry(hinge_key(cfg)).or_insert(f64::INFINITY);
            *e = e.min(cfg.epsilon);
        }
        self.trained.insert(key, trained.model.clone());
        Ok(trained.model)
    }
}

fn better(candidate: f64, incumbent: Option<f64>) -> bool {
    incumbent.is_none_or(|b| candidate > b)
}

/// Train and evaluate every grid point; `eval_seed` fixes evaluation negatives.
pub fn run_sweep(ds: &SplitDataset, cfg: &SweepConfig, eval_seed: u64) -> Result<SweepOutcome> {
    cfg.validate()?;
    let mut cache = TrainCache::default();
    let mut rows = Vec::new();
    for (i, point) in cfg.points().into_iter().enumerate() {
        log::info!("sweep point {i}: {}", point.label.join(" "));
        let outcome = cache.train(ds, &point.config).and_then(|model| {
            Ok(PointOutcome::Ok {
                validation: evaluate(&model, ds, Partition::Validation, eval_seed)?,
                test: evaluate(&model, ds, Partition::Test, eval_seed)?,
            })
        });
        let outcome = outcome.unwrap_or_else(|e| {
            log::warn!("sweep point {i} failed: {e}");
            PointOutcome::Failed(e.to_string())
        });
        rows.push(SweepRow { point, outcome });
    }

    let mut best: Option<usize> = None;
    let mut per_rule: Vec<(RuleSpec, usize)> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let Some(v) = row.validation_ndcg() else { continue };
        if better(v, best.and_then(|b| rows[b].validation_ndcg())) {
            best = Some(i);
        }
        let rule = row.point.config.rule;
        match per_rule.iter_mut().find(|(r, _)| *r == rule) {
            Some((_, b)) => {
                if better(v, rows[*b].validation_ndcg()) {
                    *b = i;
                }
            }
            None => per_rule.push((rule, i)),
        }
    }
    let best = best.ok_or_else(|| Error::invalid("every sweep point failed"))?;
    let base_cfg = TrainConfig {
        rule: RuleSpec::None,
        ..cfg.base.clone()
    };
    let base_model = cache.train(ds, &base_cfg)?;
    let base_test = evaluate(&base_model, ds, Partition::Test, eval_seed)?;
    Ok(SweepOutcome {
        rows,
        best,
        base_test,
        per_rule,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(outcome: &SweepOutcome) -> String {
    let mut out = String::from(
        "index,rule,omega,epsilon,epsilon2,k,learning_rate,l2_lambda,status,\
         val_ndcg@10,val_hit@1,test_ndcg@10,test_hit@1,error\n",
    );
    for (i, row) in outcome.rows.iter().enumerate() {
        let c = &row.point.config;
        let _ = write!(
            out,
            "{i},{},{},{},{},{},{},{},",
            c.rule, c.omega, c.epsilon, c.epsilon2, c.k, c.learning_rate, c.l2_lambda
        );
        let _ = match &row.outcome {
            PointOutcome::Ok { validation, test } => writeln!(
                out,
                "ok,{:.6},{:.6},{:.6},{:.6},",
                validation.ndcg_at_10, validation.hit_at_1, test.ndcg_at_10, test.hit_at_1
            ),
            PointOutcome::Failed(e) => writeln!(out, "failed,,,,,{}", csv_field(e)),
        };
    }
    out
}

#[derive(Serialize)]
struct Scores {
    #[serde(rename = "ndcg@10")]
    ndcg_at_10: f64,
    #[serde(rename = "hit@1")]
    hit_at_1: f64,
}

#[derive(Serialize)]
struct Best<'a> {
    index: usize,
    point: String,
    config: &'a TrainConfig,
    validation: Scores,
    test: Scores,
}

pub fn best_json(outcome: &SweepOutcome) -> Result<String> {
    let row = &outcome.rows[outcome.best];
    let PointOutcome::Ok { validation, test } = &row.outcome else {
        return Err(Error::invalid("best point has no metrics"));
    };
    let best = Best {
        index: outcome.best,
        point: row.point.label.join(" "),
        config: &row.point.config,
        validation: Scores {
            ndcg_at_10: validation.ndcg_at_10,
            hit_at_1: validation.hit_at_1,
        },
        test: Scores {
            ndcg_at_10: test.ndcg_at_10,
            hit_at_1: test.hit_at_1,
        },
    };
    Ok(serde_json::to_string_pretty(&best)? + "\n")
}

/// Base row plus the validation-selected point of every rule.
pub fn sweep_report(outcome: &SweepOutcome) -> String {
    let base = ReportRow {
        variant: "base".into(),
        ndcg_at_10: outcome.base_test.ndcg_at_10,
        hit_at_1: outcome.base_test.hit_at_1,
    };
    let rows: Vec<ReportRow> = outcome
        .per_rule
        .iter()
        .filter(|(r, _)| *r != RuleSpec::None)
        .filter_map(|&(rule, i)| {
            outcome.rows[i].test().map(|t| ReportRow {
                variant: format!("ccf_{rule}"),
                ndcg_at_10: t.ndcg_at_10,
                hit_at_1: t.hit_at_1,
            })
        })
        .collect();
    report_csv(&base, &rows)
}

/// Write `sweep.csv`, `best.json` and `report.csv` into `dir`.
pub fn write_outputs(dir: &Path, outcome: &SweepOutcome) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("sweep.csv", sweep_csv(outcome)),
        ("best.json", best_json(outcome)?),
        ("report.csv", sweep_report(outcome)),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
