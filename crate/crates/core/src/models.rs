//! Base recommenders with analytic gradients.
//!
//! Two model families share one parameter layout:
//!
//! - `Mf`: `score = P[u]·Q[v] + b_u + b_v + b`, history ignored.
//! - `AttnSeq`: scaled dot-product attention over the history keyed on its last
//!   item, `score = P[u]·Q[v] + h·Q[v] + b_v + b`.
//!
//! Each model exposes a *history representation*: `P[u]` for MF and the pooled
//! vector `h` for AttnSeq. Continuous counterfactuals perturb this vector.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ItemId, UserId};
use crate::seed::{self, stream};
use crate::{Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const INIT_STD: f64 = 0.1;
pub const LOGIT_CLAMP: f64 = 30.0;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Logistic function with the argument clamped to `[-30, 30]`.
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelType {
    #[serde(rename = "mf")]
    Mf,
    #[serde(rename = "attnseq")]
    AttnSeq,
}

impl ModelType {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelType::Mf => "mf",
            ModelType::AttnSeq => "attnseq",
        }
    }
}

impl fmt::Display for ModelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(ModelType::Mf),
            "attnseq" => Ok(ModelType::AttnSeq),
            other => Err(Error::invalid(format!(
                "unknown model type {other:?}; expected mf or attnseq"
            ))),
        }
    }
}

/// Row-major `rows × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Embedding {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Embedding {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::invalid(format!(
                    "embedding row {i} has length {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Embedding {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// History input of a scoring request.
#[derive(Clone, Copy, Debug)]
pub enum HistoryInput<'a> {
    Items(&'a [ItemId]),
    /// A precomputed (possibly perturbed) history representation.
    Representation(&'a [f64]),
}

#[derive(Clone, Copy, Debug)]
pub struct ScoreRequest<'a> {
    pub user: UserId,
    pub history: HistoryInput<'a>,
    pub item: ItemId,
}

/// Sparse gradient over the rows touched by a set of requests.
#[derive(Clone, Debug, Default)]
pub struct Gradient {
    dim: usize,
    user_rows: Vec<(usize, Vec<f64>)>,
    item_rows: Vec<(usize, Vec<f64>)>,
    user_bias: Vec<(usize, f64)>,
    item_bias: Vec<(usize, f64)>,
    global_bias: f64,
    spare: Vec<Vec<f64>>,
}

fn row_entry<'a>(
    rows: &'a mut Vec<(usize, Vec<f64>)>,
    spare: &mut Vec<Vec<f64>>,
    id: usize,
    dim: usize,
) -> &'a mut [f64] {
    let pos = match rows.iter().position(|(r, _)| *r == id) {
        Some(p) => p,
        None => {
            let row = match spare.pop() {
                Some(mut v) => {
                    v.iter_mut().for_each(|x| *x = 0.0);
                    v
                }
                None => vec![0.0; dim],
            };
            rows.push((id, row));
            rows.len() - 1
        }
    };
    &mut rows[pos].1
}

fn bias_entry(biases: &mut Vec<(usize, f64)>, id: usize) -> &mut f64 {
    let pos = match biases.iter().position(|(r, _)| *r == id) {
        Some(p) => p,
        None => {
            biases.push((id, 0.0));
            biases.len() - 1
        }
    };
    &mut biases[pos].1
}

impl Gradient {
    pub fn new(dim: usize) -> Self {
        Gradient {
            dim,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.user_rows.is_empty()
            && self.item_rows.is_empty()
            && self.user_bias.is_empty()
            && self.item_bias.is_empty()
            && self.global_bias == 0.0
    }

    pub fn clear(&mut self) {
        let spare = &mut self.spare;
        spare.extend(self.user_rows.drain(..).map(|(_, v)| v));
        spare.extend(self.item_rows.drain(..).map(|(_, v)| v));
        self.user_bias.clear();
        self.item_bias.clear();
        self.global_bias = 0.0;
    }

    pub fn user_row(&mut self, user: UserId) -> &mut [f64] {
        row_entry(&mut self.user_rows, &mut self.spare, user, self.dim)
    }

    pub fn item_row(&mut self, item: ItemId) -> &mut [f64] {
        row_entry(&mut self.item_rows, &mut self.spare, item, self.dim)
    }

    pub fn user_bias(&mut self, user: UserId) -> &mut f64 {
        bias_entry(&mut self.user_bias, user)
    }

    pub fn item_bias(&mut self, item: ItemId) -> &mut f64 {
        bias_entry(&mut self.item_bias, item)
    }

    pub fn global_bias(&mut self) -> &mut f64 {
        &mut self.global_bias
    }

    /// Add `2·lambda·θ` for every parameter touched so far.
    pub fn add_l2(&mut self, model: &Model, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for (u, g) in &mut self.user_rows {
            axpy(2.0 * lambda, model.user.row(*u), g);
        }
        for (v, g) in &mut self.item_rows {
            axpy(2.0 * lambda, model.item.row(*v), g);
        }
        for (u, g) in &mut self.user_bias {
            *g += 2.0 * lambda * model.user_bias[*u];
        }
        for (v, g) in &mut self.item_bias {
            *g += 2.0 * lambda * model.item_bias[*v];
        }
    }

    /// Dense vector in [`Model::param`] layout.
    pub fn to_dense(&self, model: &Model) -> Vec<f64> {
        let mut out = vec![0.0; model.param_count()];
        let d = model.dim;
        let items_at = model.user.data.len();
        let ub_at = items_at + model.item.data.len();
        let ib_at = ub_at + model.user_bias.len();
        for (u, g) in &self.user_rows {
            axpy(1.0, g, &mut out[u * d..(u + 1) * d]);
        }
        for (v, g) in &self.item_rows {
            axpy(1.0, g, &mut out[items_at + v * d..items_at + (v + 1) * d]);
        }
        for (u, g) in &self.user_bias {
            out[ub_at + u] += g;
        }
        for (v, g) in &self.item_bias {
            out[ib_at + v] += g;
        }
        *out.last_mut().unwrap() += self.global_bias;
        out
    }
}

/// Scores candidate items for a user and history.
pub trait Scorer {
    fn name(&self) -> &str;

    fn num_items(&self) -> usize;

    /// Scores of `candidates`, in order.
    fn score_candidates(&self, user: UserId, history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>>;
}

/// A trained or freshly initialised recommender.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    model_type: ModelType,
    dim: usize,
    pub user: Embedding,
    pub item: Embedding,
    /// Empty for AttnSeq.
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub global_bias: f64,
}

/// Forward state of the attention pooling.
struct Pooling {
    weights: Vec<f64>,
    h: Vec<f64>,
}

impl Model {
    /// Embeddings ~ Normal(0, 0.1²), biases zero.
    pub fn new(model_type: ModelType, num_users: usize, num_items: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if num_users == 0 || num_items == 0 {
            return Err(Error::invalid("model needs at least one user and one item"));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut rng = seed::rng(seed, &[stream::INIT]);
        let mut user = Embedding::zeros(num_users, dim);
        let mut item = Embedding::zeros(num_items, dim);
        for x in user.data.iter_mut().chain(item.data.iter_mut()) {
            *x = normal.sample(&mut rng);
        }
        let user_bias = match model_type {
            ModelType::Mf => vec![0.0; num_users],
            ModelType::AttnSeq => Vec::new(),
        };
        Ok(Model {
            model_type,
            dim,
            user,
            item,
            user_bias,
            item_bias: vec![0.0; num_items],
            global_bias: 0.0,
        })
    }

    pub fn model_type(&self) -> ModelType {
        self.model_type
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_users(&self) -> usize {
        self.user.rows
    }

    pub fn num_items(&self) -> usize {
        self.item.rows
    }

    fn check_user(&self, user: UserId) -> Result<()> {
        if user >= self.num_users() {
            return Err(Error::invalid(format!(
                "user {user} out of range (model has {} users)",
                self.num_users()
            )));
        }
        Ok(())
    }

    fn check_items(&self, items: &[ItemId]) -> Result<()> {
        if let Some(&v) = items.iter().find(|&&v| v >= self.num_items()) {
            return Err(Error::invalid(format!(
                "item {v} out of range (model has {} items)",
                self.num_items()
            )));
        }
        Ok(())
    }

    fn check_request(&self, req: &ScoreRequest) -> Result<()> {
        self.check_user(req.user)?;
        self.check_items(&[req.item])?;
        match req.history {
            HistoryInput::Items(h) => self.check_items(h),
            HistoryInput::Representation(r) if r.len() != self.dim => Err(Error::invalid(format!(
                "history representation has length {}, expected {}",
                r.len(),
                self.dim
            ))),
            HistoryInput::Representation(_) => Ok(()),
        }
    }

    fn pool(&self, history: &[ItemId]) -> Pooling {
        let mut h = vec![0.0; self.dim];
        let Some(&last) = history.last() else {
            return Pooling { weights: Vec::new(), h };
        };
        let key = self.item.row(last);
        let scale = (self.dim as f64).sqrt();
        let logits: Vec<f64> = history.iter().map(|&i| dot(self.item.row(i), key) / scale).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logits.iter().map(|e| (e - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= z;
        }
        for (&i, &a) in history.iter().zip(&weights) {
            axpy(a, self.item.row(i), &mut h);
        }
        Pooling { weights, h }
    }

    /// `P[u]` for MF, the attention-pooled vector for AttnSeq.
    pub fn representation(&self, user: UserId, history: &[ItemId]) -> Vec<f64> {
        match self.model_type {
            ModelType::Mf => self.user.row(user).to_vec(),
            ModelType::AttnSeq => self.pool(history).h,
        }
    }

    /// [`Model::representation`] written into a reusable buffer.
    pub(crate) fn representation_into(&self, user: UserId, history: &[ItemId], out: &mut Vec<f64>) {
        out.clear();
        match self.model_type {
            ModelType::Mf => out.extend_from_slice(self.user.row(user)),
            ModelType::AttnSeq => out.extend_from_slice(&self.pool(history).h),
        }
    }

    /// Attention weights over `history` (empty for MF or an empty history).
    pub fn attention_weights(&self, history: &[ItemId]) -> Vec<f64> {
        match self.model_type {
            ModelType::Mf => Vec::new(),
            ModelType::AttnSeq => self.pool(history).weights,
        }
    }

    pub(crate) fn score_repr(&self, user: UserId, repr: &[f64], item: ItemId) -> f64 {
        let q = self.item.row(item);
        match self.model_type {
            ModelType::Mf => dot(repr, q) + self.user_bias[user] + self.item_bias[item] + self.global_bias,
            ModelType::AttnSeq => dot(self.user.row(user), q) + dot(repr, q) + self.item_bias[item] + self.global_bias,
        }
    }

    pub(crate) fn score_unchecked(&self, user: UserId, history: &[ItemId], item: ItemId) -> f64 {
        match self.model_type {
            ModelType::Mf => self.score_repr(user, self.user.row(user), item),
            ModelType::AttnSeq => self.score_repr(user, &self.pool(history).h, item),
        }
    }

    pub fn score(&self, req: &ScoreRequest) -> Result<f64> {
        self.check_request(req)?;
        Ok(match req.history {
            HistoryInput::Items(h) => self.score_unchecked(req.user, h, req.item),
            HistoryInput::Representation(r) => self.score_repr(req.user, r, req.item),
        })
    }

    pub fn predict_prob(&self, req: &ScoreRequest) -> Result<f64> {
        self.score(req).map(logistic)
    }

    /// The `k` best candidates, descending by score, ties by ascending id.
    pub fn top_k(&self, user: UserId, history: &[ItemId], candidates: &[ItemId], k: usize) -> Result<Vec<ItemId>> {
        let scores = self.score_candidates(user, history, candidates)?;
        top_k_by_score(candidates, &scores, k)
    }

    /// Accumulate `upstream · ∂score/∂θ` into `grad`.
    pub fn grad(&self, req: &ScoreRequest, upstream: f64, grad: &mut Gradient) -> Result<()> {
        self.check_request(req)?;
        match req.history {
            HistoryInput::Items(h) => self.grad_items(req.user, h, req.item, upstream, grad),
            HistoryInput::Representation(r) => {
                let d_repr = self.grad_repr(req.user, r, req.item, upstream, grad);
                if self.model_type == ModelType::Mf {
                    axpy(1.0, &d_repr, grad.user_row(req.user));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn grad_items(
        &self,
        user: UserId,
        history: &[ItemId],
        item: ItemId,
        upstream: f64,
        grad: &mut Gradient,
    ) {
        let repr = self.representation(user, history);
        let d_repr = self.grad_repr(user, &repr, item, upstream, grad);
        self.backprop_repr(user, history, &d_repr, grad);
    }

    /// Gradient of `score_repr` w.r.t. everything except the representation,
    /// which is returned instead.
    pub(crate) fn grad_repr(
        &self,
        user: UserId,
        repr: &[f64],
        item: ItemId,
        upstream: f64,
        grad: &mut Gradient,
    ) -> Vec<f64> {
        let mut d_repr = vec![0.0; self.dim];
        self.grad_repr_into(user, repr, item, upstream, grad, &mut d_repr);
        d_repr
    }

    /// [`Model::grad_repr`] accumulating the representation gradient into `d_repr`.
    pub(crate) fn grad_repr_into(
        &self,
        user: UserId,
        repr: &[f64],
        item: ItemId,
        upstream: f64,
        grad: &mut Gradient,
        d_repr: &mut [f64],
    ) {
        let q = self.item.row(item);
        match self.model_type {
            ModelType::Mf => {
                axpy(upstream, repr, grad.item_row(item));
                *grad.user_bias(user) += upstream;
            }
            ModelType::AttnSeq => {
                let p = self.user.row(user);
                axpy(upstream, q, grad.user_row(user));
                let gq = grad.item_row(item);
                axpy(upstream, p, gq);
                axpy(upstream, repr, gq);
            }
        }
        *grad.item_bias(item) += upstream;
        *grad.global_bias() += upstream;
        axpy(upstream, q, d_repr);
    }

    /// Push a representation gradient back to the parameters that produced it.
    pub(crate) fn backprop_repr(&self, user: UserId, history: &[ItemId], d_repr: &[f64], grad: &mut Gradient) {
        match self.model_type {
            ModelType::Mf => axpy(1.0, d_repr, grad.user_row(user)),
            ModelType::AttnSeq => {
                let Some(&last) = history.last() else {
                    return;
                };
                let pooling = self.pool(history);
                let a = &pooling.weights;
                let da: Vec<f64> = history.iter().map(|&i| dot(self.item.row(i), d_repr)).collect();
                let mean_da: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                let scale = (self.dim as f64).sqrt();
                let key = self.item.row(last).to_vec();
                let mut d_key = vec![0.0; self.dim];
                for (t, &i) in history.iter().enumerate() {
                    let de = a[t] * (da[t] - mean_da) / scale;
                    let row = self.item.row(i);
                    axpy(de, row, &mut d_key);
                    let g = grad.item_row(i);
                    axpy(a[t], d_repr, g);
                    axpy(de, &key, g);
                }
                axpy(1.0, &d_key, grad.item_row(last));
            }
        }
    }

    /// `θ ← θ − lr·g` on the touched parameters.
    pub fn apply(&mut self, grad: &Gradient, lr: f64) {
        for (u, g) in &grad.user_rows {
            axpy(-lr, g, self.user.row_mut(*u));
        }
        for (v, g) in &grad.item_rows {
            axpy(-lr, g, self.item.row_mut(*v));
        }
        for (u, g) in &grad.user_bias {
            self.user_bias[*u] -= lr * g;
        }
        for (v, g) in &grad.item_bias {
            self.item_bias[*v] -= lr * g;
        }
        self.global_bias -= lr * grad.global_bias;
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.user.data.len() + self.item.data.len() + self.user_bias.len() + self.item_bias.len() + 1
    }

    /// Mutable access by flat index: user rows, item rows, user biases, item biases, global bias.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        if i < self.user.data.len() {
            return &mut self.user.data[i];
        }
        i -= self.user.data.len();
        if i < self.item.data.len() {
            return &mut self.item.data[i];
        }
        i -= self.item.data.len();
        if i < self.user_bias.len() {
            return &mut self.user_bias[i];
        }
        i -= self.user_bias.len();
        if i < self.item_bias.len() {
            return &mut self.item_bias[i];
        }
        &mut self.global_bias
    }

    pub fn is_finite(&self) -> bool {
        self.user
            .data
            .iter()
            .chain(&self.item.data)
            .chain(&self.user_bias)
            .chain(&self.item_bias)
            .all(|x| x.is_finite())
            && self.global_bias.is_finite()
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        if !self.is_finite() {
            return Err(Error::invalid(
                "refusing to serialize a model with non-finite parameters",
            ));
        }
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_type: self.model_type,
            d: self.dim,
            num_users: self.num_users(),
            num_items: self.num_items(),
            user_embeddings: self.user.to_rows(),
            item_embeddings: self.item.to_rows(),
            user_bias: (self.model_type == ModelType::Mf).then(|| self.user_bias.clone()),
            item_bias: self.item_bias.clone(),
            global_bias: self.global_bias,
        };
        Ok(serde_json::to_string(&ck)? + "\n")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format_version {}",
                ck.format_version
            )));
        }
        if ck.d == 0 {
            return Err(Error::invalid("checkpoint has d = 0"));
        }
        let user = Embedding::from_rows(&ck.user_embeddings, ck.d)?;
        let item = Embedding::from_rows(&ck.item_embeddings, ck.d)?;
        let user_bias = match ck.model_type {
            ModelType::Mf => ck
                .user_bias
                .ok_or_else(|| Error::invalid("mf checkpoint is missing user_bias"))?,
            ModelType::AttnSeq => Vec::new(),
        };
        let model = Model {
            model_type: ck.model_type,
            dim: ck.d,
            user,
            item,
            user_bias,
            item_bias: ck.item_bias,
            global_bias: ck.global_bias,
        };
        let mf_bias_ok = ck.model_type != ModelType::Mf || model.user_bias.len() == ck.num_users;
        if model.num_users() != ck.num_users
            || model.num_items() != ck.num_items
            || model.item_bias.len() != ck.num_items
            || !mf_bias_ok
        {
            return Err(Error::invalid("checkpoint shapes disagree with num_users/num_items"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

impl Scorer for Model {
    fn name(&self) -> &str {
        self.model_type.as_str()
    }

    fn num_items(&self) -> usize {
        self.item.rows
    }

    fn score_candidates(&self, user: UserId, history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        self.check_user(user)?;
        self.check_items(history)?;
        self.check_items(candidates)?;
        let repr = self.representation(user, history);
        Ok(candidates.iter().map(|&v| self.score_repr(user, &repr, v)).collect())
    }
}

/// Order candidates by descending score, ties by ascending id, and keep `k`.
pub fn top_k_by_score(candidates: &[ItemId], scores: &[f64], k: usize) -> Result<Vec<ItemId>> {
    if k > candidates.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} candidates",
            candidates.len()
        )));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(candidates[a].cmp(&candidates[b])));
    Ok(order.into_iter().take(k).map(|i| candidates[i]).collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    model_type: ModelType,
    d: usize,
    num_users: usize,
    num_items: usize,
    user_embeddings: Vec<Vec<f64>>,
    item_embeddings: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    user_bias: Option<Vec<f64>>,
    item_bias: Vec<f64>,
    global_bias: f64,
}
