//! Rating logs, train/validation/test splits and negative sampling.
//!
//! Interactions are kept with their raw rating and a binarized label. A
//! [`SplitDataset`] additionally indexes every user's chronological timeline so
//! that the history preceding any interaction can be retrieved cheaply.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::{self, stream};
use crate::{Error, Result};

pub type UserId = usize;
pub type ItemId = usize;

/// An ordered item sequence, oldest first.
pub type History = Vec<ItemId>;

pub const DEFAULT_MAX_HISTORY: usize = 10;

/// Ratings at or above this value are positive feedback.
pub const POSITIVE_THRESHOLD: i64 = 4;

/// Map a 1..=5 star rating to a like/dislike label.
pub fn binarize(rating: i64) -> Result<bool> {
    if !(1..=5).contains(&rating) {
        return Err(Error::invalid(format!("rating {rating} is outside the 1..5 scale")));
    }
    Ok(rating >= POSITIVE_THRESHOLD)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub rating: u8,
    pub timestamp: i64,
    pub label: bool,
}

impl Interaction {
    /// Build from a 1..=5 star rating.
    pub fn rated(user: UserId, item: ItemId, rating: i64, timestamp: i64) -> Result<Self> {
        let label = binarize(rating)?;
        Ok(Interaction {
            user,
            item,
            rating: rating as u8,
            timestamp,
            label,
        })
    }

    /// Build from an already binarized label (rating stored as 0/1).
    pub fn binary(user: UserId, item: ItemId, label: bool, timestamp: i64) -> Self {
        Interaction {
            user,
            item,
            rating: label as u8,
            timestamp,
            label,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingScale {
    /// Binary when any rating in the input is 0, stars otherwise.
    #[default]
    Auto,
    Stars,
    Binary,
}

/// A sequence of interactions over a dense user/item catalog.
#[derive(Clone, Debug)]
pub struct RatingLog {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    pub scale: RatingScale,
}

impl RatingLog {
    pub fn new(interactions: Vec<Interaction>, num_users: usize, num_items: usize) -> Result<Self> {
        for it in &interactions {
            if it.user >= num_users || it.item >= num_items {
                return Err(Error::invalid(format!(
                    "interaction ({}, {}) outside catalog of {num_users} users x {num_items} items",
                    it.user, it.item
                )));
            }
        }
        Ok(RatingLog {
            interactions,
            num_users,
            num_items,
            scale: RatingScale::Stars,
        })
    }

    pub fn num_positives(&self) -> usize {
        self.interactions.iter().filter(|it| it.label).count()
    }
}

/// Raw identifiers of the dense user and item indices.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

struct RawRecord {
    user: String,
    item: String,
    rating: i64,
    timestamp: i64,
    line: usize,
}

fn is_numeric(field: &str) -> bool {
    field.trim().parse::<f64>().is_ok()
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn parse_integral(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    let v = field.parse::<f64>().ok()?;
    (v.is_finite() && v.fract() == 0.0).then_some(v as i64)
}

fn read_raw(path: &Path) -> Result<Vec<RawRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(&line);
        if idx == 0 && !is_numeric(fields[0]) {
            continue; // header
        }
        if fields.len() < 3 {
            return Err(parse_err(format!(
                "expected user, item, rating[, timestamp], found {} fields",
                fields.len()
            )));
        }
        let rating =
            parse_integral(fields[2]).ok_or_else(|| parse_err(format!("rating {:?} is not an integer", fields[2])))?;
        let timestamp = match fields.get(3) {
            Some(f) if !f.is_empty() => {
                parse_integral(f).ok_or_else(|| parse_err(format!("timestamp {f:?} is not an integer")))?
            }
            _ => 0,
        };
        records.push(RawRecord {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            rating,
            timestamp,
            line: idx + 1,
        });
    }
    Ok(records)
}

fn dense_ids<'a>(raw: impl Iterator<Item = &'a str>) -> Vec<String> {
    let distinct: BTreeSet<&str> = raw.collect();
    let mut ids: Vec<String> = distinct.into_iter().map(str::to_string).collect();
    if ids.iter().all(|s| s.parse::<u64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<u64>().unwrap());
    }
    ids
}

fn make_interaction(
    scale: RatingScale,
    user: UserId,
    item: ItemId,
    rating: i64,
    timestamp: i64,
) -> std::result::Result<Interaction, String> {
    match scale {
        RatingScale::Binary => match rating {
            0 | 1 => Ok(Interaction::binary(user, item, rating == 1, timestamp)),
            r => Err(format!("binary rating must be 0 or 1, found {r}")),
        },
        _ => Interaction::rated(user, item, rating, timestamp).map_err(|e| e.to_string()),
    }
}

/// Read one or more tab-separated logs that share a catalog.
///
/// Raw ids are mapped to dense indices (numeric order when every id is an
/// unsigned integer, lexicographic otherwise). With [`RatingScale::Auto`] the
/// scale is decided jointly over all files.
pub fn read_logs(paths: &[&Path], scale: RatingScale) -> Result<(Vec<RatingLog>, Catalog)> {
    let raw: Vec<Vec<RawRecord>> = paths.iter().map(|p| read_raw(p)).collect::<Result<_>>()?;
    let scale = match scale {
        RatingScale::Auto if raw.iter().flatten().any(|r| r.rating == 0) => RatingScale::Binary,
        RatingScale::Auto => RatingScale::Stars,
        s => s,
    };
    let users = dense_ids(raw.iter().flatten().map(|r| r.user.as_str()));
    let items = dense_ids(raw.iter().flatten().map(|r| r.item.as_str()));
    let user_index: std::collections::HashMap<&str, usize> =
        users.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let item_index: std::collections::HashMap<&str, usize> =
        items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let mut logs = Vec::with_capacity(raw.len());
    for (records, path) in raw.iter().zip(paths) {
        let mut interactions = Vec::with_capacity(records.len());
        for r in records {
            let it = make_interaction(
                scale,
                user_index[r.user.as_str()],
                item_index[r.item.as_str()],
                r.rating,
                r.timestamp,
            )
            .map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: r.line,
                message,
            })?;
            interactions.push(it);
        }
        logs.push(RatingLog {
            interactions,
            num_users: users.len(),
            num_items: items.len(),
            scale,
        });
    }
    Ok((logs, Catalog { users, items }))
}

/// Read a log whose ids are already dense catalog indices.
pub fn read_dense_log(path: &Path, num_users: usize, num_items: usize, scale: RatingScale) -> Result<Vec<Interaction>> {
    let scale = if scale == RatingScale::Auto {
        RatingScale::Stars
    } else {
        scale
    };
    let mut out = Vec::new();
    for r in read_raw(path)? {
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: r.line,
            message,
        };
        let user: usize = r.user.parse().map_err(|_| err(format!("bad user id {:?}", r.user)))?;
        let item: usize = r.item.parse().map_err(|_| err(format!("bad item id {:?}", r.item)))?;
        if user >= num_users || item >= num_items {
            return Err(err(format!(
                "id ({user}, {item}) outside catalog of {num_users} users x {num_items} items"
            )));
        }
        out.push(make_interaction(scale, user, item, r.rating, r.timestamp).map_err(err)?);
    }
    Ok(out)
}

/// Write interactions as `user_id<TAB>item_id<TAB>rating<TAB>timestamp` with a header.
pub fn write_log(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "user_id\titem_id\trating\ttimestamp")?;
        for it in interactions {
            writeln!(w, "{}\t{}\t{}\t{}", it.user, it.item, it.rating, it.timestamp)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }

    fn rank(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "validation" | "valid" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(Error::invalid(format!(
                "unknown partition {other:?}; expected validation or test"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    /// Chronological hold-out of the two latest positives per user.
    LeaveOneOut,
    /// Externally collected (randomized-exposure) test log.
    RandomizedTrial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimelineEntry {
    pub item: ItemId,
    pub label: bool,
    pub partition: Partition,
}

/// One positive training interaction and its place in the user's timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub user: UserId,
    pub item: ItemId,
    pub position: usize,
}

/// A held-out positive to be ranked against sampled negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user: UserId,
    pub item: ItemId,
    pub history: History,
}

#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    num_users: usize,
    num_items: usize,
    max_history: usize,
    protocol: SplitProtocol,
    scale: RatingScale,
    /// Users left out of validation because they had no positive to hold out.
    pub skipped_validation_users: usize,
    timelines: Vec<Vec<TimelineEntry>>,
    validation_positions: Vec<Option<usize>>,
    test_positions: Vec<Option<usize>>,
    train_positives: Vec<Vec<ItemId>>,
    popularity: Vec<u32>,
}

impl SplitDataset {
    /// Assemble a dataset from its three partitions and build the indexes.
    ///
    /// Timelines hold train and validation interactions (and test ones under
    /// leave-one-out), ordered by timestamp, then partition, then position
    /// within the partition.
    pub fn from_partitions(
        train: Vec<Interaction>,
        validation: Vec<Interaction>,
        test: Vec<Interaction>,
        num_users: usize,
        num_items: usize,
        max_history: usize,
        protocol: SplitProtocol,
    ) -> Result<Self> {
        for it in train.iter().chain(&validation).chain(&test) {
            if it.user >= num_users || it.item >= num_items {
                return Err(Error::invalid(format!(
                    "interaction ({}, {}) outside catalog of {num_users} users x {num_items} items",
                    it.user, it.item
                )));
            }
        }

        struct Keyed {
            timestamp: i64,
            partition: Partition,
            index: usize,
            entry: TimelineEntry,
        }
        let mut keyed: Vec<Vec<Keyed>> = (0..num_users).map(|_| Vec::new()).collect();
        let in_timeline: &[(Partition, &Vec<Interaction>)] = &[
            (Partition::Train, &train),
            (Partition::Validation, &validation),
            (Partition::Test, &test),
        ];
        for &(partition, part) in in_timeline {
            if partition == Partition::Test && protocol == SplitProtocol::RandomizedTrial {
                continue;
            }
            for (index, it) in part.iter().enumerate() {
                keyed[it.user].push(Keyed {
                    timestamp: it.timestamp,
                    partition,
                    index,
                    entry: TimelineEntry {
                        item: it.item,
                        label: it.label,
                        partition,
                    },
                });
            }
        }

        let mut validation_positions = vec![None; validation.len()];
        let mut test_positions = vec![None; test.len()];
        let mut timelines = Vec::with_capacity(num_users);
        for mut entries in keyed {
            entries.sort_by_key(|k| (k.timestamp, k.partition.rank(), k.index));
            for (pos, k) in entries.iter().enumerate() {
                match k.partition {
                    Partition::Validation => validation_positions[k.index] = Some(pos),
                    Partition::Test => test_positions[k.index] = Some(pos),
                    Partition::Train => {}
                }
            }
            timelines.push(entries.into_iter().map(|k| k.entry).collect());
        }

        let mut train_positives: Vec<Vec<ItemId>> = vec![Vec::new(); num_users];
        let mut popularity = vec![0u32; num_items];
        for it in train.iter().filter(|it| it.label) {
            train_positives[it.user].push(it.item);
            popularity[it.item] += 1;
        }
        for items in &mut train_positives {
            items.sort_unstable();
            items.dedup();
        }

        Ok(SplitDataset {
            train,
            validation,
            test,
            num_users,
            num_items,
            max_history,
            protocol,
            scale: RatingScale::Stars,
            skipped_validation_users: 0,
            timelines,
            validation_positions,
            test_positions,
            train_positives,
            popularity,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn max_history(&self) -> usize {
        self.max_history
    }

    pub fn protocol(&self) -> SplitProtocol {
        self.protocol
    }

    pub fn rating_scale(&self) -> RatingScale {
        self.scale
    }

    pub fn partition(&self, partition: Partition) -> &[Interaction] {
        match partition {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    pub fn timeline(&self, user: UserId) -> &[TimelineEntry] {
        &self.timelines[user]
    }

    /// Train-set item counts over positive interactions.
    pub fn popularity(&self) -> &[u32] {
        &self.popularity
    }

    /// Sorted, deduplicated items the user liked in train.
    pub fn train_positives(&self, user: UserId) -> &[ItemId] {
        &self.train_positives[user]
    }

    pub fn is_train_positive(&self, user: UserId, item: ItemId) -> bool {
        self.train_positives[user].binary_search(&item).is_ok()
    }

    /// The latest `max_history` items strictly before timeline position
    /// `before`, oldest first. Disliked items are kept.
    pub fn history_of(&self, user: UserId, before: usize) -> History {
        let timeline = &self.timelines[user];
        let end = before.min(timeline.len());
        let start = end.saturating_sub(self.max_history);
        timeline[start..end].iter().map(|e| e.item).collect()
    }

    /// Every positive train interaction, users ascending, chronological within a user.
    pub fn train_examples(&self) -> Vec<TrainExample> {
        let mut out = Vec::with_capacity(self.train.len());
        for (user, timeline) in self.timelines.iter().enumerate() {
            for (position, e) in timeline.iter().enumerate() {
                if e.partition == Partition::Train && e.label {
                    out.push(TrainExample {
                        user,
                        item: e.item,
                        position,
                    });
                }
            }
        }
        out
    }

    /// Positive held-out interactions of a partition with their input histories.
    pub fn eval_cases(&self, partition: Partition) -> Vec<EvalCase> {
        let (part, positions) = match partition {
            Partition::Validation => (&self.validation, &self.validation_positions),
            Partition::Test => (&self.test, &self.test_positions),
            Partition::Train => return Vec::new(),
        };
        part.iter()
            .zip(positions)
            .filter(|(it, _)| it.label)
            .map(|(it, pos)| {
                let before = pos.unwrap_or(self.timelines[it.user].len());
                EvalCase {
                    user: it.user,
                    item: it.item,
                    history: self.history_of(it.user, before),
                }
            })
            .collect()
    }

    fn eligible_negatives(&self, user: UserId, target: ItemId) -> usize {
        let positives = &self.train_positives[user];
        let target_counted = positives.binary_search(&target).is_ok() || target >= self.num_items;
        self.num_items - positives.len() - usize::from(!target_counted)
    }

    /// `count` distinct items the user did not like in train, excluding `target`.
    ///
    /// Disliked and never-seen items are both eligible. The result is a pure
    /// function of `(user, target, count, seed)`.
    pub fn sample_negatives(&self, user: UserId, target: ItemId, count: usize, seed: u64) -> Result<Vec<ItemId>> {
        if user >= self.num_users {
            return Err(Error::invalid(format!("unknown user {user}")));
        }
        let eligible = self.eligible_negatives(user, target);
        if count > eligible {
            return Err(Error::invalid(format!(
                "user {user} has only {eligible} eligible negative items, {count} requested \
                 (short by {})",
                count - eligible
            )));
        }
        let mut rng = seed::rng(seed, &[stream::NEGATIVES, user as u64, target as u64]);
        let excluded = |item: ItemId| item == target || self.is_train_positive(user, item);
        if count * 2 <= eligible {
            let mut chosen = Vec::with_capacity(count);
            let mut seen = HashSet::with_capacity(count);
            while chosen.len() < count {
                let item = rng.random_range(0..self.num_items);
                if !excluded(item) && seen.insert(item) {
                    chosen.push(item);
                }
            }
            Ok(chosen)
        } else {
            let pool: Vec<ItemId> = (0..self.num_items).filter(|&i| !excluded(i)).collect();
            Ok(index::sample(&mut rng, pool.len(), count)
                .into_iter()
                .map(|i| pool[i])
                .collect())
        }
    }

    /// One uniformly drawn item the user did not like in train.
    pub fn sample_training_negative<R: Rng>(&self, user: UserId, rng: &mut R) -> ItemId {
        sample_non_positive(&self.train_positives[user], self.num_items, rng)
    }

    /// Users with at least one eligible training negative.
    pub(crate) fn check_negatives_available(&self) -> Result<()> {
        for (user, pos) in self.train_positives.iter().enumerate() {
            if !pos.is_empty() && pos.len() >= self.num_items {
                return Err(Error::invalid(format!(
                    "user {user} liked every item; no negative can be sampled"
                )));
            }
        }
        Ok(())
    }
}

/// Rejection-sample an item outside the sorted `positives`.
pub(crate) fn sample_non_positive<R: Rng>(positives: &[ItemId], num_items: usize, rng: &mut R) -> ItemId {
    loop {
        let item = rng.random_range(0..num_items);
        if positives.binary_search(&item).is_err() {
            return item;
        }
    }
}

fn user_indices(log: &RatingLog) -> Vec<Vec<usize>> {
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); log.num_users];
    for (i, it) in log.interactions.iter().enumerate() {
        per_user[it.user].push(i);
    }
    per_user
}

/// Hold out each user's latest positive as test and second-latest as validation.
///
/// Users with fewer than three positives stay entirely in train and are not
/// evaluated. Timestamp ties keep input order.
pub fn leave_one_out_split(log: &RatingLog, max_history: usize) -> Result<SplitDataset> {
    if log.interactions.is_empty() {
        return Err(Error::invalid("cannot split an empty log"));
    }
    let mut role = vec![Partition::Train; log.interactions.len()];
    for mut indices in user_indices(log) {
        indices.sort_by_key(|&i| log.interactions[i].timestamp); // stable
        let positives: Vec<usize> = indices.into_iter().filter(|&i| log.interactions[i].label).collect();
        if positives.len() >= 3 {
            role[positives[positives.len() - 1]] = Partition::Test;
            role[positives[positives.len() - 2]] = Partition::Validation;
        }
    }
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (it, r) in log.interactions.iter().zip(role) {
        match r {
            Partition::Train => train.push(*it),
            Partition::Validation => validation.push(*it),
            Partition::Test => test.push(*it),
        }
    }
    let mut ds = SplitDataset::from_partitions(
        train,
        validation,
        test,
        log.num_users,
        log.num_items,
        max_history,
        SplitProtocol::LeaveOneOut,
    )?;
    ds.scale = log.scale;
    Ok(ds)
}

/// Use an externally collected test log; hold out one random train positive per user
/// for validation.
pub fn randomized_trial_split(
    train_log: &RatingLog,
    test_log: &RatingLog,
    seed: u64,
    max_history: usize,
) -> Result<SplitDataset> {
    if train_log.interactions.is_empty() || test_log.interactions.is_empty() {
        return Err(Error::invalid(
            "randomized-trial split needs non-empty train and test logs",
        ));
    }
    let num_users = train_log.num_users.max(test_log.num_users);
    let num_items = train_log.num_items.max(test_log.num_items);
    let mut held_out = vec![false; train_log.interactions.len()];
    let mut skipped = 0;
    for (user, indices) in user_indices(train_log).into_iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        let positives: Vec<usize> = indices
            .into_iter()
            .filter(|&i| train_log.interactions[i].label)
            .collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        let mut rng = seed::rng(seed, &[stream::SPLIT, user as u64]);
        held_out[positives[rng.random_range(0..positives.len())]] = true;
    }
    if skipped > 0 {
        log::warn!("{skipped} users have no positive train interaction; skipped from validation");
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (it, &h) in train_log.interactions.iter().zip(&held_out) {
        if h {
            validation.push(*it);
        } else {
            train.push(*it);
        }
    }
    let mut ds = SplitDataset::from_partitions(
        train,
        validation,
        test_log.interactions.clone(),
        num_users,
        num_items,
        max_history,
        SplitProtocol::RandomizedTrial,
    )?;
    ds.scale = train_log.scale;
    ds.skipped_validation_users = skipped;
    Ok(ds)
}

/// Contents of a split directory's `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub num_users: usize,
    pub num_items: usize,
    pub max_history: usize,
    pub seed: u64,
    #[serde(default = "default_protocol")]
    pub protocol: SplitProtocol,
    #[serde(default)]
    pub rating_scale: RatingScale,
}

fn default_protocol() -> SplitProtocol {
    SplitProtocol::LeaveOneOut
}

pub const SPLIT_FILES: [(&str, Partition); 3] = [
    ("train.tsv", Partition::Train),
    ("valid.tsv", Partition::Validation),
    ("test.tsv", Partition::Test),
];

/// Write `train.tsv`, `valid.tsv`, `test.tsv` and `meta.json` into `dir`.
pub fn write_split(dir: &Path, ds: &SplitDataset, seed: u64) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, partition) in SPLIT_FILES {
        let path = dir.join(name);
        write_log(&path, ds.partition(partition))?;
        written.push(path);
    }
    let meta = SplitMeta {
        num_users: ds.num_users,
        num_items: ds.num_items,
        max_history: ds.max_history,
        seed,
        protocol: ds.protocol,
        rating_scale: ds.scale,
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Load a directory written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<(SplitDataset, SplitMeta)> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SplitMeta = serde_json::from_str(&text)?;
    let mut parts: Vec<Vec<Interaction>> = Vec::with_capacity(3);
    for (name, _) in SPLIT_FILES {
        parts.push(read_dense_log(
            &dir.join(name),
            meta.num_users,
            meta.num_items,
            meta.rating_scale,
        )?);
    }
    let test = parts.pop().unwrap();
    let validation = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    let mut ds = SplitDataset::from_partitions(
        train,
        validation,
        test,
        meta.num_users,
        meta.num_items,
        meta.max_history,
        meta.protocol,
    )?;
    ds.scale = if meta.rating_scale == RatingScale::Auto {
        RatingScale::Stars
    } else {
        meta.rating_scale
    };
    Ok((ds, meta))
}
