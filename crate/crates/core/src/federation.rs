//! Client side of heterogeneous federated learning.
//!
//! Users publish their head networks to a pool. When federation is active, a
//! user scores every pooled head on its own most recent `(dense row, label)`
//! pairs for each feature, picks the lowest-error head and blends it into its
//! own head. Embedding and prediction networks never leave the user.

use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HflModel;
use crate::nn::MlpWeights;

/// A `(dense row, label)` pair used to score candidate heads.
pub type RecentSample = (Vec<f64>, f64);

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PoolKey {
    pub user_id: String,
    pub feature_index: usize,
}

/// A published head snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub user_id: String,
    pub feature_index: usize,
    pub version: u64,
    pub weights: MlpWeights,
    /// Milliseconds since the Unix epoch.
    pub published_at: u64,
}

impl PoolEntry {
    pub fn new(user_id: impl Into<String>, feature_index: usize, version: u64, weights: MlpWeights) -> Self {
        Self {
            user_id: user_id.into(),
            feature_index,
            version,
            weights,
            published_at: now_millis(),
        }
    }

    pub fn key(&self) -> PoolKey {
        PoolKey {
            user_id: self.user_id.clone(),
            feature_index: self.feature_index,
        }
    }

    fn key_ref(&self) -> (&str, usize) {
        (&self.user_id, self.feature_index)
    }
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionScore {
    /// Sum of squared residuals over the recent window.
    #[default]
    Squared,
    /// Sum of signed residuals `y - ŷ`, exactly as the selection rule is printed.
    Signed,
}

pub fn score_head(head: &MlpWeights, recent: &[RecentSample], score: SelectionScore) -> Result<f64> {
    let mut total = 0.0;
    for (row, y) in recent {
        let r = y - head.predict(row)?[0];
        total += match score {
            SelectionScore::Squared => r * r,
            SelectionScore::Signed => r,
        };
    }
    Ok(total)
}

/// Picks the pooled head with the lowest score on `recent`.
///
/// Ties go to the lexicographically smallest `(user_id, feature_index)`.
/// Non-finite scores never win. Returns the winning index and every score.
pub fn select_head(
    pool: &[PoolEntry],
    recent: &[RecentSample],
    score: SelectionScore,
) -> Result<(usize, Vec<f64>)> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if recent.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scores = pool
        .iter()
        .map(|e| score_head(&e.weights, recent, score))
        .collect::<Result<Vec<_>>>()?;
    let rank = |s: f64| if s.is_finite() { s } else { f64::INFINITY };
    let best = (0..pool.len())
        .min_by(|&a, &b| {
            rank(scores[a])
                .total_cmp(&rank(scores[b]))
                .then_with(|| pool[a].key_ref().cmp(&pool[b].key_ref()))
        })
        .unwrap();
    Ok((best, scores))
}

/// `alpha · selected + (1 − alpha) · target`, elementwise.
pub fn blend_head(target: &MlpWeights, selected: &MlpWeights, alpha: f64) -> Result<MlpWeights> {
    if !target.same_shape(selected) {
        return Err(Error::IncompatibleHead(format!(
            "target {:?} vs selected {:?}",
            target.specs(),
            selected.specs()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(target.clone());
    }
    if alpha == 1.0 {
        return Ok(selected.clone());
    }
    let mut out = target.clone();
    let mix = |t: &mut [f64], s: &[f64]| {
        for (t, s) in t.iter_mut().zip(s) {
            *t = alpha * s + (1.0 - alpha) * *t;
        }
    };
    for (lt, ls) in out.layers.iter_mut().zip(&selected.layers) {
        mix(lt.weight.as_mut_slice(), ls.weight.as_slice());
        mix(&mut lt.bias, &ls.bias);
    }
    Ok(out)
}

/// Validation-loss gate: federation runs only after `patience` epochs
/// without a strict improvement on the best loss seen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchState {
    pub best_validation_loss: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
}

impl Default for SwitchState {
    fn default() -> Self {
        Self {
            best_validation_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            patience: 3,
        }
    }
}

impl SwitchState {
    /// Records one epoch's validation loss; returns whether federation is
    /// active for the next epoch.
    pub fn observe(&mut self, loss: f64) -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss {loss}")));
        }
        if loss < self.best_validation_loss {
            self.best_validation_loss = loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        Ok(self.is_active())
    }

    pub fn is_active(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }
}

pub fn update_switch(state: &SwitchState, epoch_validation_loss: f64) -> Result<(SwitchState, bool)> {
    let mut next = state.clone();
    let active = next.observe(epoch_validation_loss)?;
    Ok((next, active))
}

/// How a federation round chooses a pooled head for each target head.
#[derive(Clone, Debug)]
pub enum SelectionPolicy {
    Best(SelectionScore),
    /// Uniform draw over compatible entries.
    Random(ChaCha8Rng),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub head: usize,
    pub user_id: String,
    pub feature_index: usize,
    pub version: u64,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub selections: Vec<HeadSelection>,
    /// Set when the round did nothing, e.g. nothing usable in the pool.
    pub skipped: Option<String>,
}

/// Selects and blends one pooled head into every target head.
///
/// `recent[i]` holds the scoring samples for head `i`. Entries whose shape
/// differs from the target heads are ignored. Only heads change.
pub fn fl_round(
    model: &mut HflModel,
    pool: &[PoolEntry],
    recent: &[Vec<RecentSample>],
    alpha: f64,
    policy: &mut SelectionPolicy,
) -> Result<RoundOutcome> {
    if recent.len() != model.nf() {
        return Err(Error::Dimension(format!(
            "{} recent sets for {} heads",
            recent.len(),
            model.nf()
        )));
    }
    let shape = model.heads[0].specs();
    let candidates: Vec<PoolEntry> = pool
        .iter()
        .filter(|e| e.weights.specs() == shape)
        .cloned()
        .collect();
    if candidates.is_empty() {
        return Ok(RoundOutcome {
            selections: Vec::new(),
            skipped: Some(if pool.is_empty() {
                "empty pool".into()
            } else {
                "no compatible heads in pool".into()
            }),
        });
    }

    let mut selections = Vec::with_capacity(model.nf());
    let mut blended = Vec::with_capacity(model.nf());
    for (i, samples) in recent.iter().enumerate() {
        let (idx, score) = match policy {
            SelectionPolicy::Best(kind) => {
                let (idx, scores) = select_head(&candidates, samples, *kind)?;
                (idx, scores[idx])
            }
            SelectionPolicy::Random(rng) => {
                let idx = rng.gen_range(0..candidates.len());
                let s = score_head(&candidates[idx].weights, samples, SelectionScore::Squared)?;
                (idx, s)
            }
        };
        let chosen = &candidates[idx];
        blended.push(blend_head(&model.heads[i], &chosen.weights, alpha)?);
        selections.push(HeadSelection {
            head: i,
            user_id: chosen.user_id.clone(),
            feature_index: chosen.feature_index,
            version: chosen.version,
            score,
        });
    }
    model.heads = blended;
    Ok(RoundOutcome {
        selections,
        skipped: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishOutcome {
    pub accepted: bool,
    /// Version stored for the key after the request.
    pub current_version: u64,
}

/// Anything that stores and serves pooled heads: in-process, TCP or directory.
pub trait PoolClient: Send + Sync {
    fn publish(&self, entry: &PoolEntry) -> Result<PublishOutcome>;

    fn fetch(&self, exclude_user: Option<&str>) -> Result<Vec<PoolEntry>>;
}

impl<P: PoolClient + ?Sized> PoolClient for std::sync::Arc<P> {
    fn publish(&self, entry: &PoolEntry) -> Result<PublishOutcome> {
        (**self).publish(entry)
    }

    fn fetch(&self, exclude_user: Option<&str>) -> Result<Vec<PoolEntry>> {
        (**self).fetch(exclude_user)
    }
}

/// Tracks per-head version counters for one user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadPublisher {
    pub user_id: String,
    versions: Vec<u64>,
}

impl HeadPublisher {
    pub fn new(user_id: impl Into<String>, nf: usize) -> Self {
        Self {
            user_id: user_id.into(),
            versions: vec![0; nf],
        }
    }

    pub fn versions(&self) -> &[u64] {
        &self.versions
    }

    /// Publishes every head with its next version. A stale rejection (the
    /// pool already holds a newer version) bumps the counter past it and
    /// retries once. Stops at the first transport error.
    pub fn publish(&mut self, model: &HflModel, client: &dyn PoolClient) -> Result<Vec<u64>> {
        if self.versions.len() != model.nf() {
            return Err(Error::Dimension("publisher/model head count differ".into()));
        }
        for (i, head) in model.heads.iter().enumerate() {
            let mut entry = PoolEntry::new(self.user_id.clone(), i, self.versions[i] + 1, head.clone());
            let mut outcome = client.publish(&entry)?;
            if !outcome.accepted {
                entry.version = outcome.current_version + 1;
                outcome = client.publish(&entry)?;
                if !outcome.accepted {
                    return Err(Error::Protocol(format!(
                        "pool rejected version {} for head {i}",
                        entry.version
                    )));
                }
            }
            self.versions[i] = entry.version;
        }
        Ok(self.versions.clone())
    }
}

pub fn publish_heads(
    model: &HflModel,
    publisher: &mut HeadPublisher,
    client: &dyn PoolClient,
) -> Result<Vec<u64>> {
    publisher.publish(model, client)
}

/// One line of the federation audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub user_id: String,
    pub repeat: usize,
    pub task: usize,
    pub mode: String,
    pub epoch: usize,
    pub batch: usize,
    pub alpha: f64,
    #[serde(flatten)]
    pub outcome: RoundOutcome,
}
