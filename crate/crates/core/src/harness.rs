//! Experiment runner: multi-user training with federation, save-best,
//! the DNN baseline, ablation modes and metrics output.
//!
//! Users are simulated in-process. Within an epoch every user's batches are
//! interleaved (sources first), each user publishing its heads after every
//! batch and, when its federation gate is open, blending pooled heads into
//! its own. With `pretrain_sources` the sources instead train once, without
//! federation, and the target runs against their final heads.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::{
    fl_round, AuditRecord, HeadPublisher, PoolClient, PoolEntry, RecentSample, RoundOutcome,
    SelectionPolicy, SelectionScore, SwitchState,
};
use crate::model::{hex, DnnModel, HflModel, Regressor};
use crate::nn::{AdamConfig, LRELU_SLOPE};
use crate::pool_service::{self, PoolStore};
use crate::sparse_ts::{build_dataset, split_patients, Dataset, FeatureScaler, SampleWindow, SparseSeries};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// No federation.
    No,
    /// Federation after every batch with a uniformly drawn pooled head.
    Random,
    /// Federation after every batch, switch gate bypassed.
    Always,
    /// Federation after every batch while the switch gate is open.
    #[default]
    Hfl,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::No, Self::Random, Self::Always, Self::Hfl];

    pub fn system_name(self) -> &'static str {
        match self {
            Self::No => "HFL-No",
            Self::Random => "HFL-Random",
            Self::Always => "HFL-Always",
            Self::Hfl => "HFL",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::No => "no",
            Self::Random => "random",
            Self::Always => "always",
            Self::Hfl => "hfl",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no" => Ok(Self::No),
            "random" => Ok(Self::Random),
            "always" => Ok(Self::Always),
            "hfl" => Ok(Self::Hfl),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

pub const DNN_SYSTEM: &str = "DNN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Window size.
    pub w: usize,
    /// Samples per batch; one federation opportunity per batch.
    pub period: usize,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Channel used as label; `None` runs every channel in turn.
    pub label_index: Option<usize>,
    pub mode: AblationMode,
    /// `memory`, `file://<dir>`, `tcp://<host:port>` or `<host:port>`.
    pub pool: String,
    pub joint_grads: bool,
    pub selection_score: SelectionScore,
    pub normalize: bool,
    pub patience: usize,
    pub split: (f64, f64, f64),
    /// Sources also select and blend from the pool.
    pub sources_learn: bool,
    pub pretrain_sources: bool,
    /// Let users select their own published heads.
    pub include_self: bool,
    pub baseline: bool,
    pub lrelu_slope: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            w: 3,
            period: 50,
            alpha: 0.2,
            lr: 0.01,
            epochs: 50,
            repeats: 5,
            seed: 0,
            label_index: None,
            mode: AblationMode::Hfl,
            pool: "memory".into(),
            joint_grads: false,
            selection_score: SelectionScore::Squared,
            normalize: false,
            patience: 3,
            split: (0.6, 0.2, 0.2),
            sources_learn: true,
            pretrain_sources: false,
            include_self: false,
            baseline: true,
            lrelu_slope: LRELU_SLOPE,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.w == 0 || self.period == 0 || self.epochs == 0 || self.repeats == 0 {
            return bad("w, period, epochs and repeats must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if self.lrelu_slope != LRELU_SLOPE {
            return bad(format!("leaky ReLU slope is fixed at {LRELU_SLOPE}"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// All patients of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub name: String,
    /// Feature count; series carry `nf + 1` channels.
    pub nf: usize,
    pub series: Vec<SparseSeries>,
}

impl DomainData {
    pub fn new(name: impl Into<String>, nf: usize, series: Vec<SparseSeries>) -> Result<Self> {
        for s in &series {
            s.validate(nf)?;
        }
        Ok(Self {
            name: name.into(),
            nf,
            series,
        })
    }
}

/// Packed train/valid/test windows for one user, task and repeat.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub train: Vec<SampleWindow>,
    pub valid: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
    pub skipped: usize,
}

impl Prepared {
    fn digest(&self) -> Sha256 {
        let mut h = Sha256::new();
        for part in [&self.train, &self.valid, &self.test] {
            let ds = Dataset {
                nf: part.first().map_or(0, SampleWindow::nf),
                w: part.first().map_or(0, SampleWindow::w),
                windows: part.clone(),
                skipped: 0,
            };
            h.update(ds.to_bytes());
        }
        h
    }
}

pub fn prepare(domain: &DomainData, task: usize, config: &RunConfig, split_seed: u64) -> Result<Prepared> {
    let nf = domain.nf;
    let per_patient = domain
        .series
        .iter()
        .map(|s| build_dataset(&s.relabel(task, nf)?, nf, config.w))
        .collect::<Result<Vec<_>>>()?;
    let split = split_patients(per_patient, config.split, split_seed)?;
    let mut train = Dataset::concat(nf, config.w, split.train);
    let mut valid = Dataset::concat(nf, config.w, split.valid);
    let mut test = Dataset::concat(nf, config.w, split.test);
    if train.is_empty() || valid.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.normalize {
        let scaler = FeatureScaler::fit(&train)?;
        for ds in [&mut train, &mut valid, &mut test] {
            scaler.apply(ds);
        }
    }
    Ok(Prepared {
        skipped: train.skipped + valid.skipped + test.skipped,
        train: train.windows,
        valid: valid.windows,
        test: test.windows,
    })
}

/// Result of training one system for one task and repeat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub system: String,
    pub task: usize,
    pub repeat: usize,
    pub valid_mse: f64,
    pub test_mse: f64,
    /// 1-based epoch of the saved model.
    pub best_epoch: usize,
    pub valid_trace: Vec<f64>,
    /// 1-based epochs in which at least one federation round ran.
    pub fl_epochs: Vec<usize>,
    pub fl_rounds: usize,
    pub publish_failures: usize,
    pub init_digest: String,
    pub data_digest: String,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub system: String,
    pub task: usize,
    pub valid_mse: f64,
    pub test_mse: f64,
    pub rank: usize,
    pub repeats: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<RepeatResult>,
    pub aggregates: Vec<AggregateRow>,
    pub audit: Vec<AuditRecord>,
    pub param_counts: BTreeMap<String, usize>,
    pub failed_repeats: usize,
    pub wall_clock_secs: f64,
    pub config: Option<RunConfig>,
}

impl MetricsReport {
    /// Means over successful repeats and per-task ranks by test MSE.
    pub fn aggregate(&mut self) {
        let mut groups: BTreeMap<(usize, String), Vec<&RepeatResult>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| !r.failed) {
            groups.entry((r.task, r.system.clone())).or_default().push(r);
        }
        let mut aggregates: Vec<AggregateRow> = groups
            .into_iter()
            .map(|((task, system), rows)| {
                let n = rows.len() as f64;
                AggregateRow {
                    system,
                    task,
                    valid_mse: rows.iter().map(|r| r.valid_mse).sum::<f64>() / n,
                    test_mse: rows.iter().map(|r| r.test_mse).sum::<f64>() / n,
                    rank: 0,
                    repeats: rows.len(),
                }
            })
            .collect();
        let mut by_task: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, a) in aggregates.iter().enumerate() {
            by_task.entry(a.task).or_default().push(i);
        }
        for idx in by_task.values_mut() {
            idx.sort_by(|&a, &b| {
                aggregates[a]
                    .test_mse
                    .total_cmp(&aggregates[b].test_mse)
                    .then_with(|| aggregates[a].system.cmp(&aggregates[b].system))
            });
            for (rank, &i) in idx.iter().enumerate() {
                aggregates[i].rank = rank + 1;
            }
        }
        self.aggregates = aggregates;
        self.failed_repeats = self.rows.iter().filter(|r| r.failed).count();
    }

    /// Per (repeat, task), whether every HFL-family run started from the same
    /// weights and consumed the same data order. Returns (groups, consistent).
    pub fn fairness(&self) -> (usize, bool) {
        let mut groups: BTreeMap<(usize, usize), Vec<&RepeatResult>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| !r.failed && r.system != DNN_SYSTEM) {
            groups.entry((r.repeat, r.task)).or_default().push(r);
        }
        let consistent = groups.values().all(|g| {
            g.iter()
                .all(|r| r.init_digest == g[0].init_digest && r.data_digest == g[0].data_digest)
        });
        (groups.len(), consistent)
    }

    pub fn rows_for(&self, system: &str, task: usize) -> impl Iterator<Item = &RepeatResult> {
        let system = system.to_owned();
        self.rows
            .iter()
            .filter(move |r| r.system == system && r.task == task && !r.failed)
    }
}

struct RunCtx<'a> {
    config: &'a RunConfig,
    mode: AblationMode,
    repeat: usize,
    task: usize,
    /// Namespaces user ids so runs sharing an external pool never mix.
    prefix: String,
}

impl RunCtx<'_> {
    fn fetch(&self, pool: &dyn PoolClient, user: &str) -> Result<Vec<PoolEntry>> {
        let exclude = (!self.config.include_self).then_some(user);
        Ok(pool
            .fetch(exclude)?
            .into_iter()
            .filter(|e| e.user_id.starts_with(&self.prefix))
            .collect())
    }
}

/// One user's training state under the batch protocol.
struct Learner {
    user_id: String,
    model: HflModel,
    data: Prepared,
    publisher: HeadPublisher,
    switch: SwitchState,
    fl_active: bool,
    federates: bool,
    order_rng: ChaCha8Rng,
    order: Vec<usize>,
    order_digest: Sha256,
    policy: SelectionPolicy,
    best: Option<(f64, usize, HflModel)>,
    valid_trace: Vec<f64>,
    fl_epochs: Vec<usize>,
    fl_rounds: usize,
    publish_failures: usize,
    init_digest: String,
    data_digest: Sha256,
}

fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn user_tag(name: &str) -> u64 {
    mix_seed(&[name.len() as u64, u64::from_le_bytes({
        let d = Sha256::digest(name.as_bytes());
        d[..8].try_into().unwrap()
    })])
}

impl Learner {
    fn new(
        user: &str,
        nf: usize,
        data: Prepared,
        ctx: &RunCtx<'_>,
        federates: bool,
    ) -> Result<Self> {
        let cfg = ctx.config;
        let base = cfg.seed.wrapping_add(ctx.repeat as u64);
        let tag = user_tag(user);
        let mut model = HflModel::new(nf, cfg.w, cfg.adam(), mix_seed(&[base, ctx.task as u64, tag, 1]))?;
        model.joint_grads = cfg.joint_grads;
        let policy = match ctx.mode {
            AblationMode::Random => SelectionPolicy::Random(ChaCha8Rng::seed_from_u64(mix_seed(&[
                base,
                ctx.task as u64,
                tag,
                3,
            ]))),
            _ => SelectionPolicy::Best(cfg.selection_score),
        };
        let data_digest = data.digest();
        Ok(Self {
            user_id: format!("{}{user}", ctx.prefix),
            init_digest: model.digest(),
            publisher: HeadPublisher::new(format!("{}{user}", ctx.prefix), nf),
            model,
            data,
            switch: SwitchState {
                patience: cfg.patience,
                ..SwitchState::default()
            },
            fl_active: false,
            federates,
            order_rng: ChaCha8Rng::seed_from_u64(mix_seed(&[base, ctx.task as u64, tag, 2])),
            order: Vec::new(),
            order_digest: Sha256::new(),
            policy,
            best: None,
            valid_trace: Vec::new(),
            fl_epochs: Vec::new(),
            fl_rounds: 0,
            publish_failures: 0,
            data_digest,
        })
    }

    fn batches(&self, period: usize) -> usize {
        self.data.train.len().div_ceil(period)
    }

    fn begin_epoch(&mut self) {
        self.order = (0..self.data.train.len()).collect();
        self.order.shuffle(&mut self.order_rng);
        for &i in &self.order {
            self.order_digest.update((i as u64).to_le_bytes());
        }
    }

    fn gate_open(&self, mode: AblationMode) -> bool {
        self.federates
            && match mode {
                AblationMode::No => false,
                AblationMode::Random | AblationMode::Always => true,
                AblationMode::Hfl => self.fl_active,
            }
    }

    fn step(
        &mut self,
        epoch: usize,
        b: usize,
        ctx: &RunCtx<'_>,
        pool: &dyn PoolClient,
        audit: &mut Vec<AuditRecord>,
    ) -> Result<()> {
        let period = ctx.config.period;
        let end = ((b + 1) * period).min(self.order.len());
        if b * period >= end {
            return Ok(());
        }
        let batch: Vec<SampleWindow> = self.order[b * period..end]
            .iter()
            .map(|&i| self.data.train[i].clone())
            .collect();
        self.model.train_batch(&batch)?;

        if let Err(e) = self.publisher.publish(&self.model, pool) {
            if !e.is_retriable() {
                return Err(e);
            }
            self.publish_failures += 1;
            warn!("{}: publish failed, continuing: {e}", self.user_id);
        }

        if !self.gate_open(ctx.mode) {
            return Ok(());
        }
        let mut outcome = match ctx.fetch(pool, &self.user_id) {
            Ok(entries) => {
                let recent: Vec<Vec<RecentSample>> = (0..self.model.nf())
                    .map(|i| batch.iter().map(|w| (w.dense.row(i).to_vec(), w.label)).collect())
                    .collect();
                fl_round(&mut self.model, &entries, &recent, ctx.config.alpha, &mut self.policy)?
            }
            Err(e) if e.is_retriable() => RoundOutcome {
                selections: Vec::new(),
                skipped: Some(format!("fetch failed: {e}")),
            },
            Err(e) => return Err(e),
        };
        if outcome.skipped.is_none() {
            self.fl_rounds += 1;
            if self.fl_epochs.last() != Some(&epoch) {
                self.fl_epochs.push(epoch);
            }
        }
        let local = |id: &str| id.strip_prefix(&ctx.prefix).unwrap_or(id).to_owned();
        for sel in &mut outcome.selections {
            sel.user_id = local(&sel.user_id);
        }
        audit.push(AuditRecord {
            user_id: local(&self.user_id),
            repeat: ctx.repeat,
            task: ctx.task,
            mode: ctx.mode.as_str().into(),
            epoch,
            batch: b,
            alpha: ctx.config.alpha,
            outcome,
        });
        Ok(())
    }

    fn end_epoch(&mut self, epoch: usize) -> Result<()> {
        let val = self.model.evaluate(&self.data.valid)?.final_mse;
        if !val.is_finite() {
            return Err(Error::Diverged(format!("validation MSE {val}")));
        }
        self.valid_trace.push(val);
        self.fl_active = self.switch.observe(val)?;
        if self.best.as_ref().is_none_or(|(b, _, _)| val < *b) {
            self.best = Some((val, epoch, self.model.clone()));
        }
        Ok(())
    }

    fn finish(mut self, system: &str, ctx: &RunCtx<'_>) -> Result<RepeatResult> {
        let (valid_mse, best_epoch, best) = self.best.take().ok_or(Error::EmptyDataset)?;
        let test_mse = best.evaluate(&self.data.test)?.final_mse;
        self.data_digest.update(self.order_digest.finalize());
        Ok(RepeatResult {
            system: system.into(),
            task: ctx.task,
            repeat: ctx.repeat,
            valid_mse,
            test_mse,
            best_epoch,
            valid_trace: self.valid_trace,
            fl_epochs: self.fl_epochs,
            fl_rounds: self.fl_rounds,
            publish_failures: self.publish_failures,
            init_digest: self.init_digest,
            data_digest: hex(&self.data_digest.finalize()),
            failed: false,
        })
    }
}

fn train_users(learners: &mut [Learner], ctx: &RunCtx<'_>, pool: &dyn PoolClient, audit: &mut Vec<AuditRecord>) -> Result<()> {
    for epoch in 1..=ctx.config.epochs {
        for l in learners.iter_mut() {
            l.begin_epoch();
        }
        let steps = learners.iter().map(|l| l.batches(ctx.config.period)).max().unwrap_or(0);
        for b in 0..steps {
            for l in learners.iter_mut() {
                l.step(epoch, b, ctx, pool, audit)?;
            }
        }
        for l in learners.iter_mut() {
            l.end_epoch(epoch)?;
        }
    }
    Ok(())
}

fn open_pool(config: &RunConfig) -> Result<Arc<dyn PoolClient>> {
    if config.pool == "memory" {
        Ok(Arc::new(PoolStore::new()))
    } else {
        pool_service::connect(&config.pool)
    }
}

fn failed_row(system: &str, task: usize, repeat: usize) -> RepeatResult {
    RepeatResult {
        system: system.into(),
        task,
        repeat,
        valid_mse: f64::NAN,
        test_mse: f64::NAN,
        best_epoch: 0,
        valid_trace: Vec::new(),
        fl_epochs: Vec::new(),
        fl_rounds: 0,
        publish_failures: 0,
        init_digest: String::new(),
        data_digest: String::new(),
        failed: true,
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Diverged(_) | Error::NonFiniteGradient)
}

/// Pretrained source heads for one repeat and task, re-published into every mode's pool.
struct SourceSnapshot {
    entries: Vec<PoolEntry>,
}

fn pretrain_sources(
    config: &RunConfig,
    sources: &[(DomainData, Prepared)],
    repeat: usize,
    task: usize,
) -> Result<SourceSnapshot> {
    let ctx = RunCtx {
        config,
        mode: AblationMode::No,
        repeat,
        task,
        prefix: String::new(),
    };
    let pool = PoolStore::new();
    let mut learners = sources
        .iter()
        .map(|(d, p)| Learner::new(&d.name, d.nf, p.clone(), &ctx, false))
        .collect::<Result<Vec<_>>>()?;
    let mut audit = Vec::new();
    train_users(&mut learners, &ctx, &pool, &mut audit)?;
    Ok(SourceSnapshot {
        entries: pool.handle_fetch(None),
    })
}

/// Distinguishes invocations that share one external pool.
fn run_id() -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    format!(
        "{:x}.{}.{}",
        crate::federation::now_millis(),
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    )
}

fn run_mode(
    run: &str,
    config: &RunConfig,
    mode: AblationMode,
    target: &(DomainData, Prepared),
    sources: &[(DomainData, Prepared)],
    snapshot: Option<&SourceSnapshot>,
    repeat: usize,
    task: usize,
    audit: &mut Vec<AuditRecord>,
) -> Result<RepeatResult> {
    let ctx = RunCtx {
        config,
        mode,
        repeat,
        task,
        prefix: format!("{run}/r{repeat}-t{task}-{}/", mode.as_str()),
    };
    let pool = open_pool(config)?;
    let mut learners = Vec::new();
    match snapshot {
        Some(snap) => {
            for e in &snap.entries {
                let mut e = e.clone();
                e.user_id = format!("{}{}", ctx.prefix, e.user_id);
                pool.publish(&e)?;
            }
        }
        None => {
            for (d, p) in sources {
                learners.push(Learner::new(&d.name, d.nf, p.clone(), &ctx, config.sources_learn)?);
            }
        }
    }
    let (tdomain, tdata) = target;
    learners.push(Learner::new(&tdomain.name, tdomain.nf, tdata.clone(), &ctx, true)?);
    train_users(&mut learners, &ctx, pool.as_ref(), audit)?;
    let target_learner = learners.pop().unwrap();
    target_learner.finish(mode.system_name(), &ctx)
}

fn run_dnn(config: &RunConfig, target: &(DomainData, Prepared), repeat: usize, task: usize) -> Result<RepeatResult> {
    let (domain, data) = target;
    let base = config.seed.wrapping_add(repeat as u64);
    let mut model = DnnModel::new(domain.nf, config.w, config.adam(), mix_seed(&[base, task as u64, 77]))?;
    let init_digest = model.digest();
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[base, task as u64, user_tag(&domain.name), 2]));
    let mut order_digest = Sha256::new();
    let mut best: Option<(f64, usize, DnnModel)> = None;
    let mut trace = Vec::new();
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut order_rng);
        for &i in &order {
            order_digest.update((i as u64).to_le_bytes());
        }
        for chunk in order.chunks(config.period) {
            let batch: Vec<SampleWindow> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            model.train_batch(&batch)?;
        }
        let val = model.evaluate(&data.valid)?.final_mse;
        if !val.is_finite() {
            return Err(Error::Diverged(format!("validation MSE {val}")));
        }
        trace.push(val);
        if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
            best = Some((val, epoch, model.clone()));
        }
    }
    let (valid_mse, best_epoch, best) = best.ok_or(Error::EmptyDataset)?;
    let mut data_digest = data.digest();
    data_digest.update(order_digest.finalize());
    Ok(RepeatResult {
        system: DNN_SYSTEM.into(),
        task,
        repeat,
        valid_mse,
        test_mse: best.evaluate(&data.test)?.final_mse,
        best_epoch,
        valid_trace: trace,
        fl_epochs: Vec::new(),
        fl_rounds: 0,
        publish_failures: 0,
        init_digest,
        data_digest: hex(&data_digest.finalize()),
        failed: false,
    })
}

/// Trains the requested HFL modes (and optionally the DNN baseline) for
/// every repeat and label task, sharing data and initial weights per seed.
pub fn run_systems(
    config: &RunConfig,
    target: &DomainData,
    sources: &[DomainData],
    modes: &[AblationMode],
    baseline: bool,
) -> Result<MetricsReport> {
    config.validate()?;
    let started = Instant::now();
    let tasks: Vec<usize> = match config.label_index {
        Some(t) if t > target.nf => {
            return Err(Error::Config(format!("label index {t} > nf {}", target.nf)))
        }
        Some(t) => vec![t],
        None => (0..=target.nf).collect(),
    };
    let run = run_id();
    let mut report = MetricsReport {
        config: Some(config.clone()),
        ..Default::default()
    };
    report.param_counts.insert(
        "HFL".into(),
        crate::model::hfl_param_count(target.nf, config.w),
    );
    if baseline {
        report
            .param_counts
            .insert(DNN_SYSTEM.into(), crate::model::dnn_param_count(target.nf, config.w));
    }

    for repeat in 0..config.repeats {
        let split_seed = config.seed.wrapping_add(repeat as u64);
        for &task in &tasks {
            let tdata = (target.clone(), prepare(target, task, config, split_seed)?);
            let sdata = sources
                .iter()
                .map(|d| Ok((d.clone(), prepare(d, task.min(d.nf), config, split_seed)?)))
                .collect::<Result<Vec<_>>>()?;
            let snapshot = if config.pretrain_sources && !sources.is_empty() {
                match pretrain_sources(config, &sdata, repeat, task) {
                    Ok(s) => Some(s),
                    Err(e) if is_divergence(&e) => {
                        warn!("repeat {repeat} task {task}: source pretraining diverged: {e}");
                        for m in modes {
                            report.rows.push(failed_row(m.system_name(), task, repeat));
                        }
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            for &mode in modes {
                let mut audit = Vec::new();
                match run_mode(&run, config, mode, &tdata, &sdata, snapshot.as_ref(), repeat, task, &mut audit) {
                    Ok(row) => {
                        info!(
                            "repeat {repeat} task {task} {}: valid {:.4} test {:.4}",
                            row.system, row.valid_mse, row.test_mse
                        );
                        report.rows.push(row);
                        report.audit.extend(audit);
                    }
                    Err(e) if is_divergence(&e) => {
                        warn!("repeat {repeat} task {task} {}: {e}", mode.system_name());
                        report.rows.push(failed_row(mode.system_name(), task, repeat));
                    }
                    Err(e) => return Err(e),
                }
            }
            if baseline {
                match run_dnn(config, &tdata, repeat, task) {
                    Ok(row) => report.rows.push(row),
                    Err(e) if is_divergence(&e) => {
                        warn!("repeat {repeat} task {task} DNN: {e}");
                        report.rows.push(failed_row(DNN_SYSTEM, task, repeat));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    report.aggregate();
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Runs `config.mode` (plus the DNN baseline when `config.baseline`).
pub fn run_experiment(config: &RunConfig, target: &DomainData, sources: &[DomainData]) -> Result<MetricsReport> {
    run_systems(config, target, sources, &[config.mode], config.baseline)
}

/// Runs all four ablation modes on identical data and seeds.
pub fn run_ablation_grid(config: &RunConfig, target: &DomainData, sources: &[DomainData]) -> Result<MetricsReport> {
    run_systems(config, target, sources, &AblationMode::ALL, false)
}

/// Trains only the DNN baseline.
pub fn dnn_baseline(config: &RunConfig, target: &DomainData) -> Result<MetricsReport> {
    run_systems(config, target, &[], &[], true)
}

pub const METRICS_HEADER: [&str; 11] = [
    "system",
    "task",
    "repeat",
    "valid_mse",
    "test_mse",
    "rank",
    "best_epoch",
    "fl_rounds",
    "init_digest",
    "data_digest",
    "failed",
];

/// One parsed line of `metrics.csv`. Aggregate lines have `repeat == "mean"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsCsvRow {
    pub system: String,
    pub task: usize,
    pub repeat: String,
    pub valid_mse: f64,
    pub test_mse: f64,
    pub rank: Option<usize>,
    pub best_epoch: Option<usize>,
    pub fl_rounds: Option<usize>,
    pub init_digest: String,
    pub data_digest: String,
    pub failed: bool,
}

/// Writes `metrics.csv`, `audit.jsonl` and `summary.json` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let csv_err = |e: csv::Error| Error::Io(e.into());

    let metrics = dir.join("metrics.csv");
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&metrics)
        .map_err(csv_err)?;
    wtr.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in &report.rows {
        wtr.serialize(MetricsCsvRow {
            system: r.system.clone(),
            task: r.task,
            repeat: r.repeat.to_string(),
            valid_mse: r.valid_mse,
            test_mse: r.test_mse,
            rank: None,
            best_epoch: Some(r.best_epoch),
            fl_rounds: Some(r.fl_rounds),
            init_digest: r.init_digest.clone(),
            data_digest: r.data_digest.clone(),
            failed: r.failed,
        })
        .map_err(csv_err)?;
    }
    for a in &report.aggregates {
        wtr.serialize(MetricsCsvRow {
            system: a.system.clone(),
            task: a.task,
            repeat: "mean".into(),
            valid_mse: a.valid_mse,
            test_mse: a.test_mse,
            rank: Some(a.rank),
            best_epoch: None,
            fl_rounds: None,
            init_digest: String::new(),
            data_digest: String::new(),
            failed: false,
        })
        .map_err(csv_err)?;
    }
    wtr.flush()?;

    let audit = dir.join("audit.jsonl");
    let mut f = std::io::BufWriter::new(fs::File::create(&audit)?);
    for rec in &report.audit {
        serde_json::to_writer(&mut f, rec).map_err(|e| Error::Io(e.into()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;

    let summary = dir.join("summary.json");
    let (groups, consistent) = report.fairness();
    let body = serde_json::json!({
        "ablation_fairness": { "groups": groups, "identical_init_and_data": consistent },
        "param_counts": report.param_counts,
        "failed_repeats": report.failed_repeats,
        "wall_clock_secs": report.wall_clock_secs,
        "baseline_input": "flattened dense tensor",
        "config": report.config,
    });
    fs::write(&summary, serde_json::to_vec_pretty(&body).map_err(|e| Error::Io(e.into()))?)?;
    Ok(vec![metrics, audit, summary])
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsCsvRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(e.into()))?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Csv {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })
        })
        .collect()
}
