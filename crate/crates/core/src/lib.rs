//! Heterogeneous federated learning for sparse, irregular multichannel time
//! series.
//!
//! * [`sparse_ts`] packs per-label dense and sparse feature windows.
//! * [`nn`] is a small f64 MLP kernel with backpropagation and Adam.
//! * [`model`] is the multi-task head / embedding / prediction network.
//! * [`federation`] selects and blends pooled heads behind a validation gate.
//! * [`pool_service`] stores published heads in memory, over TCP or on disk.
//! * [`synth`] generates heterogeneous synthetic domains.
//! * [`harness`] runs experiments, baselines and ablations.

pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod nn;
pub mod pool_service;
pub mod sparse_ts;
pub mod synth;

pub use error::{Error, Result};
pub use federation::{
    blend_head, fl_round, publish_heads, select_head, update_switch, AuditRecord, HeadPublisher,
    PoolClient, PoolEntry, PoolKey, PublishOutcome, SelectionPolicy, SelectionScore, SwitchState,
};
pub use harness::{
    dnn_baseline, emit_report, run_ablation_grid, run_experiment, AblationMode, DomainData,
    MetricsReport, RunConfig,
};
pub use model::{DnnModel, HflModel, Regressor};
pub use nn::{adam_step, mse, Activation, AdamConfig, AdamState, LayerSpec, MlpWeights};
pub use pool_service::{serve, FilePool, PoolServer, PoolStore, TcpPoolClient};
pub use sparse_ts::{build_dataset, Dataset, Event, SampleWindow, SparseSeries};
pub use synth::{gen_domain, make_heterogeneous_pair, DomainSpec};
