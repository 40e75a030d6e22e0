//! Fixtures shared by the benchmarks in `benches/`.

use fedsparse_core::model::head_specs;
use fedsparse_core::sparse_ts::{build_dataset, SampleWindow, SparseSeries};
use fedsparse_core::synth::{gen_domain, DomainSpec};
use fedsparse_core::{MlpWeights, PoolEntry};

pub fn series(patients: usize, events: usize) -> Vec<SparseSeries> {
    let spec = DomainSpec {
        n_patients: patients,
        events_per_patient: events,
        ..DomainSpec::default()
    };
    gen_domain(&spec, 1).expect("valid spec")
}

/// Training windows for nf = 4, w = 3.
pub fn windows(n: usize) -> Vec<SampleWindow> {
    let mut out = Vec::with_capacity(n);
    for s in series(n / 30 + 1, 200) {
        out.extend(build_dataset(&s, 4, 3).expect("valid series").windows);
    }
    out.truncate(n);
    out
}

pub fn head_pool(entries: usize) -> Vec<PoolEntry> {
    (0..entries)
        .map(|k| PoolEntry::new(format!("user{}", k / 4), k % 4, 1, MlpWeights::init(&head_specs(3), k as u64).unwrap()))
        .collect()
}
