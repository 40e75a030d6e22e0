//! Synthetic sparse multichannel series with a shared latent AR(1) driver.
//!
//! Every channel is an affine view of a linear mix of the latent state plus
//! Gaussian noise; at each integer timestamp exactly one channel is revealed.
//! Two domains built from the same mixing matrix but different per-channel
//! affine transforms give a heterogeneous pair for transfer experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse_ts::{Event, SparseSeries};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingScheme {
    #[default]
    RoundRobin,
    UniformRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelTransform {
    pub scale: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSpec {
    /// Patient id prefix.
    pub name: String,
    /// Number of feature channels; channel `nf` is the label.
    pub nf: usize,
    pub n_patients: usize,
    pub events_per_patient: usize,
    pub latent_dim: usize,
    pub mixing_seed: u64,
    pub ar_coef: f64,
    pub innovation_std: f64,
    pub noise_std: f64,
    pub sampling: SamplingScheme,
    /// Window size the data must support (`events_per_patient >= (nf+1)·w`).
    pub window: usize,
    /// Seed for drawing transforms when `transforms` is absent.
    pub transform_seed: u64,
    pub transforms: Option<Vec<ChannelTransform>>,
}

impl Default for DomainSpec {
    fn default() -> Self {
        let ar_coef: f64 = 0.95;
        Self {
            name: "domain".into(),
            nf: 4,
            n_patients: 20,
            events_per_patient: 200,
            latent_dim: 2,
            mixing_seed: 7,
            ar_coef,
            innovation_std: (1.0 - ar_coef * ar_coef).sqrt(),
            noise_std: 0.1,
            sampling: SamplingScheme::RoundRobin,
            window: 3,
            transform_seed: 11,
            transforms: None,
        }
    }
}

impl DomainSpec {
    pub fn channels(&self) -> usize {
        self.nf + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.nf < 2 {
            return bad(format!("nf must be at least 2, got {}", self.nf));
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.events_per_patient < self.channels() * self.window {
            return bad(format!(
                "events_per_patient {} < (nf+1)·w = {}",
                self.events_per_patient,
                self.channels() * self.window
            ));
        }
        if self.latent_dim == 0 || self.n_patients == 0 {
            return bad("latent_dim and n_patients must be positive".into());
        }
        if !(self.ar_coef.abs() <= 1.0) {
            return bad(format!("ar_coef {} outside [-1, 1]", self.ar_coef));
        }
        if !(self.noise_std >= 0.0 && self.innovation_std >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if let Some(t) = &self.transforms {
            if t.len() != self.channels() {
                return bad(format!("{} transforms for {} channels", t.len(), self.channels()));
            }
        }
        Ok(())
    }

    pub fn channel_transforms(&self) -> Vec<ChannelTransform> {
        if let Some(t) = &self.transforms {
            return t.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.transform_seed);
        (0..self.channels())
            .map(|_| ChannelTransform {
                scale: rng.gen_range(1.0..3.0),
                offset: rng.gen_range(-2.0..2.0),
            })
            .collect()
    }

    /// `(nf+1) × latent_dim` loadings, shared by every domain with the same seed.
    pub fn mixing_matrix(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mixing_seed);
        let norm = (self.latent_dim as f64).sqrt();
        (0..self.channels())
            .map(|_| {
                (0..self.latent_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .map(|v: f64| v / norm)
                    .collect()
            })
            .collect()
    }
}

/// A generated series together with the noiseless latent drive of each event.
#[derive(Clone, Debug, PartialEq)]
pub struct TracedSeries {
    pub series: SparseSeries,
    /// `mixing[channel] · z_t` for every event, before transform and noise.
    pub drivers: Vec<f64>,
}

pub fn gen_domain_traced(spec: &DomainSpec, seed: u64) -> Result<Vec<TracedSeries>> {
    spec.validate()?;
    let mixing = spec.mixing_matrix();
    let transforms = spec.channel_transforms();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let patient_seeds: Vec<u64> = (0..spec.n_patients).map(|_| master.gen()).collect();

    patient_seeds
        .into_iter()
        .enumerate()
        .map(|(p, pseed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(pseed);
            let mut z: Vec<f64> = (0..spec.latent_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let mut events = Vec::with_capacity(spec.events_per_patient);
            let mut drivers = Vec::with_capacity(spec.events_per_patient);
            for t in 0..spec.events_per_patient {
                if t > 0 {
                    for zk in &mut z {
                        let eta: f64 = StandardNormal.sample(&mut rng);
                        *zk = spec.ar_coef * *zk + spec.innovation_std * eta;
                    }
                }
                let channel = match spec.sampling {
                    SamplingScheme::RoundRobin => t % spec.channels(),
                    SamplingScheme::UniformRandom => rng.gen_range(0..spec.channels()),
                };
                let drive: f64 = mixing[channel].iter().zip(&z).map(|(m, v)| m * v).sum();
                let noise: f64 = StandardNormal.sample(&mut rng);
                let tf = transforms[channel];
                let value = tf.scale * drive + tf.offset + spec.noise_std * noise;
                events.push(Event::new(t as f64, channel, value));
                drivers.push(drive);
            }
            Ok(TracedSeries {
                series: SparseSeries {
                    patient_id: format!("{}-{p:05}", spec.name),
                    events,
                },
                drivers,
            })
        })
        .collect()
}

pub fn gen_domain(spec: &DomainSpec, seed: u64) -> Result<Vec<SparseSeries>> {
    Ok(gen_domain_traced(spec, seed)?
        .into_iter()
        .map(|t| t.series)
        .collect())
}

/// Target and source specs sharing the latent family. The source has ten
/// times the patients and its own per-channel scale and offset.
pub fn heterogeneous_specs(base: &DomainSpec, seed: u64) -> (DomainSpec, DomainSpec) {
    let base_tf = base.channel_transforms();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d0d0);
    let source_tf = base_tf
        .iter()
        .map(|t| {
            let ratio: f64 = rng.gen_range(1.1..1.4);
            let ratio = if rng.gen_bool(0.5) { ratio } else { 1.0 / ratio };
            ChannelTransform {
                scale: t.scale * ratio,
                offset: t.offset + rng.gen_range(-0.5..0.5),
            }
        })
        .collect();
    let target = DomainSpec {
        name: "target".into(),
        transforms: Some(base_tf),
        ..base.clone()
    };
    let source = DomainSpec {
        name: "source".into(),
        n_patients: base.n_patients * 10,
        transforms: Some(source_tf),
        ..base.clone()
    };
    (target, source)
}

pub fn make_heterogeneous_pair(
    base: &DomainSpec,
    seed: u64,
) -> Result<(Vec<SparseSeries>, Vec<SparseSeries>)> {
    let (target, source) = heterogeneous_specs(base, seed);
    Ok((
        gen_domain(&target, seed)?,
        gen_domain(&source, seed.wrapping_add(1))?,
    ))
}
