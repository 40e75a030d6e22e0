//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use fedsparse_core::nn::{Activation, MlpWeights};
use fedsparse_core::sparse_ts::{Event, SparseSeries};
use fedsparse_core::PoolEntry;
use rand::Rng;

pub const SLOPE: f64 = 0.01;

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::None => x,
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::LeakyRelu => {
            if x > 0.0 {
                x
            } else {
                SLOPE * x
            }
        }
    }
}

/// Plain forward pass; also returns every pre-activation.
pub fn forward(net: &MlpWeights, input: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut x = input.to_vec();
    let mut pres = Vec::new();
    for layer in &net.layers {
        let mut pre = Vec::with_capacity(layer.out_dim());
        for r in 0..layer.out_dim() {
            let mut s = layer.bias[r];
            for c in 0..layer.in_dim() {
                s += layer.weight.get(r, c) * x[c];
            }
            pre.push(s);
        }
        x = pre.iter().map(|&p| act(layer.activation, p)).collect();
        pres.push(pre);
    }
    (x, pres)
}

/// Sign pattern of every leaky-ReLU pre-activation.
pub fn kink_pattern(net: &MlpWeights, input: &[f64]) -> Vec<bool> {
    let (_, pres) = forward(net, input);
    net.layers
        .iter()
        .zip(&pres)
        .filter(|(l, _)| l.activation == Activation::LeakyRelu)
        .flat_map(|(_, p)| p.iter().map(|&v| v > 0.0))
        .collect()
}

pub struct Window {
    pub dense: Vec<Vec<f64>>,
    pub sparse: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    pub label: f64,
}

/// Per label event: scan backward from the label for the sparse grid
/// window and, separately, for each feature's last `w` values.
pub fn pack_oracle(series: &SparseSeries, nf: usize, w: usize) -> (Vec<Window>, usize) {
    let ev = &series.events;
    let mut out = Vec::new();
    let mut skipped = 0;
    for p in 0..ev.len() {
        if ev[p].channel != nf {
            continue;
        }
        let mut dense = vec![Vec::new(); nf];
        for i in 0..nf {
            let mut q = p;
            while q > 0 && dense[i].len() < w {
                q -= 1;
                if ev[q].channel == i {
                    dense[i].push(ev[q].value);
                }
            }
        }
        if p < w || dense.iter().any(|d| d.len() < w) {
            skipped += 1;
            continue;
        }
        let mut sparse = vec![vec![0.0; w]; nf];
        let mut mask = vec![vec![false; w]; nf];
        for k in 0..w {
            let e = &ev[p - 1 - k];
            if e.channel < nf {
                sparse[e.channel][k] = e.value;
                mask[e.channel][k] = true;
            }
        }
        out.push(Window {
            dense,
            sparse,
            mask,
            label: ev[p].value,
        });
    }
    (out, skipped)
}

pub fn random_series<R: Rng>(rng: &mut R, nf: usize, max_events: usize) -> SparseSeries {
    let n = rng.gen_range(0..=max_events);
    let mut t = rng.gen_range(-5.0..5.0);
    let events = (0..n)
        .map(|_| {
            t += rng.gen_range(0.01..3.0);
            Event::new(t, rng.gen_range(0..=nf), rng.gen_range(-10.0..10.0))
        })
        .collect();
    SparseSeries {
        patient_id: "p".into(),
        events,
    }
}

pub fn sum_sq_residual(net: &MlpWeights, recent: &[(Vec<f64>, f64)]) -> f64 {
    recent
        .iter()
        .map(|(x, y)| {
            let r = y - forward(net, x).0[0];
            r * r
        })
        .sum()
}

/// Exhaustive argmin with the (user, feature) tie-break.
pub fn select_oracle(pool: &[PoolEntry], recent: &[(Vec<f64>, f64)]) -> usize {
    let mut best: Option<(f64, &str, usize, usize)> = None;
    for (i, e) in pool.iter().enumerate() {
        let s = sum_sq_residual(&e.weights, recent);
        let better = match best {
            None => true,
            Some((bs, bu, bf, _)) => s < bs || (s == bs && (e.user_id.as_str(), e.feature_index) < (bu, bf)),
        };
        if better {
            best = Some((s, &e.user_id, e.feature_index, i));
        }
    }
    best.unwrap().3
}

/// Epoch `e` (1-based) is FL-active when the best loss over epochs `1..e`
/// was already reached before the last three of them.
pub fn gate_oracle(losses: &[f64], patience: usize) -> Vec<bool> {
    (1..=losses.len())
        .map(|n| {
            if n <= patience {
                return false;
            }
            let before = losses[..n - patience].iter().cloned().fold(f64::INFINITY, f64::min);
            losses[n - patience..n].iter().all(|&l| l >= before)
        })
        .collect()
}
