mod common;

use fedsparse_core::federation::{fl_round, SelectionPolicy, SelectionScore};
use fedsparse_core::model::{head_specs, LossTerms};
use fedsparse_core::nn::{AdamConfig, Gradients, Matrix, MlpWeights};
use fedsparse_core::sparse_ts::SampleWindow;
use fedsparse_core::{HflModel, PoolEntry, Regressor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_window(rng: &mut ChaCha8Rng, nf: usize, w: usize) -> SampleWindow {
    let mut sparse = Matrix::zeros(nf, w);
    let mut mask = vec![false; nf * w];
    for k in 0..w {
        if rng.gen_bool(0.8) {
            let i = rng.gen_range(0..nf);
            sparse.set(i, k, rng.gen_range(-2.0..2.0));
            mask[i * w + k] = true;
        }
    }
    SampleWindow {
        dense: Matrix::from_vec(nf, w, (0..nf * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
        sparse,
        mask,
        label: rng.gen_range(-1.0..1.0),
        t_index: 0,
    }
}

fn flatten(g: &Gradients) -> Vec<f64> {
    g.layers.iter().flat_map(|(w, b)| w.as_slice().iter().chain(b).cloned()).collect()
}

#[test]
fn full_forward_is_the_manual_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = HflModel::new(4, 3, AdamConfig::default(), 9).unwrap();
    for _ in 0..20 {
        let win = random_window(&mut rng, 4, 3);
        let prelim: Vec<f64> = (0..4).map(|i| common::forward(&m.heads[i], win.dense.row(i)).0[0]).collect();
        let e = common::forward(&m.embedding, win.sparse.as_slice()).0;
        let joined: Vec<f64> = prelim.iter().chain(&e).cloned().collect();
        let want = common::forward(&m.prediction, &joined).0[0];
        let trace = m.full_forward(&win).unwrap();
        assert!((trace.prediction - want).abs() < 1e-12);
        assert_eq!(trace.embedded.len(), 3);
        assert!((m.predict_window(&win).unwrap() - want).abs() < 1e-12);
    }
}

/// With joint gradients every parameter gets d(sum of head and final MSEs).
#[test]
fn model_gradients_match_finite_differences() {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = HflModel::new(3, 2, AdamConfig::default(), 4).unwrap();
    m.joint_grads = true;
    let batch: Vec<SampleWindow> = (0..5).map(|_| random_window(&mut rng, 3, 2)).collect();
    let total = |m: &HflModel| {
        let l = m.evaluate(&batch).unwrap();
        l.final_mse + l.head.iter().sum::<f64>()
    };
    let (grads, _) = m.gradients(&batch, LossTerms::All).unwrap();
    let mut worst = 0.0_f64;
    for net_idx in 0..5 {
        let analytic = match net_idx {
            0..=2 => flatten(&grads.heads[net_idx]),
            3 => flatten(&grads.embedding),
            _ => flatten(&grads.prediction),
        };
        for _ in 0..15 {
            let j = rng.gen_range(0..analytic.len());
            let bump = |d: f64| {
                let mut c = m.clone();
                let net = match net_idx {
                    0..=2 => &mut c.heads[net_idx],
                    3 => &mut c.embedding,
                    _ => &mut c.prediction,
                };
                let mut k = j;
                for layer in &mut net.layers {
                    let nw = layer.weight.as_slice().len();
                    if k < nw {
                        layer.weight.as_mut_slice()[k] += d;
                        break;
                    }
                    k -= nw;
                    if k < layer.bias.len() {
                        layer.bias[k] += d;
                        break;
                    }
                    k -= layer.bias.len();
                }
                c
            };
            let numeric = (total(&bump(H)) - total(&bump(-H))) / (2.0 * H);
            // the summed loss is O(1), so differences below ~1e-11 are roundoff
            let rel = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn detached_heads_get_only_their_own_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = HflModel::new(4, 3, AdamConfig::default(), 1).unwrap();
    let batch: Vec<SampleWindow> = (0..8).map(|_| random_window(&mut rng, 4, 3)).collect();
    let (all, _) = m.gradients(&batch, LossTerms::All).unwrap();
    let (heads, _) = m.gradients(&batch, LossTerms::HeadsOnly).unwrap();
    let (fin, _) = m.gradients(&batch, LossTerms::FinalOnly).unwrap();
    for i in 0..4 {
        assert_eq!(all.heads[i], heads.heads[i]);
        assert_eq!(fin.heads[i].max_abs(), 0.0);
    }
    assert_eq!(all.embedding, fin.embedding);
    assert_eq!(all.prediction, fin.prediction);
    assert_eq!(heads.embedding.max_abs(), 0.0);
    assert_eq!(heads.prediction.max_abs(), 0.0);

    // head i's update depends only on dense row i and the label
    let mut a = m.clone();
    let mut b = m.clone();
    let mut shifted = batch.clone();
    for w in &mut shifted {
        w.sparse.as_mut_slice().iter_mut().for_each(|v| *v += 1.0);
        for k in 0..3 {
            w.dense.set(3, k, 0.0);
        }
    }
    a.train_batch(&batch).unwrap();
    b.train_batch(&shifted).unwrap();
    for i in 0..3 {
        assert_eq!(a.heads[i], b.heads[i]);
    }
    assert_ne!(a.heads[3], b.heads[3]);
}

/// Permuting features, heads and the matching input columns leaves predictions unchanged.
#[test]
fn feature_permutation_symmetry() {
    let (nf, w) = (4, 3);
    let perm = [2, 0, 3, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = HflModel::new(nf, w, AdamConfig::default(), 8).unwrap();
    let mut p = m.clone();
    for (new_i, &old_i) in perm.iter().enumerate() {
        p.heads[new_i] = m.heads[old_i].clone();
    }
    let first = &mut p.prediction.layers[0].weight;
    let orig = &m.prediction.layers[0].weight;
    for r in 0..first.rows() {
        for (new_i, &old_i) in perm.iter().enumerate() {
            first.set(r, new_i, orig.get(r, old_i));
        }
    }
    let emb = &mut p.embedding.layers[0].weight;
    let orig = &m.embedding.layers[0].weight;
    for r in 0..emb.rows() {
        for (new_i, &old_i) in perm.iter().enumerate() {
            for k in 0..w {
                emb.set(r, new_i * w + k, orig.get(r, old_i * w + k));
            }
        }
    }
    for _ in 0..20 {
        let win = random_window(&mut rng, nf, w);
        let mut pw = win.clone();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for k in 0..w {
                pw.dense.set(new_i, k, win.dense.get(old_i, k));
                pw.sparse.set(new_i, k, win.sparse.get(old_i, k));
            }
        }
        let (a, b) = (m.predict_window(&win).unwrap(), p.predict_window(&pw).unwrap());
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn recent_for(rng: &mut ChaCha8Rng, nf: usize, w: usize, r: usize) -> Vec<Vec<(Vec<f64>, f64)>> {
    (0..nf)
        .map(|_| (0..r).map(|_| ((0..w).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen())).collect())
        .collect()
}

#[test]
fn random_policy_on_single_entry_pool_equals_best() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = HflModel::new(4, 3, AdamConfig::default(), 2).unwrap();
    let pool = vec![PoolEntry::new("src", 1, 4, MlpWeights::init(&head_specs(3), 77).unwrap())];
    let recent = recent_for(&mut rng, 4, 3, 10);
    let mut a = base.clone();
    let mut b = base.clone();
    let oa = fl_round(&mut a, &pool, &recent, 0.2, &mut SelectionPolicy::Best(SelectionScore::Squared)).unwrap();
    let ob = fl_round(&mut b, &pool, &recent, 0.2, &mut SelectionPolicy::Random(ChaCha8Rng::seed_from_u64(1))).unwrap();
    assert_eq!(a, b);
    assert_eq!(oa, ob);
    assert_eq!(a.embedding, base.embedding);
    assert_eq!(a.prediction, base.prediction);
}

#[test]
fn fl_round_selects_per_head_like_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let mut m = HflModel::new(3, 2, AdamConfig::default(), rng.gen()).unwrap();
        let before = m.clone();
        let pool: Vec<PoolEntry> = (0..6)
            .map(|k| PoolEntry::new(format!("s{}", k % 2), k, 1, MlpWeights::init(&head_specs(2), rng.gen()).unwrap()))
            .chain([PoolEntry::new("odd", 0, 1, MlpWeights::init(&head_specs(3), 1).unwrap())])
            .collect();
        let recent = recent_for(&mut rng, 3, 2, 12);
        let out = fl_round(&mut m, &pool, &recent, 0.2, &mut SelectionPolicy::Best(SelectionScore::Squared)).unwrap();
        for i in 0..3 {
            let want = common::select_oracle(&pool[..6], &recent[i]);
            assert_eq!(out.selections[i].feature_index, pool[want].feature_index);
            let blended = fedsparse_core::blend_head(&before.heads[i], &pool[want].weights, 0.2).unwrap();
            assert_eq!(m.heads[i], blended);
        }
    }
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut m = HflModel::new(4, 3, AdamConfig::default(), 3).unwrap();
    let batch: Vec<SampleWindow> = (0..10).map(|_| random_window(&mut rng, 4, 3)).collect();
    m.train_batch(&batch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    m.save(&path, "w = 3").unwrap();
    let (back, echo) = HflModel::from_checkpoint(&std::fs::read(&path).unwrap(), AdamConfig::default()).unwrap();
    assert_eq!(echo, "w = 3");
    assert_eq!(back.digest(), m.digest());
    for w in &batch {
        assert_eq!(back.predict_window(w).unwrap().to_bits(), m.predict_window(w).unwrap().to_bits());
    }
}
