use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdm_core::encoder::{
    embed_sequence, encode, encoder_block, wasserstein_attention, EncoderConfig, ModelParams, VarianceAggregation,
};
use wdm_core::wasserstein::{w2_sq, GaussianState, VARIANCE_FLOOR};

fn config(layers: usize, heads: usize, aggregation: VarianceAggregation) -> EncoderConfig {
    EncoderConfig {
        item_count: 12,
        dim: 8,
        layers,
        heads,
        max_len: 10,
        ffn_dim: 16,
        dropout: 0.0,
        variance_aggregation: aggregation,
    }
}

fn params(cfg: &EncoderConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(cfg, &mut rng).unwrap();
    let names: Vec<String> = p.names().to_vec();
    for name in names {
        if name.ends_with("gamma") {
            continue;
        }
        for v in &mut p.get_mut(&name).unwrap().data {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    p
}

fn close(a: &GaussianState, b: &GaussianState, tol: f64) -> bool {
    a.mean.iter().zip(&b.mean).all(|(x, y)| (x - y).abs() <= tol)
        && a.variance.iter().zip(&b.variance).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn future_items_do_not_leak() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (layers, heads) in [(1, 1), (2, 2), (3, 4)] {
        let cfg = config(layers, heads, VarianceAggregation::Squared);
        let p = params(&cfg, layers as u64);
        for _ in 0..20 {
            let len = rng.random_range(2..=cfg.max_len);
            let seq: Vec<usize> = (0..len).map(|_| rng.random_range(1..=12)).collect();
            let cut = rng.random_range(0..len - 1);
            let mut changed = seq.clone();
            for item in &mut changed[cut + 1..] {
                *item = *item % 12 + 1;
            }
            let a = encode(&seq, &p, &cfg).unwrap();
            let b = encode(&changed, &p, &cfg).unwrap();
            let offset = a.len() - len;
            for t in 0..=cut {
                assert!(close(&a.states[offset + t], &b.states[offset + t], 1e-12));
            }
            assert!(!close(&a.states[offset + len - 1], &b.states[offset + len - 1], 1e-12));
        }
    }
}

#[test]
fn left_padding_is_invisible() {
    let cfg = config(2, 2, VarianceAggregation::Squared);
    let p = params(&cfg, 3);
    let seq = vec![4, 9, 1, 7];
    let bare = encode(&seq, &p, &cfg).unwrap();
    for pad in 1..=cfg.max_len - seq.len() {
        let mut padded = vec![0; pad];
        padded.extend(&seq);
        let out = encode(&padded, &p, &cfg).unwrap();
        assert_eq!(out.valid.iter().filter(|&&v| v).count(), seq.len());
        let shift = out.len() - bare.len();
        for t in 0..bare.len() {
            assert!(close(&bare.states[t], &out.states[t + shift], 1e-9));
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = config(1, 2, VarianceAggregation::Squared);
    let p = params(&cfg, 9);
    let emb = embed_sequence(&[0, 0, 3, 5, 2, 8], &p, &cfg).unwrap();
    let out = wasserstein_attention(&p, &cfg, 0, &emb.states, &emb.valid).unwrap();
    let len = emb.states.len();
    for r in 0..out.weights.rows {
        let row = out.weights.row(r);
        assert!(row.iter().all(|&w| w >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let query = r % len;
        if emb.valid[query] {
            for (k, &w) in row.iter().enumerate() {
                if k > query || !emb.valid[k] {
                    assert_eq!(w, 0.0);
                }
            }
        }
    }
}

/// Straight loop over one head: softmax of −w2 scores over allowed keys,
/// weighted mean and squared-weight variance sums.
#[test]
fn attention_matches_reference_loop() {
    for aggregation in [VarianceAggregation::Squared, VarianceAggregation::Linear] {
        let cfg = config(1, 1, aggregation);
        let p = params(&cfg, 21);
        let emb = embed_sequence(&[0, 6, 2, 11, 4], &p, &cfg).unwrap();
        let out = wasserstein_attention(&p, &cfg, 0, &emb.states, &emb.valid).unwrap();

        let project = |s: &GaussianState, name: &str, cov: bool| -> Vec<f64> {
            let w = p.get(&format!("layer0.{name}")).unwrap();
            let x = if cov { &s.variance } else { &s.mean };
            (0..w.cols)
                .map(|c| {
                    let z: f64 = (0..w.rows).map(|r| x[r] * w.get(r, c)).sum();
                    if cov {
                        if z > 0.0 { z + 1.0 } else { z.exp().max(VARIANCE_FLOOR) }
                    } else {
                        z
                    }
                })
                .collect()
        };
        let n = emb.states.len();
        let g = |s: &GaussianState, m: &str, c: &str| {
            GaussianState::new(project(s, m, false), project(s, c, true)).unwrap()
        };
        let q: Vec<_> = emb.states.iter().map(|s| g(s, "q_mean", "q_cov")).collect();
        let k: Vec<_> = emb.states.iter().map(|s| g(s, "k_mean", "k_cov")).collect();
        let v: Vec<_> = emb.states.iter().map(|s| g(s, "v_mean", "v_cov")).collect();
        for i in (0..n).filter(|&i| emb.valid[i]) {
            let allowed: Vec<usize> = (0..=i).filter(|&j| emb.valid[j]).collect();
            let scores: Vec<f64> = allowed.iter().map(|&j| -w2_sq(&q[i], &k[j]).unwrap()).collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
            let a: Vec<f64> = scores.iter().map(|s| (s - top).exp() / z).collect();
            for d in 0..cfg.dim {
                let mean: f64 = allowed.iter().zip(&a).map(|(&j, w)| w * v[j].mean[d]).sum();
                let var: f64 = allowed
                    .iter()
                    .zip(&a)
                    .map(|(&j, w)| match aggregation {
                        VarianceAggregation::Squared => w * w * v[j].variance[d],
                        VarianceAggregation::Linear => w * v[j].variance[d],
                    })
                    .sum();
                assert!((out.states[i].mean[d] - mean).abs() < 1e-12);
                assert!((out.states[i].variance[d] - var).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn variances_stay_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = config(2, 2, VarianceAggregation::Squared);
    let mut p = params(&cfg, 4);
    // push covariance parameters strongly negative
    let names: Vec<String> = p.names().iter().filter(|n| n.contains("cov")).cloned().collect();
    for name in names {
        for v in &mut p.get_mut(&name).unwrap().data {
            *v = rng.random_range(-40.0..5.0);
        }
    }
    for _ in 0..20 {
        let len = rng.random_range(1..=cfg.max_len);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(1..=12)).collect();
        let out = encode(&seq, &p, &cfg).unwrap();
        for s in &out.states {
            assert!(s.variance.iter().all(|&v| v >= VARIANCE_FLOOR && v.is_finite()));
        }
        for s in &embed_sequence(&seq, &p, &cfg).unwrap().states {
            assert!(s.variance.iter().all(|&v| v >= VARIANCE_FLOOR));
        }
    }
}

#[test]
fn block_preserves_shape_and_embedding_is_additive() {
    let cfg = config(1, 1, VarianceAggregation::Squared);
    let p = params(&cfg, 2);
    let emb = embed_sequence(&[5, 3, 5], &p, &cfg).unwrap();
    let item = p.get("item_mean").unwrap();
    let pos = p.get("pos_mean").unwrap();
    for d in 0..cfg.dim {
        // slot t of 3 uses position index 2 - t
        assert!((emb.states[0].mean[d] - (item.get(5, d) + pos.get(2, d))).abs() < 1e-15);
        assert!((emb.states[2].mean[d] - (item.get(5, d) + pos.get(0, d))).abs() < 1e-15);
    }
    let out = encoder_block(&p, &cfg, 0, &emb.states, &emb.valid).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out.iter().all(|s| s.dim() == cfg.dim));
}
