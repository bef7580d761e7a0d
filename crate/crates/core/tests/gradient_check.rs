//! Every parameter gradient of the combined objective against central
//! finite differences on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdm_core::config::{ContrastiveLoss, TrainConfig};
use wdm_core::corpus::{Corpus, UserSequence};
use wdm_core::encoder::{encode, ModelParams};
use wdm_core::objectives::{mstein_cl_loss, pvn_loss, rec_loss, ContrastiveBatch};
use wdm_core::trainer::{PreparedBatch, Trainer};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn tiny_config(cl: ContrastiveLoss) -> TrainConfig {
    TrainConfig {
        dim: 4,
        layers: 1,
        heads: 1,
        max_len: 5,
        ffn_dim: 4,
        dropout: 0.0,
        beta: 0.5,
        lambda: 0.3,
        cl_loss: cl,
        ..TrainConfig::default()
    }
}

fn tiny_trainer(cl: ContrastiveLoss) -> Trainer {
    let corpus = Corpus {
        item_count: 6,
        sequences: vec![
            UserSequence { user_index: 0, items: vec![1, 2, 3, 4, 5, 1, 2] },
            UserSequence { user_index: 1, items: vec![6, 5, 4, 3, 2] },
        ],
    };
    Trainer::new(tiny_config(cl), corpus.item_count, corpus.splits().unwrap()).unwrap()
}

/// Spread parameters well away from zero so every path carries signal.
fn spread(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().to_vec();
    for name in names {
        let gain = name.ends_with("gamma");
        for v in &mut params.get_mut(&name).unwrap().data {
            *v = if gain { 1.0 + rng.random_range(-0.3..0.3) } else { rng.random_range(-0.6..0.6) };
        }
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn check(cl: ContrastiveLoss) -> (usize, f64) {
    let trainer = tiny_trainer(cl);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut state = trainer.initial_state().unwrap();
    spread(&mut state.params, &mut rng);
    let batch = trainer.prepare_batch(&[0, 1], &mut rng).unwrap();
    let none = None::<&mut ChaCha8Rng>;
    let (grads, _) = trainer.gradients(&state.params, &batch, none).unwrap();

    let loss = |p: &ModelParams| {
        let (_, _, _, b) = trainer.loss_graph(p, &batch, None::<&mut ChaCha8Rng>).unwrap();
        b.total
    };
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = state.params.names().to_vec();
    for (k, name) in names.iter().enumerate() {
        for i in 0..state.params.get(name).unwrap().data.len() {
            let mut p = state.params.clone();
            p.get_mut(name).unwrap().data[i] += STEP;
            let up = loss(&p);
            p.get_mut(name).unwrap().data[i] -= 2.0 * STEP;
            let down = loss(&p);
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(grads[k].data[i], numeric);
            assert!(
                err < TOLERANCE,
                "{name}[{i}]: analytic {} numeric {numeric} (rel {err:e})",
                grads[k].data[i]
            );
            worst = worst.max(err);
            checked += 1;
        }
    }
    (checked, worst)
}

#[test]
fn wdm_objective_gradients() {
    let (checked, worst) = check(ContrastiveLoss::Wdm);
    assert_eq!(checked, tiny_trainer(ContrastiveLoss::Wdm).initial_state().unwrap().params.scalar_count());
    assert!(worst < TOLERANCE);
}

#[test]
fn cosine_objective_gradients() {
    check(ContrastiveLoss::Cosine);
}

/// The tape loss equals the loss assembled from per-sequence scalar
/// reference functions.
#[test]
fn tape_loss_matches_reference() {
    let trainer = tiny_trainer(ContrastiveLoss::Wdm);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut state = trainer.initial_state().unwrap();
    spread(&mut state.params, &mut rng);
    let batch: PreparedBatch = trainer.prepare_batch(&[0, 1], &mut rng).unwrap();
    let (_, _, _, b) = trainer.loss_graph(&state.params, &batch, None::<&mut ChaCha8Rng>).unwrap();

    let enc_cfg = &trainer.encoder;
    let (mut rec, mut pvn, mut n) = (0.0, 0.0, 0.0);
    let mut pairs = Vec::new();
    for e in &batch.examples {
        let out = encode(&e.inputs, &state.params, enc_cfg).unwrap();
        let k = e.inputs.len() as f64;
        rec += rec_loss(&out, &e.positives, &e.negatives, &state.params).unwrap() * k;
        pvn += pvn_loss(&out, &e.positives, &e.negatives, &state.params, 0.5).unwrap() * k;
        n += k;
        let (va, vb) = e.views.as_ref().unwrap();
        let a = encode(va, &state.params, enc_cfg).unwrap().last().unwrap().clone();
        let b = encode(vb, &state.params, enc_cfg).unwrap().last().unwrap().clone();
        pairs.push((a, b));
    }
    let cl = mstein_cl_loss(&ContrastiveBatch::from_pairs(pairs).unwrap()).unwrap();
    assert!((b.rec_loss - rec / n).abs() < 1e-9);
    assert!((b.pvn_loss - pvn / n).abs() < 1e-9);
    assert!((b.cl_loss - cl).abs() < 1e-9);
    assert!((b.total - (rec / n + 0.3 * pvn / n + 0.5 * cl)).abs() < 1e-9);
}
