use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::promptbank::{xavier_normal_bank, PromptKind};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 4,
        max_len: 5,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 8,
        dropout: 0.0,
    }
}

fn tiny_model<T: Real>(seed: u64) -> (ModelState<T>, PromptBank<T>, PromptBank<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelState::new(tiny_config(), 6, &mut rng).unwrap();
    let shared = xavier_normal_bank(PromptKind::Shared, 2, 4, &mut rng);
    let spec = xavier_normal_bank(PromptKind::Specific, 2, 4, &mut rng);
    (model, shared, spec)
}

#[test]
fn zero_tables_embed_to_zero() {
    let (mut m, _, _) = tiny_model::<f64>(1);
    m.item_emb.fill(0.0);
    m.pos_emb.fill(0.0);
    let batch = SequenceBatch::from_sequences(&[vec![3]], 5).unwrap();
    let e = embed_sequence(&m, &batch, None).unwrap();
    assert!(e[0].as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn embedding_is_item_plus_position() {
    let (mut m, _, _) = tiny_model::<f64>(2);
    m.item_emb.row_mut(2).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    m.pos_emb.row_mut(0).copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
    let batch = SequenceBatch::from_sequences(&[vec![2]], 5).unwrap();
    let e = embed_sequence(&m, &batch, None).unwrap();
    assert_eq!(e[0].row(4), &[1.0, 1.0, 0.0, 0.0]);
    assert!(e[0].row(0).iter().all(|&x| x == 0.0));
}

#[test]
fn eval_mode_is_deterministic() {
    let (m, s, p) = tiny_model::<f32>(3);
    let a = score_context(&m, &s, &p, &[1, 4, 2]).unwrap();
    let b = score_context(&m, &s, &p, &[1, 4, 2]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn constant_scorer_gives_uniform_weights() {
    let (mut m, s, p) = tiny_model::<f64>(4);
    m.att_w1.fill(0.0);
    m.att_w2.fill(0.0);
    let e = Matrix::from_rows(&[vec![0.3, -0.1, 0.2, 0.5], vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
    let alpha = enrichment_weights(&m, &e, &s, &p).unwrap();
    assert!(alpha.as_slice().iter().all(|&a| (a - 0.2).abs() < 1e-12));
}

#[test]
fn dominant_item_slot_returns_item() {
    let (mut m, _, _) = tiny_model::<f64>(5);
    let shared = PromptBank::new(PromptKind::Shared, Matrix::zeros(2, 4));
    let spec = PromptBank::new(PromptKind::Specific, Matrix::zeros(2, 4));
    // Score depends only on the context row: zero prompts score b2, the item scores large.
    m.att_w1.fill(0.0);
    for k in 0..4 {
        m.att_w1.set(k, k, 100.0);
    }
    m.att_w2.fill(1.0);
    let e = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
    let alpha = enrichment_weights(&m, &e, &shared, &spec).unwrap();
    assert!((alpha.get(0, 4) - 1.0).abs() < 1e-12);
    let fused = enrich_items(&m, &[e.clone()], &[vec![true]], &shared, &spec).unwrap();
    for (a, b) in fused[0].row(0).iter().zip(e.row(0)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn fusion_weights_sum_to_one() {
    let (m, s, p) = tiny_model::<f32>(6);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows: Vec<Vec<f32>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let alpha = enrichment_weights(&m, &Matrix::from_rows(&rows).unwrap(), &s, &p).unwrap();
    for r in 0..alpha.rows() {
        let sum: f32 = alpha.row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(alpha.row(r).iter().all(|&a| a >= 0.0));
    }
}

#[test]
fn future_items_do_not_affect_earlier_positions() {
    let (m, s, p) = tiny_model::<f64>(7);
    let a = forward_sequence(&m, &s, &p, &[1, 2, 3, 4], None);
    let b = forward_sequence(&m, &s, &p, &[1, 2, 6, 5], None);
    for i in 0..2 {
        for (x, y) in a.hidden.row(i).iter().zip(b.hidden.row(i)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(a.hidden.row(3) != b.hidden.row(3));
}

#[test]
fn left_padding_is_invisible() {
    let (m, s, p) = tiny_model::<f32>(8);
    let short = SequenceBatch::from_sequences(&[vec![3, 1]], 2).unwrap();
    let long = SequenceBatch::from_sequences(&[vec![3, 1]], 5).unwrap();
    let run = |b: &SequenceBatch| {
        let e = embed_sequence(&m, b, None).unwrap();
        let x = enrich_items(&m, &e, &b.padding_mask, &s, &p).unwrap();
        encode_sequence(&m, &x, &b.padding_mask).unwrap().1
    };
    assert_eq!(run(&short), run(&long));
}

#[test]
fn single_item_sequence_encodes() {
    let (m, s, p) = tiny_model::<f32>(9);
    let scores = score_context(&m, &s, &p, &[5]).unwrap();
    assert_eq!(scores.len(), 6);
    assert!(scores.iter().all(|x| x.is_finite()));
}

#[test]
fn padding_contract_is_checked() {
    let bad = SequenceBatch {
        item_ids: vec![vec![0, 2, 0]],
        padding_mask: vec![vec![false, true, false]],
        targets: None,
    };
    assert!(bad.real_rows(6).is_err());
    let all_pad = SequenceBatch {
        item_ids: vec![vec![0, 0]],
        padding_mask: vec![vec![false, false]],
        targets: None,
    };
    assert!(all_pad.real_rows(6).is_err());
    let out_of_range = SequenceBatch::from_sequences(&[vec![7]], 3).unwrap();
    assert!(out_of_range.real_rows(6).is_err());
}

#[test]
fn softmax_examples() {
    let p = softmax(&[0.0f64, 0.0]);
    assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    let p = softmax(&[3.0f64.ln(), 0.0]);
    assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
    let q = softmax(&[3.0f64.ln() + 100.0, 100.0]);
    assert!((p[0] - q[0]).abs() < 1e-12);
    assert!((cross_entropy(&[0.0f64, 0.0], 1) - 2.0f64.ln()).abs() < 1e-12);
}

#[test]
fn restrict_vocab_keeps_selected_rows() {
    let (m, s, p) = tiny_model::<f64>(10);
    let r = m.restrict_vocab(&[2, 5]).unwrap();
    assert_eq!(r.num_items(), 2);
    assert_eq!(r.item_emb.row(1), m.item_emb.row(2));
    assert_eq!(r.head_w.row(1), m.head_w.row(4));
    let full = score_context(&m, &s, &p, &[1]);
    assert!(full.is_ok());
    assert!(m.restrict_vocab(&[0]).is_err());
}

#[test]
fn mismatched_banks_are_rejected() {
    let (m, s, _) = tiny_model::<f64>(11);
    let wide = PromptBank::new(PromptKind::Specific, Matrix::zeros(2, 5));
    assert!(matches!(score_context(&m, &s, &wide, &[1]), Err(Error::Shape(_))));
}

fn loss_and_grads(
    m: &ModelState<f64>,
    s: &PromptBank<f64>,
    p: &PromptBank<f64>,
    ids: &[usize],
    targets: &[usize],
    mask: Option<Vec<f64>>,
) -> (f64, Gradients<f64>, Vec<bool>) {
    let mut g = Gradients::zeros(m, s, p);
    let cache = forward_sequence(m, s, p, ids, mask);
    let (loss, _, d_hidden) = sequence_loss(m, &cache.hidden, targets, 1.0, &mut g.model);
    backward_sequence(m, s, p, &cache, d_hidden, &mut g);
    (loss, g, cache.relu_pattern())
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (m, s, p) = tiny_model::<f64>(12);
    let ids = [2, 5, 1, 3];
    let targets = [5, 1, 3, 6];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mask = Some(network::dropout_mask::<f64>(ids.len() * 4, 0.3, &mut rng));
    let (_, grads, pattern) = loss_and_grads(&m, &s, &p, &ids, &targets, mask.clone());
    let h = 1e-6;
    let mut checked = 0;

    let mut compare = |name: &str, analytic: f64, plus: (f64, Vec<bool>), minus: (f64, Vec<bool>)| {
        if plus.1 != pattern || minus.1 != pattern {
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * h);
        let tol = 1e-6 + 1e-4 * numeric.abs().max(analytic.abs());
        assert!(
            (numeric - analytic).abs() <= tol,
            "{name}: analytic {analytic} vs numeric {numeric}"
        );
        checked += 1;
    };

    let names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
    for (t, name) in names.iter().enumerate() {
        let len = m.tensors()[t].1.len();
        for idx in (0..len).step_by(len.div_ceil(6).max(1)) {
            let eval = |delta: f64| {
                let mut q = m.clone();
                q.tensors_mut()[t].1.as_mut_slice()[idx] += delta;
                let (l, _, pat) = loss_and_grads(&q, &s, &p, &ids, &targets, mask.clone());
                (l, pat)
            };
            let analytic = grads.model.tensors()[t].1.as_slice()[idx];
            compare(&format!("{name}[{idx}]"), analytic, eval(h), eval(-h));
        }
    }
    for (which, grad) in [(0, &grads.shared), (1, &grads.spec)] {
        for idx in 0..8 {
            let eval = |delta: f64| {
                let (mut s2, mut p2) = (s.clone(), p.clone());
                let bank = if which == 0 { &mut s2 } else { &mut p2 };
                bank.values.as_mut_slice()[idx] += delta;
                let (l, _, pat) = loss_and_grads(&m, &s2, &p2, &ids, &targets, mask.clone());
                (l, pat)
            };
            compare(&format!("bank{which}[{idx}]"), grad.as_slice()[idx], eval(h), eval(-h));
        }
    }
    assert!(checked > 100, "only {checked} coordinates checked");
}

#[test]
fn dropout_mask_is_inverted() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = network::dropout_mask::<f64>(10_000, 0.2, &mut rng);
    assert!(mask.iter().all(|&k| k == 0.0 || (k - 1.25).abs() < 1e-12));
    let mean = mask.iter().sum::<f64>() / mask.len() as f64;
    assert!((mean - 1.0).abs() < 0.05);
    assert!(network::dropout_mask::<f32>(4, 0.0, &mut rng).iter().all(|&k| k == 1.0));
}
