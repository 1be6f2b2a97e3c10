use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check_params, GradCheckConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_hidden: 16,
        n_layer: 2,
        n_head: 2,
        p_dropout: 0.0,
        vocab_size: 10,
        max_len: 8,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<Token> {
    (0..len).map(|_| rng.random_range(4..vocab as Token)).collect()
}

#[test]
fn uniform_copy_examples() {
    assert_eq!(uniform_copy_positions(4, 4), vec![1, 2, 3, 4]);
    assert_eq!(uniform_copy_positions(4, 8), vec![1, 1, 2, 2, 3, 3, 4, 4]);
    assert_eq!(uniform_copy_positions(5, 2), vec![3, 5]);
    assert_eq!(uniform_copy_positions(1, 3), vec![1, 1, 1]);
}

#[test]
fn uniform_copy_reads_embedded_rows() {
    let m = Model::new(tiny(), ModelKind::Nat, 1).unwrap();
    let enc = m.encode(&[4, 5, 6, 7]).unwrap();
    let copied = uniform_copy(&enc, 8).unwrap();
    assert_eq!(copied.row(2), enc.embedded.row(1));
    assert_eq!(uniform_copy(&enc, 4).unwrap().data(), enc.embedded.data());
}

#[test]
fn encoder_shape_and_position_sensitivity() {
    let m = Model::new(tiny(), ModelKind::Nat, 2).unwrap();
    let a = m.encode(&[4, 5, 6]).unwrap();
    assert_eq!(a.states.shape(), &[3, 8]);
    assert!(a.states.is_finite());
    let b = m.encode(&[6, 5, 4]).unwrap();
    assert_ne!(a.states.row(0), b.states.row(2));
}

#[test]
fn overlong_source_is_a_capacity_error() {
    let m = Model::new(tiny(), ModelKind::Nat, 2).unwrap();
    let err = m.encode(&[4; 9]).unwrap_err();
    assert!(matches!(err, Error::Capacity { actual: 9, bound: 8, .. }));
    assert!(matches!(m.nat_forward(&[4], 9), Err(Error::Capacity { .. })));
}

#[test]
fn encoder_is_shared_across_kinds() {
    let src = [4, 7, 5, 9];
    let encs: Vec<EncoderOutput> = [ModelKind::Ar, ModelKind::Nat, ModelKind::Fs]
        .into_iter()
        .map(|k| Model::new(tiny(), k, 11).unwrap().encode(&src).unwrap())
        .collect();
    assert_eq!(encs[0], encs[1]);
    assert_eq!(encs[1], encs[2]);
}

#[test]
fn encoder_readout_passes_grad_check() {
    let mut m = Model::new(tiny(), ModelKind::Nat, 3).unwrap();
    let weights: Vec<f64> = (0..3 * 8).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
    let f = |m: &Model, g: &mut Graph| {
        let enc = m.encode_graph(g, &[4, 8, 5], &mut Dropout::off())?;
        let w = g.mul_const(enc.states, weights.clone())?;
        Ok(g.sum(w))
    };
    let report = grad_check_params(&mut m, f, &GradCheckConfig::new(1e-6, 1e-5).sampled(4, 0)).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn nat_forward_is_one_pass_and_stochastic() {
    let m = Model::new(tiny(), ModelKind::Nat, 4).unwrap();
    for len in [1, 3, 8] {
        m.reset_counts();
        let d = m.nat_forward(&[4, 5, 6], len).unwrap();
        assert_eq!(d.len(), len);
        for t in 0..len {
            assert!((d.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let c = m.counts();
        assert_eq!((c.encoder, c.nat, c.decoder_total()), (1, 1, 1));
    }
}

fn check_model(kind: ModelKind, seed: u64) {
    let mut m = Model::new(tiny(), kind, seed).unwrap();
    let src = [4, 6, 5];
    let tgt = [7, 8, 2, 5];
    let f = |m: &Model, g: &mut Graph| {
        let out = m.forward_train_graph(g, &src, &tgt, &mut Dropout::off())?;
        token_nll(g, out.log_probs, &tgt)
    };
    let report = grad_check_params(&mut m, f, &GradCheckConfig::new(1e-6, 1e-4).sampled(3, seed)).unwrap();
    assert!(report.passed, "{kind}: {report:?}");
}

#[test]
fn nat_grad_check() {
    check_model(ModelKind::Nat, 5);
}

#[test]
fn ar_grad_check() {
    check_model(ModelKind::Ar, 6);
}

#[test]
fn fs_grad_check() {
    check_model(ModelKind::Fs, 7);
}

#[test]
fn fs_grad_reaches_both_fusion_matrices() {
    let m = Model::new(tiny(), ModelKind::Fs, 8).unwrap();
    let mut g = Graph::new();
    let tgt = [5, 6, 7];
    let out = m.fs_forward_train_graph(&mut g, &[4, 9], &tgt, 3, &mut Dropout::off()).unwrap();
    let loss = token_nll(&mut g, out.log_probs, &tgt).unwrap();
    g.backward(loss).unwrap();
    let (w, u) = m.fusion_params().unwrap();
    for id in [w, u] {
        let v = g.bound_params().find(|(p, _)| *p == id).unwrap().1;
        assert!(g.grad(v).unwrap().iter().any(|&x| x != 0.0));
    }
}

fn assert_causal(run: impl Fn(&[Token]) -> PositionDistributions, rng: &mut ChaCha8Rng) {
    let tgt = random_tokens(rng, 5, 10);
    let base = run(&tgt);
    for t in 0..tgt.len() {
        let mut changed = tgt.clone();
        changed[t] = if tgt[t] == 4 { 5 } else { 4 };
        let other = run(&changed);
        for s in 0..=t {
            assert_eq!(base.row(s), other.row(s), "position {s} saw token {t}");
        }
        if t + 1 < tgt.len() {
            assert_ne!(base.row(t + 1), other.row(t + 1));
        }
    }
}

#[test]
fn ar_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..5 {
        let m = Model::new(tiny(), ModelKind::Ar, i).unwrap();
        let src = random_tokens(&mut rng, 4, 10);
        assert_causal(|t| m.ar_forward(&src, t).unwrap(), &mut rng);
    }
}

#[test]
fn fs_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..5 {
        let m = Model::new(tiny(), ModelKind::Fs, i).unwrap();
        let src = random_tokens(&mut rng, 4, 10);
        let len = rng.random_range(3..=7);
        assert_causal(|t| m.fs_forward_train(&src, t, len).unwrap(), &mut rng);
    }
}

#[test]
fn fusion_is_nonnegative_and_severable() {
    let mut m = Model::new(tiny(), ModelKind::Fs, 12).unwrap();
    let (w, _) = m.fusion_params().unwrap();
    m.params_mut().get_mut(w).data_mut().fill(0.0);
    let tgt = [5, 6, 7, 8];
    // With W = 0 the source only reaches the output through source attention,
    // so changing the predicted length has no effect.
    let a = m.fs_forward_train(&[4, 5, 6], &tgt, 2).unwrap();
    let b = m.fs_forward_train(&[4, 5, 6], &tgt, 7).unwrap();
    assert_eq!(a, b);

    let mut g = Graph::new();
    let out = m.fs_forward_train_graph(&mut g, &[4, 5], &tgt, 4, &mut Dropout::off()).unwrap();
    assert!(g.value(out.probs).is_finite());
}

#[test]
fn fs_decode_counts_bottom_once_and_top_per_token() {
    let m = Model::new(tiny(), ModelKind::Fs, 13).unwrap();
    m.reset_counts();
    let out = m.fs_decode(&[4, 5, 6], 6, 1).unwrap();
    let c = m.counts();
    assert_eq!(c.bottom, 1);
    assert_eq!(c.top, out.emitted);
    assert!(out.emitted <= 6);
}

#[test]
fn greedy_fs_decode_matches_incremental_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for i in 0..10 {
        let m = Model::new(tiny(), ModelKind::Fs, 100 + i).unwrap();
        let n = rng.random_range(1..=8);
        let src = random_tokens(&mut rng, n, 10);
        let len = rng.random_range(1..=8);
        let decoded = m.fs_decode(&src, len, 1).unwrap();

        let mut prefix: Vec<Token> = Vec::new();
        while prefix.len() < len {
            let mut inputs = prefix.clone();
            inputs.push(EOS);
            let d = m.fs_forward_train(&src, &inputs, len).unwrap();
            let row = d.row(prefix.len());
            let next = (0..row.len()).fold(0, |b, v| if row[v] > row[b] { v } else { b }) as Token;
            prefix.push(next);
            if next == EOS {
                break;
            }
        }
        assert_eq!(decoded.emitted, prefix.len());
        if prefix.last() == Some(&EOS) {
            prefix.pop();
        }
        assert_eq!(decoded.tokens, prefix);
    }
}

#[test]
fn beam_never_scores_below_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let models: Vec<Model> = (0..5).map(|i| Model::new(tiny(), ModelKind::Fs, 200 + i).unwrap()).collect();
    for i in 0..100 {
        let m = &models[i % models.len()];
        let n = rng.random_range(1..=6);
        let src = random_tokens(&mut rng, n, 10);
        let len = rng.random_range(1..=6);
        let greedy = m.fs_decode(&src, len, 1).unwrap();
        let mut forced = greedy.tokens.clone();
        if greedy.emitted > forced.len() {
            forced.push(EOS);
        }
        let wide = m.fs_decode_forced(&src, len, 4, Some(&forced)).unwrap();
        assert!(wide.score >= greedy.score - 1e-12, "{} < {}", wide.score, greedy.score);
    }
}

#[test]
fn ar_beam_one_is_greedy() {
    let m = Model::new(tiny(), ModelKind::Ar, 16).unwrap();
    m.reset_counts();
    let out = m.ar_decode(&[4, 5], 1).unwrap();
    assert_eq!(m.counts().ar, out.emitted);
    let d = m.ar_forward(&[4, 5], &[out.tokens.clone(), vec![EOS]].concat()).unwrap();
    for (t, &y) in out.tokens.iter().enumerate() {
        let row = d.row(t);
        assert!(row.iter().all(|&p| p <= row[y as usize]));
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    for kind in [ModelKind::Ar, ModelKind::Nat, ModelKind::Fs] {
        let mut m = Model::new(tiny(), kind, 17).unwrap();
        m.length_table = LengthTable::from_entries([(3, 4), (5, 6)]);
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let m = Model::new(tiny(), ModelKind::Nat, 18).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    assert!(matches!(read_checkpoint(&mut &buf[..buf.len() - 3]), Err(Error::Format(_))));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
}

#[test]
fn config_invariants() {
    let mut c = tiny();
    c.n_head = 3;
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.n_layer = 1;
    assert!(c.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn wrong_kind_is_a_contract_error() {
    let m = Model::new(tiny(), ModelKind::Ar, 19).unwrap();
    assert!(matches!(m.nat_forward(&[4], 2), Err(Error::Contract(_))));
    assert!(matches!(m.fs_decode(&[4], 2, 1), Err(Error::Contract(_))));
}
