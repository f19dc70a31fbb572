use rand::Rng;

use super::*;
use crate::corpus::Speaker;
use crate::seed;
use crate::tokenizer::{EncodedSequence, SPEAKER_USER, SPEAKER_WIZARD};

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 8,
        d_ff: 16,
        vocab_size: vocab,
        max_seq: 16,
        max_turns: 4,
        dropout_rate: 0.0,
        init_seed: 3,
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 30,
        max_seq: 24,
        max_turns: 6,
        dropout_rate: 0.1,
        init_seed: 11,
    }
}

fn seq_from(tokens: &[usize], speakers: &[usize], turns: &[usize]) -> EncodedSequence {
    EncodedSequence {
        token_ids: tokens.to_vec(),
        speaker_ids: speakers.to_vec(),
        turn_ids: turns.to_vec(),
        position_ids: (0..tokens.len()).collect(),
        response_start: None,
        kept_turns: 1,
    }
}

fn random_seq(rng: &mut seed::Rng, c: &ModelConfig, len: usize) -> EncodedSequence {
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..c.vocab_size)).collect();
    let speakers: Vec<usize> = (0..len).map(|_| rng.random_range(0..2)).collect();
    let mut turns: Vec<usize> = (0..len).map(|_| rng.random_range(0..c.max_turns)).collect();
    turns.sort();
    seq_from(&tokens, &speakers, &turns)
}

/// Randomizes every parameter so that layer-norm gains, biases and the NSP
/// head are all non-trivial.
fn perturbed<F: Real>(c: &ModelConfig, seed_: u64, amp: f64) -> ModelState<F> {
    let mut s = init_model::<F>(c).unwrap();
    let mut rng = seed::rng(seed_);
    for t in s.params.tensors_mut() {
        for v in t.iter_mut() {
            *v += F::from_f64(rng.random_range(-amp..amp)).unwrap();
        }
    }
    s
}

#[test]
fn init_is_deterministic_per_seed() {
    let c = small_config();
    let a = init_model::<f32>(&c).unwrap();
    let b = init_model::<f32>(&c).unwrap();
    assert_eq!(a, b);
    let mut c2 = c.clone();
    c2.init_seed += 1;
    let other = init_model::<f32>(&c2).unwrap();
    assert_ne!(a.params.flat(), other.params.flat());
}

#[test]
fn init_biases_zero_gains_one() {
    let s = init_model::<f32>(&small_config()).unwrap();
    for l in &s.params.layers {
        assert!(l.ln1_gain.iter().all(|&g| g == 1.0));
        assert!(l.qkv_bias.iter().all(|&b| b == 0.0));
        assert!(l.ff_out_bias.iter().all(|&b| b == 0.0));
    }
    assert!(s.params.nsp_bias.iter().all(|&b| b == 0.0));
}

#[test]
fn parameter_count_matches_shape_enumeration() {
    let c = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size: 100,
        max_seq: 64,
        max_turns: 16,
        dropout_rate: 0.0,
        init_seed: 0,
    };
    // embeddings: token, position, speaker, turn
    let (d, ff) = (32usize, 64usize);
    let embeddings = 100 * d + 64 * d + 2 * d + 16 * d;
    let attention = d * 3 * d + 3 * d + d * d + d;
    let mlp = d * ff + ff + ff * d + d;
    let norms = 4 * d;
    let per_layer = attention + mlp + norms;
    let head = 2 * d + d * 2 + 2; // final norm + nsp
    let expected = embeddings + 2 * per_layer + head;
    assert_eq!(expected, 5_824 + 2 * 8_544 + 130);
    assert_eq!(c.num_parameters(), expected);
    assert_eq!(init_model::<f32>(&c).unwrap().params.num_elements(), expected);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = small_config();
    c.n_heads = 3;
    assert!(init_model::<f32>(&c).is_err());
    let mut c = small_config();
    c.vocab_size = 5;
    assert!(init_model::<f32>(&c).is_err());
    let mut c = small_config();
    c.max_turns = 1;
    assert!(init_model::<f32>(&c).is_err());
    let mut c = small_config();
    c.dropout_rate = 1.0;
    assert!(init_model::<f32>(&c).is_err());
}

#[test]
fn sequence_longer_than_max_seq_is_rejected() {
    let c = tiny_config(10);
    let s = init_model::<f32>(&c).unwrap();
    let n = c.max_seq + 1;
    let seq = seq_from(&vec![5; n], &vec![0; n], &vec![0; n]);
    assert!(matches!(forward(&s, &seq, RunMode::Eval), Err(NnetError::SequenceTooLong { .. })));
}

#[test]
fn appending_a_token_leaves_earlier_logits_unchanged() {
    let c = small_config();
    let s = perturbed::<f32>(&c, 1, 0.1);
    let mut rng = seed::rng(5);
    for _ in 0..10 {
        let len = rng.random_range(2..c.max_seq);
        let long = random_seq(&mut rng, &c, len);
        let short = seq_from(
            &long.token_ids[..len - 1],
            &long.speaker_ids[..len - 1],
            &long.turn_ids[..len - 1],
        );
        let a = forward(&s, &short, RunMode::Eval).unwrap();
        let b = forward(&s, &long, RunMode::Eval).unwrap();
        assert_eq!(a.lm_logits[..], b.lm_logits[..a.lm_logits.len()]);
        assert_eq!(a.hidden[..], b.hidden[..a.hidden.len()]);
    }
}

#[test]
fn perturbing_a_later_position_never_changes_earlier_outputs() {
    let c = small_config();
    let s = perturbed::<f32>(&c, 2, 0.1);
    let mut rng = seed::rng(9);
    for _ in 0..20 {
        let len = rng.random_range(3..c.max_seq);
        let base = random_seq(&mut rng, &c, len);
        let j = rng.random_range(1..len);
        let mut changed = base.clone();
        changed.token_ids[j] = (changed.token_ids[j] + 1) % c.vocab_size;
        changed.speaker_ids[j] = 1 - changed.speaker_ids[j];
        let a = forward(&s, &base, RunMode::Eval).unwrap();
        let b = forward(&s, &changed, RunMode::Eval).unwrap();
        let d = c.d_model;
        assert_eq!(a.hidden[..j * d], b.hidden[..j * d]);
        assert_ne!(a.hidden[j * d..], b.hidden[j * d..]);
    }
}

#[test]
fn zeroed_speaker_or_turn_table_ignores_those_ids() {
    let c = small_config();
    let mut s = perturbed::<f32>(&c, 4, 0.1);
    s.params.speaker_emb.iter_mut().for_each(|v| *v = 0.0);
    let base = seq_from(&[1, 7, 8, 4, 9, 2], &[1, 1, 1, 1, 0, 0], &[0, 0, 0, 0, 1, 1]);
    let mut flipped = base.clone();
    flipped.speaker_ids.iter_mut().for_each(|v| *v = 1 - *v);
    assert_eq!(
        forward(&s, &base, RunMode::Eval).unwrap(),
        forward(&s, &flipped, RunMode::Eval).unwrap()
    );

    let mut s = perturbed::<f32>(&c, 4, 0.1);
    s.params.turn_emb.iter_mut().for_each(|v| *v = 0.0);
    let mut shifted = base.clone();
    shifted.turn_ids = vec![3, 3, 4, 5, 5, 5];
    assert_eq!(
        forward(&s, &base, RunMode::Eval).unwrap(),
        forward(&s, &shifted, RunMode::Eval).unwrap()
    );
}

#[test]
fn attention_rows_sum_to_one() {
    let c = small_config();
    let s = perturbed::<f64>(&c, 6, 0.3);
    let mut rng = seed::rng(1);
    let seq = random_seq(&mut rng, &c, 12);
    let (_, trace) = forward_traced(&s, &seq, RunMode::Eval).unwrap();
    for l in 0..c.n_layers {
        for h in 0..c.n_heads {
            let p = trace.attention(l, h);
            for i in 0..12 {
                let row = &p[i * 12..(i + 1) * 12];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn dropout_only_in_train_mode_and_seeded() {
    let c = small_config();
    let s = init_model::<f32>(&c).unwrap();
    let seq = seq_from(&[1, 6, 7, 4], &[1, 1, 1, 1], &[0, 0, 0, 0]);
    let eval_a = forward(&s, &seq, RunMode::Eval).unwrap();
    let eval_b = forward(&s, &seq, RunMode::Eval).unwrap();
    assert_eq!(eval_a, eval_b);
    let t1 = forward(&s, &seq, RunMode::Train { dropout_seed: 1 }).unwrap();
    let t1b = forward(&s, &seq, RunMode::Train { dropout_seed: 1 }).unwrap();
    let t2 = forward(&s, &seq, RunMode::Train { dropout_seed: 2 }).unwrap();
    assert_eq!(t1, t1b);
    assert_ne!(t1.hidden, t2.hidden);
    assert_ne!(t1.hidden, eval_a.hidden);
}

// ---------------------------------------------------------------------------
// Straight-line reference for a 1-layer, 1-head model on three tokens. It
// shares nothing with the model code except the parameter struct.

fn ref_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
        .collect()
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `x [in] @ w [in, out] + b`
fn ref_affine(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    (0..out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + o]).sum::<f64>())
        .collect()
}

fn reference_hidden(s: &ModelState<f64>, seq: &EncodedSequence) -> Vec<Vec<f64>> {
    let p = &s.params;
    let d = s.config.d_model;
    let ff = s.config.d_ff;
    let row = |t: &Vec<f64>, i: usize| t[i * d..(i + 1) * d].to_vec();
    let n = seq.len();
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let parts = [
                row(&p.token_emb, seq.token_ids[i]),
                row(&p.position_emb, seq.position_ids[i]),
                row(&p.speaker_emb, seq.speaker_ids[i]),
                row(&p.turn_emb, seq.turn_ids[i]),
            ];
            (0..d).map(|j| parts.iter().map(|r| r[j]).sum()).collect()
        })
        .collect();
    let l = &p.layers[0];
    let a: Vec<Vec<f64>> = x.iter().map(|r| ref_layer_norm(r, &l.ln1_gain, &l.ln1_bias)).collect();
    let qkv: Vec<Vec<f64>> = a.iter().map(|r| ref_affine(r, &l.qkv_weight, &l.qkv_bias, 3 * d)).collect();
    let q = |i: usize| &qkv[i][..d];
    let k = |i: usize| &qkv[i][d..2 * d];
    let v = |i: usize| &qkv[i][2 * d..];
    let mut attended = vec![vec![0.0; d]; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..=i)
            .map(|j| q(i).iter().zip(k(j)).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..=i {
            let w = scores[j].exp() / z;
            for t in 0..d {
                attended[i][t] += w * v(j)[t];
            }
        }
    }
    for i in 0..n {
        let proj = ref_affine(&attended[i], &l.attn_out_weight, &l.attn_out_bias, d);
        for t in 0..d {
            x[i][t] += proj[t];
        }
        let b = ref_layer_norm(&x[i], &l.ln2_gain, &l.ln2_bias);
        let h: Vec<f64> = ref_affine(&b, &l.ff_in_weight, &l.ff_in_bias, ff)
            .into_iter()
            .map(ref_gelu)
            .collect();
        let f = ref_affine(&h, &l.ff_out_weight, &l.ff_out_bias, d);
        for t in 0..d {
            x[i][t] += f[t];
        }
    }
    x.iter()
        .map(|r| ref_layer_norm(r, &p.final_ln_gain, &p.final_ln_bias))
        .collect()
}

#[test]
fn forward_matches_straight_line_reference() {
    let c = tiny_config(12);
    let s = perturbed::<f64>(&c, 21, 0.5);
    let seq = seq_from(&[1, 7, 4], &[SPEAKER_WIZARD, SPEAKER_WIZARD, SPEAKER_USER], &[0, 0, 1]);
    let out = forward(&s, &seq, RunMode::Eval).unwrap();
    let reference = reference_hidden(&s, &seq);
    for i in 0..3 {
        for (a, b) in out.hidden_at(i).iter().zip(&reference[i]) {
            assert!((a - b).abs() < 1e-12, "hidden {i}: {a} vs {b}");
        }
        // tied LM head
        for tok in 0..c.vocab_size {
            let expect: f64 = reference[i]
                .iter()
                .zip(&s.params.token_emb[tok * 8..(tok + 1) * 8])
                .map(|(h, e)| h * e)
                .sum();
            assert!((out.logits_at(i)[tok] - expect).abs() < 1e-12);
        }
    }
    // NSP head applied by hand to the reference's last hidden state
    let last = &reference[2];
    for k in 0..2 {
        let expect = s.params.nsp_bias[k] + (0..8).map(|j| last[j] * s.params.nsp_weight[j * 2 + k]).sum::<f64>();
        assert!((out.nsp_logits[k] - expect).abs() < 1e-12);
    }
}

#[test]
fn nsp_logits_through_the_encoder() {
    use crate::corpus::{Corpus, Dialogue, Turn};
    use crate::tokenizer::build_vocab;
    let turns = vec![Turn::wizard("hello there").unwrap(), Turn::user("book it").unwrap()];
    let corpus = Corpus::new(vec![Dialogue::new("d", "x", "y", turns.clone()).unwrap()]).unwrap();
    let vocab = build_vocab(&corpus, 20).unwrap();
    let mut c = tiny_config(vocab.len());
    c.max_seq = 16;
    let s = perturbed::<f64>(&c, 8, 0.3);
    let a = nsp_logits(&s, &turns[..1], &turns[1], &vocab, c.limits()).unwrap();
    let b = nsp_logits(&s, &turns[..1], &turns[1], &vocab, c.limits()).unwrap();
    assert_eq!(a, b);
    let p = softmax(&a);
    assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
    // same value as running forward on the explicit encoding
    let seq = crate::tokenizer::encode_dialogue(&turns[..1], &vocab, Some(&turns[1]), c.limits()).unwrap();
    let reference = reference_hidden(&s, &seq);
    let last = reference.last().unwrap();
    let expect0 = s.params.nsp_bias[0] + (0..8).map(|j| last[j] * s.params.nsp_weight[j * 2]).sum::<f64>();
    assert!((a[0] - expect0).abs() < 1e-12);
    assert_eq!(turns[0].speaker(), Speaker::Wizard);
}

// ---------------------------------------------------------------------------
// Backward

/// Seeds random upstream gradients so that the loss is
/// `sum(G_lm * lm_logits) + sum(G_nsp * nsp_logits)`.
fn linear_probe_loss(s: &ModelState<f64>, seq: &EncodedSequence, g_lm: &[f64], g_nsp: [f64; 2]) -> f64 {
    let out = forward(s, seq, RunMode::Eval).unwrap();
    out.lm_logits.iter().zip(g_lm).map(|(a, b)| a * b).sum::<f64>()
        + out.nsp_logits[0] * g_nsp[0]
        + out.nsp_logits[1] * g_nsp[1]
}

#[test]
fn backward_matches_central_differences_on_a_linear_probe() {
    let c = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        ..tiny_config(10)
    };
    let s = perturbed::<f64>(&c, 33, 0.3);
    let mut rng = seed::rng(2);
    let seq = random_seq(&mut rng, &c, 6);
    let g_lm: Vec<f64> = (0..6 * c.vocab_size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g_nsp = [0.7, -0.4];
    let mut graph = LossGraph::new(&s);
    let tape = graph.forward(&seq, RunMode::Eval).unwrap();
    graph.seed_lm(tape, g_lm.clone()).unwrap();
    graph.seed_nsp(tape, g_nsp).unwrap();
    let analytic = graph.backward().unwrap().flat();

    let h = 1e-5;
    let mut probe = s.clone();
    let mut idx = 0;
    let mut worst: f64 = 0.0;
    let n_tensors = probe.params.tensors().len();
    for t in 0..n_tensors {
        let len = probe.params.tensors()[t].len();
        for e in 0..len {
            let orig = probe.params.tensors()[t][e];
            probe.params.tensors_mut()[t][e] = orig + h;
            let up = linear_probe_loss(&probe, &seq, &g_lm, g_nsp);
            probe.params.tensors_mut()[t][e] = orig - h;
            let down = linear_probe_loss(&probe, &seq, &g_lm, g_nsp);
            probe.params.tensors_mut()[t][e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
            idx += 1;
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn backward_without_forward_is_an_error() {
    let s = init_model::<f32>(&tiny_config(10)).unwrap();
    let graph = LossGraph::new(&s);
    assert!(matches!(graph.backward(), Err(NnetError::BackwardWithoutForward)));
}

#[test]
fn lm_only_seed_gives_zero_nsp_gradients_and_scales_linearly() {
    let c = small_config();
    let s = perturbed::<f32>(&c, 3, 0.1);
    let mut rng = seed::rng(4);
    let seq = random_seq(&mut rng, &c, 10);
    let g: Vec<f32> = (0..10 * c.vocab_size).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut graph = LossGraph::new(&s);
    let t = graph.forward(&seq, RunMode::Train { dropout_seed: 8 }).unwrap();
    graph.seed_lm(t, g.clone()).unwrap();
    let once = graph.backward().unwrap();
    assert!(once.nsp_weight.iter().all(|&v| v == 0.0));
    assert!(once.nsp_bias.iter().all(|&v| v == 0.0));

    let mut graph2 = LossGraph::new(&s);
    let t = graph2.forward(&seq, RunMode::Train { dropout_seed: 8 }).unwrap();
    graph2.seed_lm(t, g.iter().map(|v| v * 2.0).collect()).unwrap();
    let twice = graph2.backward().unwrap();
    for (a, b) in once.flat().iter().zip(twice.flat()) {
        assert_eq!(a * 2.0, b);
    }
}

#[test]
fn unseeded_tapes_contribute_nothing() {
    let c = small_config();
    let s = perturbed::<f32>(&c, 3, 0.1);
    let seq = seq_from(&[1, 6, 4], &[1, 1, 1], &[0, 0, 0]);
    let mut graph = LossGraph::new(&s);
    graph.forward(&seq, RunMode::Eval).unwrap();
    assert!(graph.backward().unwrap().flat().iter().all(|&v| v == 0.0));
    let mut graph = LossGraph::new(&s);
    let t = graph.forward(&seq, RunMode::Eval).unwrap();
    assert!(matches!(graph.seed_lm(t, vec![0.0; 3]), Err(NnetError::GradientShape { .. })));
    assert!(matches!(graph.seed_nsp(5, [0.0; 2]), Err(NnetError::UnknownTape(5))));
}

// ---------------------------------------------------------------------------
// Snapshots

#[test]
fn snapshot_restore_is_bit_exact_and_detached() {
    let c = small_config();
    let mut s = init_model::<f32>(&c).unwrap();
    let ck = snapshot(&s, "fp");
    s.params.token_emb[0] += 1.0;
    let back = restore(&ck, "fp").unwrap();
    assert_ne!(back, s);
    assert_eq!(back, init_model::<f32>(&c).unwrap());
    assert!(matches!(restore(&ck, "other"), Err(NnetError::FingerprintMismatch { .. })));
    let mut other = c.clone();
    other.d_ff = 8;
    assert!(matches!(ck.restore_checked(&other, "fp"), Err(NnetError::ConfigMismatch)));
}

#[test]
fn checkpoint_file_round_trip() {
    let c = small_config();
    let s = perturbed::<f32>(&c, 12, 0.2);
    let ck = snapshot(&s, "abc123").with_meta("seed", "42").with_meta("note", "two\nlines");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prior.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert_eq!(back.meta()["note"], "two lines");
    let restored = restore(&back, "abc123").unwrap();
    let bits = |p: &Params<f32>| p.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&restored.params), bits(&s.params));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let s = init_model::<f32>(&small_config()).unwrap();
    let bytes = snapshot(&s, "fp").to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    assert!(Checkpoint::from_bytes(b"garbage").is_err());
    let text = String::from_utf8_lossy(&bytes[..200]).replace("format_version 1", "format_version 9");
    let mut patched = text.into_bytes();
    patched.extend_from_slice(&bytes[200..]);
    assert!(Checkpoint::from_bytes(&patched).is_err());
}
