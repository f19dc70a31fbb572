use rand::Rng;

use super::ops::{
    add_at_b, add_bias, add_col_sums, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, lit, matmul,
    matmul_bt, LayerNormCache,
};
use super::{ModelState, NnetError, Params, Real};
use crate::seed;
use crate::tokenizer::EncodedSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Eval,
    /// Dropout active, masks drawn from a generator seeded by `dropout_seed`.
    Train { dropout_seed: u64 },
}

/// Outputs of one forward pass over a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<F> {
    pub len: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// `[len, d_model]` last-layer hidden states (after the final layer norm).
    pub hidden: Vec<F>,
    /// `[len, vocab_size]`
    pub lm_logits: Vec<F>,
    /// NSP head applied to the hidden state at the last position.
    pub nsp_logits: [F; 2],
}

impl<F: Real> ForwardOutput<F> {
    pub fn hidden_at(&self, pos: usize) -> &[F] {
        &self.hidden[pos * self.d_model..(pos + 1) * self.d_model]
    }

    pub fn last_hidden(&self) -> &[F] {
        self.hidden_at(self.len - 1)
    }

    pub fn logits_at(&self, pos: usize) -> &[F] {
        &self.lm_logits[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }
}

struct LayerTrace<F> {
    ln1: LayerNormCache<F>,
    normed1: Vec<F>,
    qkv: Vec<F>,
    /// Per head `[len, len]`, zero above the diagonal.
    attn: Vec<Vec<F>>,
    attn_concat: Vec<F>,
    attn_mask: Option<Vec<F>>,
    ln2: LayerNormCache<F>,
    normed2: Vec<F>,
    ff_pre: Vec<F>,
    ff_act: Vec<F>,
    ff_mask: Option<Vec<F>>,
}

/// Intermediate values recorded by a forward pass, consumed by backward.
pub struct ForwardTrace<F> {
    seq: EncodedSequence,
    emb_mask: Option<Vec<F>>,
    layers: Vec<LayerTrace<F>>,
    final_ln: LayerNormCache<F>,
}

impl<F: Real> ForwardTrace<F> {
    /// Attention probabilities `[len, len]` of one head.
    pub fn attention(&self, layer: usize, head: usize) -> &[F] {
        &self.layers[layer].attn[head]
    }
}

fn dropout_mask<F: Real>(rng: &mut seed::Rng, n: usize, rate: f64) -> Vec<F> {
    let keep = lit::<F>(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect()
}

fn apply_mask<F: Real>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

fn check_sequence<F>(state: &ModelState<F>, seq: &EncodedSequence) -> Result<(), NnetError> {
    let c = &state.config;
    let n = seq.token_ids.len();
    if n == 0 {
        return Err(NnetError::EmptySequence);
    }
    if n > c.max_seq {
        return Err(NnetError::SequenceTooLong { len: n, max_seq: c.max_seq });
    }
    let streams: [(&'static str, &[usize], usize); 4] = [
        ("token", &seq.token_ids, c.vocab_size),
        ("speaker", &seq.speaker_ids, 2),
        ("turn", &seq.turn_ids, c.max_turns),
        ("position", &seq.position_ids, c.max_seq),
    ];
    for (stream, ids, limit) in streams {
        if ids.len() != n {
            return Err(NnetError::Format(format!("{stream} stream length {} != {n}", ids.len())));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= limit) {
            return Err(NnetError::IdOutOfRange { stream, id, limit });
        }
    }
    Ok(())
}

/// Forward pass without keeping intermediates.
pub fn forward<F: Real>(
    state: &ModelState<F>,
    seq: &EncodedSequence,
    mode: RunMode,
) -> Result<ForwardOutput<F>, NnetError> {
    forward_traced(state, seq, mode).map(|(out, _)| out)
}

/// Forward pass that also returns the trace needed for backward.
pub fn forward_traced<F: Real>(
    state: &ModelState<F>,
    seq: &EncodedSequence,
    mode: RunMode,
) -> Result<(ForwardOutput<F>, ForwardTrace<F>), NnetError> {
    check_sequence(state, seq)?;
    let c = &state.config;
    let p = &state.params;
    let n = seq.len();
    let d = c.d_model;
    let heads = c.n_heads;
    let hd = c.head_dim();
    let scale = lit::<F>(1.0 / (hd as f64).sqrt());
    let mut rng = match mode {
        RunMode::Train { dropout_seed } if c.dropout_rate > 0.0 => Some(seed::rng(dropout_seed)),
        _ => None,
    };
    let mut mask = |len: usize| rng.as_mut().map(|r| dropout_mask::<F>(r, len, c.dropout_rate));

    let mut x = vec![F::zero(); n * d];
    for i in 0..n {
        let row = &mut x[i * d..(i + 1) * d];
        let rows = [
            &p.token_emb[seq.token_ids[i] * d..][..d],
            &p.position_emb[seq.position_ids[i] * d..][..d],
            &p.speaker_emb[seq.speaker_ids[i] * d..][..d],
            &p.turn_emb[seq.turn_ids[i] * d..][..d],
        ];
        for j in 0..d {
            row[j] = rows[0][j] + rows[1][j] + rows[2][j] + rows[3][j];
        }
    }
    let emb_mask = mask(n * d);
    apply_mask(&mut x, &emb_mask);

    let mut layers = Vec::with_capacity(c.n_layers);
    for lp in &p.layers {
        let (normed1, ln1) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
        let mut qkv = matmul(&normed1, &lp.qkv_weight, n, d, 3 * d);
        add_bias(&mut qkv, &lp.qkv_bias);
        let mut attn = Vec::with_capacity(heads);
        let mut attn_concat = vec![F::zero(); n * d];
        for h in 0..heads {
            let q = |i: usize| &qkv[i * 3 * d + h * hd..][..hd];
            let k = |j: usize| &qkv[i_k(j, d, h, hd)..][..hd];
            let v = |j: usize| &qkv[i_v(j, d, h, hd)..][..hd];
            let mut probs = vec![F::zero(); n * n];
            for i in 0..n {
                let row = &mut probs[i * n..i * n + i + 1];
                let mut max = F::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(q(i), k(j)) * scale;
                    max = max.max(*s);
                }
                let mut sum = F::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
                let out = &mut attn_concat[i * d + h * hd..][..hd];
                for (j, &pr) in row.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(v(j)) {
                        *o += pr * vv;
                    }
                }
            }
            attn.push(probs);
        }
        let mut attn_out = matmul(&attn_concat, &lp.attn_out_weight, n, d, d);
        add_bias(&mut attn_out, &lp.attn_out_bias);
        let attn_mask = mask(n * d);
        apply_mask(&mut attn_out, &attn_mask);
        for (a, b) in x.iter_mut().zip(&attn_out) {
            *a += *b;
        }

        let (normed2, ln2) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
        let mut ff_pre = matmul(&normed2, &lp.ff_in_weight, n, d, c.d_ff);
        add_bias(&mut ff_pre, &lp.ff_in_bias);
        let ff_act: Vec<F> = ff_pre.iter().map(|&v| gelu(v)).collect();
        let mut ff_out = matmul(&ff_act, &lp.ff_out_weight, n, c.d_ff, d);
        add_bias(&mut ff_out, &lp.ff_out_bias);
        let ff_mask = mask(n * d);
        apply_mask(&mut ff_out, &ff_mask);
        for (a, b) in x.iter_mut().zip(&ff_out) {
            *a += *b;
        }
        layers.push(LayerTrace {
            ln1,
            normed1,
            qkv,
            attn,
            attn_concat,
            attn_mask,
            ln2,
            normed2,
            ff_pre,
            ff_act,
            ff_mask,
        });
    }
    let (hidden, final_ln) = layer_norm(&x, &p.final_ln_gain, &p.final_ln_bias);
    let lm_logits = matmul_bt(&hidden, &p.token_emb, n, c.vocab_size, d);
    let last = &hidden[(n - 1) * d..n * d];
    let mut nsp_logits = [p.nsp_bias[0], p.nsp_bias[1]];
    for j in 0..d {
        nsp_logits[0] += last[j] * p.nsp_weight[j * 2];
        nsp_logits[1] += last[j] * p.nsp_weight[j * 2 + 1];
    }
    let out = ForwardOutput {
        len: n,
        d_model: d,
        vocab_size: c.vocab_size,
        hidden,
        lm_logits,
        nsp_logits,
    };
    let trace = ForwardTrace {
        seq: seq.clone(),
        emb_mask,
        layers,
        final_ln,
    };
    Ok((out, trace))
}

#[inline]
fn i_k(j: usize, d: usize, h: usize, hd: usize) -> usize {
    j * 3 * d + d + h * hd
}

#[inline]
fn i_v(j: usize, d: usize, h: usize, hd: usize) -> usize {
    j * 3 * d + 2 * d + h * hd
}

struct Tape<F> {
    output: ForwardOutput<F>,
    trace: ForwardTrace<F>,
    d_lm_logits: Option<Vec<F>>,
    d_nsp_logits: Option<[F; 2]>,
}

/// Records forward passes and the upstream gradients of a scalar loss with
/// respect to their outputs, then back-propagates all of them at once.
pub struct LossGraph<'s, F: Real> {
    state: &'s ModelState<F>,
    tapes: Vec<Tape<F>>,
}

impl<'s, F: Real> LossGraph<'s, F> {
    pub fn new(state: &'s ModelState<F>) -> Self {
        LossGraph { state, tapes: Vec::new() }
    }

    /// Runs a forward pass and returns its tape id.
    pub fn forward(&mut self, seq: &EncodedSequence, mode: RunMode) -> Result<usize, NnetError> {
        let (output, trace) = forward_traced(self.state, seq, mode)?;
        self.tapes.push(Tape {
            output,
            trace,
            d_lm_logits: None,
            d_nsp_logits: None,
        });
        Ok(self.tapes.len() - 1)
    }

    pub fn output(&self, tape: usize) -> Result<&ForwardOutput<F>, NnetError> {
        self.tapes.get(tape).map(|t| &t.output).ok_or(NnetError::UnknownTape(tape))
    }

    /// Adds `dL/d lm_logits` for a tape.
    pub fn seed_lm(&mut self, tape: usize, grad: Vec<F>) -> Result<(), NnetError> {
        let t = self.tapes.get_mut(tape).ok_or(NnetError::UnknownTape(tape))?;
        let expected = t.output.lm_logits.len();
        if grad.len() != expected {
            return Err(NnetError::GradientShape { got: grad.len(), expected });
        }
        match &mut t.d_lm_logits {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
            slot @ None => *slot = Some(grad),
        }
        Ok(())
    }

    /// Adds `dL/d nsp_logits` for a tape.
    pub fn seed_nsp(&mut self, tape: usize, grad: [F; 2]) -> Result<(), NnetError> {
        let t = self.tapes.get_mut(tape).ok_or(NnetError::UnknownTape(tape))?;
        let acc = t.d_nsp_logits.get_or_insert([F::zero(); 2]);
        acc[0] += grad[0];
        acc[1] += grad[1];
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tapes.is_empty()
    }

    /// Gradients of the seeded loss for every parameter. Parameters not
    /// reached by any seeded output get exactly zero.
    pub fn backward(&self) -> Result<Params<F>, NnetError> {
        if self.tapes.is_empty() {
            return Err(NnetError::BackwardWithoutForward);
        }
        let mut grads = Params::zeros(&self.state.config);
        for tape in &self.tapes {
            if tape.d_lm_logits.is_none() && tape.d_nsp_logits.is_none() {
                continue;
            }
            backward_tape(self.state, tape, &mut grads);
        }
        Ok(grads)
    }
}

fn backward_tape<F: Real>(state: &ModelState<F>, tape: &Tape<F>, g: &mut Params<F>) {
    let c = &state.config;
    let p = &state.params;
    let out = &tape.output;
    let tr = &tape.trace;
    let n = out.len;
    let d = c.d_model;
    let v = c.vocab_size;
    let heads = c.n_heads;
    let hd = c.head_dim();
    let scale = lit::<F>(1.0 / (hd as f64).sqrt());

    let mut d_hidden = match &tape.d_lm_logits {
        Some(dl) => {
            add_at_b(&mut g.token_emb, dl, &out.hidden, n, v, d);
            matmul(dl, &p.token_emb, n, v, d)
        }
        None => vec![F::zero(); n * d],
    };
    if let Some(dn) = tape.d_nsp_logits {
        let last = out.last_hidden();
        for j in 0..d {
            g.nsp_weight[j * 2] += last[j] * dn[0];
            g.nsp_weight[j * 2 + 1] += last[j] * dn[1];
            d_hidden[(n - 1) * d + j] += p.nsp_weight[j * 2] * dn[0] + p.nsp_weight[j * 2 + 1] * dn[1];
        }
        g.nsp_bias[0] += dn[0];
        g.nsp_bias[1] += dn[1];
    }
    let mut dx = layer_norm_backward(
        &d_hidden,
        &tr.final_ln,
        &p.final_ln_gain,
        &mut g.final_ln_gain,
        &mut g.final_ln_bias,
    );

    for (l, lt) in tr.layers.iter().enumerate().rev() {
        let lp = &p.layers[l];
        let lg = &mut g.layers[l];
        // feed-forward residual branch
        let mut d_ff_out = dx.clone();
        apply_mask(&mut d_ff_out, &lt.ff_mask);
        add_at_b(&mut lg.ff_out_weight, &lt.ff_act, &d_ff_out, n, c.d_ff, d);
        add_col_sums(&mut lg.ff_out_bias, &d_ff_out);
        let mut d_ff = matmul_bt(&d_ff_out, &lp.ff_out_weight, n, c.d_ff, d);
        for (dv, &pre) in d_ff.iter_mut().zip(&lt.ff_pre) {
            *dv = *dv * gelu_grad(pre);
        }
        add_at_b(&mut lg.ff_in_weight, &lt.normed2, &d_ff, n, d, c.d_ff);
        add_col_sums(&mut lg.ff_in_bias, &d_ff);
        let d_normed2 = matmul_bt(&d_ff, &lp.ff_in_weight, n, d, c.d_ff);
        let d_ln2 = layer_norm_backward(&d_normed2, &lt.ln2, &lp.ln2_gain, &mut lg.ln2_gain, &mut lg.ln2_bias);
        for (a, b) in dx.iter_mut().zip(&d_ln2) {
            *a += *b;
        }

        // attention residual branch
        let mut d_attn_out = dx.clone();
        apply_mask(&mut d_attn_out, &lt.attn_mask);
        add_at_b(&mut lg.attn_out_weight, &lt.attn_concat, &d_attn_out, n, d, d);
        add_col_sums(&mut lg.attn_out_bias, &d_attn_out);
        let d_concat = matmul_bt(&d_attn_out, &lp.attn_out_weight, n, d, d);
        let mut d_qkv = vec![F::zero(); n * 3 * d];
        let qkv = &lt.qkv;
        for h in 0..heads {
            let probs = &lt.attn[h];
            for i in 0..n {
                let d_out = &d_concat[i * d + h * hd..][..hd];
                let row = &probs[i * n..i * n + i + 1];
                // d probs and softmax backward
                let d_probs: Vec<F> = (0..=i).map(|j| dot(d_out, &qkv[i_v(j, d, h, hd)..][..hd])).collect();
                let weighted = row.iter().zip(&d_probs).fold(F::zero(), |s, (&pr, &dp)| s + pr * dp);
                for j in 0..=i {
                    let pr = row[j];
                    // value gradient
                    for (t, &o) in d_out.iter().enumerate() {
                        d_qkv[i_v(j, d, h, hd) + t] += pr * o;
                    }
                    let ds = pr * (d_probs[j] - weighted) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    for t in 0..hd {
                        let qi = qkv[i * 3 * d + h * hd + t];
                        let kj = qkv[i_k(j, d, h, hd) + t];
                        d_qkv[i * 3 * d + h * hd + t] += ds * kj;
                        d_qkv[i_k(j, d, h, hd) + t] += ds * qi;
                    }
                }
            }
        }
        add_at_b(&mut lg.qkv_weight, &lt.normed1, &d_qkv, n, d, 3 * d);
        add_col_sums(&mut lg.qkv_bias, &d_qkv);
        let d_normed1 = matmul_bt(&d_qkv, &lp.qkv_weight, n, d, 3 * d);
        let d_ln1 = layer_norm_backward(&d_normed1, &lt.ln1, &lp.ln1_gain, &mut lg.ln1_gain, &mut lg.ln1_bias);
        for (a, b) in dx.iter_mut().zip(&d_ln1) {
            *a += *b;
        }
    }

    apply_mask(&mut dx, &tr.emb_mask);
    let seq = &tr.seq;
    for i in 0..n {
        let row = &dx[i * d..(i + 1) * d];
        for (table, id) in [
            (&mut g.token_emb, seq.token_ids[i]),
            (&mut g.position_emb, seq.position_ids[i]),
            (&mut g.speaker_emb, seq.speaker_ids[i]),
            (&mut g.turn_emb, seq.turn_ids[i]),
        ] {
            for (a, &b) in table[id * d..(id + 1) * d].iter_mut().zip(row) {
                *a += b;
            }
        }
    }
}
