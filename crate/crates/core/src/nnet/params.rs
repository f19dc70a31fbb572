use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, Real};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Vec<F>,
    pub ln1_bias: Vec<F>,
    /// `[d_model, 3 * d_model]`, columns ordered query | key | value.
    pub qkv_weight: Vec<F>,
    pub qkv_bias: Vec<F>,
    /// `[d_model, d_model]`
    pub attn_out_weight: Vec<F>,
    pub attn_out_bias: Vec<F>,
    pub ln2_gain: Vec<F>,
    pub ln2_bias: Vec<F>,
    /// `[d_model, d_ff]`
    pub ff_in_weight: Vec<F>,
    pub ff_in_bias: Vec<F>,
    /// `[d_ff, d_model]`
    pub ff_out_weight: Vec<F>,
    pub ff_out_bias: Vec<F>,
}

/// Every trainable tensor of the model, row-major. Also used as the
/// gradient container, with identical shapes.
///
/// The LM head is tied to `token_emb`, so it has no tensor of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// `[vocab_size, d_model]`
    pub token_emb: Vec<F>,
    /// `[max_seq, d_model]`
    pub position_emb: Vec<F>,
    /// `[2, d_model]`, row 0 = user, row 1 = wizard.
    pub speaker_emb: Vec<F>,
    /// `[max_turns, d_model]`
    pub turn_emb: Vec<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_ln_gain: Vec<F>,
    pub final_ln_bias: Vec<F>,
    /// `[d_model, 2]`
    pub nsp_weight: Vec<F>,
    pub nsp_bias: Vec<F>,
}

/// Name and `[rows, cols]` of every tensor, in storage order.
pub fn tensor_shapes(c: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let d = c.d_model;
    let mut out = vec![
        ("token_emb".to_string(), [c.vocab_size, d]),
        ("position_emb".to_string(), [c.max_seq, d]),
        ("speaker_emb".to_string(), [2, d]),
        ("turn_emb".to_string(), [c.max_turns, d]),
    ];
    for l in 0..c.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.extend([
            (p("ln1_gain"), [1, d]),
            (p("ln1_bias"), [1, d]),
            (p("qkv_weight"), [d, 3 * d]),
            (p("qkv_bias"), [1, 3 * d]),
            (p("attn_out_weight"), [d, d]),
            (p("attn_out_bias"), [1, d]),
            (p("ln2_gain"), [1, d]),
            (p("ln2_bias"), [1, d]),
            (p("ff_in_weight"), [d, c.d_ff]),
            (p("ff_in_bias"), [1, c.d_ff]),
            (p("ff_out_weight"), [c.d_ff, d]),
            (p("ff_out_bias"), [1, d]),
        ]);
    }
    out.extend([
        ("final_ln_gain".to_string(), [1, d]),
        ("final_ln_bias".to_string(), [1, d]),
        ("nsp_weight".to_string(), [d, 2]),
        ("nsp_bias".to_string(), [1, 2]),
    ]);
    out
}

impl<F: Real> Params<F> {
    pub fn zeros(c: &ModelConfig) -> Self {
        let z = |n: usize| vec![F::zero(); n];
        let d = c.d_model;
        Params {
            token_emb: z(c.vocab_size * d),
            position_emb: z(c.max_seq * d),
            speaker_emb: z(2 * d),
            turn_emb: z(c.max_turns * d),
            layers: (0..c.n_layers)
                .map(|_| LayerParams {
                    ln1_gain: z(d),
                    ln1_bias: z(d),
                    qkv_weight: z(d * 3 * d),
                    qkv_bias: z(3 * d),
                    attn_out_weight: z(d * d),
                    attn_out_bias: z(d),
                    ln2_gain: z(d),
                    ln2_bias: z(d),
                    ff_in_weight: z(d * c.d_ff),
                    ff_in_bias: z(c.d_ff),
                    ff_out_weight: z(c.d_ff * d),
                    ff_out_bias: z(d),
                })
                .collect(),
            final_ln_gain: z(d),
            final_ln_bias: z(d),
            nsp_weight: z(d * 2),
            nsp_bias: z(2),
        }
    }

    /// Tensors in storage order (matches [`tensor_shapes`]).
    pub fn tensors(&self) -> Vec<&Vec<F>> {
        let mut out = vec![&self.token_emb, &self.position_emb, &self.speaker_emb, &self.turn_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain,
                &l.ln1_bias,
                &l.qkv_weight,
                &l.qkv_bias,
                &l.attn_out_weight,
                &l.attn_out_bias,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.ff_in_weight,
                &l.ff_in_bias,
                &l.ff_out_weight,
                &l.ff_out_bias,
            ]);
        }
        out.extend([&self.final_ln_gain, &self.final_ln_bias, &self.nsp_weight, &self.nsp_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut out = vec![
            &mut self.token_emb,
            &mut self.position_emb,
            &mut self.speaker_emb,
            &mut self.turn_emb,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.qkv_weight,
                &mut l.qkv_bias,
                &mut l.attn_out_weight,
                &mut l.attn_out_bias,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.ff_in_weight,
                &mut l.ff_in_bias,
                &mut l.ff_out_weight,
                &mut l.ff_out_bias,
            ]);
        }
        out.extend([
            &mut self.final_ln_gain,
            &mut self.final_ln_bias,
            &mut self.nsp_weight,
            &mut self.nsp_bias,
        ]);
        out
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<F> {
        self.tensors().into_iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Params<F>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Euclidean norm over all elements, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| {
                let x = v.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        let conv = |t: &Vec<F>| -> Vec<G> { t.iter().map(|v| G::from_f64(v.to_f64().unwrap()).unwrap()).collect() };
        Params {
            token_emb: conv(&self.token_emb),
            position_emb: conv(&self.position_emb),
            speaker_emb: conv(&self.speaker_emb),
            turn_emb: conv(&self.turn_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: conv(&l.ln1_gain),
                    ln1_bias: conv(&l.ln1_bias),
                    qkv_weight: conv(&l.qkv_weight),
                    qkv_bias: conv(&l.qkv_bias),
                    attn_out_weight: conv(&l.attn_out_weight),
                    attn_out_bias: conv(&l.attn_out_bias),
                    ln2_gain: conv(&l.ln2_gain),
                    ln2_bias: conv(&l.ln2_bias),
                    ff_in_weight: conv(&l.ff_in_weight),
                    ff_in_bias: conv(&l.ff_in_bias),
                    ff_out_weight: conv(&l.ff_out_weight),
                    ff_out_bias: conv(&l.ff_out_bias),
                })
                .collect(),
            final_ln_gain: conv(&self.final_ln_gain),
            final_ln_bias: conv(&self.final_ln_bias),
            nsp_weight: conv(&self.nsp_weight),
            nsp_bias: conv(&self.nsp_bias),
        }
    }
}

const INIT_STD: f64 = 0.02;

/// Normal(0, 0.02) weights and embeddings, residual output projections
/// scaled by `1/sqrt(2 * n_layers)`, zero biases, unit layer-norm gains.
pub(crate) fn init_params<F: Real>(c: &ModelConfig) -> Params<F> {
    let mut rng = seed::rng(c.init_seed);
    let mut normal = |n: usize, std: f64| -> Vec<F> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                F::from_f64(z * std).unwrap()
            })
            .collect()
    };
    let d = c.d_model;
    let resid_std = INIT_STD / ((2 * c.n_layers) as f64).sqrt();
    let mut p = Params::<F>::zeros(c);
    p.token_emb = normal(c.vocab_size * d, INIT_STD);
    p.position_emb = normal(c.max_seq * d, INIT_STD);
    p.speaker_emb = normal(2 * d, INIT_STD);
    p.turn_emb = normal(c.max_turns * d, INIT_STD);
    for l in &mut p.layers {
        l.ln1_gain.iter_mut().for_each(|g| *g = F::one());
        l.ln2_gain.iter_mut().for_each(|g| *g = F::one());
        l.qkv_weight = normal(d * 3 * d, INIT_STD);
        l.attn_out_weight = normal(d * d, resid_std);
        l.ff_in_weight = normal(d * c.d_ff, INIT_STD);
        l.ff_out_weight = normal(c.d_ff * d, resid_std);
    }
    p.final_ln_gain.iter_mut().for_each(|g| *g = F::one());
    p.nsp_weight = normal(d * 2, INIT_STD);
    p
}
