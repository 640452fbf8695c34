//! Transformer conditioner: each input dimension is a token, a causal mask
//! keeps the model autoregressive, and a shared projection head turns the
//! hidden embeddings into per-dimension pseudo-parameters.
//!
//! The token sequence for `x ∈ ℝᴰ` has length `D`:
//! `[bos, e(x₁), …, e(x_{D−1})]` plus positional embeddings. Output row `i`
//! therefore sees only `x₁..x_i` (0-based: row `i` conditions dimension
//! `i + 1`), and `x_D` is never embedded.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, DiffError, ParamSet, Tape, Tensor, Var};

/// Additive mask value standing in for −∞.
pub const MASK_NEG: f64 = -1e30;
/// Layer-norm epsilon, added to the biased variance.
pub const LN_EPS: f64 = 1e-5;

/// How hidden embeddings become pseudo-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    /// `ψ_i = h_i`.
    Identity,
    /// `count` independent linear heads, each `E → psi_dim`.
    Linear { psi_dim: usize, count: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionerConfig {
    pub dim: usize,
    pub embed: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub projection: Projection,
}

impl ConditionerConfig {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("dim", self.dim),
            ("embed", self.embed),
            ("heads", self.heads),
            ("layers", self.layers),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be at least 1"));
        }
        if !self.embed.is_multiple_of(self.heads) {
            return Err(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed, self.heads
            ));
        }
        if let Projection::Linear { psi_dim, count } = self.projection {
            if psi_dim == 0 || count == 0 {
                return Err("projection head must have a positive width and count".into());
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }

    /// Width of each ψ_i.
    pub fn psi_dim(&self) -> usize {
        match self.projection {
            Projection::Identity => self.embed,
            Projection::Linear { psi_dim, .. } => psi_dim,
        }
    }

    /// Closed-form parameter count of the conditioner and its projection heads.
    pub fn param_count(&self) -> usize {
        let (e, m) = (self.embed, self.mlp_hidden);
        let embedding = 2 * e + e + self.dim * e;
        let per_layer = 2 * e + 4 * (e * e + e) + 2 * e + e * m + m + m * e + e;
        let head = match self.projection {
            Projection::Identity => 0,
            Projection::Linear { psi_dim, count } => count * (e * psi_dim + psi_dim),
        };
        embedding + self.layers * per_layer + head
    }
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("cond.layers.{layer}.{part}")
}

pub fn head_weight_name(head: usize) -> String {
    format!("cond.head.{head}.weight")
}

pub fn head_bias_name(head: usize) -> String {
    format!("cond.head.{head}.bias")
}

fn uniform_fan_in(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn small_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, 0.02).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Register freshly initialized conditioner parameters into `params`.
pub fn init_params(cfg: &ConditionerConfig, rng: &mut impl Rng, params: &mut ParamSet) -> Result<(), DiffError> {
    let (e, m) = (cfg.embed, cfg.mlp_hidden);
    params.insert("cond.input_proj.weight", uniform_fan_in(rng, 1, &[1, e]))?;
    params.insert("cond.input_proj.bias", Tensor::zeros(&[e]))?;
    params.insert("cond.bos", small_normal(rng, &[e]))?;
    params.insert("cond.positional", small_normal(rng, &[cfg.dim, e]))?;
    for l in 0..cfg.layers {
        params.insert(layer_name(l, "ln1.gain"), Tensor::full(&[e], 1.0))?;
        params.insert(layer_name(l, "ln1.bias"), Tensor::zeros(&[e]))?;
        for p in ["q", "k", "v", "o"] {
            params.insert(layer_name(l, &format!("attn.w{p}")), uniform_fan_in(rng, e, &[e, e]))?;
            params.insert(layer_name(l, &format!("attn.b{p}")), Tensor::zeros(&[e]))?;
        }
        params.insert(layer_name(l, "ln2.gain"), Tensor::full(&[e], 1.0))?;
        params.insert(layer_name(l, "ln2.bias"), Tensor::zeros(&[e]))?;
        params.insert(layer_name(l, "mlp.w1"), uniform_fan_in(rng, e, &[e, m]))?;
        params.insert(layer_name(l, "mlp.b1"), Tensor::zeros(&[m]))?;
        params.insert(layer_name(l, "mlp.w2"), uniform_fan_in(rng, m, &[m, e]))?;
        params.insert(layer_name(l, "mlp.b2"), Tensor::zeros(&[e]))?;
    }
    if let Projection::Linear { psi_dim, count } = cfg.projection {
        for j in 0..count {
            params.insert(head_weight_name(j), uniform_fan_in(rng, e, &[e, psi_dim]))?;
            params.insert(head_bias_name(j), Tensor::zeros(&[psi_dim]))?;
        }
    }
    Ok(())
}

/// `D×D` additive mask: 0 on and below the diagonal, [`MASK_NEG`] above.
pub fn causal_mask(dim: usize) -> Tensor {
    let mut m = Tensor::zeros(&[dim, dim]);
    for r in 0..dim {
        for c in r + 1..dim {
            m.data_mut()[r * dim + c] = MASK_NEG;
        }
    }
    m
}

fn check_input(cfg: &ConditionerConfig, x: &Tensor) -> Result<usize, DiffError> {
    if x.rank() != 2 || x.shape()[1] != cfg.dim {
        return Err(DiffError::Shape {
            op: "conditioner input",
            left: x.shape().to_vec(),
            right: vec![cfg.dim],
        });
    }
    Ok(x.shape()[0])
}

/// Token embeddings `[N·D, E]` for a batch `x: [N, D]`.
pub fn embed_sequence(tape: &mut Tape, bound: &Bound, cfg: &ConditionerConfig, x: &Tensor) -> Result<Var, DiffError> {
    let n = check_input(cfg, x)?;
    let (d, e) = (cfg.dim, cfg.embed);
    // Row features [x_{i−1}, 1, 0] for i ≥ 1 and [0, 0, 1] for the BoS slot.
    let mut feats = vec![0.0; n * d * 3];
    for s in 0..n {
        for i in 0..d {
            let row = &mut feats[(s * d + i) * 3..(s * d + i + 1) * 3];
            if i == 0 {
                row[2] = 1.0;
            } else {
                row[0] = x.at(s, i - 1);
                row[1] = 1.0;
            }
        }
    }
    let feats = tape.constant(Tensor::matrix(n * d, 3, feats)?);
    let bias = tape.reshape(bound.get("cond.input_proj.bias"), &[1, e])?;
    let bos = tape.reshape(bound.get("cond.bos"), &[1, e])?;
    let table = tape.concat_rows(&[bound.get("cond.input_proj.weight"), bias, bos])?;
    let tokens = tape.matmul(feats, table)?;
    let tokens = tape.reshape(tokens, &[n, d * e])?;
    let pos = tape.reshape(bound.get("cond.positional"), &[d * e])?;
    let seq = tape.add(tokens, pos)?;
    tape.reshape(seq, &[n * d, e])
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `[N·D, E] -> [N·heads, D, E/heads]`.
fn split_heads(tape: &mut Tape, t: Var, n: usize, cfg: &ConditionerConfig) -> Result<Var, DiffError> {
    let (d, h, dh) = (cfg.dim, cfg.heads, cfg.head_dim());
    let t = tape.reshape(t, &[n, d, h, dh])?;
    let t = tape.swap12(t)?;
    tape.reshape(t, &[n * h, d, dh])
}

fn merge_heads(tape: &mut Tape, t: Var, n: usize, cfg: &ConditionerConfig) -> Result<Var, DiffError> {
    let (d, h, dh) = (cfg.dim, cfg.heads, cfg.head_dim());
    let t = tape.reshape(t, &[n, h, d, dh])?;
    let t = tape.swap12(t)?;
    tape.reshape(t, &[n * d, cfg.embed])
}

/// Pre-norm encoder block:
/// `u = seq + MHA(ln1(seq))`, `out = u + MLP(ln2(u))` with a tanh MLP.
pub fn encoder_layer(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ConditionerConfig,
    layer: usize,
    seq: Var,
    mask: &Tensor,
) -> Result<Var, DiffError> {
    let rows = tape.shape(seq)[0];
    if tape.shape(seq) != [rows, cfg.embed] || !rows.is_multiple_of(cfg.dim) {
        return Err(DiffError::Shape {
            op: "encoder_layer",
            left: tape.shape(seq).to_vec(),
            right: vec![cfg.dim, cfg.embed],
        });
    }
    let n = rows / cfg.dim;
    let p = |part: &str| bound.get(&layer_name(layer, part));

    let normed = tape.layer_norm(seq, p("ln1.gain"), p("ln1.bias"), LN_EPS)?;
    let q = linear(tape, normed, p("attn.wq"), p("attn.bq"))?;
    let k = linear(tape, normed, p("attn.wk"), p("attn.bk"))?;
    let v = linear(tape, normed, p("attn.wv"), p("attn.bv"))?;
    let (q, k, v) = (
        split_heads(tape, q, n, cfg)?,
        split_heads(tape, k, n, cfg)?,
        split_heads(tape, v, n, cfg)?,
    );
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (cfg.head_dim() as f64).sqrt())?;
    let attn = tape.masked_softmax(scores, mask)?;
    let ctx = tape.batch_matmul(attn, v, false)?;
    let ctx = merge_heads(tape, ctx, n, cfg)?;
    let attn_out = linear(tape, ctx, p("attn.wo"), p("attn.bo"))?;
    let u = tape.add(seq, attn_out)?;

    let normed = tape.layer_norm(u, p("ln2.gain"), p("ln2.bias"), LN_EPS)?;
    let hidden = linear(tape, normed, p("mlp.w1"), p("mlp.b1"))?;
    let hidden = tape.tanh(hidden)?;
    let mlp_out = linear(tape, hidden, p("mlp.w2"), p("mlp.b2"))?;
    tape.add(u, mlp_out)
}

/// Hidden embeddings `[N·D, E]`; row `s·D + i` is `h_{i+1}` for sample `s`.
pub fn condition(tape: &mut Tape, bound: &Bound, cfg: &ConditionerConfig, x: &Tensor) -> Result<Var, DiffError> {
    let mask = causal_mask(cfg.dim);
    let mut seq = embed_sequence(tape, bound, cfg, x)?;
    for layer in 0..cfg.layers {
        seq = encoder_layer(tape, bound, cfg, layer, seq, &mask)?;
    }
    Ok(seq)
}

/// Pseudo-parameters `[N·D, psi_dim]` from projection head `head`.
pub fn project_head(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ConditionerConfig,
    hidden: Var,
    head: usize,
) -> Result<Var, DiffError> {
    match cfg.projection {
        Projection::Identity => Ok(hidden),
        Projection::Linear { .. } => linear(tape, hidden, bound.get(&head_weight_name(head)), bound.get(&head_bias_name(head))),
    }
}

/// No-grad hidden embeddings `[D, E]` for a single input vector.
pub fn hidden_embeddings(params: &ParamSet, cfg: &ConditionerConfig, x: &[f64]) -> Result<Tensor, DiffError> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let h = condition(&mut tape, &bound, cfg, &Tensor::new(&[1, x.len()], x.to_vec())?)?;
    Ok(tape.value(h).clone())
}
