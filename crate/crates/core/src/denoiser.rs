//! The conditional denoiser `f(x_t, t, I_di) -> x0_hat`.
//!
//! Pipeline, with `n` caption positions and `HW` image tokens:
//!
//! ```text
//! x_t (n x d)     --text_proj-->  + PE(n)  + TE(t) = x_emb   (n x d_model)
//! I_di (HW x C)   --image_proj--> + PE(HW) + TE(t) = idi_emb (HW x d_model)
//! CMF:  x_c   = MHA(q = x_emb, k = v = idi_emb) W_out
//!       x_fus = LN(x_c + Dropout(FC(ReLU(FC(x_c)))))
//! SSA (ssa_depth layers):
//!       x_i   = MHA(q = k = v = x)
//!       x_res = LN(Dropout(FC(x_i)) + x_i)
//!       x_act = GELU(FC(x_res))
//!       x     = LN(x_act + Dropout(FC(x_act)))
//! x0_hat = out_proj(x)            (n x d)
//! ```
//!
//! Attention is scaled dot-product with `1 / sqrt(d_model / heads)` and no
//! padding mask.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{xavier, BoundParams, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ssa_depth: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Caption positions `n`.
    pub seq_len: usize,
    /// Image tokens `HW`.
    pub image_tokens: usize,
    /// Word embedding width `d`.
    pub word_dim: usize,
    /// Image feature channels `C`.
    pub image_channels: usize,
    /// Scale applied to the Xavier draw of the text projection weight.
    pub init_text_gain: f64,
    /// When positive, every attention query and key weight starts as this
    /// multiple of the identity; zero keeps the Xavier draw.
    pub init_qk_identity: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 8,
            ssa_depth: 3,
            ffn_dim: 1024,
            dropout: 0.1,
            seq_len: 40,
            image_tokens: 64,
            word_dim: 16,
            image_channels: 2048,
            init_text_gain: 3.0,
            init_qk_identity: 3.0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model {} must be even", self.d_model));
        }
        if self.ssa_depth < 1 {
            return fail("ssa_depth must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_text_gain.is_finite() && self.init_text_gain > 0.0) {
            return fail(format!(
                "init_text_gain {} must be positive",
                self.init_text_gain
            ));
        }
        if !(self.init_qk_identity.is_finite() && self.init_qk_identity >= 0.0) {
            return fail(format!(
                "init_qk_identity {} must be non-negative",
                self.init_qk_identity
            ));
        }
        for (name, v) in [
            ("ffn_dim", self.ffn_dim),
            ("seq_len", self.seq_len),
            ("image_tokens", self.image_tokens),
            ("word_dim", self.word_dim),
            ("image_channels", self.image_channels),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// Sinusoidal table: `(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `(pos, 2i+1) = cos(same)`.
pub fn positional_encoding(length: usize, d_model: usize) -> Result<Array2<f64>> {
    if !d_model.is_multiple_of(2) || d_model == 0 {
        return Err(Error::Config(format!(
            "encoding width {d_model} must be even"
        )));
    }
    let mut pe = Array2::zeros((length, d_model));
    for pos in 0..length {
        fill_sinusoid(pos as f64, pe.row_mut(pos).as_slice_mut().unwrap());
    }
    Ok(pe)
}

/// Same sinusoid evaluated at the diffusion step `t`.
pub fn time_encoding(t: usize, d_model: usize) -> Result<Array1<f64>> {
    if !d_model.is_multiple_of(2) || d_model == 0 {
        return Err(Error::Config(format!(
            "encoding width {d_model} must be even"
        )));
    }
    let mut te = Array1::zeros(d_model);
    fill_sinusoid(t as f64, te.as_slice_mut().unwrap());
    Ok(te)
}

fn fill_sinusoid(pos: f64, out: &mut [f64]) {
    let d = out.len() as f64;
    for pair in 0..out.len() / 2 {
        let arg = pos / 10000f64.powf(2.0 * pair as f64 / d);
        out[2 * pair] = arg.sin();
        out[2 * pair + 1] = arg.cos();
    }
}

/// Dropout source. Without an rng the layer is the identity.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn disabled() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Var {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let (r, c) = tape.shape(x);
                let mask =
                    Array2::from_shape_fn(
                        (r, c),
                        |_| {
                            if rng.gen::<f64>() < rate {
                                0.0
                            } else {
                                keep
                            }
                        },
                    );
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }
}

pub const TEXT_PROJ: &str = "denoiser.text_proj";
pub const IMAGE_PROJ: &str = "denoiser.image_proj";
pub const OUT_PROJ: &str = "denoiser.out_proj";

fn cmf(name: &str) -> String {
    format!("denoiser.cmf.{name}")
}

fn ssa(layer: usize, name: &str) -> String {
    format!("denoiser.ssa.{layer}.{name}")
}

/// Every denoiser parameter name with its shape.
pub fn parameter_shapes(cfg: &DenoiserConfig) -> Vec<(String, (usize, usize))> {
    let dm = cfg.d_model;
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, prefix: String, fan_in: usize, fan_out: usize| {
        out.push((format!("{prefix}.weight"), (fan_in, fan_out)));
        out.push((format!("{prefix}.bias"), (1, fan_out)));
    };
    let norm = |out: &mut Vec<_>, prefix: String| {
        out.push((format!("{prefix}.gamma"), (1, dm)));
        out.push((format!("{prefix}.beta"), (1, dm)));
    };
    linear(&mut out, TEXT_PROJ.into(), cfg.word_dim, dm);
    linear(&mut out, IMAGE_PROJ.into(), cfg.image_channels, dm);
    for n in ["query", "key", "value"] {
        out.push((format!("{}.weight", cmf(n)), (dm, dm)));
    }
    linear(&mut out, cmf("out"), dm, dm);
    linear(&mut out, cmf("ffn1"), dm, cfg.ffn_dim);
    linear(&mut out, cmf("ffn2"), cfg.ffn_dim, dm);
    norm(&mut out, cmf("norm"));
    for l in 0..cfg.ssa_depth {
        for n in ["query", "key", "value"] {
            out.push((format!("{}.weight", ssa(l, n)), (dm, dm)));
        }
        linear(&mut out, ssa(l, "fc_res"), dm, dm);
        norm(&mut out, ssa(l, "norm_res"));
        linear(&mut out, ssa(l, "fc_act"), dm, dm);
        linear(&mut out, ssa(l, "fc_out"), dm, dm);
        norm(&mut out, ssa(l, "norm_out"));
    }
    linear(&mut out, OUT_PROJ.into(), dm, cfg.word_dim);
    out
}

/// Xavier weights, zero biases, unit layer-norm scales, then the two
/// configured adjustments: the text projection is scaled by
/// `init_text_gain`, and query/key weights become `init_qk_identity * I`
/// when that is positive. Every weight is drawn either way, so the random
/// stream does not depend on the adjustments.
pub fn init_params<R: Rng>(
    cfg: &DenoiserConfig,
    rng: &mut R,
    store: &mut ParamStore,
) -> Result<()> {
    cfg.validate()?;
    for (name, (r, c)) in parameter_shapes(cfg) {
        let value = if name.ends_with(".gamma") {
            Array2::ones((r, c))
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            Array2::zeros((r, c))
        } else {
            let w = xavier(rng, r, c);
            let qk = name.ends_with(".query.weight") || name.ends_with(".key.weight");
            if name == format!("{TEXT_PROJ}.weight") {
                w * cfg.init_text_gain
            } else if qk && cfg.init_qk_identity > 0.0 {
                Array2::eye(r) * cfg.init_qk_identity
            } else {
                w
            }
        };
        store.insert(name, value);
    }
    Ok(())
}

pub fn check_params(cfg: &DenoiserConfig, store: &ParamStore) -> Result<()> {
    cfg.validate()?;
    for (name, (r, c)) in parameter_shapes(cfg) {
        store.expect_shape(&name, r, c)?;
    }
    Ok(())
}

fn linear(tape: &mut Tape<'_>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w);
    Ok(tape.add_row(y, b))
}

fn layer_norm(tape: &mut Tape<'_>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.gamma"))?;
    let b = p.var(&format!("{prefix}.beta"))?;
    Ok(tape.layer_norm(x, g, b))
}

/// Multi-head scaled dot-product attention over pre-projected `q`, `k`,
/// `v`. Per-head weight matrices are appended to `weights`.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    weights: &mut Vec<Var>,
) -> Var {
    let width = tape.shape(q).1;
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * hd, (h + 1) * hd);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, a, b),
                tape.slice_cols(k, a, b),
                tape.slice_cols(v, a, b),
            )
        };
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let w = tape.softmax_rows(scores);
        weights.push(w);
        outs.push(tape.matmul(w, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    }
}

fn check_dims(
    context: &'static str,
    tape: &Tape<'_>,
    x: Var,
    rows: usize,
    cols: usize,
) -> Result<()> {
    let shape = tape.shape(x);
    if shape != (rows, cols) {
        return Err(Error::shape(context, &[rows, cols], &[shape.0, shape.1]));
    }
    Ok(())
}

/// Projections plus position and time encodings for both streams.
pub fn embed_inputs_on(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    cfg: &DenoiserConfig,
    x_t: Var,
    idi: Var,
    t: usize,
) -> Result<(Var, Var)> {
    check_dims("denoiser x_t", tape, x_t, cfg.seq_len, cfg.word_dim)?;
    check_dims(
        "denoiser I_di",
        tape,
        idi,
        cfg.image_tokens,
        cfg.image_channels,
    )?;
    let te = time_encoding(t, cfg.d_model)?.insert_axis(ndarray::Axis(0));
    let te = tape.constant(te);

    let x = linear(tape, p, TEXT_PROJ, x_t)?;
    let pe_text = tape.constant(positional_encoding(cfg.seq_len, cfg.d_model)?);
    let x = tape.add(x, pe_text);
    let x_emb = tape.add_row(x, te);

    let i = linear(tape, p, IMAGE_PROJ, idi)?;
    let pe_img = tape.constant(positional_encoding(cfg.image_tokens, cfg.d_model)?);
    let i = tape.add(i, pe_img);
    let idi_emb = tape.add_row(i, te);
    Ok((x_emb, idi_emb))
}

/// Cross-mode fusion block.
pub fn cmf_on(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    cfg: &DenoiserConfig,
    x_emb: Var,
    idi_emb: Var,
    drop: &mut Dropout<'_>,
    attention: &mut Vec<Var>,
) -> Result<Var> {
    cfg.validate()?;
    check_dims("cmf text stream", tape, x_emb, cfg.seq_len, cfg.d_model)?;
    let (rows, cols) = tape.shape(idi_emb);
    if cols != cfg.d_model {
        return Err(Error::shape(
            "cmf image stream",
            &[rows, cfg.d_model],
            &[rows, cols],
        ));
    }
    let wq = p.var(&format!("{}.weight", cmf("query")))?;
    let wk = p.var(&format!("{}.weight", cmf("key")))?;
    let wv = p.var(&format!("{}.weight", cmf("value")))?;
    let q = tape.matmul(x_emb, wq);
    let k = tape.matmul(idi_emb, wk);
    let v = tape.matmul(idi_emb, wv);
    let heads = multi_head_attention(tape, q, k, v, cfg.heads, attention);
    let x_c = linear(tape, p, &cmf("out"), heads)?;

    let h = linear(tape, p, &cmf("ffn1"), x_c)?;
    let h = tape.relu(h);
    let x_proj = linear(tape, p, &cmf("ffn2"), h)?;
    let x_proj = drop.apply(tape, x_proj);
    let sum = tape.add(x_c, x_proj);
    layer_norm(tape, p, &cmf("norm"), sum)
}

/// Stacked self-attention with the complementary block after each layer.
pub fn ssa_on(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    cfg: &DenoiserConfig,
    x_fus: Var,
    drop: &mut Dropout<'_>,
    attention: &mut Vec<Var>,
) -> Result<Var> {
    cfg.validate()?;
    check_dims("ssa input", tape, x_fus, cfg.seq_len, cfg.d_model)?;
    let mut x = x_fus;
    for l in 0..cfg.ssa_depth {
        let wq = p.var(&format!("{}.weight", ssa(l, "query")))?;
        let wk = p.var(&format!("{}.weight", ssa(l, "key")))?;
        let wv = p.var(&format!("{}.weight", ssa(l, "value")))?;
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let x_i = multi_head_attention(tape, q, k, v, cfg.heads, attention);

        let r = linear(tape, p, &ssa(l, "fc_res"), x_i)?;
        let r = drop.apply(tape, r);
        let r = tape.add(r, x_i);
        let x_res = layer_norm(tape, p, &ssa(l, "norm_res"), r)?;

        let a = linear(tape, p, &ssa(l, "fc_act"), x_res)?;
        let x_act = tape.gelu(a);

        let o = linear(tape, p, &ssa(l, "fc_out"), x_act)?;
        let o = drop.apply(tape, o);
        let o = tape.add(x_act, o);
        x = layer_norm(tape, p, &ssa(l, "norm_out"), o)?;
    }
    Ok(x)
}

/// Full denoiser on the tape; returns the `n x d` x0 prediction.
pub fn denoise_on(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    cfg: &DenoiserConfig,
    x_t: Var,
    idi: Var,
    t: usize,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let mut attention = Vec::new();
    let (x_emb, idi_emb) = embed_inputs_on(tape, p, cfg, x_t, idi, t)?;
    let x_fus = cmf_on(tape, p, cfg, x_emb, idi_emb, drop, &mut attention)?;
    let h = ssa_on(tape, p, cfg, x_fus, drop, &mut attention)?;
    linear(tape, p, OUT_PROJ, h)
}

/// Block output together with its per-head attention weights.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Array2<f64>,
    /// One matrix per head (per layer, in order for SSA).
    pub attention: Vec<Array2<f64>>,
}

pub fn embed_inputs(
    x_t: &Array2<f64>,
    idi: &Array2<f64>,
    t: usize,
    cfg: &DenoiserConfig,
    params: &ParamStore,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.constant(x_t.clone());
    let iv = tape.constant(idi.clone());
    let (a, b) = embed_inputs_on(&mut tape, &p, cfg, xv, iv, t)?;
    Ok((tape.value(a).clone(), tape.value(b).clone()))
}

/// CMF with dropout off.
pub fn cmf_forward(
    x_emb: &Array2<f64>,
    idi_emb: &Array2<f64>,
    cfg: &DenoiserConfig,
    params: &ParamStore,
) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.constant(x_emb.clone());
    let iv = tape.constant(idi_emb.clone());
    let mut attn = Vec::new();
    let out = cmf_on(
        &mut tape,
        &p,
        cfg,
        xv,
        iv,
        &mut Dropout::disabled(),
        &mut attn,
    )?;
    Ok(AttentionOutput {
        output: tape.value(out).clone(),
        attention: attn.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// SSA stack with dropout off.
pub fn ssa_forward(
    x_fus: &Array2<f64>,
    cfg: &DenoiserConfig,
    params: &ParamStore,
) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.constant(x_fus.clone());
    let mut attn = Vec::new();
    let out = ssa_on(&mut tape, &p, cfg, xv, &mut Dropout::disabled(), &mut attn)?;
    Ok(AttentionOutput {
        output: tape.value(out).clone(),
        attention: attn.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// `x0_hat = f(x_t, t, I_di)` with dropout off.
pub fn denoise(
    x_t: &Array2<f64>,
    t: usize,
    idi: &Array2<f64>,
    cfg: &DenoiserConfig,
    params: &ParamStore,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.constant(x_t.clone());
    let iv = tape.constant(idi.clone());
    let out = denoise_on(&mut tape, &p, cfg, xv, iv, t, &mut Dropout::disabled())?;
    Ok(tape.value(out).clone())
}

/// Mean of `p(x_{t-1} | x_t)` with the x0 prediction substituted into the
/// posterior mean.
pub fn reverse_mean(
    x_t: &Array2<f64>,
    t: usize,
    x0_hat: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.posterior_mean(x_t, x0_hat, t)
}
