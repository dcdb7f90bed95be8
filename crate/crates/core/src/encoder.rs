//! Single-stream joint text–image transformer encoder.
//!
//! The input sequence is `[CLS_text, t_1..t_n, CLS_img, i_1..i_m]`. Text rows
//! are token embeddings, image rows are a linear projection of flattened
//! patches behind a learned image CLS vector. Each stream adds its own learned
//! positional table and a modality-type embedding. Blocks are pre-norm
//! (`x + Attn(LN(x))`, then `x + FFN(LN(x))`) with no final norm, and the
//! pooler is `tanh(W·x_0 + b)` over the text CLS row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::corpus::{PatchGrid, TokenSeq};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamSet};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    /// Longest token sequence accepted, CLS excluded.
    pub max_tokens: usize,
    /// Most patches accepted, image CLS excluded.
    pub max_patches: usize,
    pub dropout_rate: f64,
    /// Flattened patch length `P²·C`.
    pub patch_input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 128,
            max_tokens: 64,
            max_patches: 64,
            dropout_rate: 0.0,
            patch_input_dim: 48,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.vocab_size", self.vocab_size),
            ("encoder.d_model", self.d_model),
            ("encoder.n_heads", self.n_heads),
            ("encoder.ff_dim", self.ff_dim),
            ("encoder.max_tokens", self.max_tokens),
            ("encoder.max_patches", self.max_patches),
            ("encoder.patch_input_dim", self.patch_input_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(
                "encoder.n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("encoder.dropout_rate", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Closed-form scalar parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embeddings = self.vocab_size * d
            + self.patch_input_dim * d
            + d // patch projection bias
            + d // image CLS
            + 2 * d // modality types
            + (self.max_tokens + 1) * d
            + (self.max_patches + 1) * d;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * self.ff_dim + self.ff_dim) + (self.ff_dim * d + d);
        embeddings + self.n_layers * block + d * d + d
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok_emb: usize,
    patch_w: usize,
    patch_b: usize,
    img_cls: usize,
    type_emb: usize,
    pos_text: usize,
    pos_img: usize,
    blocks: Vec<BlockLayout>,
    pool_w: usize,
    pool_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub set: ParamSet,
    layout: Layout,
}

/// Per-stream encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbeddings {
    /// `(n+1)×d`, row 0 is the text CLS.
    pub token_embs: Mat,
    /// `(m+1)×d`, row 0 is the image CLS.
    pub patch_embs: Mat,
    /// `1×d`.
    pub pooler: Mat,
}

/// Encoder outputs as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub tokens: Var,
    pub patches: Var,
    pub pooler: Var,
}

/// Weights in `±1/sqrt(fan_in)`, norm gains 1, biases 0. Deterministic per seed.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, ff) = (cfg.d_model, cfg.ff_dim);
    let mut set = ParamSet::new();
    let tok_emb = set.push_uniform(&mut rng, "tok_emb", (cfg.vocab_size, d), d);
    let patch_w = set.push_uniform(&mut rng, "patch_w", (cfg.patch_input_dim, d), cfg.patch_input_dim);
    let patch_b = set.push_zeros("patch_b", (1, d));
    let img_cls = set.push_uniform(&mut rng, "img_cls", (1, d), d);
    let type_emb = set.push_uniform(&mut rng, "type_emb", (2, d), d);
    let pos_text = set.push_uniform(&mut rng, "pos_text", (cfg.max_tokens + 1, d), d);
    let pos_img = set.push_uniform(&mut rng, "pos_img", (cfg.max_patches + 1, d), d);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("block{l}.{s}");
        blocks.push(BlockLayout {
            ln1_g: set.push_ones(name("ln1_g"), (1, d)),
            ln1_b: set.push_zeros(name("ln1_b"), (1, d)),
            wq: set.push_uniform(&mut rng, name("wq"), (d, d), d),
            bq: set.push_zeros(name("bq"), (1, d)),
            wk: set.push_uniform(&mut rng, name("wk"), (d, d), d),
            bk: set.push_zeros(name("bk"), (1, d)),
            wv: set.push_uniform(&mut rng, name("wv"), (d, d), d),
            bv: set.push_zeros(name("bv"), (1, d)),
            wo: set.push_uniform(&mut rng, name("wo"), (d, d), d),
            bo: set.push_zeros(name("bo"), (1, d)),
            ln2_g: set.push_ones(name("ln2_g"), (1, d)),
            ln2_b: set.push_zeros(name("ln2_b"), (1, d)),
            w1: set.push_uniform(&mut rng, name("w1"), (d, ff), d),
            b1: set.push_zeros(name("b1"), (1, ff)),
            w2: set.push_uniform(&mut rng, name("w2"), (ff, d), ff),
            b2: set.push_zeros(name("b2"), (1, d)),
        });
    }
    let pool_w = set.push_uniform(&mut rng, "pool_w", (d, d), d);
    let pool_b = set.push_zeros("pool_b", (1, d));
    Ok(EncoderParams {
        cfg: cfg.clone(),
        set,
        layout: Layout {
            tok_emb,
            patch_w,
            patch_b,
            img_cls,
            type_emb,
            pos_text,
            pos_img,
            blocks,
            pool_w,
            pool_b,
        },
    })
}

impl EncoderParams {
    /// Rebuilds parameters from a loaded tensor set, checking names and shapes
    /// against a fresh initialization of `cfg`.
    pub fn from_set(cfg: &EncoderConfig, set: ParamSet) -> Result<Self> {
        let mut fresh = init_encoder(cfg, 0)?;
        check_same_layout(&fresh.set, &set, "encoder")?;
        fresh.set = set;
        Ok(fresh)
    }

    fn check_lengths(&self, n: usize, m: usize, patch_dim: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::invalid("input", "token sequence has no tokens besides CLS"));
        }
        if n > self.cfg.max_tokens || m > self.cfg.max_patches {
            return Err(Error::invalid(
                "input",
                format!(
                    "{n} tokens / {m} patches exceed the configured maxima {} / {}",
                    self.cfg.max_tokens, self.cfg.max_patches
                ),
            ));
        }
        if patch_dim != self.cfg.patch_input_dim {
            return Err(Error::invalid(
                "input",
                format!("patch length {patch_dim}, encoder expects {}", self.cfg.patch_input_dim),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `dropout` enables dropout with the
    /// configured rate; pass `None` for deterministic inference.
    pub fn forward(
        &self,
        tape: &mut Tape,
        slot: u8,
        tokens: &TokenSeq,
        patches: &PatchGrid,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderVars> {
        let (n, m) = (tokens.n(), patches.m());
        self.check_lengths(n, m, patches.dim())?;
        let p = Binder::new(slot, &self.set);
        let lay = &self.layout;
        let mut dropout = dropout.filter(|_| self.cfg.dropout_rate > 0.0);

        let types = p.bind(tape, lay.type_emb);
        let type_text = tape.slice_rows(types, 0, 1);
        let type_img = tape.slice_rows(types, 1, 1);

        let table = p.bind(tape, lay.tok_emb);
        let tok = tape.gather(table, &tokens.token_ids);
        let pos_text = p.bind(tape, lay.pos_text);
        let pos_text = tape.slice_rows(pos_text, 0, n + 1);
        let text = tape.add(tok, pos_text);
        let text = tape.add_row(text, type_text);

        let pixels = tape.constant(patches.to_matrix());
        let w = p.bind(tape, lay.patch_w);
        let b = p.bind(tape, lay.patch_b);
        let proj = tape.matmul(pixels, w);
        let proj = tape.add_row(proj, b);
        let cls = p.bind(tape, lay.img_cls);
        let img = tape.concat_rows(&[cls, proj]);
        let pos_img = p.bind(tape, lay.pos_img);
        let pos_img = tape.slice_rows(pos_img, 0, m + 1);
        let img = tape.add(img, pos_img);
        let img = tape.add_row(img, type_img);

        let mut x = tape.concat_rows(&[text, img]);
        for block in &lay.blocks {
            x = self.block(tape, &p, block, x, dropout.as_deref_mut());
        }

        let token_out = tape.slice_rows(x, 0, n + 1);
        let patch_out = tape.slice_rows(x, n + 1, m + 1);
        let first = tape.slice_rows(x, 0, 1);
        let pw = p.bind(tape, lay.pool_w);
        let pb = p.bind(tape, lay.pool_b);
        let pooled = tape.matmul(first, pw);
        let pooled = tape.add_row(pooled, pb);
        let pooler = tape.tanh(pooled);
        Ok(EncoderVars {
            tokens: token_out,
            patches: patch_out,
            pooler,
        })
    }

    fn block(
        &self,
        tape: &mut Tape,
        p: &Binder,
        lay: &BlockLayout,
        x: Var,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;

        let h = layer_norm(tape, p, x, lay.ln1_g, lay.ln1_b);
        let q = linear(tape, p, h, lay.wq, lay.bq);
        let k = linear(tape, p, h, lay.wk, lay.bk);
        let v = linear(tape, p, h, lay.wv, lay.bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh));
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let attn_out = linear(tape, p, merged, lay.wo, lay.bo);
        let attn_out = self.dropout(tape, attn_out, dropout.as_deref_mut());
        let x = tape.add(x, attn_out);

        let h = layer_norm(tape, p, x, lay.ln2_g, lay.ln2_b);
        let f = linear(tape, p, h, lay.w1, lay.b1);
        let f = tape.gelu(f);
        let f = linear(tape, p, f, lay.w2, lay.b2);
        let f = self.dropout(tape, f, dropout);
        tape.add(x, f)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let Some(rng) = rng else { return x };
        let rate = self.cfg.dropout_rate;
        let keep = 1.0 / (1.0 - rate);
        let mask = tape
            .value(x)
            .mapv(|_| if rng.random::<f64>() < rate { 0.0 } else { keep });
        let mask = tape.constant(mask);
        tape.mul(x, mask)
    }
}

/// Inference-mode forward pass.
pub fn encode(params: &EncoderParams, tokens: &TokenSeq, patches: &PatchGrid) -> Result<JointEmbeddings> {
    let mut tape = Tape::new();
    let out = params.forward(&mut tape, 0, tokens, patches, None)?;
    Ok(JointEmbeddings {
        token_embs: tape.value(out.tokens).clone(),
        patch_embs: tape.value(out.patches).clone(),
        pooler: tape.value(out.pooler).clone(),
    })
}

pub(crate) fn linear(tape: &mut Tape, p: &Binder, x: Var, w: usize, b: usize) -> Var {
    let w = p.bind(tape, w);
    let b = p.bind(tape, b);
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn layer_norm(tape: &mut Tape, p: &Binder, x: Var, g: usize, b: usize) -> Var {
    let n = tape.normalize_rows(x, LN_EPS);
    let g = p.bind(tape, g);
    let b = p.bind(tape, b);
    let y = tape.mul_row(n, g);
    tape.add_row(y, b)
}

/// Verifies that `loaded` has the same tensor names and shapes as `expected`.
pub(crate) fn check_same_layout(expected: &ParamSet, loaded: &ParamSet, what: &str) -> Result<()> {
    if expected.len() != loaded.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: {} tensors, expected {}",
            loaded.len(),
            expected.len()
        )));
    }
    for (a, b) in expected.iter().zip(loaded.iter()) {
        if a.name != b.name || a.value.dim() != b.value.dim() {
            return Err(Error::Checkpoint(format!(
                "{what}: tensor {} {:?} does not match expected {} {:?}",
                b.name,
                b.value.dim(),
                a.name,
                a.value.dim()
            )));
        }
    }
    Ok(())
}
