use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

use super::{BackboneVars, HeadVars, LayerVars, ViTConfig, LAYER_NORM_EPS};

/// The per-layer token triple `(x, Z, E)`.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    /// `[1×d]`
    pub class: Var,
    /// `[p×d]`, possibly with zero rows.
    pub prompts: Var,
    /// `[k×d]`
    pub image: Var,
}

impl TokenSequence {
    /// `[class; prompts; image]` as one `[(1+p+k)×d]` matrix.
    pub fn concat<T: Real>(&self, tape: &mut Tape<T>) -> Result<Var> {
        tape.concat_rows(&[self.class, self.prompts, self.image])
    }

    /// Inverse of [`concat`](Self::concat) given the prompt block height.
    pub fn split<T: Real>(tape: &mut Tape<T>, tokens: Var, prompts: usize) -> Result<Self> {
        let total = tape.shape(tokens)[0];
        if total < 1 + prompts {
            return Err(Error::Dimension(format!(
                "sequence of {total} tokens cannot hold a class token and {prompts} prompts"
            )));
        }
        Ok(TokenSequence {
            class: tape.slice_rows(tokens, 0, 1)?,
            prompts: tape.slice_rows(tokens, 1, 1 + prompts)?,
            image: tape.slice_rows(tokens, 1 + prompts, total)?,
        })
    }
}

/// Fixed sine/cosine table `[tokens×dim]`.
pub fn sinusoidal_positions<T: Real>(tokens: usize, dim: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[tokens, dim]);
    for pos in 0..tokens {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.set(pos, i, T::lit(v));
        }
    }
    out
}

/// Cuts a `[C×H×W]` image into non-overlapping patches, one row per patch in
/// raster order, each flattened channel-major.
pub fn patchify<T: Real>(image: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expected {
        return Err(Error::Dimension(format!(
            "image shape {:?} does not match configured {:?}",
            image.shape(),
            expected
        )));
    }
    let (s, ps, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let data = image.data();
    let mut out = Vec::with_capacity(cfg.tokens() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..cfg.channels {
                for y in 0..ps {
                    for x in 0..ps {
                        out.push(data[(c * s + gy * ps + y) * s + gx * ps + x]);
                    }
                }
            }
        }
    }
    Tensor::matrix(cfg.tokens(), cfg.patch_dim(), out)
}

/// Image tokens `E_0 = patches · W + b + positions`.
pub fn embed_patches<T: Real>(
    tape: &mut Tape<T>,
    image: &Tensor<T>,
    bb: &BackboneVars,
    cfg: &ViTConfig,
) -> Result<Var> {
    let patches = tape.constant(patchify(image, cfg)?);
    let projected = tape.matmul(patches, bb.patch_w)?;
    let biased = tape.add_row(projected, bb.patch_b)?;
    tape.add(biased, bb.positions)
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Softmax attention weights of every head for the normalised tokens of a
/// block, `heads × [T×T]`.
pub fn attention_probabilities<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    layer: &LayerVars,
    heads: usize,
) -> Result<Vec<Var>> {
    let normed = tape.layer_norm(tokens, layer.ln1_gamma, layer.ln1_beta, T::lit(LAYER_NORM_EPS))?;
    let (_, probs) = attention_core(tape, normed, layer, heads)?;
    Ok(probs)
}

fn attention_core<T: Real>(
    tape: &mut Tape<T>,
    normed: Var,
    layer: &LayerVars,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(normed)[1];
    let dh = d / heads;
    let q = linear(tape, normed, layer.w_q, layer.b_q)?;
    let k = linear(tape, normed, layer.w_k, layer.b_k)?;
    let v = linear(tape, normed, layer.w_v, layer.b_v)?;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let p = tape.softmax(scores)?;
        outputs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let merged = if heads == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    Ok((linear(tape, merged, layer.w_o, layer.b_o)?, probs))
}

/// Pre-norm block on a full `[T×d]` token matrix:
/// `h = x + MHA(LN(x))`, `out = h + MLP(LN(h))`.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    layer: &LayerVars,
    heads: usize,
) -> Result<Var> {
    let eps = T::lit(LAYER_NORM_EPS);
    let normed = tape.layer_norm(tokens, layer.ln1_gamma, layer.ln1_beta, eps)?;
    let (attn, _) = attention_core(tape, normed, layer, heads)?;
    let h = tape.add(tokens, attn)?;
    let normed = tape.layer_norm(h, layer.ln2_gamma, layer.ln2_beta, eps)?;
    let hidden = linear(tape, normed, layer.w_fc1, layer.b_fc1)?;
    let hidden = tape.gelu(hidden);
    let mlp = linear(tape, hidden, layer.w_fc2, layer.b_fc2)?;
    tape.add(h, mlp)
}

/// One transformer layer over `[x, Z, E]`, re-split by block sizes.
pub fn layer_forward<T: Real>(
    tape: &mut Tape<T>,
    seq: TokenSequence,
    layer: &LayerVars,
    heads: usize,
) -> Result<TokenSequence> {
    let widths = [
        tape.shape(seq.class)[1],
        tape.shape(seq.prompts)[1],
        tape.shape(seq.image)[1],
    ];
    if widths[0] != widths[1] || widths[1] != widths[2] {
        return Err(Error::Dimension(format!(
            "token blocks have widths {widths:?}"
        )));
    }
    let p = tape.shape(seq.prompts)[0];
    let tokens = seq.concat(tape)?;
    let out = block_forward(tape, tokens, layer, heads)?;
    TokenSequence::split(tape, out, p)
}

/// `Head(x)`: a single linear map `[1×d] → [1×classes]`.
pub fn head<T: Real>(tape: &mut Tape<T>, x: Var, hv: &HeadVars) -> Result<Var> {
    linear(tape, x, hv.weight, hv.bias)
}

/// Final layer norm on the class token followed by the head.
pub fn classify<T: Real>(
    tape: &mut Tape<T>,
    class_token: Var,
    bb: &BackboneVars,
    hv: &HeadVars,
) -> Result<Var> {
    let normed = tape.layer_norm(class_token, bb.norm_gamma, bb.norm_beta, T::lit(LAYER_NORM_EPS))?;
    head(tape, normed, hv)
}

fn empty_prompts<T: Real>(tape: &mut Tape<T>, d: usize) -> Var {
    tape.constant(Tensor::zeros(&[0, d]))
}

/// Plain ViT forward with no prompt tokens.
pub fn forward_plain<T: Real>(
    tape: &mut Tape<T>,
    e0: Var,
    bb: &BackboneVars,
    hv: &HeadVars,
    cfg: &ViTConfig,
) -> Result<Var> {
    let p0 = empty_prompts(tape, cfg.dim);
    forward_vpt_shallow(tape, e0, p0, bb, hv, cfg)
}

/// Prompts enter at the first layer only; their outputs propagate.
pub fn forward_vpt_shallow<T: Real>(
    tape: &mut Tape<T>,
    e0: Var,
    p0: Var,
    bb: &BackboneVars,
    hv: &HeadVars,
    cfg: &ViTConfig,
) -> Result<Var> {
    let mut seq = TokenSequence {
        class: bb.class_token,
        prompts: p0,
        image: e0,
    };
    for layer in &bb.layers {
        seq = layer_forward(tape, seq, layer, cfg.heads)?;
    }
    classify(tape, seq.class, bb, hv)
}

/// Fresh prompts at every layer; propagated prompt outputs are discarded.
pub fn forward_vpt_deep<T: Real>(
    tape: &mut Tape<T>,
    e0: Var,
    prompts: &[Var],
    bb: &BackboneVars,
    hv: &HeadVars,
    cfg: &ViTConfig,
) -> Result<Var> {
    if prompts.len() != bb.layers.len() {
        return Err(Error::Config(format!(
            "deep prompting needs {} prompt blocks, got {}",
            bb.layers.len(),
            prompts.len()
        )));
    }
    let mut seq = TokenSequence {
        class: bb.class_token,
        prompts: prompts[0],
        image: e0,
    };
    for (i, layer) in bb.layers.iter().enumerate() {
        if i > 0 {
            seq.prompts = prompts[i];
        }
        seq = layer_forward(tape, seq, layer, cfg.heads)?;
    }
    classify(tape, seq.class, bb, hv)
}
