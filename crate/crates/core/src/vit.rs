//! A small pre-norm vision transformer built on the tape.
//!
//! Layout per block: norm → attention → residual, norm → MLP → residual.
//! The CLS token is always row 0 of the token matrix. Attention exposes an
//! injection point that adds per-layer offset vectors to the CLS row of the
//! q/k/v projections (full D-dim, before the head split), and the forward
//! pass exposes a splice point between blocks where token sequences of two
//! samples can be interpolated.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    /// Default desk-scale model: 32×32 grayscale, 17 tokens, 4 heads.
    pub fn micro() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    /// Smallest nondegenerate config, used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || self.channels == 0
            || self.dim == 0
            || self.heads == 0
            || self.mlp_ratio == 0
        {
            return Err(Error::InvalidArgument("config extents must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_count(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn seq_len(&self) -> usize {
        self.patch_count() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams<T = f32> {
    pub norm1_gain: Tensor<T>,
    pub norm1_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub norm2_gain: Tensor<T>,
    pub norm2_bias: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BackboneParams<T = f32> {
    pub cfg: VitConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub pos: Tensor<T>,
    pub cls: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
}

impl BackboneParams<f32> {
    /// Truncated-normal weights (std 0.02), zero biases, unit norm gains.
    pub fn init(cfg: VitConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let hidden = cfg.mlp_ratio * d;
        let mut layers = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            layers.push(LayerParams {
                norm1_gain: Tensor::ones(&[d]),
                norm1_bias: Tensor::zeros(&[d]),
                w_q: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
                w_k: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
                w_v: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
                w_o: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
                norm2_gain: Tensor::ones(&[d]),
                norm2_bias: Tensor::zeros(&[d]),
                fc1_w: Tensor::trunc_normal(&[d, hidden], INIT_STD, rng),
                fc1_b: Tensor::zeros(&[hidden]),
                fc2_w: Tensor::trunc_normal(&[hidden, d], INIT_STD, rng),
                fc2_b: Tensor::zeros(&[d]),
            });
        }
        let mut out = Self {
            cfg,
            patch_w: Tensor::trunc_normal(&[cfg.patch_dim(), d], INIT_STD, rng),
            patch_b: Tensor::zeros(&[d]),
            pos: Tensor::trunc_normal(&[cfg.seq_len(), d], INIT_STD, rng),
            cls: Tensor::trunc_normal(&[1, d], INIT_STD, rng),
            layers,
            final_gain: Tensor::ones(&[d]),
            final_bias: Tensor::zeros(&[d]),
        };
        out.set_frozen(false);
        Ok(out)
    }
}

impl<T: Scalar> BackboneParams<T> {
    /// Toggle `requires_grad` on every field atomically.
    pub fn set_frozen(&mut self, frozen: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| !t.requires_grad())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("backbone.patch.w".into(), &self.patch_w),
            ("backbone.patch.b".into(), &self.patch_b),
            ("backbone.pos".into(), &self.pos),
            ("backbone.cls".into(), &self.cls),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("backbone.layer{l}.norm1.g"), &layer.norm1_gain));
            out.push((format!("backbone.layer{l}.norm1.b"), &layer.norm1_bias));
            out.push((format!("backbone.layer{l}.w_q"), &layer.w_q));
            out.push((format!("backbone.layer{l}.w_k"), &layer.w_k));
            out.push((format!("backbone.layer{l}.w_v"), &layer.w_v));
            out.push((format!("backbone.layer{l}.w_o"), &layer.w_o));
            out.push((format!("backbone.layer{l}.norm2.g"), &layer.norm2_gain));
            out.push((format!("backbone.layer{l}.norm2.b"), &layer.norm2_bias));
            out.push((format!("backbone.layer{l}.fc1.w"), &layer.fc1_w));
            out.push((format!("backbone.layer{l}.fc1.b"), &layer.fc1_b));
            out.push((format!("backbone.layer{l}.fc2.w"), &layer.fc2_w));
            out.push((format!("backbone.layer{l}.fc2.b"), &layer.fc2_b));
        }
        out.push(("backbone.final.g".into(), &self.final_gain));
        out.push(("backbone.final.b".into(), &self.final_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("backbone.patch.w".into(), &mut self.patch_w),
            ("backbone.patch.b".into(), &mut self.patch_b),
            ("backbone.pos".into(), &mut self.pos),
            ("backbone.cls".into(), &mut self.cls),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("backbone.layer{l}.norm1.g"), &mut layer.norm1_gain));
            out.push((format!("backbone.layer{l}.norm1.b"), &mut layer.norm1_bias));
            out.push((format!("backbone.layer{l}.w_q"), &mut layer.w_q));
            out.push((format!("backbone.layer{l}.w_k"), &mut layer.w_k));
            out.push((format!("backbone.layer{l}.w_v"), &mut layer.w_v));
            out.push((format!("backbone.layer{l}.w_o"), &mut layer.w_o));
            out.push((format!("backbone.layer{l}.norm2.g"), &mut layer.norm2_gain));
            out.push((format!("backbone.layer{l}.norm2.b"), &mut layer.norm2_bias));
            out.push((format!("backbone.layer{l}.fc1.w"), &mut layer.fc1_w));
            out.push((format!("backbone.layer{l}.fc1.b"), &mut layer.fc1_b));
            out.push((format!("backbone.layer{l}.fc2.w"), &mut layer.fc2_w));
            out.push((format!("backbone.layer{l}.fc2.b"), &mut layer.fc2_b));
        }
        out.push(("backbone.final.g".into(), &mut self.final_gain));
        out.push(("backbone.final.b".into(), &mut self.final_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> BackboneParams<U> {
        BackboneParams {
            cfg: self.cfg,
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            pos: self.pos.cast(),
            cls: self.cls.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm1_gain: l.norm1_gain.cast(),
                    norm1_bias: l.norm1_bias.cast(),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    norm2_gain: l.norm2_gain.cast(),
                    norm2_bias: l.norm2_bias.cast(),
                    fc1_w: l.fc1_w.cast(),
                    fc1_b: l.fc1_b.cast(),
                    fc2_w: l.fc2_w.cast(),
                    fc2_b: l.fc2_b.cast(),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
        }
    }
}

/// Exact parameter count of a backbone built from `cfg`.
pub fn count_backbone_params(cfg: &VitConfig) -> usize {
    let d = cfg.dim;
    let hidden = cfg.mlp_ratio * d;
    let stem = cfg.patch_dim() * d + d        // patch projection + bias
        + cfg.seq_len() * d                   // positional embeddings
        + d;                                  // CLS embedding
    let per_layer = 2 * d                     // norm1
        + 4 * d * d                           // w_q, w_k, w_v, w_o
        + 2 * d                               // norm2
        + d * hidden + hidden                 // fc1
        + hidden * d + d;                     // fc2
    stem + cfg.depth * per_layer + 2 * d
}

// ── tape registration ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub pos: Var,
    pub cls: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
}

pub fn register_backbone<T: Scalar>(tape: &mut Tape<T>, p: &BackboneParams<T>) -> BackboneVars {
    BackboneVars {
        patch_w: tape.leaf(&p.patch_w),
        patch_b: tape.leaf(&p.patch_b),
        pos: tape.leaf(&p.pos),
        cls: tape.leaf(&p.cls),
        layers: p
            .layers
            .iter()
            .map(|l| LayerVars {
                norm1_gain: tape.leaf(&l.norm1_gain),
                norm1_bias: tape.leaf(&l.norm1_bias),
                w_q: tape.leaf(&l.w_q),
                w_k: tape.leaf(&l.w_k),
                w_v: tape.leaf(&l.w_v),
                w_o: tape.leaf(&l.w_o),
                norm2_gain: tape.leaf(&l.norm2_gain),
                norm2_bias: tape.leaf(&l.norm2_bias),
                fc1_w: tape.leaf(&l.fc1_w),
                fc1_b: tape.leaf(&l.fc1_b),
                fc2_w: tape.leaf(&l.fc2_w),
                fc2_b: tape.leaf(&l.fc2_b),
            })
            .collect(),
        final_gain: tape.leaf(&p.final_gain),
        final_bias: tape.leaf(&p.final_bias),
    }
}

/// Token activation matrix [(N+1)×D] on the tape. Row 0 is the CLS token.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub cls_index: usize,
}

impl TokenSequence {
    pub fn new(tokens: Var) -> Self {
        Self {
            tokens,
            cls_index: 0,
        }
    }
}

/// Per-layer CLS-projection offsets (δq, δk, δv), each of length D.
pub type Injection = Option<(Var, Var, Var)>;

/// Flatten an image [C×H×W] into per-patch rows [N × patch_dim].
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "extract_patches",
            left: image.shape().to_vec(),
            right: expect.to_vec(),
        });
    }
    let p = cfg.patch_size;
    let g = cfg.image_size / p;
    let hw = cfg.image_size;
    let src = image.data();
    let mut data = Vec::with_capacity(cfg.patch_count() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..cfg.channels {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        data.push(src[c * hw * hw + y * hw + x]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![cfg.patch_count(), cfg.patch_dim()], data)
}

/// Patch-project an image, prepend the CLS token (optionally offset by the
/// domain-adaptation vector), and add positional embeddings.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    image: &Tensor<T>,
    vars: &BackboneVars,
    cfg: &VitConfig,
    cdap: Option<Var>,
) -> Result<TokenSequence> {
    let patches = extract_patches(image, cfg)?;
    let patches = tape.leaf(&patches);
    let projected = tape.matmul(patches, vars.patch_w)?;
    let projected = tape.add_row_broadcast(projected, vars.patch_b)?;
    let cls = match cdap {
        Some(p_d) => tape.add_row_broadcast(vars.cls, p_d)?,
        None => vars.cls,
    };
    let seq = tape.concat_rows(&[cls, projected])?;
    let seq = tape.add(seq, vars.pos)?;
    Ok(TokenSequence::new(seq))
}

/// Multi-head self-attention with optional CLS q/k/v injection, returning
/// the output tokens and the per-head pre-softmax score matrices.
pub fn mhsa_scores<T: Scalar>(
    tape: &mut Tape<T>,
    seq: &TokenSequence,
    layer: &LayerVars,
    cfg: &VitConfig,
    injection: Injection,
) -> Result<(TokenSequence, Vec<Var>)> {
    let dk = cfg.head_dim();
    let mut q = tape.matmul(seq.tokens, layer.w_q)?;
    let mut k = tape.matmul(seq.tokens, layer.w_k)?;
    let mut v = tape.matmul(seq.tokens, layer.w_v)?;
    if let Some((dq, dkv, dv)) = injection {
        q = tape.add_to_row(q, seq.cls_index, dq)?;
        k = tape.add_to_row(k, seq.cls_index, dkv)?;
        v = tape.add_to_row(v, seq.cls_index, dv)?;
    }
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    let mut head_scores = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kht = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kht)?;
        let scores = tape.scale(raw, scale)?;
        let probs = tape.softmax_rows(scores)?;
        let zh = tape.matmul(probs, vh)?;
        head_outputs.push(zh);
        head_scores.push(scores);
    }
    let z = tape.concat_cols(&head_outputs)?;
    let out = tape.matmul(z, layer.w_o)?;
    Ok((TokenSequence::new(out), head_scores))
}

pub fn mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    seq: &TokenSequence,
    layer: &LayerVars,
    cfg: &VitConfig,
    injection: Injection,
) -> Result<TokenSequence> {
    Ok(mhsa_scores(tape, seq, layer, cfg, injection)?.0)
}

/// One pre-norm transformer block.
pub fn block<T: Scalar>(
    tape: &mut Tape<T>,
    seq: TokenSequence,
    layer: &LayerVars,
    cfg: &VitConfig,
    injection: Injection,
) -> Result<TokenSequence> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let n1 = tape.layer_norm(seq.tokens, layer.norm1_gain, layer.norm1_bias, eps)?;
    let att = mhsa(tape, &TokenSequence::new(n1), layer, cfg, injection)?;
    let x1 = tape.add(seq.tokens, att.tokens)?;
    let n2 = tape.layer_norm(x1, layer.norm2_gain, layer.norm2_bias, eps)?;
    let h = tape.matmul(n2, layer.fc1_w)?;
    let h = tape.add_row_broadcast(h, layer.fc1_b)?;
    let h = tape.gelu(h)?;
    let m = tape.matmul(h, layer.fc2_w)?;
    let m = tape.add_row_broadcast(m, layer.fc2_b)?;
    let x2 = tape.add(x1, m)?;
    Ok(TokenSequence::new(x2))
}

/// Run blocks `range` (absolute layer indices). `injections` is either empty
/// (no prompts anywhere) or one entry per layer of the full backbone.
pub fn run_blocks<T: Scalar>(
    tape: &mut Tape<T>,
    mut seq: TokenSequence,
    vars: &BackboneVars,
    cfg: &VitConfig,
    range: Range<usize>,
    injections: &[Injection],
) -> Result<TokenSequence> {
    if range.end > cfg.depth {
        return Err(Error::IndexOutOfRange {
            index: range.end,
            len: cfg.depth,
        });
    }
    if !injections.is_empty() && injections.len() != cfg.depth {
        return Err(Error::InvalidArgument(format!(
            "expected {} per-layer injections, got {}",
            cfg.depth,
            injections.len()
        )));
    }
    for l in range {
        let injection = injections.get(l).copied().flatten();
        seq = block(tape, seq, &vars.layers[l], cfg, injection)?;
    }
    Ok(seq)
}

/// Final layer norm, then the CLS row as a [1×D] embedding.
pub fn cls_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    seq: &TokenSequence,
    vars: &BackboneVars,
) -> Result<Var> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let normed = tape.layer_norm(seq.tokens, vars.final_gain, vars.final_bias, eps)?;
    tape.row(normed, seq.cls_index)
}

/// Token interpolation spliced between blocks: at `layer`, the sequence
/// becomes beta·own + (1−beta)·partner. `layer == depth` splices after the
/// last block, before the final norm.
#[derive(Clone, Copy, Debug)]
pub struct MixupSplice {
    pub layer: usize,
    pub beta: f64,
    pub partner: Var,
}

/// Full forward pass to the post-final-norm CLS embedding [1×D].
pub fn forward_features<T: Scalar>(
    tape: &mut Tape<T>,
    image: &Tensor<T>,
    vars: &BackboneVars,
    cfg: &VitConfig,
    injections: &[Injection],
    cdap: Option<Var>,
    splice: Option<&MixupSplice>,
) -> Result<Var> {
    if let Some(s) = splice {
        if s.layer > cfg.depth {
            return Err(Error::IndexOutOfRange {
                index: s.layer,
                len: cfg.depth,
            });
        }
    }
    let seq = embed(tape, image, vars, cfg, cdap)?;
    let seq = match splice {
        None => run_blocks(tape, seq, vars, cfg, 0..cfg.depth, injections)?,
        Some(s) => {
            let pre = run_blocks(tape, seq, vars, cfg, 0..s.layer, injections)?;
            let beta = T::from_f64(s.beta);
            let inv = T::from_f64(1.0 - s.beta);
            let mixed = tape.lincomb(beta, pre.tokens, inv, s.partner)?;
            run_blocks(
                tape,
                TokenSequence::new(mixed),
                vars,
                cfg,
                s.layer..cfg.depth,
                injections,
            )?
        }
    };
    cls_embedding(tape, &seq, vars)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_backbone(seed: u64) -> BackboneParams<f32> {
        let mut rng = Rng::new(seed);
        BackboneParams::init(VitConfig::micro(), &mut rng).unwrap()
    }

    fn random_image(cfg: &VitConfig, rng: &mut Rng) -> Tensor<f32> {
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        let data: Vec<f32> = (0..n).map(|_| rng.next_f32()).collect();
        Tensor::from_vec(vec![cfg.channels, cfg.image_size, cfg.image_size], data).unwrap()
    }

    #[test]
    fn patchify_token_arithmetic() {
        let cfg = VitConfig::micro();
        let params = micro_backbone(1);
        let mut tape = Tape::new();
        let vars = register_backbone(&mut tape, &params);
        let img = random_image(&cfg, &mut Rng::new(2));
        let seq = embed(&mut tape, &img, &vars, &cfg, None).unwrap();
        assert_eq!(tape.shape(seq.tokens), &[17, 64]);
        assert_eq!(seq.cls_index, 0);
    }

    #[test]
    fn patchify_rejects_indivisible_patch() {
        let cfg = VitConfig {
            patch_size: 5,
            ..VitConfig::micro()
        };
        let img = Tensor::<f32>::zeros(&[1, 32, 32]);
        assert!(extract_patches(&img, &cfg).is_err());
    }

    #[test]
    fn patchify_rejects_wrong_image_size() {
        let cfg = VitConfig::micro();
        let img = Tensor::<f32>::zeros(&[1, 16, 16]);
        assert!(extract_patches(&img, &cfg).is_err());
    }

    #[test]
    fn zero_image_zero_pos_gives_bias_rows() {
        let cfg = VitConfig::micro();
        let mut params = micro_backbone(3);
        params.pos = Tensor::zeros(&[cfg.seq_len(), cfg.dim]);
        for (i, v) in params.patch_b.data_mut().iter_mut().enumerate() {
            *v = i as f32 * 0.01;
        }
        let mut tape = Tape::new();
        let vars = register_backbone(&mut tape, &params);
        let img = Tensor::zeros(&[1, 32, 32]);
        let seq = embed(&mut tape, &img, &vars, &cfg, None).unwrap();
        let toks = tape.value(seq.tokens);
        for row in 1..cfg.seq_len() {
            for j in 0..cfg.dim {
                assert_eq!(toks[row * cfg.dim + j], j as f32 * 0.01);
            }
        }
    }

    #[test]
    fn zero_injection_is_bit_identical() {
        let cfg = VitConfig::micro();
        let params = micro_backbone(4);
        let img = random_image(&cfg, &mut Rng::new(5));
        let run = |with_zero: bool| -> Vec<f32> {
            let mut tape = Tape::new();
            let vars = register_backbone(&mut tape, &params);
            let seq = embed(&mut tape, &img, &vars, &cfg, None).unwrap();
            let injection = if with_zero {
                let z = tape.constant(vec![cfg.dim], vec![0.0; cfg.dim]).unwrap();
                Some((z, z, z))
            } else {
                None
            };
            let out = mhsa(&mut tape, &seq, &vars.layers[0], &cfg, injection).unwrap();
            tape.value(out.tokens).to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn single_token_attention_closed_form() {
        // One row: softmax over a single logit is exactly 1, so the output
        // is (x W_v) W_o regardless of q and k.
        let cfg = VitConfig::micro();
        let params = micro_backbone(6);
        let mut tape = Tape::new();
        let vars = register_backbone(&mut tape, &params);
        let mut rng = Rng::new(7);
        let x = Tensor::from_vec(
            vec![1, cfg.dim],
            (0..cfg.dim).map(|_| rng.next_f32() - 0.5).collect(),
        )
        .unwrap();
        let xv = tape.leaf(&x);
        let seq = TokenSequence::new(xv);
        let (out, scores) = mhsa_scores(&mut tape, &seq, &vars.layers[0], &cfg, None).unwrap();
        for s in &scores {
            assert_eq!(tape.shape(*s), &[1, 1]);
        }
        let v = tape.matmul(xv, vars.layers[0].w_v).unwrap();
        let expect = tape.matmul(v, vars.layers[0].w_o).unwrap();
        let got = tape.value(out.tokens);
        let want = tape.value(expect);
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn query_injection_leaves_patch_rows_unchanged() {
        let cfg = VitConfig::micro();
        let params = micro_backbone(8);
        let img = random_image(&cfg, &mut Rng::new(9));
        let run = |with_dq: bool| -> Vec<Vec<f32>> {
            let mut tape = Tape::new();
            let vars = register_backbone(&mut tape, &params);
            let seq = embed(&mut tape, &img, &vars, &cfg, None).unwrap();
            let injection = if with_dq {
                let mut rng = Rng::new(10);
                let dq = tape
                    .constant(
                        vec![cfg.dim],
                        (0..cfg.dim).map(|_| rng.next_f32()).collect(),
                    )
                    .unwrap();
                let z = tape.constant(vec![cfg.dim], vec![0.0; cfg.dim]).unwrap();
                Some((dq, z, z))
            } else {
                None
            };
            let (_, scores) =
                mhsa_scores(&mut tape, &seq, &vars.layers[0], &cfg, injection).unwrap();
            scores.iter().map(|s| tape.value(*s).to_vec()).collect()
        };
        let base = run(false);
        let injected = run(true);
        let s = cfg.seq_len();
        for (b, i) in base.iter().zip(&injected) {
            // all rows except the CLS row are bit-identical
            assert_eq!(b[s..], i[s..]);
            // and the CLS row moved
            assert_ne!(b[..s], i[..s]);
        }
    }

    #[test]
    fn count_matches_allocated_and_frozen_constant() {
        let cfg = VitConfig::micro();
        let params = micro_backbone(11);
        let formula = count_backbone_params(&cfg);
        assert_eq!(formula, params.param_count());
        // hand tally: stem 4160 + cls/pos 1152 + 4·49728 + final 128
        assert_eq!(formula, 204_352);
    }

    #[test]
    fn count_depth_zero_and_linearity() {
        let mut cfg = VitConfig::micro();
        cfg.depth = 0;
        let stem_only = count_backbone_params(&cfg);
        assert_eq!(
            stem_only,
            cfg.patch_dim() * cfg.dim + cfg.dim + cfg.seq_len() * cfg.dim + cfg.dim + 2 * cfg.dim
        );
        cfg.depth = 3;
        let d3 = count_backbone_params(&cfg);
        cfg.depth = 6;
        let d6 = count_backbone_params(&cfg);
        assert_eq!(d6 - d3, d3 - stem_only);
    }

    #[test]
    fn patch_permutation_with_pos_rows_preserves_cls() {
        let cfg = VitConfig::micro();
        let params = micro_backbone(12);
        let img = random_image(&cfg, &mut Rng::new(13));
        let forward = |params: &BackboneParams<f32>, img: &Tensor<f32>| -> Vec<f32> {
            let mut tape = Tape::new();
            let vars = register_backbone(&mut tape, params);
            let out = forward_features(&mut tape, img, &vars, &cfg, &[], None, None).unwrap();
            tape.value(out).to_vec()
        };
        let base = forward(&params, &img);

        // permute patches spatially and permute pos-emb rows to match
        let mut rng = Rng::new(14);
        let perm = rng.permutation(cfg.patch_count());
        let g = cfg.image_size / cfg.patch_size;
        let p = cfg.patch_size;
        let mut img2 = Tensor::zeros(&[1, 32, 32]);
        for (dst, &src) in perm.iter().enumerate() {
            let (dy, dx) = (dst / g, dst % g);
            let (sy, sx) = (src / g, src % g);
            for py in 0..p {
                for px in 0..p {
                    let d = (dy * p + py) * 32 + dx * p + px;
                    let s = (sy * p + py) * 32 + sx * p + px;
                    img2.data_mut()[d] = img.data()[s];
                }
            }
        }
        let mut params2 = params.clone();
        let dmodel = cfg.dim;
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..dmodel {
                params2.pos.data_mut()[(dst + 1) * dmodel + j] =
                    params.pos.data()[(src + 1) * dmodel + j];
            }
        }
        let permuted = forward(&params2, &img2);
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn frozen_backbone_gets_zero_grads() {
        let cfg = VitConfig::tiny();
        let mut rng = Rng::new(15);
        let mut params = BackboneParams::init(cfg, &mut rng).unwrap();
        params.set_frozen(true);
        let prompt = Tensor::from_vec(
            vec![cfg.dim],
            (0..cfg.dim).map(|_| rng.next_f32() * 0.1).collect(),
        )
        .unwrap()
        .with_grad();
        let img = random_image(&cfg, &mut rng);

        let mut tape = Tape::new();
        let vars = register_backbone(&mut tape, &params);
        let pv = tape.leaf(&prompt);
        let injections: Vec<Injection> = (0..cfg.depth).map(|_| Some((pv, pv, pv))).collect();
        let feat = forward_features(&mut tape, &img, &vars, &cfg, &injections, None, None).unwrap();
        let sq = tape.mul_elem(feat, feat).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();

        assert!(tape.grad(vars.patch_w).is_none());
        assert!(tape.grad(vars.layers[0].w_q).is_none());
        let g = tape.grad(pv).unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "prompt grad should be nonzero");
    }
}
