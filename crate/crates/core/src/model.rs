//! Video vision transformer: tubelet embedding with fixed sinusoidal
//! positions, pre-norm attention/MLP blocks, mean pooling over tokens,
//! a final norm (fc_norm) and a linear head. No class token.
//!
//! Forward functions build graphs on a [`Tape`]; the parameter leaves come
//! from a [`BoundModel`] prepared by the prompt module, which also supplies
//! per-block K/V injections (APT) or token prompts (VPT).

use crate::data::Video;
use crate::error::{AptError, Result};
use crate::numerics::{Rng, Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

/// Architecture hyperparameters; every tensor shape derives from these.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ArchSpec {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tubelet_t: usize,
    pub tubelet_p: usize,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(AptError::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.depth == 0 {
            return err("embed_dim, num_heads and depth must be positive".to_string());
        }
        if self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.tubelet_t == 0 || self.tubelet_p == 0 || self.frames % self.tubelet_t != 0 {
            return err(format!(
                "frames {} not divisible by tubelet_t {}",
                self.frames, self.tubelet_t
            ));
        }
        if self.height % self.tubelet_p != 0 || self.width % self.tubelet_p != 0 {
            return err(format!(
                "frame size {}x{} not divisible by tubelet_p {}",
                self.height, self.width, self.tubelet_p
            ));
        }
        if self.channels == 0 {
            return err("channels must be >= 1".to_string());
        }
        if self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            return err(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.num_classes < 2 {
            return err(format!("num_classes {} must be >= 2", self.num_classes));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Token count n_x.
    pub fn tokens(&self) -> usize {
        (self.frames / self.tubelet_t)
            * (self.height / self.tubelet_p)
            * (self.width / self.tubelet_p)
    }

    /// Flattened tubelet size t*p*p*C.
    pub fn patch_dim(&self) -> usize {
        self.tubelet_t * self.tubelet_p * self.tubelet_p * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn input_span(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    /// ViT-Small video backbone (16-frame 224x224 clips, 2x16x16 tubelets).
    pub fn vit_small_video(num_classes: usize) -> Self {
        ArchSpec {
            embed_dim: 384,
            num_heads: 6,
            depth: 12,
            mlp_ratio: 4.0,
            frames: 16,
            height: 224,
            width: 224,
            channels: 3,
            tubelet_t: 2,
            tubelet_p: 16,
            num_classes,
        }
    }

    /// ViT-Base video backbone.
    pub fn vit_base_video(num_classes: usize) -> Self {
        ArchSpec { embed_dim: 768, num_heads: 12, ..Self::vit_small_video(num_classes) }
    }

    /// Desk-scale preset: 64 tokens from 8x16x16 grayscale video.
    pub fn toy(num_classes: usize) -> Self {
        ArchSpec {
            embed_dim: 64,
            num_heads: 4,
            depth: 4,
            mlp_ratio: 4.0,
            frames: 8,
            height: 16,
            width: 16,
            channels: 1,
            tubelet_t: 2,
            tubelet_p: 4,
            num_classes,
        }
    }

    /// Smallest arch that still exercises every code path; 16 tokens.
    pub fn tiny(num_classes: usize) -> Self {
        ArchSpec {
            embed_dim: 8,
            num_heads: 2,
            depth: 2,
            mlp_ratio: 4.0,
            frames: 4,
            height: 8,
            width: 8,
            channels: 1,
            tubelet_t: 1,
            tubelet_p: 4,
            num_classes,
        }
    }

    /// FNV-1a over the canonical field encoding; stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for v in [
            self.embed_dim,
            self.num_heads,
            self.depth,
            self.frames,
            self.height,
            self.width,
            self.channels,
            self.tubelet_t,
            self.tubelet_p,
            self.num_classes,
        ] {
            eat(v as u64);
        }
        eat(self.mlp_ratio.to_bits());
        h
    }
}

#[derive(Debug, Clone)]
pub struct Block<E> {
    pub ln1_g: Tensor<E>,
    pub ln1_b: Tensor<E>,
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub ln2_g: Tensor<E>,
    pub ln2_b: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

/// Backbone weights plus the classifier. `pos` is a buffer, not a parameter:
/// it never trains and is excluded from parameter counts.
#[derive(Debug, Clone)]
pub struct Backbone<E> {
    pub arch: ArchSpec,
    pub embed_w: Tensor<E>,
    pub embed_b: Tensor<E>,
    pub pos: Tensor<E>,
    pub blocks: Vec<Block<E>>,
    pub fc_g: Tensor<E>,
    pub fc_b: Tensor<E>,
    pub head_w: Tensor<E>,
    pub head_b: Tensor<E>,
}

/// Fixed 1-D sinusoidal position table over token index.
pub fn sinusoidal_positions<E: Scalar>(n: usize, d: usize) -> Tensor<E> {
    let mut pos = Tensor::zeros(n, d);
    for i in 0..n {
        for k in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * k as f64 / d as f64);
            let angle = i as f64 * freq;
            pos.set(i, 2 * k, E::from_f64c(angle.sin()));
            pos.set(i, 2 * k + 1, E::from_f64c(angle.cos()));
        }
    }
    pos
}

pub(crate) fn trunc_normal_tensor<E: Scalar>(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Tensor<E> {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = E::from_f64c(rng.trunc_normal(std));
    }
    t
}

impl<E: Scalar> Backbone<E> {
    /// Random init standing in for pretrained weights. Weight matrices use
    /// fan-scaled truncated normals (Glorot) so attention scores and MLP
    /// activations are unit-scale at init — a flat tiny std would leave
    /// every block near-identity and the pooled features nearly
    /// input-independent. Output projections are scaled down by
    /// sqrt(2 * depth) to keep the residual stream stable; the classifier
    /// head stays small so training starts near uniform predictions.
    pub fn init(arch: ArchSpec, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let d = arch.embed_dim;
        let hidden = arch.mlp_hidden();
        let glorot = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let resid = (2.0 * arch.depth as f64).sqrt();
        let embed_w =
            trunc_normal_tensor(rng, arch.patch_dim(), d, glorot(arch.patch_dim(), d));
        let embed_b = Tensor::zeros(1, d);
        let pos = sinusoidal_positions(arch.tokens(), d);
        let mut blocks = Vec::with_capacity(arch.depth);
        for _ in 0..arch.depth {
            blocks.push(Block {
                ln1_g: Tensor::full(1, d, E::one()),
                ln1_b: Tensor::zeros(1, d),
                wq: trunc_normal_tensor(rng, d, d, glorot(d, d)),
                bq: Tensor::zeros(1, d),
                wk: trunc_normal_tensor(rng, d, d, glorot(d, d)),
                bk: Tensor::zeros(1, d),
                wv: trunc_normal_tensor(rng, d, d, glorot(d, d)),
                bv: Tensor::zeros(1, d),
                wo: trunc_normal_tensor(rng, d, d, glorot(d, d) / resid),
                bo: Tensor::zeros(1, d),
                ln2_g: Tensor::full(1, d, E::one()),
                ln2_b: Tensor::zeros(1, d),
                w1: trunc_normal_tensor(rng, d, hidden, glorot(d, hidden)),
                b1: Tensor::zeros(1, hidden),
                w2: trunc_normal_tensor(rng, hidden, d, glorot(hidden, d) / resid),
                b2: Tensor::zeros(1, d),
            });
        }
        let fc_g = Tensor::full(1, d, E::one());
        let fc_b = Tensor::zeros(1, d);
        let head_w = trunc_normal_tensor(rng, d, arch.num_classes, 0.02);
        let head_b = Tensor::zeros(1, arch.num_classes);
        Ok(Backbone { arch, embed_w, embed_b, pos, blocks, fc_g, fc_b, head_w, head_b })
    }

    /// All tensors (including the `pos` buffer) with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("embed.w".to_string(), &self.embed_w),
            ("embed.b".to_string(), &self.embed_b),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &b.ln1_g),
                ("ln1.b", &b.ln1_b),
                ("attn.wq", &b.wq),
                ("attn.bq", &b.bq),
                ("attn.wk", &b.wk),
                ("attn.bk", &b.bk),
                ("attn.wv", &b.wv),
                ("attn.bv", &b.bv),
                ("attn.wo", &b.wo),
                ("attn.bo", &b.bo),
                ("ln2.g", &b.ln2_g),
                ("ln2.b", &b.ln2_b),
                ("mlp.w1", &b.w1),
                ("mlp.b1", &b.b1),
                ("mlp.w2", &b.w2),
                ("mlp.b2", &b.b2),
            ] {
                out.push((format!("block{i:02}.{suffix}"), t));
            }
        }
        out.push(("fc_norm.g".to_string(), &self.fc_g));
        out.push(("fc_norm.b".to_string(), &self.fc_b));
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("embed.w".to_string(), &mut self.embed_w),
            ("embed.b".to_string(), &mut self.embed_b),
            ("pos".to_string(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &mut b.ln1_g),
                ("ln1.b", &mut b.ln1_b),
                ("attn.wq", &mut b.wq),
                ("attn.bq", &mut b.bq),
                ("attn.wk", &mut b.wk),
                ("attn.bk", &mut b.bk),
                ("attn.wv", &mut b.wv),
                ("attn.bv", &mut b.bv),
                ("attn.wo", &mut b.wo),
                ("attn.bo", &mut b.bo),
                ("ln2.g", &mut b.ln2_g),
                ("ln2.b", &mut b.ln2_b),
                ("mlp.w1", &mut b.w1),
                ("mlp.b1", &mut b.b1),
                ("mlp.w2", &mut b.w2),
                ("mlp.b2", &mut b.b2),
            ] {
                out.push((format!("block{i:02}.{suffix}"), t));
            }
        }
        out.push(("fc_norm.g".to_string(), &mut self.fc_g));
        out.push(("fc_norm.b".to_string(), &mut self.fc_b));
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn cast<F: Scalar>(&self) -> Backbone<F> {
        Backbone {
            arch: self.arch,
            embed_w: self.embed_w.cast(),
            embed_b: self.embed_b.cast(),
            pos: self.pos.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: b.ln1_g.cast(),
                    ln1_b: b.ln1_b.cast(),
                    wq: b.wq.cast(),
                    bq: b.bq.cast(),
                    wk: b.wk.cast(),
                    bk: b.bk.cast(),
                    wv: b.wv.cast(),
                    bv: b.bv.cast(),
                    wo: b.wo.cast(),
                    bo: b.bo.cast(),
                    ln2_g: b.ln2_g.cast(),
                    ln2_b: b.ln2_b.cast(),
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                })
                .collect(),
            fc_g: self.fc_g.cast(),
            fc_b: self.fc_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}

/// Per-block prompt injection, already reparameterized/dropout-processed.
#[derive(Debug, Clone, Copy)]
pub enum BlockInjection {
    None,
    /// K/V rows in head_dim space, shared across heads.
    Apt { k_p: Var, v_p: Var },
    /// Token prompts appended to the block input and stripped after.
    Vpt { p: Var },
}

pub struct BoundBlock {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub injection: BlockInjection,
}

/// Backbone and prompt leaves bound onto one tape for a single forward
/// (plus backward) pass.
pub struct BoundModel {
    pub arch: ArchSpec,
    pub embed_w: Var,
    pub embed_b: Var,
    pub pos: Var,
    pub blocks: Vec<BoundBlock>,
    pub fc_g: Var,
    pub fc_b: Var,
    pub head_w: Var,
    pub head_b: Var,
    /// Every named leaf, for gradient extraction after backward.
    pub names: Vec<(String, Var)>,
}

/// Flatten a video into the [n_x x patch_dim] tubelet matrix. Row order is
/// (t-block, y-block, x-block); within a row the layout is [t][y][x][c].
///
/// The stem removes each pixel's temporal mean over the clip before
/// patchifying (a motion-isolation stem): static scene content cancels
/// exactly and only temporal structure reaches the embedding, which is
/// what the downstream motion-defined tasks are about. Frame-to-frame
/// differences are untouched and an all-zero clip stays all-zero.
pub fn tubelet_patches<E: Scalar>(video: &Video, arch: &ArchSpec) -> Result<Tensor<E>> {
    if (video.frames, video.height, video.width, video.channels)
        != (arch.frames, arch.height, arch.width, arch.channels)
    {
        return Err(AptError::config(format!(
            "video {}x{}x{}x{} does not match arch input {}x{}x{}x{}",
            video.frames,
            video.height,
            video.width,
            video.channels,
            arch.frames,
            arch.height,
            arch.width,
            arch.channels
        )));
    }
    let (tt, tp) = (arch.tubelet_t, arch.tubelet_p);
    let (nt, ny, nx) = (arch.frames / tt, arch.height / tp, arch.width / tp);
    let per_frame = arch.height * arch.width * arch.channels;
    let mut mean = vec![0.0f64; per_frame];
    for t in 0..arch.frames {
        for (m, px) in mean.iter_mut().zip(&video.data[t * per_frame..(t + 1) * per_frame]) {
            *m += *px as f64;
        }
    }
    for m in &mut mean {
        *m /= arch.frames as f64;
    }
    let centered = |t: usize, y: usize, x: usize, c: usize| {
        let i = (y * arch.width + x) * arch.channels + c;
        video.at(t, y, x, c) as f64 - mean[i]
    };
    let mut out = Tensor::zeros(arch.tokens(), arch.patch_dim());
    let mut row = 0;
    for bt in 0..nt {
        for by in 0..ny {
            for bx in 0..nx {
                let r = out.row_mut(row);
                let mut col = 0;
                for t in 0..tt {
                    for y in 0..tp {
                        for x in 0..tp {
                            for c in 0..video.channels {
                                r[col] = E::from_f64c(centered(
                                    bt * tt + t,
                                    by * tp + y,
                                    bx * tp + x,
                                    c,
                                ));
                                col += 1;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Ok(out)
}

/// Patchify, project and add the positional table: [n_x x d] tokens.
pub fn tubelet_embed<E: Scalar>(
    tape: &mut Tape<E>,
    bm: &BoundModel,
    video: &Video,
) -> Result<Var> {
    let patches = tubelet_patches::<E>(video, &bm.arch)?;
    let pv = tape.constant(patches);
    let proj = tape.matmul(pv, bm.embed_w)?;
    let biased = tape.add_row(proj, bm.embed_b)?;
    tape.add(biased, bm.pos)
}

/// Multi-head attention with optional K/V prompt injection (Eq. (2) wiring:
/// prompts are appended to the per-head key and value rows; queries keep the
/// input token count, so the output stays [rows(x) x d]).
pub fn mha_forward<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    blk: &BoundBlock,
    arch: &ArchSpec,
) -> Result<Var> {
    let hd = arch.head_dim();
    let q = tape.matmul(x, blk.wq)?;
    let q = tape.add_row(q, blk.bq)?;
    let k = tape.matmul(x, blk.wk)?;
    let k = tape.add_row(k, blk.bk)?;
    let v = tape.matmul(x, blk.wv)?;
    let v = tape.add_row(v, blk.bv)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(arch.num_heads);
    for h in 0..arch.num_heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let (kh, vh) = match blk.injection {
            BlockInjection::Apt { k_p, v_p } => {
                if tape.value(k_p).cols() != hd {
                    return Err(AptError::invariant(format!(
                        "prompt head_dim {} does not match arch head_dim {hd}",
                        tape.value(k_p).cols()
                    )));
                }
                (tape.concat_rows(&[kh, k_p])?, tape.concat_rows(&[vh, v_p])?)
            }
            _ => (kh, vh),
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale_const(scores, scale)?;
        let attn = tape.softmax_rows(scaled)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, blk.wo)?;
    tape.add_row(out, blk.bo)
}

/// Pre-norm transformer block: x + MHA(LN1(x)), then + MLP(LN2(.)).
pub fn block_forward<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    blk: &BoundBlock,
    arch: &ArchSpec,
) -> Result<Var> {
    let h1 = tape.layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS)?;
    let attn = mha_forward(tape, h1, blk, arch)?;
    let x1 = tape.add(x, attn)?;
    let h2 = tape.layer_norm(x1, blk.ln2_g, blk.ln2_b, LN_EPS)?;
    let m = tape.matmul(h2, blk.w1)?;
    let m = tape.add_row(m, blk.b1)?;
    let m = tape.gelu(m)?;
    let m = tape.matmul(m, blk.w2)?;
    let m = tape.add_row(m, blk.b2)?;
    tape.add(x1, m)
}

pub struct ForwardOutput {
    /// [batch x num_classes] logits node.
    pub logits: Var,
    /// Per sample, per block: the activations entering each block (before
    /// any VPT concatenation). Only filled when capture is requested.
    pub block_inputs: Vec<Vec<Var>>,
}

/// Full network over a batch of videos. VPT prompts are appended to the
/// block input and stripped right after the block, so pooling always runs
/// over the original n_x tokens.
pub fn model_forward<E: Scalar>(
    tape: &mut Tape<E>,
    bm: &BoundModel,
    videos: &[&Video],
    capture_block_inputs: bool,
) -> Result<ForwardOutput> {
    if videos.is_empty() {
        return Err(AptError::invariant("model_forward over an empty batch".to_string()));
    }
    let n_x = bm.arch.tokens();
    let mut logit_rows = Vec::with_capacity(videos.len());
    let mut block_inputs = Vec::new();
    for video in videos {
        let mut x = tubelet_embed(tape, bm, video)?;
        let mut captured = Vec::new();
        for blk in &bm.blocks {
            if capture_block_inputs {
                captured.push(x);
            }
            match blk.injection {
                BlockInjection::Vpt { p } => {
                    let xin = tape.concat_rows(&[x, p])?;
                    let xout = block_forward(tape, xin, blk, &bm.arch)?;
                    x = tape.slice_rows(xout, 0, n_x)?;
                }
                _ => {
                    x = block_forward(tape, x, blk, &bm.arch)?;
                }
            }
        }
        let pooled = tape.mean_pool_rows(x)?;
        let normed = tape.layer_norm(pooled, bm.fc_g, bm.fc_b, LN_EPS)?;
        let logits = tape.matmul(normed, bm.head_w)?;
        logit_rows.push(tape.add_row(logits, bm.head_b)?);
        if capture_block_inputs {
            block_inputs.push(captured);
        }
    }
    let logits = if logit_rows.len() == 1 {
        logit_rows[0]
    } else {
        tape.concat_rows(&logit_rows)?
    };
    Ok(ForwardOutput { logits, block_inputs })
}

/// FNV-1a over the little-endian bytes of a tensor list; order-sensitive.
pub fn checksum_tensors<E: Scalar>(tensors: &[(String, &Tensor<E>)]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in tensors {
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        for v in t.iter() {
            for b in v.to_f64c().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    h
}
