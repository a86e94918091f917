//! Tuning-mode state: APT K/V prompt sets with scaled reparameterization
//! and dropout, VPT-deep token prompts, depth placement schedules, and the
//! enumeration of trainable parameters per mode.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{AptError, Result};
use crate::model::{trunc_normal_tensor, ArchSpec, Backbone, BlockInjection, BoundBlock, BoundModel};
use crate::numerics::{Rng, Scalar, Stream, Tape, Tensor, Var};

/// VPT token prompts join the embedding stream directly, so they start
/// near zero like every other embedding-scale parameter.
pub const VPT_PROMPT_INIT_STD: f64 = 0.02;
/// APT K/V prompts live in per-head space where post-LayerNorm query rows
/// have O(1) coordinates; unit-scale keys give informative (non-uniform)
/// attention gates from the first step, while near-zero keys start every
/// gate flat and stall prompt learning.
pub const APT_PROMPT_INIT_STD: f64 = 1.0;
pub const DEFAULT_PROMPT_DROPOUT: f64 = 0.10;

/// Which blocks carry prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthPlacement {
    All,
    /// The last k blocks (closest to the head).
    Deepest(usize),
    /// The first k blocks (closest to the input).
    Shallowest(usize),
}

impl DepthPlacement {
    pub fn all() -> Self {
        DepthPlacement::All
    }

    pub fn deepest(k: usize) -> Self {
        DepthPlacement::Deepest(k)
    }

    pub fn shallowest(k: usize) -> Self {
        DepthPlacement::Shallowest(k)
    }

    /// Per-block placed flag for a depth-L backbone.
    pub fn mask(&self, depth: usize) -> Result<Vec<bool>> {
        let k = match *self {
            DepthPlacement::All => depth,
            DepthPlacement::Deepest(k) | DepthPlacement::Shallowest(k) => k,
        };
        if k > depth {
            return Err(AptError::config(format!(
                "placement depth {k} exceeds backbone depth {depth}"
            )));
        }
        Ok((0..depth)
            .map(|i| match *self {
                DepthPlacement::All => true,
                DepthPlacement::Deepest(k) => i >= depth - k,
                DepthPlacement::Shallowest(k) => i < k,
            })
            .collect())
    }

    pub fn count(&self, depth: usize) -> Result<usize> {
        Ok(self.mask(depth)?.iter().filter(|&&p| p).count())
    }
}

impl fmt::Display for DepthPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DepthPlacement::All => write!(f, "all"),
            DepthPlacement::Deepest(k) => write!(f, "deepest:{k}"),
            DepthPlacement::Shallowest(k) => write!(f, "shallowest:{k}"),
        }
    }
}

impl FromStr for DepthPlacement {
    type Err = AptError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(DepthPlacement::All);
        }
        let parse_k = |k: &str| {
            k.parse::<usize>()
                .map_err(|_| AptError::config(format!("bad placement count in {s:?}")))
        };
        if let Some(k) = s.strip_prefix("deepest:") {
            return Ok(DepthPlacement::Deepest(parse_k(k)?));
        }
        if let Some(k) = s.strip_prefix("shallowest:") {
            return Ok(DepthPlacement::Shallowest(parse_k(k)?));
        }
        Err(AptError::config(format!(
            "placement {s:?} is not \"all\", \"deepest:k\" or \"shallowest:k\""
        )))
    }
}

/// What trains. The trainable-parameter set is a pure function of this.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TuningMode {
    Full,
    LinearProbe,
    VptDeep {
        n_p: usize,
    },
    Apt {
        n_p: usize,
        placement: DepthPlacement,
        dropout_rate: f64,
        reparam: bool,
    },
}

impl TuningMode {
    pub fn label(&self) -> &'static str {
        match self {
            TuningMode::Full => "full",
            TuningMode::LinearProbe => "linear-probe",
            TuningMode::VptDeep { .. } => "vpt-deep",
            TuningMode::Apt { .. } => "apt",
        }
    }

    pub fn n_p(&self) -> usize {
        match *self {
            TuningMode::VptDeep { n_p } | TuningMode::Apt { n_p, .. } => n_p,
            _ => 0,
        }
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        if let TuningMode::Apt { placement, dropout_rate, .. } = self {
            placement.mask(arch.depth)?;
            if !(0.0..1.0).contains(dropout_rate) {
                return Err(AptError::config(format!(
                    "dropout_rate {dropout_rate} must lie in [0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// One placed block's APT prompts. Scales exist only under reparameterization
/// and are stored [n_p x 1] so a row of K_p/V_p pairs with one scalar.
#[derive(Debug, Clone)]
pub struct AptBlockPrompts<E> {
    pub k_p: Tensor<E>,
    pub v_p: Tensor<E>,
    pub scales: Option<(Tensor<E>, Tensor<E>)>,
}

#[derive(Debug, Clone)]
pub struct AptPromptSet<E> {
    pub n_p: usize,
    pub dropout_rate: f64,
    /// One entry per backbone block; None where the placement skips it.
    pub blocks: Vec<Option<AptBlockPrompts<E>>>,
}

#[derive(Debug, Clone)]
pub struct VptPromptSet<E> {
    pub n_p: usize,
    /// Fresh prompts for every block; outputs of the previous block's
    /// prompt rows are discarded.
    pub blocks: Vec<Tensor<E>>,
}

/// Backbone plus whatever prompt state the mode calls for.
#[derive(Debug, Clone)]
pub struct TunedModel<E> {
    pub backbone: Backbone<E>,
    pub mode: TuningMode,
    pub apt: Option<AptPromptSet<E>>,
    pub vpt: Option<VptPromptSet<E>>,
}

/// Shapes of every parameter tensor (and the `pos` buffer) for an
/// architecture, without allocating weight data.
pub fn backbone_shapes(arch: &ArchSpec) -> Vec<(String, (usize, usize))> {
    let d = arch.embed_dim;
    let hidden = arch.mlp_hidden();
    let mut out = vec![
        ("embed.w".to_string(), (arch.patch_dim(), d)),
        ("embed.b".to_string(), (1, d)),
        ("pos".to_string(), (arch.tokens(), d)),
    ];
    for i in 0..arch.depth {
        for (suffix, shape) in [
            ("ln1.g", (1, d)),
            ("ln1.b", (1, d)),
            ("attn.wq", (d, d)),
            ("attn.bq", (1, d)),
            ("attn.wk", (d, d)),
            ("attn.bk", (1, d)),
            ("attn.wv", (d, d)),
            ("attn.bv", (1, d)),
            ("attn.wo", (d, d)),
            ("attn.bo", (1, d)),
            ("ln2.g", (1, d)),
            ("ln2.b", (1, d)),
            ("mlp.w1", (d, hidden)),
            ("mlp.b1", (1, hidden)),
            ("mlp.w2", (hidden, d)),
            ("mlp.b2", (1, d)),
        ] {
            out.push((format!("block{i:02}.{suffix}"), shape));
        }
    }
    out.push(("fc_norm.g".to_string(), (1, d)));
    out.push(("fc_norm.b".to_string(), (1, d)));
    out.push(("head.w".to_string(), (d, arch.num_classes)));
    out.push(("head.b".to_string(), (1, arch.num_classes)));
    out
}

/// Shapes of the prompt tensors a mode adds on top of the backbone.
pub fn prompt_shapes(mode: &TuningMode, arch: &ArchSpec) -> Result<Vec<(String, (usize, usize))>> {
    let mut out = Vec::new();
    match *mode {
        TuningMode::VptDeep { n_p } if n_p > 0 => {
            for i in 0..arch.depth {
                out.push((format!("block{i:02}.vpt.p"), (n_p, arch.embed_dim)));
            }
        }
        TuningMode::Apt { n_p, placement, reparam, .. } if n_p > 0 => {
            let hd = arch.head_dim();
            for (i, placed) in placement.mask(arch.depth)?.iter().enumerate() {
                if !placed {
                    continue;
                }
                out.push((format!("block{i:02}.apt.k_p"), (n_p, hd)));
                out.push((format!("block{i:02}.apt.v_p"), (n_p, hd)));
                if reparam {
                    out.push((format!("block{i:02}.apt.s_k"), (n_p, 1)));
                    out.push((format!("block{i:02}.apt.s_v"), (n_p, 1)));
                }
            }
        }
        _ => {}
    }
    Ok(out)
}

/// Names that train under a mode. Everything else — including the `pos`
/// buffer — stays frozen.
pub fn trainable_names(mode: &TuningMode, arch: &ArchSpec) -> Result<BTreeSet<String>> {
    let mut set = BTreeSet::new();
    set.insert("head.w".to_string());
    set.insert("head.b".to_string());
    set.insert("fc_norm.g".to_string());
    set.insert("fc_norm.b".to_string());
    match mode {
        TuningMode::Full => {
            for (name, _) in backbone_shapes(arch) {
                if name != "pos" {
                    set.insert(name);
                }
            }
        }
        TuningMode::LinearProbe => {}
        TuningMode::VptDeep { .. } | TuningMode::Apt { .. } => {
            for (name, _) in prompt_shapes(mode, arch)? {
                set.insert(name);
            }
        }
    }
    Ok(set)
}

/// Exact trainable-scalar count by enumerating named shapes.
pub fn count_trainable(mode: &TuningMode, arch: &ArchSpec) -> Result<u64> {
    let names = trainable_names(mode, arch)?;
    let mut inventory: Vec<(String, (usize, usize))> = backbone_shapes(arch);
    inventory.extend(prompt_shapes(mode, arch)?);
    Ok(inventory
        .iter()
        .filter(|(name, _)| names.contains(name))
        .map(|(_, (r, c))| (r * c) as u64)
        .sum())
}

impl<E: Scalar> TunedModel<E> {
    /// Backbone first, prompts after, all from one Init-stream draw
    /// sequence: models that share a seed share the backbone bitwise
    /// regardless of mode.
    pub fn init(arch: ArchSpec, mode: TuningMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        mode.validate(&arch)?;
        let mut rng = Rng::seeded(seed, Stream::Init);
        let backbone = Backbone::init(arch, &mut rng)?;
        let mut model = TunedModel { backbone, mode, apt: None, vpt: None };
        match mode {
            TuningMode::VptDeep { n_p } if n_p > 0 => {
                let blocks = (0..arch.depth)
                    .map(|_| trunc_normal_tensor(&mut rng, n_p, arch.embed_dim, VPT_PROMPT_INIT_STD))
                    .collect();
                model.vpt = Some(VptPromptSet { n_p, blocks });
            }
            TuningMode::Apt { n_p, placement, dropout_rate, reparam } if n_p > 0 => {
                let hd = arch.head_dim();
                let blocks = placement
                    .mask(arch.depth)?
                    .into_iter()
                    .map(|placed| {
                        placed.then(|| AptBlockPrompts {
                            k_p: trunc_normal_tensor(&mut rng, n_p, hd, APT_PROMPT_INIT_STD),
                            v_p: trunc_normal_tensor(&mut rng, n_p, hd, APT_PROMPT_INIT_STD),
                            scales: reparam
                                .then(|| (Tensor::full(n_p, 1, E::one()), Tensor::full(n_p, 1, E::one()))),
                        })
                    })
                    .collect();
                model.apt = Some(AptPromptSet { n_p, dropout_rate, blocks });
            }
            _ => {}
        }
        Ok(model)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.backbone.arch
    }

    /// Full tensor inventory: backbone (with `pos`) then prompts.
    pub fn named(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = self.backbone.named();
        if let Some(vpt) = &self.vpt {
            for (i, p) in vpt.blocks.iter().enumerate() {
                out.push((format!("block{i:02}.vpt.p"), p));
            }
        }
        if let Some(apt) = &self.apt {
            for (i, blk) in apt.blocks.iter().enumerate() {
                let Some(bp) = blk else { continue };
                out.push((format!("block{i:02}.apt.k_p"), &bp.k_p));
                out.push((format!("block{i:02}.apt.v_p"), &bp.v_p));
                if let Some((s_k, s_v)) = &bp.scales {
                    out.push((format!("block{i:02}.apt.s_k"), s_k));
                    out.push((format!("block{i:02}.apt.s_v"), s_v));
                }
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = self.backbone.named_mut();
        if let Some(vpt) = &mut self.vpt {
            for (i, p) in vpt.blocks.iter_mut().enumerate() {
                out.push((format!("block{i:02}.vpt.p"), p));
            }
        }
        if let Some(apt) = &mut self.apt {
            for (i, blk) in apt.blocks.iter_mut().enumerate() {
                let Some(bp) = blk else { continue };
                out.push((format!("block{i:02}.apt.k_p"), &mut bp.k_p));
                out.push((format!("block{i:02}.apt.v_p"), &mut bp.v_p));
                if let Some((s_k, s_v)) = &mut bp.scales {
                    out.push((format!("block{i:02}.apt.s_k"), s_k));
                    out.push((format!("block{i:02}.apt.s_v"), s_v));
                }
            }
        }
        out
    }

    pub fn trainable_names(&self) -> Result<BTreeSet<String>> {
        trainable_names(&self.mode, &self.backbone.arch)
    }

    pub fn count_trainable(&self) -> Result<u64> {
        count_trainable(&self.mode, &self.backbone.arch)
    }

    /// Checksum over the trunk: everything except head/fc_norm/prompts.
    /// Frozen in every mode but Full.
    pub fn trunk_checksum(&self) -> u64 {
        let trunk: Vec<(String, &Tensor<E>)> = self
            .backbone
            .named()
            .into_iter()
            .filter(|(name, _)| !name.starts_with("head.") && !name.starts_with("fc_norm."))
            .collect();
        crate::model::checksum_tensors(&trunk)
    }

    /// Checksum over the complement of the trainable set.
    pub fn frozen_checksum(&self) -> Result<u64> {
        let trainable = self.trainable_names()?;
        let frozen: Vec<(String, &Tensor<E>)> = self
            .named()
            .into_iter()
            .filter(|(name, _)| !trainable.contains(name))
            .collect();
        Ok(crate::model::checksum_tensors(&frozen))
    }

    /// Place every tensor on a tape, mark trainables, and prepare per-block
    /// injections: reparameterize (when enabled), then inverted dropout
    /// (training only). `rng` is required only when dropout will draw.
    pub fn bind(
        &self,
        tape: &mut Tape<E>,
        training: bool,
        rng: Option<&mut Rng>,
    ) -> Result<BoundModel> {
        self.bind_with_overrides(tape, training, rng, &BTreeMap::new())
    }

    /// Like [`bind`](Self::bind), but any tensor named in `overrides` uses
    /// the supplied tape node instead of a fresh leaf — the hook the
    /// gradient checker uses to perturb trainable tensors from outside.
    pub fn bind_with_overrides(
        &self,
        tape: &mut Tape<E>,
        training: bool,
        mut rng: Option<&mut Rng>,
        overrides: &BTreeMap<String, Var>,
    ) -> Result<BoundModel> {
        let arch = self.backbone.arch;
        let trainable = self.trainable_names()?;
        let mut names: Vec<(String, Var)> = Vec::new();
        let leaf = |tape: &mut Tape<E>, names: &mut Vec<(String, Var)>, name: String, t: &Tensor<E>| {
            let v = match overrides.get(&name) {
                Some(&v) => v,
                None => tape.leaf(t.clone(), trainable.contains(&name)),
            };
            names.push((name, v));
            v
        };
        let b = &self.backbone;
        let embed_w = leaf(tape, &mut names, "embed.w".into(), &b.embed_w);
        let embed_b = leaf(tape, &mut names, "embed.b".into(), &b.embed_b);
        let pos = leaf(tape, &mut names, "pos".into(), &b.pos);
        let mut blocks = Vec::with_capacity(arch.depth);
        for (i, blk) in b.blocks.iter().enumerate() {
            let injection =
                self.prepare_injection(tape, &mut names, i, training, &mut rng, overrides)?;
            blocks.push(BoundBlock {
                ln1_g: leaf(tape, &mut names, format!("block{i:02}.ln1.g"), &blk.ln1_g),
                ln1_b: leaf(tape, &mut names, format!("block{i:02}.ln1.b"), &blk.ln1_b),
                wq: leaf(tape, &mut names, format!("block{i:02}.attn.wq"), &blk.wq),
                bq: leaf(tape, &mut names, format!("block{i:02}.attn.bq"), &blk.bq),
                wk: leaf(tape, &mut names, format!("block{i:02}.attn.wk"), &blk.wk),
                bk: leaf(tape, &mut names, format!("block{i:02}.attn.bk"), &blk.bk),
                wv: leaf(tape, &mut names, format!("block{i:02}.attn.wv"), &blk.wv),
                bv: leaf(tape, &mut names, format!("block{i:02}.attn.bv"), &blk.bv),
                wo: leaf(tape, &mut names, format!("block{i:02}.attn.wo"), &blk.wo),
                bo: leaf(tape, &mut names, format!("block{i:02}.attn.bo"), &blk.bo),
                ln2_g: leaf(tape, &mut names, format!("block{i:02}.ln2.g"), &blk.ln2_g),
                ln2_b: leaf(tape, &mut names, format!("block{i:02}.ln2.b"), &blk.ln2_b),
                w1: leaf(tape, &mut names, format!("block{i:02}.mlp.w1"), &blk.w1),
                b1: leaf(tape, &mut names, format!("block{i:02}.mlp.b1"), &blk.b1),
                w2: leaf(tape, &mut names, format!("block{i:02}.mlp.w2"), &blk.w2),
                b2: leaf(tape, &mut names, format!("block{i:02}.mlp.b2"), &blk.b2),
                injection,
            });
        }
        let fc_g = leaf(tape, &mut names, "fc_norm.g".into(), &b.fc_g);
        let fc_b = leaf(tape, &mut names, "fc_norm.b".into(), &b.fc_b);
        let head_w = leaf(tape, &mut names, "head.w".into(), &b.head_w);
        let head_b = leaf(tape, &mut names, "head.b".into(), &b.head_b);
        Ok(BoundModel {
            arch,
            embed_w,
            embed_b,
            pos,
            blocks,
            fc_g,
            fc_b,
            head_w,
            head_b,
            names,
        })
    }

    /// Injection for one block: leaves for the prompt tensors, then the
    /// processing chain. Unplaced blocks and n_p=0 add no tape nodes at all,
    /// which keeps zero-prompt APT bitwise equal to LinearProbe.
    #[allow(clippy::too_many_arguments)]
    fn prepare_injection(
        &self,
        tape: &mut Tape<E>,
        names: &mut Vec<(String, Var)>,
        block: usize,
        training: bool,
        rng: &mut Option<&mut Rng>,
        overrides: &BTreeMap<String, Var>,
    ) -> Result<BlockInjection> {
        let trainable = self.trainable_names()?;
        let mut leaf = |tape: &mut Tape<E>, name: String, t: &Tensor<E>| {
            let v = match overrides.get(&name) {
                Some(&v) => v,
                None => tape.leaf(t.clone(), trainable.contains(&name)),
            };
            names.push((name, v));
            v
        };
        if let Some(vpt) = &self.vpt {
            let p = leaf(tape, format!("block{block:02}.vpt.p"), &vpt.blocks[block]);
            return Ok(BlockInjection::Vpt { p });
        }
        let Some(apt) = &self.apt else {
            return Ok(BlockInjection::None);
        };
        let Some(bp) = &apt.blocks[block] else {
            return Ok(BlockInjection::None);
        };
        let mut k = leaf(tape, format!("block{block:02}.apt.k_p"), &bp.k_p);
        let mut v = leaf(tape, format!("block{block:02}.apt.v_p"), &bp.v_p);
        if let Some((s_k, s_v)) = &bp.scales {
            let sk = leaf(tape, format!("block{block:02}.apt.s_k"), s_k);
            let sv = leaf(tape, format!("block{block:02}.apt.s_v"), s_v);
            k = tape.row_scale_max1(k, sk)?;
            v = tape.row_scale_max1(v, sv)?;
        }
        if training && apt.dropout_rate > 0.0 {
            let rng = rng.as_deref_mut().ok_or_else(|| {
                AptError::invariant("prompt dropout requires an rng in training mode".to_string())
            })?;
            k = tape.dropout(k, apt.dropout_rate, rng, true)?;
            v = tape.dropout(v, apt.dropout_rate, rng, true)?;
        }
        Ok(BlockInjection::Apt { k_p: k, v_p: v })
    }

    pub fn cast<F: Scalar>(&self) -> TunedModel<F> {
        TunedModel {
            backbone: self.backbone.cast(),
            mode: self.mode,
            apt: self.apt.as_ref().map(|a| AptPromptSet {
                n_p: a.n_p,
                dropout_rate: a.dropout_rate,
                blocks: a
                    .blocks
                    .iter()
                    .map(|b| {
                        b.as_ref().map(|bp| AptBlockPrompts {
                            k_p: bp.k_p.cast(),
                            v_p: bp.v_p.cast(),
                            scales: bp.scales.as_ref().map(|(sk, sv)| (sk.cast(), sv.cast())),
                        })
                    })
                    .collect(),
            }),
            vpt: self.vpt.as_ref().map(|v| VptPromptSet {
                n_p: v.n_p,
                blocks: v.blocks.iter().map(|p| p.cast()).collect(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Video};
    use crate::model::{block_forward, model_forward};

    fn apt_mode(n_p: usize, placement: DepthPlacement, reparam: bool) -> TuningMode {
        TuningMode::Apt { n_p, placement, dropout_rate: DEFAULT_PROMPT_DROPOUT, reparam }
    }

    #[test]
    fn placement_masks() {
        assert_eq!(
            DepthPlacement::deepest(2).mask(4).unwrap(),
            vec![false, false, true, true]
        );
        assert_eq!(
            DepthPlacement::shallowest(1).mask(4).unwrap(),
            vec![true, false, false, false]
        );
        assert_eq!(DepthPlacement::deepest(0).mask(4).unwrap(), vec![false; 4]);
        for k in [4usize] {
            assert_eq!(
                DepthPlacement::deepest(k).mask(4).unwrap(),
                DepthPlacement::all().mask(4).unwrap()
            );
            assert_eq!(
                DepthPlacement::shallowest(k).mask(4).unwrap(),
                DepthPlacement::all().mask(4).unwrap()
            );
        }
        assert!(DepthPlacement::deepest(5).mask(4).is_err());
    }

    #[test]
    fn placement_string_round_trip() {
        for p in [
            DepthPlacement::All,
            DepthPlacement::Deepest(3),
            DepthPlacement::Shallowest(1),
        ] {
            let s = p.to_string();
            assert_eq!(s.parse::<DepthPlacement>().unwrap(), p);
        }
        assert!("deepest".parse::<DepthPlacement>().is_err());
        assert!("deepest:x".parse::<DepthPlacement>().is_err());
        assert!("bogus:3".parse::<DepthPlacement>().is_err());
    }

    #[test]
    fn linear_probe_count_vit_base() {
        // 768*101 + 101 + 2*768 head+fc_norm scalars.
        let arch = ArchSpec::vit_base_video(101);
        assert_eq!(count_trainable(&TuningMode::LinearProbe, &arch).unwrap(), 79_205);
    }

    #[test]
    fn apt_counts_vit_base() {
        let arch = ArchSpec::vit_base_video(101);
        for (n_p, want) in [(1u64, 80_765u64), (5, 87_005), (100, 235_205), (200, 391_205), (400, 703_205)] {
            let mode = apt_mode(n_p as usize, DepthPlacement::All, true);
            assert_eq!(count_trainable(&mode, &arch).unwrap(), want, "n_p={n_p}");
        }
    }

    #[test]
    fn reparam_scalar_count_is_9600_for_np_400() {
        let arch = ArchSpec::vit_base_video(101);
        let mode = apt_mode(400, DepthPlacement::All, true);
        let scalars: u64 = prompt_shapes(&mode, &arch)
            .unwrap()
            .iter()
            .filter(|(name, _)| name.contains(".s_"))
            .map(|(_, (r, c))| (r * c) as u64)
            .sum();
        assert_eq!(scalars, 9_600);
        // Disabling reparameterization removes exactly those scalars.
        let off = apt_mode(400, DepthPlacement::All, false);
        assert_eq!(
            count_trainable(&mode, &arch).unwrap() - count_trainable(&off, &arch).unwrap(),
            9_600
        );
    }

    #[test]
    fn deepest_zero_matches_linear_probe_set() {
        let arch = ArchSpec::toy(4);
        let apt = trainable_names(&apt_mode(16, DepthPlacement::deepest(0), true), &arch).unwrap();
        let lp = trainable_names(&TuningMode::LinearProbe, &arch).unwrap();
        assert_eq!(apt, lp);
    }

    #[test]
    fn trainable_and_frozen_partition_inventory() {
        let arch = ArchSpec::toy(4);
        for mode in [
            TuningMode::Full,
            TuningMode::LinearProbe,
            TuningMode::VptDeep { n_p: 3 },
            apt_mode(5, DepthPlacement::deepest(2), true),
        ] {
            let model: TunedModel<f32> = TunedModel::init(arch, mode, 9).unwrap();
            let trainable = model.trainable_names().unwrap();
            let inventory: Vec<String> = model.named().iter().map(|(n, _)| n.clone()).collect();
            // No trainable name outside the inventory.
            for name in &trainable {
                assert!(inventory.contains(name), "orphan trainable {name}");
            }
            // pos never trains.
            assert!(!trainable.contains("pos"));
            // Counted sizes match the enumerated inventory exactly.
            let by_walk: u64 = model
                .named()
                .iter()
                .filter(|(n, _)| trainable.contains(n))
                .map(|(_, t)| (t.rows() * t.cols()) as u64)
                .sum();
            assert_eq!(by_walk, model.count_trainable().unwrap());
        }
    }

    #[test]
    fn same_seed_shares_backbone_across_modes() {
        let arch = ArchSpec::tiny(4);
        let a: TunedModel<f32> =
            TunedModel::init(arch, apt_mode(8, DepthPlacement::All, true), 42).unwrap();
        let b: TunedModel<f32> = TunedModel::init(arch, TuningMode::LinearProbe, 42).unwrap();
        let c: TunedModel<f32> = TunedModel::init(arch, TuningMode::VptDeep { n_p: 8 }, 42).unwrap();
        assert_eq!(a.trunk_checksum(), b.trunk_checksum());
        assert_eq!(a.trunk_checksum(), c.trunk_checksum());
        assert_eq!(
            crate::model::checksum_tensors(&a.backbone.named()),
            crate::model::checksum_tensors(&b.backbone.named())
        );
    }

    #[test]
    fn scales_init_to_exactly_one_and_identity_at_init() {
        let arch = ArchSpec::tiny(4);
        let model: TunedModel<f64> =
            TunedModel::init(arch, apt_mode(3, DepthPlacement::All, true), 5).unwrap();
        let apt = model.apt.as_ref().unwrap();
        for bp in apt.blocks.iter().flatten() {
            let (s_k, s_v) = bp.scales.as_ref().unwrap();
            assert!(s_k.iter().all(|&s| s == 1.0));
            assert!(s_v.iter().all(|&s| s == 1.0));
        }
        // Injection at init (eval mode) equals the raw prompts bitwise.
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape, false, None).unwrap();
        for (i, blk) in bm.blocks.iter().enumerate() {
            let BlockInjection::Apt { k_p, v_p } = blk.injection else {
                panic!("missing injection")
            };
            let src = apt.blocks[i].as_ref().unwrap();
            assert_eq!(tape.value(k_p).data(), src.k_p.data());
            assert_eq!(tape.value(v_p).data(), src.v_p.data());
        }
    }

    #[test]
    fn reparameterize_clamps_below_one_and_scales_above() {
        let arch = ArchSpec::tiny(4);
        let mut model: TunedModel<f64> =
            TunedModel::init(arch, apt_mode(3, DepthPlacement::All, true), 6).unwrap();
        {
            let apt = model.apt.as_mut().unwrap();
            let bp = apt.blocks[0].as_mut().unwrap();
            bp.k_p.row_mut(1).copy_from_slice(&[0.1, -0.2, 0.3, 0.4]);
            let (s_k, _) = bp.scales.as_mut().unwrap();
            s_k.set(0, 0, 0.5); // clamped to 1
            s_k.set(1, 0, 2.0); // doubles its row
        }
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape, false, None).unwrap();
        let BlockInjection::Apt { k_p, .. } = bm.blocks[0].injection else {
            panic!("missing injection")
        };
        let raw = &model.apt.as_ref().unwrap().blocks[0].as_ref().unwrap().k_p;
        let out = tape.value(k_p);
        assert_eq!(out.row(0), raw.row(0), "s=0.5 clamps to identity");
        assert_eq!(out.row(1), &[0.2, -0.4, 0.6, 0.8]);
        assert_eq!(out.row(2), raw.row(2));
    }

    #[test]
    fn raw_passthrough_without_reparam_or_dropout() {
        let arch = ArchSpec::tiny(4);
        let mode = TuningMode::Apt {
            n_p: 4,
            placement: DepthPlacement::All,
            dropout_rate: 0.0,
            reparam: false,
        };
        let model: TunedModel<f32> = TunedModel::init(arch, mode, 7).unwrap();
        let mut tape = Tape::new();
        // Even in training mode: no reparam nodes, no dropout draws.
        let bm = model.bind(&mut tape, true, None).unwrap();
        let BlockInjection::Apt { k_p, .. } = bm.blocks[0].injection else {
            panic!("missing injection")
        };
        let src = model.apt.as_ref().unwrap().blocks[0].as_ref().unwrap();
        assert_eq!(tape.value(k_p).data(), src.k_p.data());
        // And no scale tensors exist anywhere in the inventory.
        assert!(model.named().iter().all(|(n, _)| !n.contains(".s_")));
    }

    #[test]
    fn dropout_expectation_matches_reparameterized_prompts() {
        let arch = ArchSpec::tiny(4);
        let model: TunedModel<f64> =
            TunedModel::init(arch, apt_mode(8, DepthPlacement::shallowest(1), true), 11).unwrap();
        let src = model.apt.as_ref().unwrap().blocks[0].as_ref().unwrap();
        let n = src.k_p.rows() * src.k_p.cols();
        let trials = 60_000usize;
        let mut sums = vec![0.0f64; n];
        let mut rng = Rng::seeded(123, Stream::Dropout(0));
        for _ in 0..trials {
            let mut tape = Tape::new();
            let bm = model.bind(&mut tape, true, Some(&mut rng)).unwrap();
            let BlockInjection::Apt { k_p, .. } = bm.blocks[0].injection else {
                panic!("missing injection")
            };
            for (acc, &v) in sums.iter_mut().zip(tape.value(k_p).data()) {
                *acc += v;
            }
        }
        // s=1 at init, so the reparameterized prompts equal the raw ones.
        for (acc, &want) in sums.iter().zip(src.k_p.data()) {
            let mean = acc / trials as f64;
            let rel = (mean - want).abs() / want.abs().max(1e-8);
            assert!(rel < 0.01, "mean {mean} vs {want} (rel {rel})");
        }
    }

    fn tiny_video(seed: u64, arch: &ArchSpec) -> Video {
        generate(seed, 1, (arch.frames, arch.height, arch.width, arch.channels), 4, 0.1)
            .unwrap()
            .samples
            .remove(0)
            .0
    }

    #[test]
    fn zero_prompt_apt_equals_linear_probe_bitwise() {
        let arch = ArchSpec::tiny(4);
        let apt: TunedModel<f32> =
            TunedModel::init(arch, apt_mode(0, DepthPlacement::All, true), 21).unwrap();
        let lp: TunedModel<f32> = TunedModel::init(arch, TuningMode::LinearProbe, 21).unwrap();
        let video = tiny_video(3, &arch);
        let mut t1 = Tape::new();
        let b1 = apt.bind(&mut t1, false, None).unwrap();
        let o1 = model_forward(&mut t1, &b1, &[&video], false).unwrap();
        let mut t2 = Tape::new();
        let b2 = lp.bind(&mut t2, false, None).unwrap();
        let o2 = model_forward(&mut t2, &b2, &[&video], false).unwrap();
        assert_eq!(t1.value(o1.logits).data(), t2.value(o2.logits).data());
    }

    #[test]
    fn prompt_row_permutation_preserves_logits() {
        let arch = ArchSpec::tiny(4);
        let mut model: TunedModel<f64> =
            TunedModel::init(arch, apt_mode(5, DepthPlacement::All, true), 31).unwrap();
        // Make the scales non-trivial so the permutation must carry them.
        {
            let apt = model.apt.as_mut().unwrap();
            for bp in apt.blocks.iter_mut().flatten() {
                let (s_k, s_v) = bp.scales.as_mut().unwrap();
                for (i, s) in s_k.data_mut().iter_mut().enumerate() {
                    *s = 1.0 + 0.3 * i as f64;
                }
                s_v.set(2, 0, 1.7);
            }
        }
        let video = tiny_video(4, &arch);
        let mut t1 = Tape::new();
        let b1 = model.bind(&mut t1, false, None).unwrap();
        let base = model_forward(&mut t1, &b1, &[&video], false).unwrap();
        let baseline = t1.value(base.logits).data().to_vec();

        // Rotate prompt rows (and their scalars) by 2 in every placed block.
        let n_p = 5usize;
        let perm: Vec<usize> = (0..n_p).map(|i| (i + 2) % n_p).collect();
        {
            let apt = model.apt.as_mut().unwrap();
            for bp in apt.blocks.iter_mut().flatten() {
                let permute_rows = |t: &Tensor<f64>| {
                    let mut out = Tensor::zeros(t.rows(), t.cols());
                    for (dst, &src) in perm.iter().enumerate() {
                        out.row_mut(dst).copy_from_slice(t.row(src));
                    }
                    out
                };
                bp.k_p = permute_rows(&bp.k_p);
                bp.v_p = permute_rows(&bp.v_p);
                let (s_k, s_v) = bp.scales.as_mut().unwrap();
                *s_k = permute_rows(s_k);
                *s_v = permute_rows(s_v);
            }
        }
        let mut t2 = Tape::new();
        let b2 = model.bind(&mut t2, false, None).unwrap();
        let permuted = model_forward(&mut t2, &b2, &[&video], false).unwrap();
        let got = t2.value(permuted.logits).data().to_vec();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &x)| {
                    if x > best.1 {
                        (i, x)
                    } else {
                        best
                    }
                })
                .0
        };
        for (a, b) in baseline.iter().zip(&got) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(argmax(&baseline), argmax(&got));
    }

    #[test]
    fn vpt_zero_prompts_with_zero_ln1_match_promptless_block() {
        // With LN1 weights zeroed, attention reads identical rows for every
        // token, so appended zero prompts change only the (uniform) softmax
        // denominator; stripped outputs agree to rounding.
        let arch = ArchSpec::tiny(4);
        let mut model: TunedModel<f64> =
            TunedModel::init(arch, TuningMode::VptDeep { n_p: 3 }, 13).unwrap();
        {
            let vpt = model.vpt.as_mut().unwrap();
            for p in &mut vpt.blocks {
                for v in p.data_mut() {
                    *v = 0.0;
                }
            }
            let blk = &mut model.backbone.blocks[0];
            for t in [&mut blk.ln1_g, &mut blk.ln1_b] {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            // Non-zero attention biases so the comparison is not trivially 0.
            let mut rng = Rng::seeded(99, Stream::Init);
            for t in [&mut blk.bq, &mut blk.bk, &mut blk.bv, &mut blk.bo] {
                for v in t.data_mut() {
                    *v = rng.normal() * 0.1;
                }
            }
        }
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape, false, None).unwrap();
        let x = tape.constant(crate::model::trunc_normal_tensor(
            &mut Rng::seeded(1, Stream::Init),
            arch.tokens(),
            arch.embed_dim,
            1.0,
        ));
        // With prompts: concat, run block, strip.
        let BlockInjection::Vpt { p } = bm.blocks[0].injection else {
            panic!("missing injection")
        };
        let xin = tape.concat_rows(&[x, p]).unwrap();
        let with = block_forward(&mut tape, xin, &bm.blocks[0], &arch).unwrap();
        let with = tape.slice_rows(with, 0, arch.tokens()).unwrap();
        // Without prompts.
        let without = block_forward(&mut tape, x, &bm.blocks[0], &arch).unwrap();
        for (a, b) in tape.value(with).data().iter().zip(tape.value(without).data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn vpt_forward_strips_prompts_before_pooling() {
        let arch = ArchSpec::tiny(4);
        let model: TunedModel<f32> =
            TunedModel::init(arch, TuningMode::VptDeep { n_p: 6 }, 17).unwrap();
        let video = tiny_video(5, &arch);
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape, false, None).unwrap();
        let out = model_forward(&mut tape, &bm, &[&video], true).unwrap();
        assert_eq!(tape.value(out.logits).shape(), (1, 4));
        // Captured block inputs keep the original token count.
        for v in &out.block_inputs[0] {
            assert_eq!(tape.value(*v).rows(), arch.tokens());
        }
    }

    #[test]
    fn mode_validation_rejects_bad_settings() {
        let arch = ArchSpec::toy(4);
        let bad_drop = TuningMode::Apt {
            n_p: 4,
            placement: DepthPlacement::All,
            dropout_rate: 1.0,
            reparam: true,
        };
        assert!(bad_drop.validate(&arch).is_err());
        let bad_place = apt_mode(4, DepthPlacement::deepest(9), true);
        assert!(bad_place.validate(&arch).is_err());
        assert!(TunedModel::<f32>::init(arch, bad_place, 1).is_err());
    }
}
