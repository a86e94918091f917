//! Closed-form parameter and MAC/FLOPs accounting for every tuning mode.
//! Counts are exact integers; 1 multiply-accumulate = 1 FLOP (the fvcore
//! convention), and softmax/normalization/activation ops are not counted.

use crate::error::Result;
use crate::model::ArchSpec;
use crate::prompt::TuningMode;

/// Cost summary for one (mode, arch) pair.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CostReport {
    pub mode: String,
    pub arch: ArchSpec,
    pub n_p: usize,
    pub trainable_params: u64,
    /// Backbone inventory (head and fc_norm included, `pos` buffer and
    /// prompts excluded): the denominator full fine-tuning would touch.
    pub total_params: u64,
    pub trainable_pct: f64,
    pub macs: u64,
    pub gflops: f64,
}

/// Parameters the backbone holds (everything Full mode trains).
pub fn backbone_params(arch: &ArchSpec) -> u64 {
    let d = arch.embed_dim as u64;
    let hidden = arch.mlp_hidden() as u64;
    let classes = arch.num_classes as u64;
    let embed = arch.patch_dim() as u64 * d + d;
    let per_block = 2 * d                 // ln1
        + 3 * (d * d + d)                 // q, k, v
        + d * d + d                       // output projection
        + 2 * d                           // ln2
        + d * hidden + hidden             // mlp in
        + hidden * d + d; // mlp out
    let head = d * classes + classes;
    let fc_norm = 2 * d;
    embed + arch.depth as u64 * per_block + fc_norm + head
}

/// Exact trainable-parameter count; must equal the named enumeration from
/// the prompt module (tested there and in the acceptance suite).
pub fn count_params(mode: &TuningMode, arch: &ArchSpec) -> Result<u64> {
    let d = arch.embed_dim as u64;
    let classes = arch.num_classes as u64;
    let head_fc = d * classes + classes + 2 * d;
    Ok(match *mode {
        TuningMode::Full => backbone_params(arch),
        TuningMode::LinearProbe => head_fc,
        TuningMode::VptDeep { n_p } => arch.depth as u64 * n_p as u64 * d + head_fc,
        TuningMode::Apt { n_p, placement, reparam, .. } => {
            let placed = placement.count(arch.depth)? as u64;
            let hd = arch.head_dim() as u64;
            let prompts = placed * 2 * n_p as u64 * hd;
            let scalars = if reparam { placed * 2 * n_p as u64 } else { 0 };
            prompts + scalars + head_fc
        }
    })
}

/// MACs for one forward pass over a single view, with `extra` prompt rows
/// flowing through every block's token dimension.
fn block_tokens_macs(arch: &ArchSpec, tokens: u64) -> u64 {
    let d = arch.embed_dim as u64;
    let hidden = arch.mlp_hidden() as u64;
    3 * tokens * d * d            // q, k, v projections
        + tokens * tokens * d     // attention scores
        + tokens * tokens * d     // attention-weighted values
        + tokens * d * d          // output projection
        + 2 * tokens * d * hidden // mlp
}

/// Exact MAC count for a single-view forward pass.
pub fn count_macs(mode: &TuningMode, arch: &ArchSpec) -> Result<u64> {
    let n_x = arch.tokens() as u64;
    let d = arch.embed_dim as u64;
    let depth = arch.depth as u64;
    let stem_and_head = n_x * d * arch.patch_dim() as u64 // tubelet embedding
        + n_x * d                                         // mean pool
        + d * arch.num_classes as u64; // classifier
    Ok(match *mode {
        TuningMode::Full | TuningMode::LinearProbe => {
            stem_and_head + depth * block_tokens_macs(arch, n_x)
        }
        TuningMode::VptDeep { n_p } => {
            stem_and_head + depth * block_tokens_macs(arch, n_x + n_p as u64)
        }
        TuningMode::Apt { n_p, placement, .. } => {
            let placed = placement.count(arch.depth)? as u64;
            // Per placed block: score rows against K_p and weighted sums
            // over V_p, across all heads: 2 * n_x * n_p * d.
            stem_and_head
                + depth * block_tokens_macs(arch, n_x)
                + placed * 2 * n_x * n_p as u64 * d
        }
    })
}

pub fn report(mode: &TuningMode, arch: &ArchSpec) -> Result<CostReport> {
    let trainable_params = count_params(mode, arch)?;
    let total_params = backbone_params(arch);
    let macs = count_macs(mode, arch)?;
    Ok(CostReport {
        mode: mode.label().to_string(),
        arch: *arch,
        n_p: mode.n_p(),
        trainable_params,
        total_params,
        trainable_pct: 100.0 * trainable_params as f64 / total_params as f64,
        macs,
        gflops: macs as f64 / 1e9,
    })
}

/// One row per (mode, n_p): the table behind cost CSVs and sweep plots.
pub fn sweep(arch: &ArchSpec, modes: &[TuningMode]) -> Result<Vec<CostReport>> {
    modes.iter().map(|m| report(m, arch)).collect()
}
