//! Analytic compute-cost model. One multiply-accumulate counts as one FLOP;
//! normalizations, softmax and activations are not counted.

use crate::encoder::{init_params, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numeric::Graph;
use crate::partition::{branch_size, visible_count};
use crate::patching::ImageGray;
use crate::rng::{Purpose, StreamRng};

/// Projections (QKV + output) plus scores and weighted sum, one block.
pub fn attention_cost(cfg: &EncoderConfig, seq_len: usize) -> u64 {
    let (s, d) = (seq_len as u64, cfg.dim as u64);
    4 * s * d * d + 2 * s * s * d
}

pub fn mlp_cost(cfg: &EncoderConfig, seq_len: usize) -> u64 {
    let (s, d) = (seq_len as u64, cfg.dim as u64);
    2 * cfg.mlp_ratio as u64 * s * d * d
}

/// All transformer blocks at sequence length `seq_len` (including `[CLS]`).
pub fn blocks_cost(cfg: &EncoderConfig, seq_len: usize) -> u64 {
    cfg.depth as u64 * (attention_cost(cfg, seq_len) + mlp_cost(cfg, seq_len))
}

pub fn patch_embed_cost(cfg: &EncoderConfig, tokens: usize) -> u64 {
    (tokens * cfg.patch * cfg.patch * cfg.dim) as u64
}

/// One encoder forward: blocks at `seq_len` plus embedding every patch.
pub fn encoder_forward_cost(cfg: &EncoderConfig, seq_len: usize) -> u64 {
    blocks_cost(cfg, seq_len) + patch_embed_cost(cfg, cfg.num_patches())
}

/// Per-image cost of the two-branch forward versus a single full-sequence
/// forward.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub patches: usize,
    pub visible: usize,
    /// Tokens per branch including `[CLS]`.
    pub branch_seq_len: usize,
    pub baseline_seq_len: usize,
    pub attention_per_block: u64,
    pub mlp_per_block: u64,
    /// Embedding the visible patches (shared by both branches).
    pub patch_embed: u64,
    /// Blocks of one branch.
    pub branch_forward: u64,
    pub spcl_total: u64,
    pub baseline_total: u64,
    /// `spcl_total / baseline_total`
    pub ratio: f64,
}

impl CostReport {
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("patches", self.patches.to_string()),
            ("visible", self.visible.to_string()),
            ("branch_seq_len", self.branch_seq_len.to_string()),
            ("baseline_seq_len", self.baseline_seq_len.to_string()),
            ("attention_per_block", self.attention_per_block.to_string()),
            ("mlp_per_block", self.mlp_per_block.to_string()),
            ("patch_embed", self.patch_embed.to_string()),
            ("branch_forward", self.branch_forward.to_string()),
            ("spcl_total", self.spcl_total.to_string()),
            ("baseline_total", self.baseline_total.to_string()),
            ("spcl_gflops", format!("{:.3}", self.spcl_total as f64 / 1e9)),
            ("baseline_gflops", format!("{:.3}", self.baseline_total as f64 / 1e9)),
            ("ratio", format!("{:.4}", self.ratio)),
        ]
    }
}

pub fn spcl_step_cost(cfg: &EncoderConfig, mask_ratio: f64) -> Result<CostReport> {
    cfg.validate()?;
    let n = cfg.num_patches();
    let half = branch_size(n, mask_ratio)?;
    let visible = visible_count(n, mask_ratio);
    let s = half + 1;
    let branch_forward = blocks_cost(cfg, s);
    let patch_embed = patch_embed_cost(cfg, visible);
    let spcl_total = 2 * branch_forward + patch_embed;
    let baseline_total = encoder_forward_cost(cfg, n + 1);
    Ok(CostReport {
        patches: n,
        visible,
        branch_seq_len: s,
        baseline_seq_len: n + 1,
        attention_per_block: attention_cost(cfg, s),
        mlp_per_block: mlp_cost(cfg, s),
        patch_embed,
        branch_forward,
        spcl_total,
        baseline_total,
        ratio: spcl_total as f64 / baseline_total as f64,
    })
}

/// Counts the multiply-accumulates of a real forward through the tensor
/// library: all patches are embedded, the first `seq_len - 1` tokens are kept
/// and encoded behind `[CLS]`. Restricted to tiny configurations.
pub fn brute_force_count(cfg: &EncoderConfig, seq_len: usize) -> Result<u64> {
    cfg.validate()?;
    if cfg.dim > 8 || cfg.depth > 2 || seq_len > 4 {
        return Err(Error::Config(format!(
            "brute-force counting is limited to dim <= 8, depth <= 2, seq_len <= 4 (got {}, {}, {seq_len})",
            cfg.dim, cfg.depth
        )));
    }
    if seq_len < 2 || seq_len > cfg.max_seq_len() {
        return Err(Error::Config(format!("seq_len {seq_len} outside 2..={}", cfg.max_seq_len())));
    }
    let params = init_params(cfg, &mut StreamRng::new(0, Purpose::Init, 0))?;
    let encoder = Encoder::new(cfg.clone())?;
    let img = ImageGray::new(cfg.image, cfg.image, vec![0.5; cfg.image * cfg.image])?;
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let tokens = encoder.tokenize(&mut g, &img, &bound)?;
    let keep: Vec<usize> = (0..seq_len - 1).collect();
    let view = g.gather_rows(tokens.tokens, &keep)?;
    encoder.forward_cls(&mut g, view, &bound)?;
    Ok(g.mac_count())
}
