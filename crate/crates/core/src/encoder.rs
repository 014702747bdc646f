//! Shared pre-norm transformer encoder with a learnable `[CLS]` readout.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::partition::{apply_partition, PartitionPlan};
use crate::patching::{embed_tokens, extract_patches, sincos_pos_embed, ImageGray, PixelNorm, TokenSequence};
use crate::rng::StreamRng;

const INIT_STD: f64 = 0.02;
const TENSORS_PER_BLOCK: usize = 12;
const STEM_TENSORS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub image: usize,
    pub pixel_norm: PixelNorm,
}

impl Default for EncoderConfig {
    /// Desk-scale default: 64x64 images, 8x8 patches (64 tokens), 4 blocks of width 64.
    fn default() -> Self {
        EncoderConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            patch: 8,
            image: 64,
            pixel_norm: PixelNorm::default(),
        }
    }
}

impl EncoderConfig {
    /// ViT-Base geometry (12 blocks, width 768, 12 heads, 16x16 patches).
    pub fn vit_base(image: usize) -> Self {
        EncoderConfig {
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            patch: 16,
            image,
            pixel_norm: PixelNorm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.dim, self.heads, self.mlp_ratio, self.patch, self.image];
        if positive.contains(&0) {
            return Err(Error::Config(format!("encoder sizes must be positive: {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!("dim {} not divisible by 4", self.dim)));
        }
        if !self.image.is_multiple_of(self.patch) {
            return Err(Error::Config(format!("patch {} does not divide image {}", self.patch, self.image)));
        }
        if !(self.pixel_norm.std > 0.0) {
            return Err(Error::Config("pixel std must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn max_seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn num_tensors(&self) -> usize {
        STEM_TENSORS + TENSORS_PER_BLOCK * self.depth + 2
    }

    /// Name and shape of every parameter tensor in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.dim, self.dim * self.mlp_ratio);
        let mut out = vec![
            ("patch_proj".to_string(), vec![self.patch * self.patch, d]),
            ("patch_bias".to_string(), vec![d]),
            ("cls".to_string(), vec![d]),
        ];
        for b in 0..self.depth {
            let blk = |n: &str| format!("blocks.{b}.{n}");
            out.extend([
                (blk("ln1_gain"), vec![d]),
                (blk("ln1_bias"), vec![d]),
                (blk("qkv_w"), vec![d, 3 * d]),
                (blk("qkv_b"), vec![3 * d]),
                (blk("proj_w"), vec![d, d]),
                (blk("proj_b"), vec![d]),
                (blk("ln2_gain"), vec![d]),
                (blk("ln2_bias"), vec![d]),
                (blk("fc1_w"), vec![d, h]),
                (blk("fc1_b"), vec![h]),
                (blk("fc2_w"), vec![h, d]),
                (blk("fc2_b"), vec![d]),
            ]);
        }
        out.push(("norm_gain".to_string(), vec![d]));
        out.push(("norm_bias".to_string(), vec![d]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// The single parameter set of the encoder, in [`EncoderConfig::layout`]
/// order. The tensor index doubles as the gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn truncated_normal(rng: &mut StreamRng) -> f32 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return (z * INIT_STD) as f32;
        }
    }
}

/// Weights and `[CLS]` from a normal(0, 0.02) truncated at two standard
/// deviations; biases zero; layer-norm gains one.
pub fn init_params(cfg: &EncoderConfig, rng: &mut StreamRng) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in cfg.layout() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with("gain") {
            vec![1.0; n]
        } else if shape.len() == 2 || name == "cls" {
            (0..n).map(|_| truncated_normal(rng)).collect()
        } else {
            vec![0.0; n]
        };
        tensors.push(Tensor::new(&shape, data)?);
        names.push(name);
    }
    Ok(EncoderParams { names, tensors })
}

impl EncoderParams {
    /// Rebuilds a parameter set from named tensors, checking them against
    /// the configured layout.
    pub fn from_named(cfg: &EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = cfg.layout();
        if named.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} encoder tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, t), (want_name, want_shape)) in named.into_iter().zip(layout) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor {name} {:?} does not match {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(EncoderParams { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a trainable leaf; slot `i` is tensor `i`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundEncoder {
        let vars: Vec<Var> = self.tensors.iter().enumerate().map(|(i, t)| g.param(t, i)).collect();
        BoundEncoder { vars }
    }

    /// Records every tensor as a constant (inference only).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> BoundEncoder {
        let vars = self.tensors.iter().map(|t| g.constant_ref(t)).collect();
        BoundEncoder { vars }
    }
}

/// Graph handles for one bound parameter set.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    vars: Vec<Var>,
}

struct BlockVars<'v>(&'v [Var]);

impl BlockVars<'_> {
    fn ln1(&self) -> (Var, Var) {
        (self.0[0], self.0[1])
    }
    fn qkv(&self) -> (Var, Var) {
        (self.0[2], self.0[3])
    }
    fn proj(&self) -> (Var, Var) {
        (self.0[4], self.0[5])
    }
    fn ln2(&self) -> (Var, Var) {
        (self.0[6], self.0[7])
    }
    fn fc1(&self) -> (Var, Var) {
        (self.0[8], self.0[9])
    }
    fn fc2(&self) -> (Var, Var) {
        (self.0[10], self.0[11])
    }
}

impl BoundEncoder {
    fn patch(&self) -> (Var, Var) {
        (self.vars[0], self.vars[1])
    }
    fn cls(&self) -> Var {
        self.vars[2]
    }
    fn block(&self, b: usize) -> BlockVars<'_> {
        let start = STEM_TENSORS + TENSORS_PER_BLOCK * b;
        BlockVars(&self.vars[start..start + TENSORS_PER_BLOCK])
    }
    fn final_norm(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

fn linear(g: &mut Graph<'_>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Encoder with its fixed positional table.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    pos: Tensor,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let pos = sincos_pos_embed(cfg.grid(), cfg.grid(), cfg.dim)?;
        Ok(Encoder { cfg, pos })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn pos_embed(&self) -> &Tensor {
        &self.pos
    }

    /// Patches, projects and positions one image.
    pub fn tokenize<'a>(
        &'a self,
        g: &mut Graph<'a>,
        img: &ImageGray,
        bound: &BoundEncoder,
    ) -> Result<TokenSequence> {
        if img.height() != self.cfg.image || img.width() != self.cfg.image {
            return Err(Error::Config(format!(
                "image is {}x{} but the encoder expects {}x{}",
                img.height(),
                img.width(),
                self.cfg.image,
                self.cfg.image
            )));
        }
        let mut patches = extract_patches(img, self.cfg.patch)?;
        self.cfg.pixel_norm.apply(&mut patches);
        let patches = g.constant(patches);
        let pos = g.constant_ref(&self.pos);
        let (proj, bias) = bound.patch();
        let tokens = embed_tokens(g, patches, proj, bias, pos)?;
        Ok(TokenSequence {
            tokens,
            grid_h: self.cfg.grid(),
            grid_w: self.cfg.grid(),
        })
    }

    fn attention(&self, g: &mut Graph<'_>, h: Var, blk: &BlockVars<'_>) -> Result<Var> {
        let (d, dh) = (self.cfg.dim, self.cfg.head_dim());
        let qkv = linear(g, h, blk.qkv())?;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let q = g.slice_cols(qkv, i * dh, dh)?;
            let k = g.slice_cols(qkv, d + i * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + i * dh, dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax_rows(scores)?;
            heads.push(g.matmul(weights, v)?);
        }
        let merged = g.concat_cols(&heads)?;
        linear(g, merged, blk.proj())
    }

    /// Prepends `[CLS]` (no positional term), runs every pre-norm block and
    /// returns the final-normed `[CLS]` row as a `[dim]` vector.
    pub fn forward_cls(&self, g: &mut Graph<'_>, view: Var, bound: &BoundEncoder) -> Result<Var> {
        let d = self.cfg.dim;
        let s = match g.shape(view) {
            [s, c] if *c == d => *s,
            other => return Err(Error::shape("forward_cls", other, &[0, d])),
        };
        if s == 0 || s + 1 > self.cfg.max_seq_len() {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds the maximum of {}",
                s + 1,
                self.cfg.max_seq_len()
            )));
        }
        let cls = g.reshape(bound.cls(), &[1, d])?;
        let mut x = g.concat_rows(cls, view)?;
        for b in 0..self.cfg.depth {
            let blk = bound.block(b);
            let (g1, b1) = blk.ln1();
            let h = g.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
            let attn = self.attention(g, h, &blk)?;
            x = g.add(x, attn)?;

            let (g2, b2) = blk.ln2();
            let h = g.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
            let hidden = linear(g, h, blk.fc1())?;
            let hidden = g.gelu(hidden)?;
            let mlp = linear(g, hidden, blk.fc2())?;
            x = g.add(x, mlp)?;
        }
        let first = g.gather_rows(x, &[0])?;
        let (ng, nb) = bound.final_norm();
        let out = g.layer_norm(first, ng, nb, LAYER_NORM_EPS)?;
        g.reshape(out, &[d])
    }

    /// Encodes both views of one image with the same bound parameters.
    pub fn forward_pair(
        &self,
        g: &mut Graph<'_>,
        tokens: &TokenSequence,
        plan: &PartitionPlan,
        bound: &BoundEncoder,
    ) -> Result<(Var, Var)> {
        let (a, b) = apply_partition(g, tokens, plan)?;
        let z1 = self.forward_cls(g, a, bound)?;
        let z2 = self.forward_cls(g, b, bound)?;
        Ok((z1, z2))
    }

    /// Encodes the complete token sequence (inference-time embedding).
    pub fn forward_full(&self, g: &mut Graph<'_>, tokens: &TokenSequence, bound: &BoundEncoder) -> Result<Var> {
        self.forward_cls(g, tokens.tokens, bound)
    }

    /// Frozen full-sequence embedding of one image, before normalization.
    pub fn embed_image(&self, params: &EncoderParams, img: &ImageGray) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let tokens = self.tokenize(&mut g, img, &bound)?;
        let z = self.forward_full(&mut g, &tokens, &bound)?;
        Ok(g.value(z).clone())
    }
}
