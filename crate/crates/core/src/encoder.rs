//! Patchifying transformer image encoder with locality-aware attention.
//!
//! The backbone runs plain QK attention blocks and propagates tokens layer to
//! layer. A side path re-runs the attention of the last `fusion_depth`
//! layers on the same (backbone) inputs with the configured variant and
//! locality mask, and sums those outputs. The feature map is the summed side
//! path over patch tokens, each l2-normalized.
//!
//! Weights are drawn once from `init_seed` and never trained.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::seed;
use crate::tensor::{Graph, Tensor, TensorError, NEG_SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    QkVanilla,
    VvAtt,
    QkLaa,
    VvLaa,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::QkVanilla,
        AttentionVariant::VvAtt,
        AttentionVariant::QkLaa,
        AttentionVariant::VvLaa,
    ];

    /// Logits from value-value similarity instead of query-key.
    pub fn value_logits(self) -> bool {
        matches!(self, AttentionVariant::VvAtt | AttentionVariant::VvLaa)
    }

    pub fn locality_masked(self) -> bool {
        matches!(self, AttentionVariant::QkLaa | AttentionVariant::VvLaa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::QkVanilla => "qk-vanilla",
            AttentionVariant::VvAtt => "vv-att",
            AttentionVariant::QkLaa => "qk-laa",
            AttentionVariant::VvLaa => "vv-laa",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Euclidean neighbour radius on the patch grid.
    pub radius: f64,
    pub variant: AttentionVariant,
    pub init_seed: u64,
    pub fusion_depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            radius: 1.0,
            variant: AttentionVariant::VvLaa,
            init_seed: 0,
            fusion_depth: 2,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.layers == 0 || self.heads == 0 {
            return bad("patch-size, embed-dim, layers and heads must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "heads {} must divide embed-dim {}",
                self.heads, self.embed_dim
            ));
        }
        if !(self.radius >= 0.0) {
            return bad(format!("radius {} must be >= 0", self.radius));
        }
        if self.fusion_depth == 0 || self.fusion_depth > self.layers {
            return bad(format!(
                "fusion-depth {} must lie in 1..={}",
                self.fusion_depth, self.layers
            ));
        }
        Ok(())
    }

    /// Token grid for an image, checking divisibility.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.patch_size) || !width.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok((height / self.patch_size, width / self.patch_size))
    }
}

/// Additive attention mask over `1 + H'W'` tokens (token 0 is cls).
#[derive(Debug, Clone, PartialEq)]
pub struct LaaMask {
    pub tokens: usize,
    pub data: Vec<f64>,
}

impl LaaMask {
    pub fn is_finite(&self, row: usize, col: usize) -> bool {
        self.data[row * self.tokens + col] == 0.0
    }

    /// Number of finite entries in a row.
    pub fn row_support(&self, row: usize) -> usize {
        (0..self.tokens).filter(|&c| self.is_finite(row, c)).count()
    }
}

/// Patch `(i, j)` may attend to patch `(m, n)` iff their grid distance is at
/// most `radius`. Every patch also sees cls; cls sees everything.
pub fn build_laa_mask(grid_h: usize, grid_w: usize, radius: f64) -> LaaMask {
    let tokens = 1 + grid_h * grid_w;
    let mut data = vec![NEG_SENTINEL; tokens * tokens];
    for c in 0..tokens {
        data[c] = 0.0;
    }
    for p in 0..grid_h * grid_w {
        let (i, j) = ((p / grid_w) as f64, (p % grid_w) as f64);
        let row = (1 + p) * tokens;
        data[row] = 0.0;
        for q in 0..grid_h * grid_w {
            let (m, n) = ((q / grid_w) as f64, (q % grid_w) as f64);
            if ((i - m).powi(2) + (j - n).powi(2)).sqrt() <= radius {
                data[row + 1 + q] = 0.0;
            }
        }
    }
    LaaMask { tokens, data }
}

/// Projections of one multi-head attention layer.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub dim: usize,
    pub heads: usize,
    /// Per head, `dim x head_dim` row-major.
    pub wq: Vec<Vec<f64>>,
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    /// `dim x dim` output projection and its bias.
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
}

impl AttentionWeights {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn random(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let hd = dim / heads;
        let std = 1.0 / (dim as f64).sqrt();
        let mut mats = |n: usize| {
            (0..n)
                .map(|_| gaussian(rng, dim * hd, std))
                .collect::<Vec<_>>()
        };
        let (wq, wk, wv) = (mats(heads), mats(heads), mats(heads));
        Self {
            dim,
            heads,
            wq,
            wk,
            wv,
            wo: gaussian(rng, dim * dim, std),
            bo: vec![0.0; dim],
        }
    }
}

/// Result of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Heads concatenated, before the output projection (`T x C`).
    pub heads: Tensor,
    /// After the output projection (`T x C`).
    pub output: Tensor,
    /// Per head, the `T x T` row-stochastic weights.
    pub weights: Vec<Vec<f64>>,
}

/// `softmax(logits / sqrt(d_k) + mask) V` per head, heads concatenated and
/// projected. Logits are `Q K^T`, or `V V^T` for the value variants. The mask
/// is applied only when given.
pub fn attend(
    g: &mut Graph,
    x: &Tensor,
    w: &AttentionWeights,
    value_logits: bool,
    mask: Option<&LaaMask>,
) -> Result<AttentionOutput> {
    let tokens = x.shape()[0];
    if let Some(m) = mask {
        if m.tokens != tokens {
            return Err(TensorError::ShapeMismatch {
                op: "attend mask",
                lhs: vec![tokens, tokens],
                rhs: vec![m.tokens, m.tokens],
            }
            .into());
        }
    }
    let hd = w.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(w.heads);
    let mut weights = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let wv = g.constant(w.wv[h].clone(), &[w.dim, hd])?;
        let v = g.matmul(x, &wv)?;
        let (lhs, rhs) = if value_logits {
            (v.clone(), v.clone())
        } else {
            let wq = g.constant(w.wq[h].clone(), &[w.dim, hd])?;
            let wk = g.constant(w.wk[h].clone(), &[w.dim, hd])?;
            (g.matmul(x, &wq)?, g.matmul(x, &wk)?)
        };
        let rt = g.transpose(&rhs)?;
        let logits = g.matmul(&lhs, &rt)?;
        let mut logits = g.scale(&logits, scale)?;
        if let Some(m) = mask {
            logits = g.masked_fill(&logits, &m.data)?;
        }
        let a = g.softmax(&logits, 1)?;
        weights.push(a.to_vec());
        outs.push(g.matmul(&a, &v)?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    let heads = g.concat(&refs, 1)?;
    let wo = g.constant(w.wo.clone(), &[w.dim, w.dim])?;
    let bo = g.constant(w.bo.clone(), &[w.dim])?;
    let proj = g.matmul(&heads, &wo)?;
    let output = g.add(&proj, &bo)?;
    Ok(AttentionOutput {
        heads,
        output,
        weights,
    })
}

/// Pre-norm transformer block: attention then a GELU MLP.
#[derive(Debug, Clone)]
pub(crate) struct TransformerBlock {
    pub(crate) attn: AttentionWeights,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl TransformerBlock {
    pub(crate) fn random(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = MLP_RATIO * dim;
        Self {
            attn: AttentionWeights::random(dim, heads, rng),
            w1: gaussian(rng, dim * hidden, 1.0 / (dim as f64).sqrt()),
            b1: vec![0.0; hidden],
            w2: gaussian(rng, hidden * dim, 1.0 / (hidden as f64).sqrt()),
            b2: vec![0.0; dim],
        }
    }

    pub(crate) fn mlp(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let c = self.attn.dim;
        let hidden = MLP_RATIO * c;
        let w1 = g.constant(self.w1.clone(), &[c, hidden])?;
        let b1 = g.constant(self.b1.clone(), &[hidden])?;
        let w2 = g.constant(self.w2.clone(), &[hidden, c])?;
        let b2 = g.constant(self.b2.clone(), &[c])?;
        let h = g.matmul(x, &w1)?;
        let h = g.add(&h, &b1)?;
        let h = g.gelu(&h)?;
        let o = g.matmul(&h, &w2)?;
        Ok(g.add(&o, &b2)?)
    }

    /// Residual block with vanilla attention.
    pub(crate) fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let h = g.layer_norm(x)?;
        let a = attend(g, &h, &self.attn, false, None)?;
        let x = g.add(x, &a.output)?;
        let h = g.layer_norm(&x)?;
        let m = self.mlp(g, &h)?;
        Ok(g.add(&x, &m)?)
    }
}

const MLP_RATIO: usize = 4;
const POS_STD: f64 = 0.02;
const CLS_STD: f64 = 0.02;
const PATCH_BIAS_STD: f64 = 0.5;

pub(crate) fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Spatially aligned patch features plus a global embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// `grid_h * grid_w` unit vectors, row-major by patch position.
    pub cells: Vec<f64>,
    /// Final backbone cls token, unit norm.
    pub cls: Vec<f64>,
}

impl FeatureMap {
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let p = i * self.grid_w + j;
        &self.cells[p * self.dim..(p + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    config: EncoderConfig,
    grid_h: usize,
    grid_w: usize,
    patch_proj: Vec<f64>,
    patch_bias: Vec<f64>,
    cls: Vec<f64>,
    pos: Vec<f64>,
    blocks: Vec<TransformerBlock>,
    mask: LaaMask,
}

impl ImageEncoder {
    /// Draws frozen weights for images of `height x width`.
    pub fn new(config: EncoderConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let (grid_h, grid_w) = config.grid_for(height, width)?;
        let c = config.embed_dim;
        let pix = config.patch_size * config.patch_size;
        let tokens = 1 + grid_h * grid_w;
        let mut rng = seed::rng(config.init_seed, "image-encoder");
        let patch_proj = gaussian(&mut rng, pix * c, 1.0 / (pix as f64).sqrt());
        let patch_bias = gaussian(&mut rng, c, PATCH_BIAS_STD);
        let cls = gaussian(&mut rng, c, CLS_STD);
        let pos = gaussian(&mut rng, tokens * c, POS_STD);
        let blocks = (0..config.layers)
            .map(|_| TransformerBlock::random(c, config.heads, &mut rng))
            .collect();
        Ok(Self {
            mask: build_laa_mask(grid_h, grid_w, config.radius),
            config,
            grid_h,
            grid_w,
            patch_proj,
            patch_bias,
            cls,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn mask(&self) -> &LaaMask {
        &self.mask
    }

    pub fn attention_weights(&self, layer: usize) -> &AttentionWeights {
        &self.blocks[layer].attn
    }

    /// `1 + H'W'` tokens: cls first, then patch `(i, j)` at `1 + i * W' + j`.
    pub fn patchify(&self, g: &mut Graph, image: &Image) -> Result<Tensor> {
        let p = self.config.patch_size;
        let (gh, gw) = self.config.grid_for(image.height, image.width)?;
        if (gh, gw) != (self.grid_h, self.grid_w) {
            return Err(Error::InvalidArgument(format!(
                "encoder built for a {}x{} grid, image gives {gh}x{gw}",
                self.grid_h, self.grid_w
            )));
        }
        let c = self.config.embed_dim;
        let mut pixels = Vec::with_capacity(gh * gw * p * p);
        for i in 0..gh {
            for j in 0..gw {
                for r in 0..p {
                    for col in 0..p {
                        pixels.push(*image.get(i * p + r, j * p + col));
                    }
                }
            }
        }
        let px = g.constant(pixels, &[gh * gw, p * p])?;
        let proj = g.constant(self.patch_proj.clone(), &[p * p, c])?;
        let bias = g.constant(self.patch_bias.clone(), &[c])?;
        let patches = g.matmul(&px, &proj)?;
        let patches = g.add(&patches, &bias)?;
        let cls = g.constant(self.cls.clone(), &[1, c])?;
        let tokens = g.concat(&[&cls, &patches], 0)?;
        let pos = g.constant(self.pos.clone(), &[1 + gh * gw, c])?;
        Ok(g.add(&tokens, &pos)?)
    }

    /// Feature map plus the side-path patch tokens before normalization.
    pub fn encode_with_raw(&self, image: &Image) -> Result<(FeatureMap, Vec<f64>)> {
        let mut g = Graph::new();
        let mut x = self.patchify(&mut g, image)?;
        let variant = self.config.variant;
        let first_fused = self.config.layers - self.config.fusion_depth;
        let mask = variant.locality_masked().then_some(&self.mask);
        let mut side: Option<Tensor> = None;
        for (l, block) in self.blocks.iter().enumerate() {
            let h = g.layer_norm(&x)?;
            let backbone = attend(&mut g, &h, &block.attn, false, None)?;
            if l >= first_fused {
                let out = if variant == AttentionVariant::QkVanilla {
                    backbone.output.clone()
                } else {
                    attend(&mut g, &h, &block.attn, variant.value_logits(), mask)?.output
                };
                side = Some(match side {
                    Some(s) => g.add(&s, &out)?,
                    None => out,
                });
            }
            x = g.add(&x, &backbone.output)?;
            let h2 = g.layer_norm(&x)?;
            let m = block.mlp(&mut g, &h2)?;
            x = g.add(&x, &m)?;
        }
        let c = self.config.embed_dim;
        let n = self.grid_h * self.grid_w;
        let side = side.expect("fusion depth >= 1");
        let raw = side.data()[c..].to_vec();
        let patches = g.constant(raw.clone(), &[n, c])?;
        let cells = g.l2_normalize(&patches, 1)?.to_vec();
        let cls_tok = g.constant(x.data()[..c].to_vec(), &[c])?;
        let cls = g.l2_normalize(&cls_tok, 0)?.to_vec();
        Ok((
            FeatureMap {
                grid_h: self.grid_h,
                grid_w: self.grid_w,
                dim: c,
                cells,
                cls,
            },
            raw,
        ))
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        Ok(self.encode_with_raw(image)?.0)
    }
}
