//! Learnable prompts, the frozen text encoder they pass through, and the
//! per-cell normal/abnormal score maps.
//!
//! The normal prompt is `general ‖ [cls] ‖ normal-suffix` and the abnormal
//! prompt is `general ‖ [cls] ‖ abnormal-suffix`; the general prefix is one
//! shared parameter. The cls token is fixed per class name.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{gaussian, FeatureMap, TransformerBlock};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::seed;
use crate::tensor::{Graph, Tensor};

/// Largest tolerated deviation from unit norm for score-map inputs.
pub const NORM_TOLERANCE: f64 = 1e-6;

const TEXT_LAYERS: usize = 2;
const TEXT_HEADS: usize = 4;
const TEXT_MAX_LEN: usize = 64;
const TEXT_POS_STD: f64 = 0.02;
const CLS_TOKEN_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PromptConfig {
    pub n_general: usize,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub token_dim: usize,
    /// Logit scale applied to cosine similarities.
    pub temperature: f64,
    pub init_std: f64,
    pub text_seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            n_general: 8,
            n_normal: 4,
            n_abnormal: 4,
            token_dim: 32,
            temperature: 10.0,
            init_std: 0.02,
            text_seed: 0,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || !self.token_dim.is_multiple_of(TEXT_HEADS) {
            return Err(Error::Config(format!(
                "token-dim {} must be a positive multiple of {TEXT_HEADS}",
                self.token_dim
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        let longest = self.n_general + 1 + self.n_normal.max(self.n_abnormal);
        if longest > TEXT_MAX_LEN {
            return Err(Error::Config(format!(
                "prompt length {longest} exceeds text encoder capacity {TEXT_MAX_LEN}"
            )));
        }
        Ok(())
    }
}

/// Frozen stand-in for a text tower: a small transformer over the token
/// embeddings, mean-pooled and projected into the image feature space.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    token_dim: usize,
    out_dim: usize,
    pos: Vec<f64>,
    blocks: Vec<TransformerBlock>,
    proj: Vec<f64>,
}

impl TextEncoder {
    pub fn new(token_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "text-encoder");
        let pos = gaussian(&mut rng, TEXT_MAX_LEN * token_dim, TEXT_POS_STD);
        let blocks = (0..TEXT_LAYERS)
            .map(|_| TransformerBlock::random(token_dim, TEXT_HEADS, &mut rng))
            .collect();
        let proj = gaussian(
            &mut rng,
            token_dim * out_dim,
            1.0 / (token_dim as f64).sqrt(),
        );
        Self {
            token_dim,
            out_dim,
            pos,
            blocks,
            proj,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Maps an `L x token_dim` sequence to a unit-norm `out_dim` embedding.
    pub fn encode(&self, g: &mut Graph, seq: &Tensor) -> Result<Tensor> {
        let len = match seq.shape() {
            [l, d] if *d == self.token_dim => *l,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "prompt sequence shape {other:?}, expected [L, {}]",
                    self.token_dim
                )))
            }
        };
        if len == 0 {
            return Err(Error::InvalidArgument("empty prompt sequence".into()));
        }
        if len > TEXT_MAX_LEN {
            return Err(Error::InvalidArgument(format!(
                "prompt length {len} exceeds {TEXT_MAX_LEN}"
            )));
        }
        let pos = g.constant(
            self.pos[..len * self.token_dim].to_vec(),
            &[len, self.token_dim],
        )?;
        let mut x = g.add(seq, &pos)?;
        for b in &self.blocks {
            x = b.forward(g, &x)?;
        }
        let x = g.layer_norm(&x)?;
        let pooled = g.mean(&x, 0)?;
        let pooled = g.reshape(&pooled, &[1, self.token_dim])?;
        let proj = g.constant(self.proj.clone(), &[self.token_dim, self.out_dim])?;
        let out = g.matmul(&pooled, &proj)?;
        let out = g.reshape(&out, &[self.out_dim])?;
        Ok(g.l2_normalize(&out, 0)?)
    }
}

/// Class token embedding, a pure function of the class name.
pub fn class_token(class_name: &str, token_dim: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed::hash_str(class_name), "class-token");
    gaussian(&mut rng, token_dim, CLS_TOKEN_STD)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub class_name: String,
    pub token_dim: usize,
    pub n_general: usize,
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// `n_general x token_dim`, shared by both prompts.
    pub general: Vec<f64>,
    /// Frozen.
    pub cls: Vec<f64>,
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
}

impl PromptPair {
    /// Gaussian-initialized prompts for `class_name`.
    pub fn init(class_name: &str, config: &PromptConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "prompt-init");
        let d = Normal::new(0.0, config.init_std).expect("finite init std");
        let mut draw = |n: usize| {
            (0..n * config.token_dim)
                .map(|_| d.sample(&mut rng))
                .collect()
        };
        Self {
            class_name: class_name.to_string(),
            token_dim: config.token_dim,
            n_general: config.n_general,
            n_normal: config.n_normal,
            n_abnormal: config.n_abnormal,
            general: draw(config.n_general),
            normal: draw(config.n_normal),
            abnormal: draw(config.n_abnormal),
            cls: class_token(class_name, config.token_dim),
        }
    }

    /// Records the prompt parameters on `g`. The cls token is always a
    /// constant; the rest are trainable when `trainable` is set.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> Result<PromptTensors> {
        let d = self.token_dim;
        let mut leaf = |data: &[f64], rows: usize| -> Result<Option<Tensor>> {
            if rows == 0 {
                return Ok(None);
            }
            let t = if trainable {
                g.param(data.to_vec(), &[rows, d])?
            } else {
                g.constant(data.to_vec(), &[rows, d])?
            };
            Ok(Some(t))
        };
        let general = leaf(&self.general, self.n_general)?;
        let normal = leaf(&self.normal, self.n_normal)?;
        let abnormal = leaf(&self.abnormal, self.n_abnormal)?;
        let cls = g.constant(self.cls.clone(), &[1, d])?;
        Ok(PromptTensors {
            general,
            cls,
            normal,
            abnormal,
        })
    }

    /// Encodes both prompts without recording gradients.
    pub fn embed(&self, text: &TextEncoder) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.attach(&mut g, false)?;
        let (n, a) = p.encode(&mut g, text)?;
        Ok((n.to_vec(), a.to_vec()))
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.general
            .iter()
            .chain(&self.cls)
            .chain(&self.normal)
            .chain(&self.abnormal)
    }

    /// Writes the binary prompt file (see `docs/formats.md`).
    pub fn save(&self, path: &Path, header_extra: PromptFileMeta) -> Result<()> {
        let header = PromptFileHeader {
            format: PROMPT_FORMAT.to_string(),
            version: PROMPT_FORMAT_VERSION,
            class_name: self.class_name.clone(),
            token_dim: self.token_dim,
            n_general: self.n_general,
            n_normal: self.n_normal,
            n_abnormal: self.n_abnormal,
            value_count: self.values().count(),
            seed: header_extra.seed,
            text_seed: header_extra.text_seed,
            meta_epoch: header_extra.meta_epoch,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut bytes = Vec::with_capacity(8 + json.len() + 8 * header.value_count);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for v in self.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, PromptFileHeader)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |m: String| Error::corrupt(path, m);
        if bytes.len() < 8 {
            return Err(corrupt("missing header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| corrupt(format!("header of {hlen} bytes truncated")))?;
        let header: PromptFileHeader =
            serde_json::from_slice(body).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format != PROMPT_FORMAT {
            return Err(corrupt(format!(
                "format {:?} is not {PROMPT_FORMAT}",
                header.format
            )));
        }
        let d = header.token_dim;
        let expected = d * (header.n_general + 1 + header.n_normal + header.n_abnormal);
        if header.value_count != expected {
            return Err(corrupt(format!(
                "value_count {} disagrees with sizes ({expected})",
                header.value_count
            )));
        }
        let raw = &bytes[8 + hlen..];
        if raw.len() != 8 * expected {
            return Err(corrupt(format!(
                "{} payload bytes, expected {}",
                raw.len(),
                8 * expected
            )));
        }
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut at = 0;
        let mut take = |n: usize| {
            let v = vals[at..at + n * d].to_vec();
            at += n * d;
            v
        };
        let pair = PromptPair {
            class_name: header.class_name.clone(),
            token_dim: d,
            n_general: header.n_general,
            n_normal: header.n_normal,
            n_abnormal: header.n_abnormal,
            general: take(header.n_general),
            cls: take(1),
            normal: take(header.n_normal),
            abnormal: take(header.n_abnormal),
        };
        Ok((pair, header))
    }
}

pub const PROMPT_FORMAT: &str = "prompt-pair";
pub const PROMPT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PromptFileMeta {
    pub seed: u64,
    pub text_seed: u64,
    pub meta_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFileHeader {
    pub format: String,
    pub version: u32,
    pub class_name: String,
    pub token_dim: usize,
    pub n_general: usize,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub value_count: usize,
    pub seed: u64,
    pub text_seed: u64,
    pub meta_epoch: usize,
}

/// Prompt parameters recorded on a graph.
#[derive(Debug, Clone)]
pub struct PromptTensors {
    pub general: Option<Tensor>,
    pub cls: Tensor,
    pub normal: Option<Tensor>,
    pub abnormal: Option<Tensor>,
}

impl PromptTensors {
    fn sequence(&self, g: &mut Graph, suffix: &Option<Tensor>) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self
            .general
            .iter()
            .chain(std::iter::once(&self.cls))
            .chain(suffix.iter())
            .collect();
        Ok(g.concat(&parts, 0)?)
    }

    pub fn normal_sequence(&self, g: &mut Graph) -> Result<Tensor> {
        self.sequence(g, &self.normal)
    }

    pub fn abnormal_sequence(&self, g: &mut Graph) -> Result<Tensor> {
        self.sequence(g, &self.abnormal)
    }

    /// Text embeddings `(t_n, t_a)`.
    pub fn encode(&self, g: &mut Graph, text: &TextEncoder) -> Result<(Tensor, Tensor)> {
        let sn = self.normal_sequence(g)?;
        let sa = self.abnormal_sequence(g)?;
        Ok((text.encode(g, &sn)?, text.encode(g, &sa)?))
    }
}

/// Frozen encoded anchors the live prompts are regularized toward.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaPromptPair {
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
    pub epoch: usize,
}

/// Score maps recorded on a graph: `probs` is `N x 2` with columns
/// (normal, abnormal).
#[derive(Debug, Clone)]
pub struct ScoreTensors {
    pub raw_normal: Tensor,
    pub raw_abnormal: Tensor,
    pub probs: Tensor,
}

fn check_unit(what: &str, v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "{what} is not unit norm (norm {n})"
        )));
    }
    Ok(())
}

/// `features` is `N x C` with unit rows; `t_normal`, `t_abnormal` are unit
/// `C` vectors. Per cell, `softmax(tau <f, t_n>, tau <f, t_a>)`.
pub fn score_tensors(
    g: &mut Graph,
    features: &Tensor,
    t_normal: &Tensor,
    t_abnormal: &Tensor,
    temperature: f64,
) -> Result<ScoreTensors> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    let c = *features.shape().last().unwrap_or(&0);
    for (i, row) in features.data().chunks(c.max(1)).enumerate() {
        check_unit(&format!("feature cell {i}"), row)?;
    }
    check_unit("normal text embedding", t_normal.data())?;
    check_unit("abnormal text embedding", t_abnormal.data())?;
    let tn = g.reshape(t_normal, &[c, 1])?;
    let ta = g.reshape(t_abnormal, &[c, 1])?;
    let sn = g.matmul(features, &tn)?;
    let raw_normal = g.scale(&sn, temperature)?;
    let sa = g.matmul(features, &ta)?;
    let raw_abnormal = g.scale(&sa, temperature)?;
    let both = g.concat(&[&raw_normal, &raw_abnormal], 1)?;
    let probs = g.softmax(&both, 1)?;
    Ok(ScoreTensors {
        raw_normal,
        raw_abnormal,
        probs,
    })
}

/// Plain-value score maps over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMapPair {
    pub normal: Grid<f64>,
    pub abnormal: Grid<f64>,
    pub raw_normal: Grid<f64>,
    pub raw_abnormal: Grid<f64>,
    pub temperature: f64,
}

pub fn score_maps(
    features: &FeatureMap,
    t_normal: &[f64],
    t_abnormal: &[f64],
    temperature: f64,
) -> Result<ScoreMapPair> {
    let mut g = Graph::new();
    let (n, c) = (features.len(), features.dim);
    let f = g.constant(features.cells.clone(), &[n, c])?;
    let tn = g.constant(t_normal.to_vec(), &[t_normal.len()])?;
    let ta = g.constant(t_abnormal.to_vec(), &[t_abnormal.len()])?;
    if t_normal.len() != c || t_abnormal.len() != c {
        return Err(Error::InvalidArgument(format!(
            "text embeddings of length {}/{} against {c}-dim features",
            t_normal.len(),
            t_abnormal.len()
        )));
    }
    let s = score_tensors(&mut g, &f, &tn, &ta, temperature)?;
    let (h, w) = (features.grid_h, features.grid_w);
    let p = s.probs.data();
    Ok(ScoreMapPair {
        normal: Grid::from_vec(h, w, p.iter().step_by(2).copied().collect()),
        abnormal: Grid::from_vec(h, w, p.iter().skip(1).step_by(2).copied().collect()),
        raw_normal: Grid::from_vec(h, w, s.raw_normal.to_vec()),
        raw_abnormal: Grid::from_vec(h, w, s.raw_abnormal.to_vec()),
        temperature,
    })
}

/// Bilinear upsampling by an integer factor. Source samples sit at patch
/// centres; outside the outermost centres the edge value is held.
pub fn upsample_score(map: &Grid<f64>, factor: usize) -> Grid<f64> {
    let (h, w) = (map.height * factor, map.width * factor);
    let f = factor as f64;
    let coord = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Grid::filled(h, w, 0.0);
    for r in 0..h {
        let (r0, r1, fr) = coord(r, map.height);
        for c in 0..w {
            let (c0, c1, fc) = coord(c, map.width);
            let top = map.get(r0, c0) * (1.0 - fc) + map.get(r0, c1) * fc;
            let bottom = map.get(r1, c0) * (1.0 - fc) + map.get(r1, c1) * fc;
            out.set(r, c, top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}
