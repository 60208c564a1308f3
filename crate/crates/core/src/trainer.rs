//! Meta-guided prompt tuning.
//!
//! Each step synthesizes an anomaly on a normal shot, scores it with the live
//! prompts and with the frozen meta anchor, and takes per-branch gradients of
//! the anomaly (BCE) loss and of the divergence (Bernoulli KL) loss. When the
//! two disagree in direction the anomaly gradient's component along the
//! divergence gradient is removed, scaled by the guiding level λ. At the end
//! of each meta-epoch the live prompts become the new anchor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::encoder::{FeatureMap, ImageEncoder};
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::oagm::{estimate_object_mask, synthesize_anomaly, ObjectMaskMode, RegionMode};
use crate::prompt::{
    score_maps, score_tensors, MetaPromptPair, PromptConfig, PromptFileMeta, PromptPair,
    ScoreMapPair, TextEncoder,
};
use crate::seed;
use crate::tensor::{GradMap, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossRegion {
    /// Only cells covering the object contribute to the anomaly loss.
    ObjectOnly,
    AllPixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainConfig {
    /// Guiding level λ in `[0, 1]`.
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps_per_meta_epoch: usize,
    pub meta_epochs: usize,
    pub batch_size: usize,
    /// Noise standard deviation for anomaly synthesis.
    pub sigma: f64,
    pub k_shot: usize,
    /// Probability clamp before logs.
    pub epsilon: f64,
    pub loss_region: LossRegion,
    pub region_mode: RegionMode,
    pub object_mask_mode: ObjectMaskMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 0.05,
            steps_per_meta_epoch: 100,
            meta_epochs: 5,
            batch_size: 1,
            sigma: 0.25,
            k_shot: 1,
            epsilon: 1e-6,
            loss_region: LossRegion::ObjectOnly,
            region_mode: RegionMode::SubRegion,
            object_mask_mode: ObjectMaskMode::GroundTruth,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning-rate {} must be > 0", self.learning_rate));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.01) {
            return bad(format!("epsilon {} outside (0, 0.01]", self.epsilon));
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma {} must be >= 0", self.sigma));
        }
        if self.batch_size == 0 || self.k_shot == 0 || self.meta_epochs == 0 {
            return bad("batch-size, k-shot and meta-epochs must be positive".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Column `col` of an `N x 2` tensor as `N x 1`.
fn column(g: &mut Graph, probs: &Tensor, col: usize) -> Result<Tensor> {
    let sel = g.constant(
        if col == 0 {
            vec![1.0, 0.0]
        } else {
            vec![0.0, 1.0]
        },
        &[2, 1],
    )?;
    Ok(g.matmul(probs, &sel)?)
}

/// `-Σ [a·ln s + b·ln(1-s)]` with `s` clamped to `[ε, 1-ε]`; `a`, `b` are
/// per-cell constant weights.
fn weighted_bce(g: &mut Graph, s: &Tensor, a: Vec<f64>, b: Vec<f64>, eps: f64) -> Result<Tensor> {
    let n = a.len();
    let s = g.clamp(s, eps, 1.0 - eps)?;
    let ls = g.log(&s)?;
    let one_minus = g.scale(&s, -1.0)?;
    let one_minus = g.add_scalar(&one_minus, 1.0)?;
    let l1s = g.log(&one_minus)?;
    let a = g.constant(a, &[n, 1])?;
    let b = g.constant(b, &[n, 1])?;
    let ta = g.mul(&ls, &a)?;
    let tb = g.mul(&l1s, &b)?;
    let t = g.add(&ta, &tb)?;
    let total = g.sum_all(&t)?;
    Ok(g.scale(&total, -1.0)?)
}

/// Per-cell targets for one synthesized sample, at patch resolution.
#[derive(Debug, Clone)]
pub struct CellTargets {
    /// Max-pooled abnormality mask.
    pub abnormal: Mask,
    /// Complement of `abnormal`.
    pub normal: Mask,
    /// Cells contributing to the anomaly loss.
    pub region: Mask,
}

/// `(L_ano_normal, L_ano_abnormal)` recorded on `g`.
pub fn anomaly_loss_tensors(
    g: &mut Graph,
    probs: &Tensor,
    targets: &CellTargets,
    eps: f64,
) -> Result<(Tensor, Tensor)> {
    if !targets.region.any() {
        return Err(Error::InvalidArgument(
            "anomaly loss region is empty".into(),
        ));
    }
    let w = |b: bool| if b { 1.0 } else { 0.0 };
    let weights = |target: &Mask| -> (Vec<f64>, Vec<f64>) {
        target
            .data
            .iter()
            .zip(&targets.region.data)
            .map(|(&m, &r)| (w(r && m), w(r && !m)))
            .unzip()
    };
    let sn = column(g, probs, 0)?;
    let sa = column(g, probs, 1)?;
    let (an, bn) = weights(&targets.normal);
    let (aa, ba) = weights(&targets.abnormal);
    let l_normal = weighted_bce(g, &sn, an, bn, eps)?;
    let l_abnormal = weighted_bce(g, &sa, aa, ba, eps)?;
    Ok((l_normal, l_abnormal))
}

/// Bernoulli KL `Σ KL(p_i ‖ q_i)` over all cells, `p` constant, `q` live.
fn kl_tensor(g: &mut Graph, q: &Tensor, p: &[f64], eps: f64) -> Result<Tensor> {
    let p: Vec<f64> = p.iter().map(|v| v.clamp(eps, 1.0 - eps)).collect();
    let neg_entropy: f64 = p
        .iter()
        .map(|&v| v * v.ln() + (1.0 - v) * (1.0 - v).ln())
        .sum();
    let a = p.clone();
    let b = p.iter().map(|v| 1.0 - v).collect();
    let cross = weighted_bce(g, q, a, b, eps)?;
    Ok(g.add_scalar(&cross, neg_entropy)?)
}

/// `(L_div_normal, L_div_abnormal)` recorded on `g`, against the meta maps.
pub fn divergence_loss_tensors(
    g: &mut Graph,
    probs: &Tensor,
    meta: &ScoreMapPair,
    eps: f64,
) -> Result<(Tensor, Tensor)> {
    let sn = column(g, probs, 0)?;
    let sa = column(g, probs, 1)?;
    let dn = kl_tensor(g, &sn, &meta.normal.data, eps)?;
    let da = kl_tensor(g, &sa, &meta.abnormal.data, eps)?;
    Ok((dn, da))
}

fn probs_constant(g: &mut Graph, s: &ScoreMapPair) -> Result<Tensor> {
    let data: Vec<f64> = s
        .normal
        .data
        .iter()
        .zip(&s.abnormal.data)
        .flat_map(|(&n, &a)| [n, a])
        .collect();
    Ok(g.constant(data, &[s.normal.len(), 2])?)
}

/// Anomaly losses of plain score maps against cell targets.
pub fn anomaly_loss(scores: &ScoreMapPair, targets: &CellTargets, eps: f64) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let p = probs_constant(&mut g, scores)?;
    let (n, a) = anomaly_loss_tensors(&mut g, &p, targets, eps)?;
    Ok((n.item(), a.item()))
}

/// Divergence losses of live score maps against meta score maps.
pub fn divergence_loss(live: &ScoreMapPair, meta: &ScoreMapPair, eps: f64) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let p = probs_constant(&mut g, live)?;
    let (n, a) = divergence_loss_tensors(&mut g, &p, meta, eps)?;
    Ok((n.item(), a.item()))
}

// ---------------------------------------------------------------------------
// Gradient calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub grad: Vec<f64>,
    /// Whether the conflict gate fired.
    pub gated: bool,
    /// Cosine between the two inputs (0 when either is zero).
    pub cosine: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// When `cos(g_ano, g_div) < 0`, returns `g_ano - λ <g_ano, ĝ> ĝ` with
/// `ĝ = g_div / |g_div|`; otherwise `g_ano` unchanged.
pub fn calibrate_gradient(g_ano: &[f64], g_div: &[f64], lambda: f64) -> Result<Calibrated> {
    if g_ano.len() != g_div.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient lengths differ ({} vs {})",
            g_ano.len(),
            g_div.len()
        )));
    }
    if let Some(bad) = g_ano.iter().chain(g_div).find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite gradient entry {bad}"
        )));
    }
    let na = dot(g_ano, g_ano).sqrt();
    let nd = dot(g_div, g_div).sqrt();
    let pass = |cosine| Calibrated {
        grad: g_ano.to_vec(),
        gated: false,
        cosine,
    };
    if nd == 0.0 || na == 0.0 {
        return Ok(pass(0.0));
    }
    let inner = dot(g_ano, g_div);
    let cosine = inner / (na * nd);
    if cosine >= 0.0 {
        return Ok(pass(cosine));
    }
    let coeff = lambda * inner / (nd * nd);
    let grad = g_ano
        .iter()
        .zip(g_div)
        .map(|(a, d)| a - coeff * d)
        .collect();
    Ok(Calibrated {
        grad,
        gated: true,
        cosine,
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One step's diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub meta_epoch: usize,
    pub synth_seed: u64,
    pub ano_normal: f64,
    pub ano_abnormal: f64,
    pub div_normal: f64,
    pub div_abnormal: f64,
    pub cos_normal: f64,
    pub cos_abnormal: f64,
    pub gated_normal: bool,
    pub gated_abnormal: bool,
}

/// One encoded training item with its cell targets.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub features: FeatureMap,
    pub targets: CellTargets,
    pub synth_seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub prompts: PromptPair,
    pub meta: MetaPromptPair,
    pub step: usize,
    pub meta_epoch: usize,
    pub history: Vec<StepRecord>,
    /// Most recent batch, kept for post-substitution checks.
    pub last_batch: Vec<BatchItem>,
}

/// Per-branch gradients of one loss, flattened as `general ‖ suffix`.
struct BranchGrads {
    normal: Vec<f64>,
    abnormal: Vec<f64>,
}

fn flat(grads: &GradMap, t: &Option<Tensor>) -> Vec<f64> {
    match t {
        Some(t) => grads
            .get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]),
        None => Vec::new(),
    }
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub prompt_config: PromptConfig,
    pub encoder: &'a ImageEncoder,
    pub text: &'a TextEncoder,
    pub normals: Vec<Sample>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        prompt_config: PromptConfig,
        encoder: &'a ImageEncoder,
        text: &'a TextEncoder,
        normals: Vec<Sample>,
    ) -> Result<Self> {
        config.validate()?;
        prompt_config.validate()?;
        if normals.is_empty() {
            return Err(Error::InvalidArgument("no normal training samples".into()));
        }
        if let Some(s) = normals.iter().find(|s| s.label != 0) {
            return Err(Error::InvalidArgument(format!(
                "training sample {} ({}) is labeled anomalous",
                s.seed, s.class_name
            )));
        }
        Ok(Self {
            config,
            prompt_config,
            encoder,
            text,
            normals,
        })
    }

    fn patch(&self) -> usize {
        self.encoder.config().patch_size
    }

    fn region_cells(&self, object: &Mask) -> Mask {
        let cells = object.max_pool(self.patch());
        match self.config.loss_region {
            LossRegion::ObjectOnly => cells,
            LossRegion::AllPixels => Mask::filled(cells.height, cells.width, true),
        }
    }

    /// Synthesizes and encodes one item from `sample`.
    pub fn make_item(&self, sample: &Sample, synth_seed: u64) -> Result<BatchItem> {
        let object = estimate_object_mask(sample, self.config.object_mask_mode);
        let synth = synthesize_anomaly(
            sample,
            &object,
            self.config.sigma,
            self.config.region_mode,
            synth_seed,
        )?;
        let features = self.encoder.encode(&synth.image)?;
        let abnormal = synth.abnormal_mask.max_pool(self.patch());
        Ok(BatchItem {
            features,
            targets: CellTargets {
                normal: abnormal.complement(),
                abnormal,
                region: self.region_cells(&object),
            },
            synth_seed,
        })
    }

    fn mean_direction(cells: &[(&FeatureMap, &Mask)]) -> Result<Vec<f64>> {
        let dim = cells.first().map(|(f, _)| f.dim).unwrap_or(0);
        let mut acc = vec![0.0; dim];
        for (f, m) in cells {
            for (p, &on) in m.data.iter().enumerate() {
                if on {
                    for (a, v) in acc.iter_mut().zip(&f.cells[p * dim..(p + 1) * dim]) {
                        *a += v;
                    }
                }
            }
        }
        let n = dot(&acc, &acc).sqrt();
        if !(n > 0.0) {
            return Err(Error::InvalidArgument(
                "meta anchor has no supporting cells".into(),
            ));
        }
        Ok(acc.iter().map(|v| v / n).collect())
    }

    /// Initial anchors: the mean clean object feature (normal) and the mean
    /// feature of synthesized-anomaly cells (abnormal), both unit-normalized.
    pub fn initial_meta(&self) -> Result<MetaPromptPair> {
        let mut clean = Vec::new();
        let mut synth = Vec::new();
        for (i, s) in self.normals.iter().enumerate() {
            let object = estimate_object_mask(s, self.config.object_mask_mode);
            clean.push((
                self.encoder.encode(&s.image)?,
                object.max_pool(self.patch()),
            ));
            let item =
                self.make_item(s, seed::derive(self.config.seed, &format!("meta-init/{i}")))?;
            synth.push(item);
        }
        let normal = Self::mean_direction(&clean.iter().map(|(f, m)| (f, m)).collect::<Vec<_>>())?;
        let abnormal = Self::mean_direction(
            &synth
                .iter()
                .map(|it| (&it.features, &it.targets.abnormal))
                .collect::<Vec<_>>(),
        )?;
        Ok(MetaPromptPair {
            normal,
            abnormal,
            epoch: 0,
        })
    }

    pub fn init_state(&self, class_name: &str) -> Result<TrainState> {
        Ok(TrainState {
            prompts: PromptPair::init(class_name, &self.prompt_config, self.config.seed),
            meta: self.initial_meta()?,
            step: 0,
            meta_epoch: 0,
            history: Vec::new(),
            last_batch: Vec::new(),
        })
    }

    fn batch(&self, step: usize) -> Result<Vec<BatchItem>> {
        (0..self.config.batch_size)
            .map(|b| {
                let sample =
                    &self.normals[(step * self.config.batch_size + b) % self.normals.len()];
                let s = seed::derive(self.config.seed, &format!("synth/{step}/{b}"));
                self.make_item(sample, s)
            })
            .collect()
    }

    /// Meta score maps for each batch item.
    fn meta_scores(&self, meta: &MetaPromptPair, batch: &[BatchItem]) -> Result<Vec<ScoreMapPair>> {
        batch
            .iter()
            .map(|it| {
                score_maps(
                    &it.features,
                    &meta.normal,
                    &meta.abnormal,
                    self.prompt_config.temperature,
                )
            })
            .collect()
    }

    /// Builds all four losses on one graph and runs a separate reverse sweep
    /// for each, in the order anomaly-normal, anomaly-abnormal,
    /// divergence-normal, divergence-abnormal.
    fn losses_and_grads(
        &self,
        prompts: &PromptPair,
        batch: &[BatchItem],
        meta: &[ScoreMapPair],
    ) -> Result<([f64; 4], Vec<BranchGrads>)> {
        let mut g = Graph::new();
        let p = prompts.attach(&mut g, true)?;
        let (tn, ta) = p.encode(&mut g, self.text)?;
        let eps = self.config.epsilon;
        let mut totals: Option<[Tensor; 4]> = None;
        for (it, m) in batch.iter().zip(meta) {
            let f = &it.features;
            let feats = g.constant(f.cells.clone(), &[f.len(), f.dim])?;
            let s = score_tensors(&mut g, &feats, &tn, &ta, self.prompt_config.temperature)?;
            let (an, aa) = anomaly_loss_tensors(&mut g, &s.probs, &it.targets, eps)?;
            let (dn, da) = divergence_loss_tensors(&mut g, &s.probs, m, eps)?;
            totals = Some(match totals {
                None => [an, aa, dn, da],
                Some([x0, x1, x2, x3]) => [
                    g.add(&x0, &an)?,
                    g.add(&x1, &aa)?,
                    g.add(&x2, &dn)?,
                    g.add(&x3, &da)?,
                ],
            });
        }
        let totals = totals.expect("non-empty batch");
        let values = [
            totals[0].item(),
            totals[1].item(),
            totals[2].item(),
            totals[3].item(),
        ];
        let refs: Vec<&Tensor> = totals.iter().collect();
        let grads = g
            .backward_many(&refs)?
            .into_iter()
            .map(|grads| {
                let general = flat(&grads, &p.general);
                let mut normal = general.clone();
                normal.extend(flat(&grads, &p.normal));
                let mut abnormal = general;
                abnormal.extend(flat(&grads, &p.abnormal));
                BranchGrads { normal, abnormal }
            })
            .collect();
        Ok((values, grads))
    }

    /// One calibrated gradient-descent step.
    pub fn train_step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let batch = self.batch(state.step)?;
        let meta = self.meta_scores(&state.meta, &batch)?;
        let synth_seed = batch[0].synth_seed;
        let abort = |reason: String| Error::Numerical {
            step: state.step,
            seed: synth_seed,
            reason,
        };

        let (values, grads) = self.losses_and_grads(&state.prompts, &batch, &meta)?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(abort(format!("non-finite loss {v}")));
        }
        let [ano_n, ano_a, div_n, div_a]: [BranchGrads; 4] =
            grads.try_into().ok().expect("four sweeps");

        let lambda = self.config.lambda;
        let cal_n = calibrate_gradient(&ano_n.normal, &div_n.normal, lambda)
            .map_err(|e| abort(e.to_string()))?;
        let cal_a = calibrate_gradient(&ano_a.abnormal, &div_a.abnormal, lambda)
            .map_err(|e| abort(e.to_string()))?;

        let eta = self.config.learning_rate;
        let ng = state.prompts.general.len();
        let p = &mut state.prompts;
        for (i, v) in p.general.iter_mut().enumerate() {
            *v -= eta * (cal_n.grad[i] + cal_a.grad[i]);
        }
        for (v, d) in p.normal.iter_mut().zip(&cal_n.grad[ng..]) {
            *v -= eta * d;
        }
        for (v, d) in p.abnormal.iter_mut().zip(&cal_a.grad[ng..]) {
            *v -= eta * d;
        }
        if p.general
            .iter()
            .chain(&p.normal)
            .chain(&p.abnormal)
            .any(|v| !v.is_finite())
        {
            return Err(abort("non-finite prompt parameter after update".into()));
        }

        let record = StepRecord {
            step: state.step,
            meta_epoch: state.meta_epoch,
            synth_seed,
            ano_normal: values[0],
            ano_abnormal: values[1],
            div_normal: values[2],
            div_abnormal: values[3],
            cos_normal: cal_n.cosine,
            cos_abnormal: cal_a.cosine,
            gated_normal: cal_n.gated,
            gated_abnormal: cal_a.gated,
        };
        log::debug!(
            "step {} ano {:.4}/{:.4} div {:.4}/{:.4} gated {}/{}",
            record.step,
            record.ano_normal,
            record.ano_abnormal,
            record.div_normal,
            record.div_abnormal,
            record.gated_normal,
            record.gated_abnormal
        );
        state.history.push(record.clone());
        state.step += 1;
        state.last_batch = batch;
        Ok(record)
    }

    pub fn train_meta_epoch(&self, mut state: TrainState) -> Result<TrainState> {
        for _ in 0..self.config.steps_per_meta_epoch {
            self.train_step(&mut state)?;
        }
        Ok(state)
    }

    /// Installs the current prompts' encodings as the new anchor.
    pub fn substitute_meta(&self, mut state: TrainState) -> Result<TrainState> {
        let (normal, abnormal) = state.prompts.embed(self.text)?;
        state.meta_epoch += 1;
        state.meta = MetaPromptPair {
            normal,
            abnormal,
            epoch: state.meta_epoch,
        };
        Ok(state)
    }

    /// Divergence between live prompts and the anchor on `batch`.
    pub fn divergence_on(&self, state: &TrainState, batch: &[BatchItem]) -> Result<(f64, f64)> {
        let (tn, ta) = state.prompts.embed(self.text)?;
        let tau = self.prompt_config.temperature;
        let (mut dn, mut da) = (0.0, 0.0);
        for it in batch {
            let live = score_maps(&it.features, &tn, &ta, tau)?;
            let meta = score_maps(&it.features, &state.meta.normal, &state.meta.abnormal, tau)?;
            let (n, a) = divergence_loss(&live, &meta, self.config.epsilon)?;
            dn += n;
            da += a;
        }
        Ok((dn, da))
    }

    /// Runs every meta-epoch, substituting the anchor between them.
    /// `on_substitute` sees the state right after each substitution.
    pub fn run_with(
        &self,
        class_name: &str,
        mut on_substitute: impl FnMut(&Self, &TrainState) -> Result<()>,
    ) -> Result<TrainState> {
        let mut state = self.init_state(class_name)?;
        for epoch in 0..self.config.meta_epochs {
            state = self.train_meta_epoch(state)?;
            if epoch + 1 < self.config.meta_epochs {
                state = self.substitute_meta(state)?;
                on_substitute(self, &state)?;
            }
        }
        Ok(state)
    }

    pub fn run(&self, class_name: &str) -> Result<TrainState> {
        self.run_with(class_name, |_, _| Ok(()))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const PROMPTS_FILE: &str = "prompts.bin";
pub const STATE_FILE: &str = "train_state.json";
pub const HISTORY_FILE: &str = "loss_history.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSidecar {
    pub class_name: String,
    pub step: usize,
    pub meta_epoch: usize,
    pub meta_normal: Vec<f64>,
    pub meta_abnormal: Vec<f64>,
    pub gated_steps_normal: usize,
    pub gated_steps_abnormal: usize,
    /// Echo of the full run configuration.
    pub config: serde_json::Value,
}

pub fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from(
        "step,meta_epoch,synth_seed,ano_normal,ano_abnormal,div_normal,div_abnormal,cos_normal,cos_abnormal,gated_normal,gated_abnormal\n",
    );
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
            r.step,
            r.meta_epoch,
            r.synth_seed,
            r.ano_normal,
            r.ano_abnormal,
            r.div_normal,
            r.div_abnormal,
            r.cos_normal,
            r.cos_abnormal,
            r.gated_normal as u8,
            r.gated_abnormal as u8
        );
    }
    out
}

pub fn save_checkpoint(
    dir: &Path,
    state: &TrainState,
    prompt_meta: PromptFileMeta,
    config_echo: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.prompts.save(&dir.join(PROMPTS_FILE), prompt_meta)?;
    let sidecar = StateSidecar {
        class_name: state.prompts.class_name.clone(),
        step: state.step,
        meta_epoch: state.meta_epoch,
        meta_normal: state.meta.normal.clone(),
        meta_abnormal: state.meta.abnormal.clone(),
        gated_steps_normal: state.history.iter().filter(|r| r.gated_normal).count(),
        gated_steps_abnormal: state.history.iter().filter(|r| r.gated_abnormal).count(),
        config: config_echo,
    };
    let p = dir.join(STATE_FILE);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(HISTORY_FILE);
    fs::write(&p, history_csv(&state.history)).map_err(|e| Error::io(&p, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(PromptPair, StateSidecar)> {
    let (prompts, _) = PromptPair::load(&dir.join(PROMPTS_FILE))?;
    let p = dir.join(STATE_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let sidecar = serde_json::from_str(&text).map_err(|e| Error::corrupt(&p, e.to_string()))?;
    Ok((prompts, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn pair(normal: Vec<f64>) -> ScoreMapPair {
        let n = normal.len();
        let abnormal: Vec<f64> = normal.iter().map(|v| 1.0 - v).collect();
        ScoreMapPair {
            normal: Grid::from_vec(1, n, normal),
            abnormal: Grid::from_vec(1, n, abnormal),
            raw_normal: Grid::filled(1, n, 0.0),
            raw_abnormal: Grid::filled(1, n, 0.0),
            temperature: 1.0,
        }
    }

    fn targets(abnormal: Vec<bool>, region: Vec<bool>) -> CellTargets {
        let n = abnormal.len();
        let abnormal = Grid::from_vec(1, n, abnormal);
        CellTargets {
            normal: abnormal.complement(),
            abnormal,
            region: Grid::from_vec(1, n, region),
        }
    }

    #[test]
    fn half_probabilities_cost_ln2_per_region_cell() {
        let t = targets(
            vec![true, false, false, true, false],
            vec![true, true, true, false, true],
        );
        let (n, a) = anomaly_loss(&pair(vec![0.5; 5]), &t, 1e-6).unwrap();
        assert!((n - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((a - n).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let eps = 1e-6;
        let t = targets(vec![true, false, false], vec![true; 3]);
        let (n, _) = anomaly_loss(&pair(vec![0.0, 1.0, 1.0]), &t, eps).unwrap();
        assert!(n >= 0.0 && n < 2.0 * eps * 3.0, "{n}");
    }

    #[test]
    fn empty_region_is_rejected() {
        let t = targets(vec![true, false], vec![false, false]);
        assert!(anomaly_loss(&pair(vec![0.5; 2]), &t, 1e-6).is_err());
    }

    #[test]
    fn kl_identity_and_closed_form() {
        let eps = 1e-6;
        let p = pair(vec![0.5, 0.5]);
        assert_eq!(divergence_loss(&p, &p, eps).unwrap(), (0.0, 0.0));
        let e = std::f64::consts::E;
        let q = pair(vec![e / (e + 1.0); 2]);
        let (n, a) = divergence_loss(&q, &p, eps).unwrap();
        let per_cell = 0.5 * (0.5 / (e / (e + 1.0))).ln() + 0.5 * (0.5 / (1.0 / (e + 1.0))).ln();
        assert!((per_cell - 0.1201).abs() < 1e-4);
        assert!((n - 2.0 * per_cell).abs() < 1e-9);
        assert!((a - n).abs() < 1e-9);
        let (swapped, _) = divergence_loss(&p, &q, eps).unwrap();
        assert!((swapped - n).abs() > 1e-4);
    }

    #[test]
    fn calibration_worked_examples() {
        let c = calibrate_gradient(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert_eq!(c.grad, vec![1.0, 0.0]);
        assert!(!c.gated);
        let c = calibrate_gradient(&[1.0, 0.0], &[-1.0, 0.0], 1.0).unwrap();
        assert_eq!(c.grad, vec![0.0, 0.0]);
        let c = calibrate_gradient(&[1.0, 1.0], &[-1.0, 0.0], 1.0).unwrap();
        assert_eq!(c.grad, vec![0.0, 1.0]);
        assert!(c.gated);
    }

    #[test]
    fn calibration_rejects_nan_and_passes_zero_divergence() {
        assert!(calibrate_gradient(&[f64::NAN], &[1.0], 1.0).is_err());
        let c = calibrate_gradient(&[1.0, 2.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(c.grad, vec![1.0, 2.0]);
        assert!(!c.gated);
    }

    #[test]
    fn lambda_zero_is_identity() {
        let c = calibrate_gradient(&[1.0, 1.0], &[-1.0, 0.2], 0.0).unwrap();
        assert_eq!(c.grad, vec![1.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lambda: 1.5,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                epsilon: 0.1,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
