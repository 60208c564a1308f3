//! Shared fixtures for the integration tests and the acceptance runner.

#![allow(dead_code)]

use metaprompt::config::RunConfig;
use metaprompt::corpus::gen_normal;
use metaprompt::encoder::ImageEncoder;
use metaprompt::eval::build_encoders;
use metaprompt::prompt::{score_maps, score_tensors, PromptPair, TextEncoder};
use metaprompt::seed;
use metaprompt::tensor::{finite_diff_check, Graph, Tensor};
use metaprompt::trainer::{anomaly_loss_tensors, divergence_loss_tensors, BatchItem, Trainer};
use metaprompt::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normals(seed_value: u64, tag: &str, n: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed_value, tag);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Values with magnitude drawn from `ranges`, random sign; keeps points off
/// the kinks of relu and clamp.
fn signed_in(seed_value: u64, n: usize, ranges: &[(f64, f64)]) -> Vec<f64> {
    let mut rng = seed::rng(seed_value, "signed");
    (0..n)
        .map(|_| {
            let (lo, hi) = ranges[rng.gen_range(0..ranges.len())];
            let m: f64 = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

type Unary = Box<dyn Fn(&mut Graph, &Tensor) -> Result<Tensor>>;

/// Reduces `y` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct amount.
fn weighted_sum(g: &mut Graph, y: &Tensor, seed_value: u64) -> Result<Tensor> {
    let w = g.constant(normals(seed_value, "weights", y.numel()), y.shape())?;
    let p = g.mul(y, &w)?;
    Ok(g.sum_all(&p)?)
}

pub struct PrimitiveCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub positive: bool,
    pub kink_at_zero: bool,
    pub op: fn(&mut Graph, &Tensor, u64) -> Result<Tensor>,
}

fn c(g: &mut Graph, s: u64, tag: &str, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(g.constant(normals(s, tag, n), shape)?)
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    fn case(
        name: &'static str,
        shape: &[usize],
        op: fn(&mut Graph, &Tensor, u64) -> Result<Tensor>,
    ) -> PrimitiveCase {
        PrimitiveCase {
            name,
            shape: shape.to_vec(),
            positive: false,
            kink_at_zero: false,
            op,
        }
    }
    let mut cases = vec![
        case("add", &[3, 4], |g, x, s| {
            let b = c(g, s, "b", &[3, 4])?;
            Ok(g.add(x, &b)?)
        }),
        case("add-broadcast", &[4], |g, x, s| {
            let a = c(g, s, "a", &[3, 4])?;
            Ok(g.add(&a, x)?)
        }),
        case("sub", &[3, 4], |g, x, s| {
            let b = c(g, s, "b", &[4])?;
            Ok(g.sub(&b, x)?)
        }),
        case("mul", &[3, 4], |g, x, s| {
            let b = c(g, s, "b", &[3, 1])?;
            Ok(g.mul(x, &b)?)
        }),
        case("mul-self", &[5], |g, x, _| Ok(g.mul(x, x)?)),
        case("matmul-left", &[3, 4], |g, x, s| {
            let b = c(g, s, "b", &[4, 2])?;
            Ok(g.matmul(x, &b)?)
        }),
        case("matmul-right", &[4, 2], |g, x, s| {
            let a = c(g, s, "a", &[3, 4])?;
            Ok(g.matmul(&a, x)?)
        }),
        case("sum-axis0", &[3, 4], |g, x, _| Ok(g.sum(x, 0)?)),
        case("mean-axis1", &[3, 4], |g, x, _| Ok(g.mean(x, 1)?)),
        case("sum-all", &[2, 3], |g, x, _| Ok(g.sum_all(x)?)),
        case("concat", &[2, 3], |g, x, s| {
            let b = c(g, s, "b", &[2, 2])?;
            Ok(g.concat(&[x, &b, x], 1)?)
        }),
        case("reshape", &[2, 6], |g, x, _| Ok(g.reshape(x, &[3, 4])?)),
        case("transpose", &[2, 5], |g, x, _| Ok(g.transpose(x)?)),
        case("exp", &[6], |g, x, _| Ok(g.exp(x)?)),
        case("gelu", &[8], |g, x, _| Ok(g.gelu(x)?)),
        case("scale", &[4], |g, x, _| Ok(g.scale(x, -2.5)?)),
        case("add-scalar", &[4], |g, x, _| Ok(g.add_scalar(x, 0.75)?)),
        case("clamp", &[8], |g, x, _| Ok(g.clamp(x, -0.1, 0.1)?)),
        case("softmax-axis1", &[3, 5], |g, x, _| Ok(g.softmax(x, 1)?)),
        case("softmax-axis0", &[3, 5], |g, x, _| Ok(g.softmax(x, 0)?)),
        case("layer-norm", &[3, 6], |g, x, _| Ok(g.layer_norm(x)?)),
        case("l2-normalize", &[3, 4], |g, x, _| Ok(g.l2_normalize(x, 1)?)),
        case("masked-fill", &[3, 3], |g, x, _| {
            let m = [0.0, -1e30, 0.0, 0.0, 0.0, -1e30, -1e30, 0.0, 0.0];
            let y = g.masked_fill(x, &m)?;
            Ok(g.softmax(&y, 1)?)
        }),
    ];
    cases.push(PrimitiveCase {
        name: "log",
        shape: vec![6],
        positive: true,
        kink_at_zero: false,
        op: |g, x, _| Ok(g.log(x)?),
    });
    cases.push(PrimitiveCase {
        name: "relu",
        shape: vec![8],
        positive: false,
        kink_at_zero: true,
        op: |g, x, _| Ok(g.relu(x)?),
    });
    cases
}

/// Relative gradient error of one primitive case at a seeded point.
pub fn primitive_error(case: &PrimitiveCase, seed_value: u64) -> Result<f64> {
    let n: usize = case.shape.iter().product();
    let at: Vec<f64> = if case.positive {
        normals(seed_value, "point", n)
            .iter()
            .map(|v| v.abs() + 0.3)
            .collect()
    } else if case.name == "clamp" {
        signed_in(seed_value, n, &[(0.01, 0.08), (0.12, 0.5)])
    } else if case.kink_at_zero {
        signed_in(seed_value, n, &[(0.2, 1.5)])
    } else {
        normals(seed_value, "point", n)
    };
    let op = case.op;
    let f: Unary = Box::new(move |g, x| {
        let y = op(g, x, seed_value)?;
        weighted_sum(g, &y, seed_value)
    });
    finite_diff_check(f, &at, &case.shape, 1e-5)
}

/// A frozen encoder, text tower and one encoded synthesized item.
pub struct LossFixture {
    pub config: RunConfig,
    pub encoder: ImageEncoder,
    pub text: TextEncoder,
    pub prompts: PromptPair,
    pub item: BatchItem,
    pub meta_normal: Vec<f64>,
    pub meta_abnormal: Vec<f64>,
}

pub fn loss_fixture(seed_value: u64) -> Result<LossFixture> {
    let config = RunConfig::default().with_seed(seed_value);
    let (encoder, text) = build_encoders(&config, 32, 32)?;
    let sample = gen_normal("disk", seed_value)?;
    let trainer = Trainer::new(
        config.train,
        config.prompt,
        &encoder,
        &text,
        vec![sample.clone()],
    )?;
    let item = trainer.make_item(&sample, seed::derive(seed_value, "fixture"))?;
    let meta = trainer.initial_meta()?;
    let prompts = PromptPair::init("disk", &config.prompt, seed_value);
    Ok(LossFixture {
        config,
        encoder,
        text,
        prompts,
        item,
        meta_normal: meta.normal,
        meta_abnormal: meta.abnormal,
    })
}

#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    AnomalyNormal,
    AnomalyAbnormal,
    DivergenceNormal,
    DivergenceAbnormal,
}

#[derive(Clone, Copy, Debug)]
pub enum PromptPart {
    General,
    Normal,
    Abnormal,
}

/// Relative gradient error of one training loss with respect to one prompt
/// part, through the frozen text encoder and the score maps.
pub fn loss_error(fx: &LossFixture, loss: LossKind, part: PromptPart) -> Result<f64> {
    let (at, rows) = match part {
        PromptPart::General => (fx.prompts.general.clone(), fx.prompts.n_general),
        PromptPart::Normal => (fx.prompts.normal.clone(), fx.prompts.n_normal),
        PromptPart::Abnormal => (fx.prompts.abnormal.clone(), fx.prompts.n_abnormal),
    };
    let meta = score_maps(
        &fx.item.features,
        &fx.meta_normal,
        &fx.meta_abnormal,
        fx.config.prompt.temperature,
    )?;
    let f = |g: &mut Graph, x: &Tensor| -> Result<Tensor> {
        let mut p = fx.prompts.attach(g, false)?;
        match part {
            PromptPart::General => p.general = Some(x.clone()),
            PromptPart::Normal => p.normal = Some(x.clone()),
            PromptPart::Abnormal => p.abnormal = Some(x.clone()),
        }
        let (tn, ta) = p.encode(g, &fx.text)?;
        let feat = &fx.item.features;
        let cells = g.constant(feat.cells.clone(), &[feat.len(), feat.dim])?;
        let s = score_tensors(g, &cells, &tn, &ta, fx.config.prompt.temperature)?;
        let eps = fx.config.train.epsilon;
        Ok(match loss {
            LossKind::AnomalyNormal => anomaly_loss_tensors(g, &s.probs, &fx.item.targets, eps)?.0,
            LossKind::AnomalyAbnormal => {
                anomaly_loss_tensors(g, &s.probs, &fx.item.targets, eps)?.1
            }
            LossKind::DivergenceNormal => divergence_loss_tensors(g, &s.probs, &meta, eps)?.0,
            LossKind::DivergenceAbnormal => divergence_loss_tensors(g, &s.probs, &meta, eps)?.1,
        })
    };
    finite_diff_check(f, &at, &[rows, fx.prompts.token_dim], 1e-6)
}
