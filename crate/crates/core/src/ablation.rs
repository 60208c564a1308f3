//! Ablation suites: runs that share seeds and differ in one configuration axis.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{generate, Corpus, CorpusSpec, ToyClass};
use crate::encoder::AttentionVariant;
use crate::error::{Error, Result};
use crate::eval::{build_encoders, train_and_evaluate};
use crate::oagm::RegionMode;

/// Tolerance for the weak ordering of the attention suite.
pub const ATTENTION_TOLERANCE: f64 = 0.01;
/// Required gain of λ = 1 over λ = 0.
pub const LAMBDA_MARGIN: f64 = 0.03;
/// Required gain of object-only over whole-image synthesis on object classes.
pub const OAGM_OBJECT_MARGIN: f64 = 0.02;
/// Maximum allowed difference between the synthesis arms on texture classes.
pub const OAGM_TEXTURE_BAND: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Lambda,
    Oagm,
    Attention,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Suite::Lambda),
            "oagm" => Ok(Suite::Oagm),
            "attention" => Ok(Suite::Attention),
            other => Err(Error::Config(format!(
                "unknown suite '{other}'; expected lambda, oagm or attention"
            ))),
        }
    }
}

/// One configuration under comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: RunConfig,
}

/// The arms of `suite`, each a copy of `base` with one axis changed.
pub fn arms(suite: Suite, base: &RunConfig) -> Vec<Arm> {
    let arm = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut config = *base;
        f(&mut config);
        Arm {
            name: name.to_string(),
            config,
        }
    };
    match suite {
        Suite::Lambda => [0.0, 0.5, 1.0]
            .iter()
            .map(|&l| arm(&format!("lambda={l}"), &|c| c.train.lambda = l))
            .collect(),
        Suite::Oagm => vec![
            arm("object-only", &|c| {
                c.train.region_mode = RegionMode::SubRegion
            }),
            arm("whole-image", &|c| {
                c.train.region_mode = RegionMode::WholeImage
            }),
        ],
        Suite::Attention => [
            AttentionVariant::VvAtt,
            AttentionVariant::QkLaa,
            AttentionVariant::VvLaa,
        ]
        .iter()
        .map(|&v| arm(v.as_str(), &|c| c.encoder.variant = v))
        .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub class: String,
    pub auroc: f64,
}

/// A directional claim evaluated on the arm means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Observed gap (left minus right).
    pub gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
    pub checks: Vec<Check>,
}

fn is_texture(class: &str) -> bool {
    class
        .parse::<ToyClass>()
        .map(|c| c.is_texture())
        .unwrap_or(false)
}

impl AblationTable {
    /// Builds a table from finished rows and evaluates the suite's checks.
    pub fn from_rows(suite: Suite, rows: Vec<AblationRow>) -> Self {
        let mut table = Self {
            suite,
            rows,
            checks: Vec::new(),
        };
        table.evaluate_checks();
        table
    }

    /// Mean AUROC of `arm` over rows whose class satisfies `keep`.
    pub fn arm_mean(&self, arm: &str, keep: impl Fn(&str) -> bool) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm && keep(&r.class))
            .map(|r| r.auroc)
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn arm_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.arm) {
                names.push(r.arm.clone());
            }
        }
        names
    }

    fn evaluate_checks(&mut self) {
        let all = |_: &str| true;
        let gap = |t: &Self, a: &str, b: &str, keep: &dyn Fn(&str) -> bool| {
            t.arm_mean(a, keep) - t.arm_mean(b, keep)
        };
        self.checks = match self.suite {
            Suite::Lambda => {
                let g = gap(self, "lambda=1", "lambda=0", &all);
                vec![Check {
                    name: format!("lambda=1 - lambda=0 >= {LAMBDA_MARGIN}"),
                    gap: g,
                    pass: g >= LAMBDA_MARGIN,
                }]
            }
            Suite::Oagm => {
                let objects = |c: &str| !is_texture(c);
                let g_obj = gap(self, "object-only", "whole-image", &objects);
                let g_tex = gap(self, "object-only", "whole-image", &is_texture);
                let mut checks = vec![Check {
                    name: format!(
                        "object classes: object-only - whole-image >= {OAGM_OBJECT_MARGIN}"
                    ),
                    gap: g_obj,
                    pass: g_obj >= OAGM_OBJECT_MARGIN,
                }];
                if !g_tex.is_nan() {
                    checks.push(Check {
                        name: format!(
                            "texture classes: |object-only - whole-image| < {OAGM_TEXTURE_BAND}"
                        ),
                        gap: g_tex,
                        pass: g_tex.abs() < OAGM_TEXTURE_BAND,
                    });
                }
                checks
            }
            Suite::Attention => {
                let g1 = gap(self, "vv-laa", "qk-laa", &all);
                let g2 = gap(self, "qk-laa", "vv-att", &all);
                vec![
                    Check {
                        name: format!("vv-laa - qk-laa >= -{ATTENTION_TOLERANCE}"),
                        gap: g1,
                        pass: g1 >= -ATTENTION_TOLERANCE,
                    },
                    Check {
                        name: format!("qk-laa - vv-att >= -{ATTENTION_TOLERANCE}"),
                        gap: g2,
                        pass: g2 >= -ATTENTION_TOLERANCE,
                    },
                ]
            }
        };
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// `arm,seed,class,auroc` rows, then per-arm means and the checks as
    /// `#`-prefixed trailer lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,class,auroc\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.arm, r.seed, r.class, r.auroc);
        }
        for arm in self.arm_names() {
            let _ = writeln!(out, "# mean {arm} = {:.6}", self.arm_mean(&arm, |_| true));
        }
        for c in &self.checks {
            let verdict = if c.pass { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "# check {} : gap {:+.6} {verdict}", c.name, c.gap);
        }
        out
    }
}

/// Corpus for one ablation seed, shared by every arm.
pub fn seed_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    generate(&CorpusSpec {
        seed,
        ..spec.clone()
    })
}

/// Trains and scores every arm on every seed and class. Per seed `s`, the
/// corpus, the encoder and text weights and the training stream are all
/// seeded with `s`, so arms differ only in the ablated axis.
pub fn run_ablation(
    suite: Suite,
    base: &RunConfig,
    corpus_spec: &CorpusSpec,
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let arms = arms(suite, base);
    let mut rows = Vec::new();
    for &seed in seeds {
        let corpus = seed_corpus(corpus_spec, seed)?;
        for arm in &arms {
            let config = arm.config.with_seed(seed);
            let (encoder, text) = build_encoders(&config, corpus_spec.size, corpus_spec.size)?;
            for class in &corpus_spec.classes {
                let run = train_and_evaluate(&config, &corpus, class, &encoder, &text)?;
                let row = AblationRow {
                    arm: arm.name.clone(),
                    seed,
                    class: class.clone(),
                    auroc: run.report.auroc,
                };
                progress(&row);
                rows.push(row);
            }
        }
    }
    Ok(AblationTable::from_rows(suite, rows))
}
