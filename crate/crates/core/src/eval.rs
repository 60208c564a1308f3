//! Pixel-level AUROC evaluation of learned prompts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{Corpus, Sample};
use crate::encoder::ImageEncoder;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::pgm;
use crate::prompt::{score_maps, upsample_score, PromptPair, TextEncoder};
use crate::trainer::{load_checkpoint, StepRecord, Trainer, PROMPTS_FILE};

/// Rank-based AUROC with average ranks for ties (Mann-Whitney U / (P·N)).
/// `truth[i]` marks positives.
pub fn pixel_auroc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores against {} labels",
            scores.len(),
            truth.len()
        )));
    }
    if let Some(v) = scores.iter().find(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {v} is not a number")));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClassPool {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| truth[k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Pixel abnormality map for one image under learned prompts.
pub fn anomaly_map(
    encoder: &ImageEncoder,
    t_normal: &[f64],
    t_abnormal: &[f64],
    temperature: f64,
    sample: &Sample,
) -> Result<Grid<f64>> {
    let features = encoder.encode(&sample.image)?;
    let s = score_maps(&features, t_normal, t_abnormal, temperature)?;
    Ok(upsample_score(&s.abnormal, encoder.config().patch_size))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_name: String,
    pub auroc: f64,
    pub test_samples: usize,
    pub positive_pixels: usize,
    pub negative_pixels: usize,
    /// Score-map files relative to the report directory.
    pub score_maps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub mean_auroc: f64,
    pub skipped_samples: Vec<String>,
    pub config: serde_json::Value,
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    pub fn new(classes: Vec<ClassReport>, skipped: Vec<String>, config: serde_json::Value) -> Self {
        let mean_auroc = if classes.is_empty() {
            f64::NAN
        } else {
            classes.iter().map(|c| c.auroc).sum::<f64>() / classes.len() as f64
        };
        Self {
            classes,
            mean_auroc,
            skipped_samples: skipped,
            config,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,auroc,test_samples,positive_pixels,negative_pixels\n");
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.class_name, c.auroc, c.test_samples, c.positive_pixels, c.negative_pixels
            );
        }
        let _ = writeln!(out, "mean,{},,,", self.mean_auroc);
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.json");
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("report.csv");
        fs::write(&p, self.to_csv()).map_err(|e| Error::io(&p, e))
    }
}

/// Scores every test sample of `class` and pools pixels for AUROC.
/// With `dump_dir`, each map is written as `<class>/<index>_score.pgm`.
pub fn evaluate_class(
    prompts: &PromptPair,
    encoder: &ImageEncoder,
    text: &TextEncoder,
    temperature: f64,
    tests: &[&Sample],
    dump_dir: Option<&Path>,
) -> Result<ClassReport> {
    let class = prompts.class_name.clone();
    let (tn, ta) = prompts.embed(text)?;
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    let mut files = Vec::new();
    for (i, s) in tests.iter().enumerate() {
        let map = anomaly_map(encoder, &tn, &ta, temperature, s)?;
        if let Some(dir) = dump_dir {
            let rel = format!("{class}/{i:03}_score.pgm");
            pgm::write_image(&dir.join(&rel), &map)?;
            files.push(rel);
        }
        scores.extend_from_slice(&map.data);
        truth.extend_from_slice(&s.anomaly_mask.data);
    }
    let auroc = pixel_auroc(&scores, &truth)?;
    let positive_pixels = truth.iter().filter(|&&t| t).count();
    Ok(ClassReport {
        class_name: class,
        auroc,
        test_samples: tests.len(),
        positive_pixels,
        negative_pixels: truth.len() - positive_pixels,
        score_maps: files,
    })
}

/// Frozen towers for a run configuration and image size.
pub fn build_encoders(
    config: &RunConfig,
    height: usize,
    width: usize,
) -> Result<(ImageEncoder, TextEncoder)> {
    config.validate()?;
    let encoder = ImageEncoder::new(config.encoder, height, width)?;
    let text = TextEncoder::new(
        config.prompt.token_dim,
        config.encoder.embed_dim,
        config.prompt.text_seed,
    );
    Ok((encoder, text))
}

/// Outcome of training and scoring one class.
#[derive(Debug, Clone)]
pub struct ClassRun {
    pub prompts: PromptPair,
    pub report: ClassReport,
    pub history: Vec<StepRecord>,
}

/// Trains prompts on the class's normal shots, then scores its test split.
pub fn train_and_evaluate(
    config: &RunConfig,
    corpus: &Corpus,
    class: &str,
    encoder: &ImageEncoder,
    text: &TextEncoder,
) -> Result<ClassRun> {
    let normals: Vec<Sample> = corpus
        .train_for(class)
        .take(config.train.k_shot)
        .cloned()
        .collect();
    let trainer = Trainer::new(config.train, config.prompt, encoder, text, normals)?;
    let state = trainer.run(class)?;
    let tests: Vec<&Sample> = corpus.test_for(class).collect();
    let report = evaluate_class(
        &state.prompts,
        encoder,
        text,
        config.prompt.temperature,
        &tests,
        None,
    )?;
    Ok(ClassRun {
        prompts: state.prompts,
        report,
        history: state.history,
    })
}

/// Runs [`train_and_evaluate`] for each class and assembles a report.
pub fn train_and_evaluate_all(
    config: &RunConfig,
    corpus: &Corpus,
    classes: &[String],
) -> Result<EvalReport> {
    let start = Instant::now();
    let first = corpus
        .train
        .first()
        .ok_or_else(|| Error::InvalidArgument("corpus has no training samples".into()))?;
    let (encoder, text) = build_encoders(config, first.image.height, first.image.width)?;
    let mut reports = Vec::new();
    for class in classes {
        reports.push(train_and_evaluate(config, corpus, class, &encoder, &text)?.report);
    }
    let mut report = EvalReport::new(reports, corpus.skipped.clone(), config.to_json());
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Scores every class checkpoint under `checkpoints` (one sub-directory per
/// class, as written by training) against the corpus test split. Classes
/// absent from `only` are skipped when it is given. With `dump_dir`, score
/// maps are written there as PGM.
pub fn evaluate_checkpoints(
    checkpoints: &Path,
    corpus: &Corpus,
    only: Option<&str>,
    dump_dir: Option<&Path>,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut dirs: Vec<_> = fs::read_dir(checkpoints)
        .map_err(|e| Error::io(checkpoints, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(PROMPTS_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() && checkpoints.join(PROMPTS_FILE).is_file() {
        dirs.push(checkpoints.to_path_buf());
    }
    let mut reports = Vec::new();
    let mut echo = serde_json::Value::Null;
    for dir in dirs {
        let (prompts, sidecar) = load_checkpoint(&dir)?;
        if only.is_some_and(|c| c != prompts.class_name) {
            continue;
        }
        let config = RunConfig::from_json(&sidecar.config)?;
        echo = sidecar.config.clone();
        let tests: Vec<&Sample> = corpus.test_for(&prompts.class_name).collect();
        let first = tests.first().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no test samples for class '{}'",
                prompts.class_name
            ))
        })?;
        let (encoder, text) = build_encoders(&config, first.image.height, first.image.width)?;
        reports.push(evaluate_class(
            &prompts,
            &encoder,
            &text,
            config.prompt.temperature,
            &tests,
            dump_dir,
        )?);
    }
    if reports.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no checkpoint found under {}",
            checkpoints.display()
        )));
    }
    let mut report = EvalReport::new(reports, corpus.skipped.clone(), echo);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking_is_one() {
        let a = pixel_auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn constant_scores_are_one_half() {
        let a = pixel_auroc(&[0.3; 6], &[true, false, true, false, false, false]).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn three_of_four_pairs_concordant() {
        // pairs (pos, neg): (0.9,0.6) (0.9,0.2) (0.5,0.2) concordant, (0.5,0.6) not
        let a = pixel_auroc(&[0.9, 0.6, 0.5, 0.2], &[true, false, true, false]).unwrap();
        assert_eq!(a, 0.75);
    }

    #[test]
    fn single_class_pool_is_rejected() {
        assert!(matches!(
            pixel_auroc(&[0.1, 0.2], &[false, false]),
            Err(Error::SingleClassPool {
                positives: 0,
                negatives: 2
            })
        ));
    }

    #[test]
    fn mean_is_arithmetic_mean() {
        let c = |auroc| ClassReport {
            class_name: "x".into(),
            auroc,
            test_samples: 1,
            positive_pixels: 1,
            negative_pixels: 1,
            score_maps: vec![],
        };
        let r = EvalReport::new(
            vec![c(0.5), c(1.0), c(0.75)],
            vec![],
            serde_json::Value::Null,
        );
        assert!((r.mean_auroc - 0.75).abs() < 1e-12);
    }
}
