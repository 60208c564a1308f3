//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Criteria that miss their target print FAIL with the measured values; the
//! process exits non-zero only when a criterion cannot be evaluated at all.

mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{
    loss_error, loss_fixture, normals, primitive_cases, primitive_error, LossKind, PromptPart,
};
use metaprompt::ablation::{arms, AblationRow, AblationTable, Suite};
use metaprompt::config::RunConfig;
use metaprompt::corpus::{default_classes, gen_normal, generate, Corpus, CorpusSpec, ToyClass};
use metaprompt::encoder::{
    attend, build_laa_mask, AttentionVariant, AttentionWeights, EncoderConfig, ImageEncoder,
};
use metaprompt::eval::{build_encoders, train_and_evaluate};
use metaprompt::oagm::{estimate_object_mask, synthesize_anomaly, ObjectMaskMode, RegionMode};
use metaprompt::prompt::{score_maps, PromptPair};
use metaprompt::seed;
use metaprompt::tensor::Graph;
use metaprompt::trainer::{calibrate_gradient, Trainer};
use metaprompt::Result;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

// ---------------------------------------------------------------------------

fn ac1_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst_prim = (0.0f64, String::new());
    for case in primitive_cases() {
        for s in SEEDS {
            let e = primitive_error(&case, s)?;
            if e > worst_prim.0 {
                worst_prim = (e, format!("{} seed {s}", case.name));
            }
        }
    }
    let pairs = [
        (LossKind::AnomalyNormal, PromptPart::General),
        (LossKind::AnomalyNormal, PromptPart::Normal),
        (LossKind::AnomalyAbnormal, PromptPart::General),
        (LossKind::AnomalyAbnormal, PromptPart::Abnormal),
        (LossKind::DivergenceNormal, PromptPart::General),
        (LossKind::DivergenceNormal, PromptPart::Normal),
        (LossKind::DivergenceAbnormal, PromptPart::General),
        (LossKind::DivergenceAbnormal, PromptPart::Abnormal),
    ];
    let mut worst_loss = (0.0f64, String::new());
    for s in SEEDS {
        let fx = loss_fixture(s)?;
        for (loss, part) in pairs {
            let e = loss_error(&fx, loss, part)?;
            if e > worst_loss.0 {
                worst_loss = (e, format!("{loss:?}/{part:?} seed {s}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_prim.0 < 1e-5 && worst_loss.0 < 1e-4 && secs < 30.0,
        format!(
            "primitives max {:.2e} ({}), losses max {:.2e} ({}), {secs:.1}s",
            worst_prim.0, worst_prim.1, worst_loss.0, worst_loss.1
        ),
    )
}

fn ac2_calibration() -> Result<Outcome> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rng = seed::rng(0, "acceptance/calibration");
    let (mut gated, mut worst) = (0, 0.0f64);
    let mut ungated_ok = true;
    for i in 0..1000u64 {
        let dim = rng.gen_range(4..=256);
        let lambda: f64 = rng.gen_range(0.0..=1.0);
        let a = normals(i, "g_ano", dim);
        let d = normals(i, "g_div", dim);
        let cal = calibrate_gradient(&a, &d, lambda)?;
        if cal.gated {
            gated += 1;
            let want = (1.0 - lambda) * dot(&a, &d);
            // relative to the uncalibrated inner product, which is nonzero
            // whenever the gate is open
            let err = (dot(&cal.grad, &d) - want).abs() / dot(&a, &d).abs();
            worst = worst.max(err);
        } else {
            let same = cal.grad.len() == a.len()
                && cal
                    .grad
                    .iter()
                    .zip(&a)
                    .all(|(x, y)| x.to_bits() == y.to_bits());
            ungated_ok &= same;
        }
    }
    let examples = [
        ([1.0, 0.0], [0.0, 1.0], [1.0, 0.0]),
        ([1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]),
        ([1.0, 1.0], [-1.0, 0.0], [0.0, 1.0]),
    ];
    let mut examples_ok = true;
    for (a, d, want) in examples {
        examples_ok &= calibrate_gradient(&a, &d, 1.0)?.grad == want;
    }
    outcome(
        worst < 1e-9 && ungated_ok && examples_ok && gated > 0 && gated < 1000,
        format!(
            "{gated} gated, max relative error {worst:.2e}, ungated bitwise {ungated_ok}, worked examples {examples_ok}"
        ),
    )
}

fn ac3_laa() -> Result<Outcome> {
    let start = Instant::now();
    let (gh, gw) = (8, 8);
    let radii = [0.0, 1.0, 1.5, 2.0, 3.0, 100.0];
    let mut failures = Vec::new();
    let n = gh * gw;
    for &k in &radii {
        let m = build_laa_mask(gh, gw, k);
        for p in 0..n {
            if !m.is_finite(1 + p, 1 + p) {
                failures.push(format!("diagonal k={k} p={p}"));
            }
            for q in 0..n {
                if m.is_finite(1 + p, 1 + q) != m.is_finite(1 + q, 1 + p) {
                    failures.push(format!("symmetry k={k} ({p},{q})"));
                }
            }
        }
    }
    for w in radii.windows(2) {
        let (lo, hi) = (build_laa_mask(gh, gw, w[0]), build_laa_mask(gh, gw, w[1]));
        let nested = lo
            .data
            .iter()
            .zip(&hi.data)
            .all(|(a, b)| *a != 0.0 || *b == 0.0);
        if !nested {
            failures.push(format!("monotonicity {} -> {}", w[0], w[1]));
        }
    }

    let tokens = 1 + n;
    let dim = 32;
    let mut rng = seed::rng(3, "acceptance/laa");
    let weights = AttentionWeights::random(dim, 4, &mut rng);
    let x_data = normals(3, "tokens", tokens * dim);
    let far = build_laa_mask(gh, gw, 100.0);
    let near = build_laa_mask(gh, gw, 1.0);
    for value_logits in [false, true] {
        let mut g = Graph::new();
        let x = g.constant(x_data.clone(), &[tokens, dim])?;
        let plain = attend(&mut g, &x, &weights, value_logits, None)?;
        let masked = attend(&mut g, &x, &weights, value_logits, Some(&far))?;
        let same = plain
            .output
            .data()
            .iter()
            .zip(masked.output.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same || plain.weights != masked.weights {
            failures.push(format!("large-k equivalence (vv={value_logits})"));
        }
        let local = attend(&mut g, &x, &weights, value_logits, Some(&near))?;
        for head in &local.weights {
            for (i, w) in head.iter().enumerate() {
                if near.data[i] != 0.0 && *w != 0.0 {
                    failures.push(format!("nonzero weight at masked entry {i}"));
                }
            }
        }
    }

    // one layer, k = 0: each feature cell may depend only on its own patch
    let config = EncoderConfig {
        layers: 1,
        fusion_depth: 1,
        radius: 0.0,
        variant: AttentionVariant::VvLaa,
        init_seed: 11,
        ..EncoderConfig::default()
    };
    let encoder = ImageEncoder::new(config, 32, 32)?;
    let base = gen_normal("disk-striped", 5)?.image;
    let f0 = encoder.encode(&base)?;
    let p = config.patch_size;
    for (pi, pj) in [(0, 0), (3, 4), (7, 2)] {
        let mut img = base.clone();
        let (r, c) = (pi * p + 1, pj * p + 2);
        let v = *img.get(r, c);
        img.set(r, c, if v > 0.5 { v - 0.4 } else { v + 0.4 });
        let f1 = encoder.encode(&img)?;
        for i in 0..gh {
            for j in 0..gw {
                let changed = f0.cell(i, j) != f1.cell(i, j);
                if changed != ((i, j) == (pi, pj)) {
                    failures.push(format!(
                        "locality: patch ({pi},{pj}) moved cell ({i},{j})={changed}"
                    ));
                }
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 10.0;
    let detail = if failures.is_empty() {
        format!("all structural checks exact, {secs:.2}s")
    } else {
        format!("{} failures, first: {}", failures.len(), failures[0])
    };
    outcome(pass, detail)
}

fn ac4_identities() -> Result<Outcome> {
    let classes: Vec<&str> = ToyClass::ALL.iter().map(|c| c.name()).collect();
    let modes = [
        RegionMode::SubRegion,
        RegionMode::FullObject,
        RegionMode::WholeImage,
    ];
    let mut mask_ok = true;
    let mut worst_sum = 0.0f64;
    let config = RunConfig::default();
    let (encoder, text) = build_encoders(&config, 32, 32)?;
    let prompts = PromptPair::init("disk", &config.prompt, 0);
    let (tn, ta) = prompts.embed(&text)?;
    for i in 0..100u64 {
        let class = classes[i as usize % classes.len()];
        let sample = gen_normal(class, i)?;
        let object = estimate_object_mask(&sample, ObjectMaskMode::GroundTruth);
        let synth = synthesize_anomaly(&sample, &object, 0.25, modes[i as usize % 3], i)?;
        mask_ok &= synth
            .normal_mask
            .data
            .iter()
            .zip(&synth.abnormal_mask.data)
            .all(|(n, a)| n ^ a);
        let s = score_maps(
            &encoder.encode(&synth.image)?,
            &tn,
            &ta,
            config.prompt.temperature,
        )?;
        for (n, a) in s.normal.data.iter().zip(&s.abnormal.data) {
            worst_sum = worst_sum.max((n + a - 1.0).abs());
        }
    }

    let mut train = config.train;
    train.steps_per_meta_epoch = 50;
    train.meta_epochs = 1;
    let trainer = Trainer::new(
        train,
        config.prompt,
        &encoder,
        &text,
        vec![gen_normal("disk", 0)?],
    )?;
    let state = trainer.run("disk")?;
    let worst_loss = state
        .history
        .iter()
        .map(|r| (r.ano_normal - r.ano_abnormal).abs() / r.ano_normal.abs().max(f64::MIN_POSITIVE))
        .fold(0.0f64, f64::max);
    outcome(
        mask_ok && worst_sum <= 1e-9 && worst_loss <= 1e-9 && state.history.len() == 50,
        format!(
            "masks complementary {mask_ok}, max |S_n+S_a-1| {worst_sum:.2e}, max loss gap {worst_loss:.2e} over {} steps",
            state.history.len()
        ),
    )
}

fn ac5_substitution() -> Result<Outcome> {
    let config = RunConfig::default();
    let (encoder, text) = build_encoders(&config, 32, 32)?;
    let corpus = generate(&CorpusSpec::default())?;
    let normals = corpus.train_for("disk").cloned().collect();
    let trainer = Trainer::new(config.train, config.prompt, &encoder, &text, normals)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let state = trainer.run_with("disk", |t, s| {
        let (n, a) = t.divergence_on(s, &s.last_batch)?;
        worst = worst.max(n.abs()).max(a.abs());
        checked += 1;
        Ok(())
    })?;
    // the run does not substitute after its last meta-epoch; do it here so
    // every meta-epoch is covered
    let last = trainer.substitute_meta(state)?;
    let (n, a) = trainer.divergence_on(&last, &last.last_batch)?;
    worst = worst.max(n.abs()).max(a.abs());
    checked += 1;
    outcome(
        worst <= 1e-9 && checked == config.train.meta_epochs,
        format!("{checked} substitutions, max |divergence| {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// Experiments shared by criteria 6 to 9

struct Experiments {
    corpora: HashMap<u64, Corpus>,
    cache: HashMap<(String, u64, String), f64>,
}

impl Experiments {
    fn new() -> Result<Self> {
        let mut corpora = HashMap::new();
        for s in SEEDS {
            corpora.insert(
                s,
                generate(&CorpusSpec {
                    seed: s,
                    ..CorpusSpec::default()
                })?,
            );
        }
        Ok(Self {
            corpora,
            cache: HashMap::new(),
        })
    }

    /// AUROC per (seed, class) for `config`, training only runs not seen yet.
    fn rows(&mut self, arm: &str, config: &RunConfig) -> Result<Vec<AblationRow>> {
        let key = config.to_json().to_string();
        let mut rows = Vec::new();
        for s in SEEDS {
            let seeded = config.with_seed(s);
            let classes = default_classes();
            let missing = classes
                .iter()
                .any(|c| !self.cache.contains_key(&(key.clone(), s, c.clone())));
            if missing {
                let (encoder, text) = build_encoders(&seeded, 32, 32)?;
                for c in &classes {
                    let run = train_and_evaluate(&seeded, &self.corpora[&s], c, &encoder, &text)?;
                    self.cache
                        .insert((key.clone(), s, c.clone()), run.report.auroc);
                }
            }
            for c in &classes {
                rows.push(AblationRow {
                    arm: arm.to_string(),
                    seed: s,
                    class: c.clone(),
                    auroc: self.cache[&(key.clone(), s, c.clone())],
                });
            }
        }
        Ok(rows)
    }

    fn suite(&mut self, suite: Suite) -> Result<AblationTable> {
        let mut rows = Vec::new();
        for arm in arms(suite, &RunConfig::default()) {
            rows.extend(self.rows(&arm.name, &arm.config)?);
        }
        let table = AblationTable::from_rows(suite, rows);
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        fs::create_dir_all(&dir).map_err(|e| metaprompt::Error::io(&dir, e))?;
        let path = dir.join(format!("ablation-{suite:?}.csv").to_lowercase());
        fs::write(&path, table.to_csv()).map_err(|e| metaprompt::Error::io(&path, e))?;
        Ok(table)
    }
}

fn ac6_end_to_end(ex: &mut Experiments) -> Result<Outcome> {
    let start = Instant::now();
    let rows = ex.rows("default", &RunConfig::default())?;
    let secs = start.elapsed().as_secs_f64();
    let mean = rows.iter().map(|r| r.auroc).sum::<f64>() / rows.len() as f64;
    let mut per_seed = String::new();
    for s in SEEDS {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.seed == s)
            .map(|r| r.auroc)
            .collect();
        per_seed += &format!(" {:.3}", v.iter().sum::<f64>() / v.len() as f64);
    }
    outcome(
        mean >= 0.90 && secs < 600.0,
        format!("mean AUROC {mean:.4} (target 0.90), per seed{per_seed}, {secs:.0}s"),
    )
}

fn table_outcome(table: &AblationTable) -> Result<Outcome> {
    let means: Vec<String> = table
        .arm_names()
        .iter()
        .map(|a| format!("{a} {:.4}", table.arm_mean(a, |_| true)))
        .collect();
    let checks: Vec<String> = table
        .checks
        .iter()
        .map(|c| {
            format!(
                "[{} gap {:+.4} {}]",
                c.name,
                c.gap,
                if c.pass { "ok" } else { "miss" }
            )
        })
        .collect();
    outcome(
        table.passed(),
        format!("{}; {}", means.join(", "), checks.join(" ")),
    )
}

// ---------------------------------------------------------------------------

fn ac10_determinism() -> Result<Outcome> {
    let bin = env!("CARGO_BIN_EXE_metaprompt");
    let tmp = tempfile::tempdir().map_err(|e| metaprompt::Error::io(Path::new("tempdir"), e))?;
    let root = tmp.path();
    let run = |args: &[&str]| -> bool {
        Command::new(bin)
            .args(args)
            .env("RUST_LOG", "warn")
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    };
    let corpus = root.join("corpus");
    let corpus = corpus.to_str().unwrap();
    let mut ok = run(&[
        "gen-data",
        "--out",
        corpus,
        "--seed",
        "7",
        "--classes",
        "disk,texture-stripes",
    ]);
    for i in 0..2 {
        let ck = root.join(format!("ck{i}"));
        let ev = root.join(format!("ev{i}"));
        ok &= run(&[
            "train",
            "--corpus",
            corpus,
            "--out",
            ck.to_str().unwrap(),
            "--seed",
            "7",
        ]);
        ok &= run(&[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--corpus",
            corpus,
            "--out",
            ev.to_str().unwrap(),
        ]);
    }
    if !ok {
        return outcome(false, "a CLI invocation failed".into());
    }
    let mut differing = Vec::new();
    let mut compared = 0;
    for (a, b) in [("ck0", "ck1"), ("ev0", "ev1")] {
        for (rel, left) in files_under(&root.join(a)) {
            let right = fs::read(root.join(b).join(&rel)).unwrap_or_default();
            compared += 1;
            let same = if rel.ends_with("report.json") {
                strip_wall_clock(&left) == strip_wall_clock(&right)
            } else {
                left == right
            };
            if !same {
                differing.push(rel);
            }
        }
    }
    outcome(
        differing.is_empty() && compared > 0,
        if differing.is_empty() {
            format!(
                "{compared} files bit-identical (report.json compared without wall_clock_seconds)"
            )
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap_or_default()));
            }
        }
    }
    out.sort();
    out
}

fn strip_wall_clock(bytes: &[u8]) -> Option<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).ok()?;
    v.as_object_mut()?.remove("wall_clock_seconds");
    Some(v)
}

// ---------------------------------------------------------------------------

fn main() {
    let mut results: Vec<(usize, &str, Result<Outcome>)> = Vec::new();
    let mut report = |n: usize, name: &'static str, r: Result<Outcome>| {
        match &r {
            Ok(o) => println!(
                "AC{n} {} {name}: {}",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            ),
            Err(e) => println!("AC{n} FAIL {name}: error: {e}"),
        }
        results.push((n, name, r));
    };
    report(1, "gradient oracle", ac1_gradients());
    report(2, "calibration guarantee", ac2_calibration());
    report(3, "locality-aware attention structure", ac3_laa());
    report(4, "mask and softmax identities", ac4_identities());
    report(5, "meta-substitution invariant", ac5_substitution());
    match Experiments::new() {
        Ok(mut ex) => {
            report(6, "end-to-end toy performance", ac6_end_to_end(&mut ex));
            let r = ex.suite(Suite::Lambda).and_then(|t| table_outcome(&t));
            report(7, "guiding ablation", r);
            let r = ex.suite(Suite::Oagm).and_then(|t| table_outcome(&t));
            report(8, "synthesis-support ablation", r);
            let r = ex.suite(Suite::Attention).and_then(|t| table_outcome(&t));
            report(9, "attention ablation", r);
        }
        Err(e) => {
            for (n, name) in [
                (6, "end-to-end toy performance"),
                (7, "guiding ablation"),
                (8, "synthesis-support ablation"),
                (9, "attention ablation"),
            ] {
                report(
                    n,
                    name,
                    Err(metaprompt::Error::InvalidArgument(e.to_string())),
                );
            }
        }
    }
    report(10, "CLI determinism", ac10_determinism());

    let passed = results
        .iter()
        .filter(|(_, _, r)| matches!(r, Ok(o) if o.pass))
        .count();
    println!("acceptance: {passed}/{} PASS", results.len());
    let errored: Vec<usize> = results
        .iter()
        .filter(|(_, _, r)| r.is_err())
        .map(|(n, _, _)| *n)
        .collect();
    if !errored.is_empty() {
        eprintln!("criteria {errored:?} could not be evaluated");
        std::process::exit(1);
    }
}
