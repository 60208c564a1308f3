use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use log::{info, warn};

use metaprompt::ablation::{run_ablation, Suite};
use metaprompt::config::RunConfig;
use metaprompt::corpus::{read_corpus_with, write_corpus, AnomalyKind, CorpusSpec, Sample};
use metaprompt::eval::{build_encoders, evaluate_checkpoints};
use metaprompt::oagm::{estimate_object_mask, synthesize_anomaly};
use metaprompt::prompt::PromptFileMeta;
use metaprompt::trainer::{save_checkpoint, Trainer};
use metaprompt::{pgm, seed, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "metaprompt",
    version,
    about = "Prompt tuning for pixel-wise anomaly segmentation on a toy corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

/// Flags shared by the commands that build a run configuration.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the encoder, text encoder and training seeds at once
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a toy corpus (PGM images and masks plus manifest.json)
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated class names (default: five object classes and both textures)
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[arg(long, default_value_t = 1)]
        k_shot: usize,
        #[arg(long, default_value_t = 3)]
        scratch: usize,
        #[arg(long, default_value_t = 3)]
        blob: usize,
        #[arg(long, default_value_t = 3)]
        hole: usize,
        #[arg(long, default_value_t = 2)]
        none: usize,
        #[arg(long, default_value_t = metaprompt::corpus::DEFAULT_SIZE)]
        size: usize,
    },
    /// Tune prompts per class; writes <out>/<class>/ checkpoints
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train only this class
        #[arg(long)]
        class: Option<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score checkpoints on the test split; writes report.json and report.csv
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        class: Option<String>,
        /// Also write each score map as PGM under <out>/maps
        #[arg(long)]
        dump_maps: bool,
    },
    /// Run an ablation suite (lambda, oagm or attention); writes ablation.csv
    Ablate {
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of shared seeds (0, 1, ...)
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write OAGM-synthesized training samples for inspection
    DumpSynth {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        class: Option<String>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[command(flatten)]
        run: RunArgs,
    },
}

/// One optional `--<key> <value>` flag per configuration key.
#[derive(Debug, Clone, Default)]
struct Overrides(Vec<(String, String)>);

fn keys() -> Vec<&'static str> {
    RunConfig::valid_keys()
        .into_iter()
        .filter(|k| k != "seed")
        .map(|k| &*Box::leak(k.into_boxed_str()))
        .collect()
}

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut out = Self::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        for k in keys() {
            if let Some(v) = m.get_one::<String>(k) {
                self.0.push((k.to_string(), v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        keys().into_iter().fold(cmd, |cmd, k| {
            cmd.arg(
                Arg::new(k)
                    .long(k)
                    .value_name("VALUE")
                    .help_heading("Configuration overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

/// Defaults, then the config file, then `--seed`, then per-key overrides.
fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        config = config.with_seed(s);
    }
    for (k, v) in &args.overrides.0 {
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}

fn load_corpus(dir: &Path) -> Result<metaprompt::corpus::Corpus> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "corpus directory {} does not exist",
            dir.display()
        )));
    }
    let (_, corpus) = read_corpus_with(dir, true)?;
    for s in &corpus.skipped {
        warn!("skipped {s}: mask file missing");
    }
    Ok(corpus)
}

fn corpus_classes(
    corpus: &metaprompt::corpus::Corpus,
    only: &Option<String>,
) -> Result<Vec<String>> {
    let mut classes: Vec<String> = Vec::new();
    for s in &corpus.train {
        if !classes.contains(&s.class_name) {
            classes.push(s.class_name.clone());
        }
    }
    match only {
        Some(c) if classes.contains(c) => Ok(vec![c.clone()]),
        Some(c) => Err(Error::Config(format!(
            "class '{c}' has no training samples in the corpus (present: {})",
            classes.join(", ")
        ))),
        None => Ok(classes),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn gen_data(cmd: &Cmd) -> Result<()> {
    let Cmd::GenData {
        out,
        seed,
        classes,
        k_shot,
        scratch,
        blob,
        hole,
        none,
        size,
    } = cmd
    else {
        unreachable!()
    };
    let mut spec = CorpusSpec {
        k_shot: *k_shot,
        test_counts: BTreeMap::from([
            (AnomalyKind::Scratch, *scratch),
            (AnomalyKind::Blob, *blob),
            (AnomalyKind::Hole, *hole),
            (AnomalyKind::None, *none),
        ]),
        seed: *seed,
        size: *size,
        ..CorpusSpec::default()
    };
    if let Some(c) = classes {
        spec.classes = c.clone();
    }
    let manifest = write_corpus(out, &spec)?;
    info!(
        "wrote {} samples to {}",
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

fn train(corpus_dir: &Path, out: &Path, class: &Option<String>, run: &RunArgs) -> Result<()> {
    let config = run_config(run)?;
    let corpus = load_corpus(corpus_dir)?;
    let classes = corpus_classes(&corpus, class)?;
    let size = corpus.train[0].image.height;
    let (encoder, text) = build_encoders(&config, size, corpus.train[0].image.width)?;
    for class in classes {
        let normals: Vec<Sample> = corpus
            .train_for(&class)
            .take(config.train.k_shot)
            .cloned()
            .collect();
        let trainer = Trainer::new(config.train, config.prompt, &encoder, &text, normals)?;
        let state = trainer.run_with(&class, |_, s| {
            info!(
                "{class}: meta-epoch {} installed at step {}",
                s.meta_epoch, s.step
            );
            Ok(())
        })?;
        if let Some(last) = state.history.last() {
            info!(
                "{class}: {} steps, final anomaly loss {:.4}",
                state.step, last.ano_normal
            );
        }
        let meta = PromptFileMeta {
            seed: config.train.seed,
            text_seed: config.prompt.text_seed,
            meta_epoch: state.meta_epoch,
        };
        save_checkpoint(&out.join(&class), &state, meta, config.to_json())?;
    }
    write_text(&out.join("run.cfg"), &config.to_text())
}

fn eval(
    checkpoint: &Path,
    corpus_dir: &Path,
    out: &Path,
    class: &Option<String>,
    dump: bool,
) -> Result<()> {
    let corpus = load_corpus(corpus_dir)?;
    let maps = out.join("maps");
    let report = evaluate_checkpoints(
        checkpoint,
        &corpus,
        class.as_deref(),
        dump.then_some(maps.as_path()),
    )?;
    report.write(out)?;
    for c in &report.classes {
        info!("{}: pixel AUROC {:.4}", c.class_name, c.auroc);
    }
    info!("mean pixel AUROC {:.4}", report.mean_auroc);
    Ok(())
}

fn ablate(
    suite: &str,
    out: &Path,
    seeds: u64,
    classes: &Option<Vec<String>>,
    run: &RunArgs,
) -> Result<()> {
    let suite: Suite = suite.parse()?;
    let base = run_config(run)?;
    let mut spec = CorpusSpec {
        k_shot: base.train.k_shot,
        ..CorpusSpec::default()
    };
    if let Some(c) = classes {
        spec.classes = c.clone();
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    let table = run_ablation(suite, &base, &spec, &seeds, |r| {
        info!("{} seed {} {}: {:.4}", r.arm, r.seed, r.class, r.auroc)
    })?;
    fs::create_dir_all(out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    for c in &table.checks {
        info!(
            "{} : gap {:+.4} {}",
            c.name,
            c.gap,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(())
}

fn dump_synth(
    corpus_dir: &Path,
    out: &Path,
    class: &Option<String>,
    count: usize,
    run: &RunArgs,
) -> Result<()> {
    let config = run_config(run)?;
    let corpus = load_corpus(corpus_dir)?;
    for class in corpus_classes(&corpus, class)? {
        let normals: Vec<&Sample> = corpus.train_for(&class).collect();
        for i in 0..count {
            let sample = normals[i % normals.len()];
            let object = estimate_object_mask(sample, config.train.object_mask_mode);
            let s = seed::derive(config.train.seed, &format!("synth/{i}/0"));
            let synth = synthesize_anomaly(
                sample,
                &object,
                config.train.sigma,
                config.train.region_mode,
                s,
            )?;
            let base = out.join(&class).join(format!("{i:03}"));
            pgm::write_image(&base.with_extension("pgm"), &synth.image)?;
            pgm::write_mask(
                &PathBuf::from(format!("{}_abnormal.pgm", base.display())),
                &synth.abnormal_mask,
            )?;
        }
        info!("{class}: wrote {count} synthesized samples");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        c @ Cmd::GenData { .. } => gen_data(c),
        Cmd::Train {
            corpus,
            out,
            class,
            run,
        } => train(corpus, out, class, run),
        Cmd::Eval {
            checkpoint,
            corpus,
            out,
            class,
            dump_maps,
        } => eval(checkpoint, corpus, out, class, *dump_maps),
        Cmd::Ablate {
            suite,
            out,
            seeds,
            classes,
            run,
        } => ablate(suite, out, *seeds, classes, run),
        Cmd::DumpSynth {
            corpus,
            out,
            class,
            count,
            run,
        } => dump_synth(corpus, out, class, *count, run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
