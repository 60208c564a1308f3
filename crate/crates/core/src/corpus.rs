//! Procedural toy corpus: few-shot normal training images and a labeled test
//! split with exact object and anomaly masks.
//!
//! Every sample is a pure function of `(class, seed, kind)`. Corpus-level
//! seeds are derived per sample from the corpus seed and the sample's slot,
//! never from generation order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::pgm;
use crate::seed;

pub const DEFAULT_SIZE: usize = 32;
pub const GENERATOR_VERSION: u32 = 1;

pub const BACKGROUND_BAND: (f64, f64) = (0.15, 0.30);
pub const OBJECT_BAND: (f64, f64) = (0.60, 0.85);
pub const JITTER: f64 = 0.03;

const DEFECT_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ToyClass {
    Disk,
    Square,
    Ring,
    DiskStriped,
    SquareStriped,
    RingStriped,
    TextureStripes,
    TextureChecker,
}

impl ToyClass {
    pub const ALL: [ToyClass; 8] = [
        ToyClass::Disk,
        ToyClass::Square,
        ToyClass::Ring,
        ToyClass::DiskStriped,
        ToyClass::SquareStriped,
        ToyClass::RingStriped,
        ToyClass::TextureStripes,
        ToyClass::TextureChecker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToyClass::Disk => "disk",
            ToyClass::Square => "square",
            ToyClass::Ring => "ring",
            ToyClass::DiskStriped => "disk-striped",
            ToyClass::SquareStriped => "square-striped",
            ToyClass::RingStriped => "ring-striped",
            ToyClass::TextureStripes => "texture-stripes",
            ToyClass::TextureChecker => "texture-checker",
        }
    }

    /// Texture classes fill the whole frame; their object mask is all ones.
    pub fn is_texture(self) -> bool {
        matches!(self, ToyClass::TextureStripes | ToyClass::TextureChecker)
    }

    fn striped(self) -> bool {
        matches!(
            self,
            ToyClass::DiskStriped | ToyClass::SquareStriped | ToyClass::RingStriped
        )
    }

    pub fn catalogue() -> String {
        Self::ALL
            .iter()
            .map(|c| c.name())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for ToyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownClass {
                name: s.to_string(),
                catalogue: Self::catalogue(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Scratch,
    Blob,
    Hole,
    None,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::Scratch,
        AnomalyKind::Blob,
        AnomalyKind::Hole,
        AnomalyKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Scratch => "scratch",
            AnomalyKind::Blob => "blob",
            AnomalyKind::Hole => "hole",
            AnomalyKind::None => "none",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown anomaly kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub object_mask: Mask,
    /// All-zero for normal samples.
    pub anomaly_mask: Mask,
    pub label: u8,
    pub class_name: String,
    pub kind: AnomalyKind,
    pub seed: u64,
}

pub fn gen_normal(class_name: &str, seed: u64) -> Result<Sample> {
    gen_normal_sized(class_name, seed, DEFAULT_SIZE)
}

pub fn gen_normal_sized(class_name: &str, seed: u64, size: usize) -> Result<Sample> {
    let class: ToyClass = class_name.parse()?;
    if size < 8 {
        return Err(Error::InvalidArgument(format!(
            "image size {size} below minimum 8"
        )));
    }
    let mut rng = seed::rng(seed, &format!("normal/{}", class.name()));
    let (image, object_mask) = render(class, size, &mut rng);
    Ok(Sample {
        anomaly_mask: Mask::filled(size, size, false),
        image,
        object_mask,
        label: 0,
        class_name: class.name().to_string(),
        kind: AnomalyKind::None,
        seed,
    })
}

pub fn gen_test(class_name: &str, seed: u64, kind: AnomalyKind) -> Result<Sample> {
    gen_test_sized(class_name, seed, kind, DEFAULT_SIZE)
}

pub fn gen_test_sized(
    class_name: &str,
    seed: u64,
    kind: AnomalyKind,
    size: usize,
) -> Result<Sample> {
    let mut sample = gen_normal_sized(class_name, seed, size)?;
    if kind == AnomalyKind::None {
        return Ok(sample);
    }
    for attempt in 0..DEFECT_ATTEMPTS {
        let mut rng = seed::rng(seed, &format!("defect/{kind}/{attempt}"));
        let footprint = defect_footprint(kind, &sample.object_mask, &mut rng);
        if !footprint.any() {
            continue;
        }
        apply_defect(kind, &mut sample.image, &footprint, &mut rng);
        sample.anomaly_mask = footprint;
        sample.label = 1;
        sample.kind = kind;
        return Ok(sample);
    }
    Err(Error::DegenerateDefect {
        class: class_name.to_string(),
        kind: kind.to_string(),
        seed,
        attempts: DEFECT_ATTEMPTS,
    })
}

fn uniform(rng: &mut ChaCha8Rng, band: (f64, f64)) -> f64 {
    rng.gen_range(band.0..=band.1)
}

fn render(class: ToyClass, size: usize, rng: &mut ChaCha8Rng) -> (Image, Mask) {
    let scale = size as f64 / DEFAULT_SIZE as f64;
    let background = uniform(rng, BACKGROUND_BAND);
    let mut image = Image::filled(size, size, background);
    let mut mask = Mask::filled(size, size, false);
    let n = size as f64;

    match class {
        ToyClass::Disk | ToyClass::DiskStriped => {
            let r = rng.gen_range(6.0..=10.0) * scale;
            let cy = rng.gen_range(r + 1.0..=n - r - 1.0);
            let cx = rng.gen_range(r + 1.0..=n - r - 1.0);
            fill(&mut mask, |y, x| {
                (y - cy).powi(2) + (x - cx).powi(2) <= r * r
            });
        }
        ToyClass::Ring | ToyClass::RingStriped => {
            let outer = rng.gen_range(9.0..=12.0) * scale;
            let inner = outer - rng.gen_range(3.0..=5.0) * scale;
            let cy = rng.gen_range(outer + 1.0..=n - outer - 1.0);
            let cx = rng.gen_range(outer + 1.0..=n - outer - 1.0);
            fill(&mut mask, |y, x| {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                d2 <= outer * outer && d2 > inner * inner
            });
        }
        ToyClass::Square | ToyClass::SquareStriped => {
            let lo = ((10.0 * scale).round() as usize).max(2);
            let hi = ((18.0 * scale).round() as usize).clamp(lo, size - 2);
            let side = rng.gen_range(lo..=hi);
            let top = rng.gen_range(1..=size - side - 1);
            let left = rng.gen_range(1..=size - side - 1);
            for r in top..top + side {
                for c in left..left + side {
                    mask.set(r, c, true);
                }
            }
        }
        ToyClass::TextureStripes | ToyClass::TextureChecker => {
            mask = Mask::filled(size, size, true);
        }
    }

    if class.is_texture() {
        let a = rng.gen_range(0.62..=0.68);
        let b = a + rng.gen_range(0.10..=0.14);
        let pattern = texture_pattern(class, rng);
        for r in 0..size {
            for c in 0..size {
                image.set(r, c, if pattern(r, c) { b } else { a });
            }
        }
    } else if class.striped() {
        let lo = rng.gen_range(0.60..=0.66);
        let hi = rng.gen_range(0.79..=0.85);
        let half = *[2usize, 3].choose(rng).unwrap();
        let vertical = rng.gen_bool(0.5);
        let phase = rng.gen_range(0..2 * half);
        for r in 0..size {
            for c in 0..size {
                if *mask.get(r, c) {
                    let t = if vertical { c } else { r } + phase;
                    image.set(r, c, if (t / half).is_multiple_of(2) { hi } else { lo });
                }
            }
        }
    } else {
        let level = uniform(rng, OBJECT_BAND);
        for (v, &m) in image.data.iter_mut().zip(&mask.data) {
            if m {
                *v = level;
            }
        }
    }

    for v in image.data.iter_mut() {
        *v = (*v + rng.gen_range(-JITTER..=JITTER)).clamp(0.0, 1.0);
    }
    (image, mask)
}

fn texture_pattern(class: ToyClass, rng: &mut ChaCha8Rng) -> Box<dyn Fn(usize, usize) -> bool> {
    if class == ToyClass::TextureStripes {
        let half = *[2usize, 3, 4].choose(rng).unwrap();
        let vertical = rng.gen_bool(0.5);
        let phase = rng.gen_range(0..2 * half);
        Box::new(move |r, c| ((if vertical { c } else { r } + phase) / half).is_multiple_of(2))
    } else {
        let cell = rng.gen_range(3usize..=5);
        let (py, px) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
        Box::new(move |r, c| ((r + py) / cell + (c + px) / cell) % 2 == 0)
    }
}

/// Sets every pixel whose center satisfies `inside(y, x)`.
fn fill(mask: &mut Mask, inside: impl Fn(f64, f64) -> bool) {
    for r in 0..mask.height {
        for c in 0..mask.width {
            if inside(r as f64 + 0.5, c as f64 + 0.5) {
                mask.set(r, c, true);
            }
        }
    }
}

fn random_object_pixel(object: &Mask, rng: &mut ChaCha8Rng) -> Option<(f64, f64)> {
    let idx: Vec<usize> = (0..object.len()).filter(|&i| object.data[i]).collect();
    let &i = idx.choose(rng)?;
    Some((
        (i / object.width) as f64 + 0.5,
        (i % object.width) as f64 + 0.5,
    ))
}

fn defect_footprint(kind: AnomalyKind, object: &Mask, rng: &mut ChaCha8Rng) -> Mask {
    let mut fp = Mask::filled(object.height, object.width, false);
    let Some((cy, cx)) = random_object_pixel(object, rng) else {
        return fp;
    };
    let scale = object.width as f64 / DEFAULT_SIZE as f64;
    match kind {
        AnomalyKind::Scratch => {
            let len = rng.gen_range(6.0..=14.0) * scale;
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let (dy, dx) = (angle.sin(), angle.cos());
            let steps = (len * 4.0).ceil() as usize;
            for s in 0..=steps {
                let t = s as f64 / 4.0 - len / 2.0;
                let (y, x) = (cy + t * dy, cx + t * dx);
                if y >= 0.0 && x >= 0.0 {
                    let (r, c) = (y as usize, x as usize);
                    if r < fp.height && c < fp.width {
                        fp.set(r, c, true);
                    }
                }
            }
        }
        AnomalyKind::Blob => {
            let a = rng.gen_range(1.5..=4.0) * scale;
            let b = rng.gen_range(1.5..=4.0) * scale;
            let th = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, c) = th.sin_cos();
            fill(&mut fp, |y, x| {
                let (u, v) = (x - cx, y - cy);
                let p = (u * c + v * s) / a;
                let q = (-u * s + v * c) / b;
                p * p + q * q <= 1.0
            });
        }
        AnomalyKind::Hole => {
            let r = rng.gen_range(1.5..=3.5) * scale;
            fill(&mut fp, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r);
        }
        AnomalyKind::None => {}
    }
    for (f, &o) in fp.data.iter_mut().zip(&object.data) {
        *f &= o;
    }
    fp
}

fn apply_defect(kind: AnomalyKind, image: &mut Image, footprint: &Mask, rng: &mut ChaCha8Rng) {
    match kind {
        AnomalyKind::Scratch | AnomalyKind::Blob => {
            let (lo, hi) = if kind == AnomalyKind::Scratch {
                (0.30, 0.45)
            } else {
                (0.25, 0.40)
            };
            let shift = rng.gen_range(lo..=hi) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for (v, &m) in image.data.iter_mut().zip(&footprint.data) {
                if m {
                    *v = (*v + shift).clamp(0.0, 1.0);
                }
            }
        }
        AnomalyKind::Hole => {
            let level = uniform(rng, BACKGROUND_BAND);
            for (v, &m) in image.data.iter_mut().zip(&footprint.data) {
                if m {
                    *v = (level + rng.gen_range(-JITTER..=JITTER)).clamp(0.0, 1.0);
                }
            }
        }
        AnomalyKind::None => {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// What to generate: classes, shots per class, and test counts per kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub classes: Vec<String>,
    pub k_shot: usize,
    pub test_counts: BTreeMap<AnomalyKind, usize>,
    pub seed: u64,
    pub size: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            k_shot: 1,
            test_counts: [
                (AnomalyKind::Scratch, 3),
                (AnomalyKind::Blob, 3),
                (AnomalyKind::Hole, 3),
                (AnomalyKind::None, 2),
            ]
            .into_iter()
            .collect(),
            seed: 0,
            size: DEFAULT_SIZE,
        }
    }
}

/// Five object classes and both textures.
pub fn default_classes() -> Vec<String> {
    [
        ToyClass::Disk,
        ToyClass::Square,
        ToyClass::Ring,
        ToyClass::DiskStriped,
        ToyClass::SquareStriped,
        ToyClass::TextureStripes,
        ToyClass::TextureChecker,
    ]
    .iter()
    .map(|c| c.name().to_string())
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the corpus directory.
    pub path: String,
    pub class_name: String,
    pub split: Split,
    pub label: u8,
    pub kind: AnomalyKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub generator_version: u32,
    pub width: usize,
    pub height: usize,
    pub spec: CorpusSpec,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Entries dropped while reading because a mask file was missing.
    pub skipped: Vec<String>,
}

impl Corpus {
    pub fn train_for<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a Sample> + 'a {
        self.train.iter().filter(move |s| s.class_name == class)
    }

    pub fn test_for<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a Sample> + 'a {
        self.test.iter().filter(move |s| s.class_name == class)
    }
}

pub fn train_seed(corpus_seed: u64, class: &str, index: usize) -> u64 {
    seed::derive(corpus_seed, &format!("train/{class}/{index}"))
}

pub fn test_seed(corpus_seed: u64, class: &str, kind: AnomalyKind, index: usize) -> u64 {
    seed::derive(corpus_seed, &format!("test/{class}/{kind}/{index}"))
}

/// Generates the corpus in memory.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for class in &spec.classes {
        for i in 0..spec.k_shot {
            corpus.train.push(gen_normal_sized(
                class,
                train_seed(spec.seed, class, i),
                spec.size,
            )?);
        }
        for (&kind, &count) in &spec.test_counts {
            for i in 0..count {
                let s = test_seed(spec.seed, class, kind, i);
                corpus.test.push(gen_test_sized(class, s, kind, spec.size)?);
            }
        }
    }
    Ok(corpus)
}

fn image_rel_path(split: Split, sample: &Sample) -> String {
    match split {
        Split::Train => format!("train/{}_{}.pgm", sample.class_name, sample.seed),
        Split::Test => format!(
            "test/{}_{}_{}.pgm",
            sample.class_name, sample.kind, sample.seed
        ),
    }
}

/// `foo.pgm` -> `foo.<suffix>.pgm`.
pub fn mask_path(image: &Path, suffix: &str) -> PathBuf {
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    image.with_file_name(format!("{stem}.{suffix}.pgm"))
}

pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<CorpusManifest> {
    let corpus = generate(spec)?;
    for sub in ["train", "test"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(corpus.train.len() + corpus.test.len());
    let splits = corpus
        .train
        .iter()
        .map(|s| (Split::Train, s))
        .chain(corpus.test.iter().map(|s| (Split::Test, s)));
    for (split, sample) in splits {
        let rel = image_rel_path(split, sample);
        let path = dir.join(&rel);
        pgm::write_image(&path, &sample.image)?;
        pgm::write_mask(&mask_path(&path, "objmask"), &sample.object_mask)?;
        pgm::write_mask(&mask_path(&path, "anomask"), &sample.anomaly_mask)?;
        entries.push(ManifestEntry {
            path: rel,
            class_name: sample.class_name.clone(),
            split,
            label: sample.label,
            kind: sample.kind,
            seed: sample.seed,
        });
    }
    let manifest = CorpusManifest {
        generator_version: GENERATOR_VERSION,
        width: spec.size,
        height: spec.size,
        spec: spec.clone(),
        entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))
}

/// Reads a corpus written by [`write_corpus`]. Any missing or malformed file
/// is an error.
pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, Corpus)> {
    read_corpus_with(dir, false)
}

/// Like [`read_corpus`], but when `skip_missing_masks` is set, entries whose
/// mask files are absent are dropped with a warning and listed in
/// [`Corpus::skipped`].
pub fn read_corpus_with(dir: &Path, skip_missing_masks: bool) -> Result<(CorpusManifest, Corpus)> {
    let manifest = read_manifest(dir)?;
    let mut corpus = Corpus::default();
    for entry in &manifest.entries {
        let path = dir.join(&entry.path);
        let image = pgm::read_image(&path)?;
        let (obj_path, ano_path) = (mask_path(&path, "objmask"), mask_path(&path, "anomask"));
        if skip_missing_masks && !(obj_path.exists() && ano_path.exists()) {
            log::warn!("{}: mask file missing, sample skipped", path.display());
            corpus.skipped.push(entry.path.clone());
            continue;
        }
        let object_mask = pgm::read_mask(&obj_path)?;
        let anomaly_mask = pgm::read_mask(&ano_path)?;
        for (p, w, h) in [
            (&path, image.width, image.height),
            (&obj_path, object_mask.width, object_mask.height),
            (&ano_path, anomaly_mask.width, anomaly_mask.height),
        ] {
            if (w, h) != (manifest.width, manifest.height) {
                return Err(Error::corrupt(
                    p,
                    format!(
                        "{w}x{h} but manifest records {}x{}",
                        manifest.width, manifest.height
                    ),
                ));
            }
        }
        let sample = Sample {
            image,
            object_mask,
            anomaly_mask,
            label: entry.label,
            class_name: entry.class_name.clone(),
            kind: entry.kind,
            seed: entry.seed,
        };
        match entry.split {
            Split::Train => corpus.train.push(sample),
            Split::Test => corpus.test.push(sample),
        }
    }
    Ok((manifest, corpus))
}
