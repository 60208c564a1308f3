//! Object-attention anomaly generation: Gaussian noise injected only where
//! the object is, with the perturbed region recorded as the abnormality mask
//! and its complement as the normality mask.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::seed;

/// Minimum gap between the two Otsu class means for the split to count as
/// bimodal. Object/background bands are at least 0.30 apart, textures vary
/// by less than 0.15.
pub const MIN_SPLIT_CONTRAST: f64 = 0.2;

pub const SUB_REGION_FRACTION: (f64, f64) = (0.05, 0.4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectMaskMode {
    /// Use the sample's stored object mask.
    GroundTruth,
    /// Otsu split followed by largest-connected-component selection.
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionMode {
    /// Perturb every object pixel.
    FullObject,
    /// Perturb one random connected patch covering 5-40% of the object.
    SubRegion,
    /// Same patch size as `SubRegion`, but grown anywhere in the frame.
    /// This is the "noise without object attention" baseline.
    WholeImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub abnormal_mask: Mask,
    pub normal_mask: Mask,
    pub source_seed: u64,
    pub sigma: f64,
}

pub fn estimate_object_mask(sample: &Sample, mode: ObjectMaskMode) -> Mask {
    match mode {
        ObjectMaskMode::GroundTruth => sample.object_mask.clone(),
        ObjectMaskMode::Threshold => threshold_mask(&sample.image),
    }
}

/// Otsu threshold over a 256-bin histogram. Returns the threshold and the
/// two class means, or `None` when all pixels share one bin.
fn otsu(image: &Image) -> Option<(f64, f64, f64)> {
    let mut hist = [0usize; 256];
    for &v in &image.data {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total = image.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(b, ..)| between > b) {
            best = Some((between, t, m0, m1));
        }
    }
    best.map(|(_, t, m0, m1)| ((t as f64 + 0.5) / 255.0, m0 / 255.0, m1 / 255.0))
}

pub fn threshold_mask(image: &Image) -> Mask {
    let all = || Mask::filled(image.height, image.width, true);
    let Some((threshold, low_mean, high_mean)) = otsu(image) else {
        log::warn!("object mask: constant image, falling back to full frame");
        return all();
    };
    if high_mean - low_mean < MIN_SPLIT_CONTRAST {
        log::warn!(
            "object mask: no bimodal split (class means {low_mean:.3} / {high_mean:.3}), using full frame"
        );
        return all();
    }
    let above = image.map(|&v| v > threshold);
    let largest = largest_component(&above);
    if largest.any() {
        largest
    } else {
        all()
    }
}

/// Largest 4-connected component of `mask`; ties go to the first in
/// row-major order.
pub fn largest_component(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![usize::MAX; mask.len()];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask.data[start] || label[start] != usize::MAX {
            continue;
        }
        let mut members = vec![start];
        label[start] = start;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.data[j] && label[j] == usize::MAX {
                    label[j] = start;
                    members.push(j);
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if members.len() > best.len() {
            best = members;
        }
    }
    let mut out = Mask::filled(h, w, false);
    for i in best {
        out.data[i] = true;
    }
    out
}

/// Grows a random 4-connected region of `target` pixels inside `support`,
/// starting from a random support pixel.
fn grow_region(support: &Mask, target: usize, rng: &mut impl Rng) -> Mask {
    let (h, w) = (support.height, support.width);
    let mut region = Mask::filled(h, w, false);
    let cells: Vec<usize> = (0..support.len()).filter(|&i| support.data[i]).collect();
    if cells.is_empty() {
        return region;
    }
    let start = cells[rng.gen_range(0..cells.len())];
    let mut queued = vec![false; support.len()];
    let mut frontier = vec![start];
    queued[start] = true;
    let mut size = 0;
    while size < target && !frontier.is_empty() {
        let i = frontier.swap_remove(rng.gen_range(0..frontier.len()));
        region.data[i] = true;
        size += 1;
        let (r, c) = (i / w, i % w);
        let mut neighbours = Vec::with_capacity(4);
        if r > 0 {
            neighbours.push(i - w);
        }
        if r + 1 < h {
            neighbours.push(i + w);
        }
        if c > 0 {
            neighbours.push(i - 1);
        }
        if c + 1 < w {
            neighbours.push(i + 1);
        }
        for j in neighbours {
            if support.data[j] && !queued[j] {
                queued[j] = true;
                frontier.push(j);
            }
        }
    }
    region
}

/// Picks the region to perturb for one synthesis pass.
pub fn select_region(object: &Mask, mode: RegionMode, seed: u64) -> Mask {
    let mut rng = seed::rng(seed, "oagm/region");
    match mode {
        RegionMode::FullObject => object.clone(),
        RegionMode::SubRegion | RegionMode::WholeImage => {
            let f = rng.gen_range(SUB_REGION_FRACTION.0..=SUB_REGION_FRACTION.1);
            let target = ((f * object.count() as f64).round() as usize).max(1);
            let support = if mode == RegionMode::SubRegion {
                object.clone()
            } else {
                Mask::filled(object.height, object.width, true)
            };
            grow_region(&support, target, &mut rng)
        }
    }
}

/// Adds `N(0, sigma^2)` noise to the selected region of `sample.image` and
/// clamps to `[0, 1]`. `object` is the object mask to synthesize on.
pub fn synthesize_anomaly(
    sample: &Sample,
    object: &Mask,
    sigma: f64,
    region_mode: RegionMode,
    seed: u64,
) -> Result<SynthSample> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma {sigma} must be >= 0"
        )));
    }
    if !object.any() {
        return Err(Error::InvalidArgument("empty object mask".into()));
    }
    if !object.same_dims(&sample.image) {
        return Err(Error::InvalidArgument(
            "object mask and image dimensions differ".into(),
        ));
    }
    let region = select_region(object, region_mode, seed);
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    let mut rng = seed::rng(seed, "oagm/noise");
    let mut image = sample.image.clone();
    for (v, &m) in image.data.iter_mut().zip(&region.data) {
        if m {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(SynthSample {
        image,
        normal_mask: region.complement(),
        abnormal_mask: region,
        source_seed: seed,
        sigma,
    })
}
