//! Synthetic segmentation datasets with an attribute-dependent appearance
//! confound. Subgroup 1 images get lower foreground contrast and stronger
//! noise as `difficulty_gap` grows; mask geometry never depends on the
//! attribute.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use fairseg_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AttributeSpec, Sample, SegDataset};
use crate::error::{FairsegError, IoContext, Result};

/// Foreground/background contrast of an unaffected image.
pub const BASE_CONTRAST: f64 = 0.4;
/// Noise standard deviation of an unaffected image.
pub const BASE_NOISE: f64 = 0.05;
/// Extra noise standard deviation per unit of `difficulty_gap`.
pub const NOISE_PER_GAP: f64 = 0.5;

const MIN_AREA: f64 = 0.01;
const MAX_AREA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub resolution: usize,
    /// Probability that a sample belongs to subgroup 1.
    pub attribute_balance: f64,
    pub difficulty_gap: f64,
    pub shape: ShapeFamily,
    pub seed: u64,
    /// Relative frequency of each age bin (0-20, ..., 80-100). Age carries
    /// no appearance effect.
    pub age_bin_weights: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            resolution: 64,
            attribute_balance: 0.5,
            difficulty_gap: 0.5,
            shape: ShapeFamily::Ellipse,
            seed: 0,
            age_bin_weights: vec![1.0; 5],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(FairsegError::config("n_samples", "must be at least 1"));
        }
        if self.resolution < 32 {
            return Err(FairsegError::config("resolution", format!("{} < 32", self.resolution)));
        }
        if !(self.attribute_balance > 0.0 && self.attribute_balance < 1.0) {
            return Err(FairsegError::config(
                "attribute_balance",
                format!("{} not in (0, 1)", self.attribute_balance),
            ));
        }
        if !(self.difficulty_gap >= 0.0 && self.difficulty_gap.is_finite()) {
            return Err(FairsegError::config("difficulty_gap", format!("{} must be >= 0", self.difficulty_gap)));
        }
        let age_bins = AttributeSpec::age().num_subgroups();
        if self.age_bin_weights.len() != age_bins
            || self.age_bin_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.age_bin_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(FairsegError::config(
                "age_bin_weights",
                format!("need {age_bins} non-negative weights with a positive sum"),
            ));
        }
        Ok(())
    }

    /// Contrast and noise standard deviation for a subgroup.
    pub fn appearance(&self, attribute: usize) -> (f64, f64) {
        if attribute == 1 {
            (
                BASE_CONTRAST * (1.0 - self.difficulty_gap),
                BASE_NOISE + NOISE_PER_GAP * self.difficulty_gap,
            )
        } else {
            (BASE_CONTRAST, BASE_NOISE)
        }
    }
}

/// A generated sample before encoding into a dataset.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub sample: Sample,
    pub sex: usize,
    pub age: u32,
}

fn shape_mask(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = cfg.resolution;
    let nf = n as f64;
    loop {
        let cx = rng.random_range(0.25..0.75) * nf;
        let cy = rng.random_range(0.25..0.75) * nf;
        let rx = rng.random_range(0.08..0.35) * nf;
        let ry = rng.random_range(0.08..0.35) * nf;
        let theta = rng.random_range(0.0..PI);
        let (lobes, amp, phase) = match cfg.shape {
            ShapeFamily::Ellipse => (0.0, 0.0, 0.0),
            ShapeFamily::Blob => (
                f64::from(rng.random_range(2u8..=5)),
                rng.random_range(0.1..0.3),
                rng.random_range(0.0..2.0 * PI),
            ),
        };
        let (s, c) = theta.sin_cos();
        let mut mask = vec![0u8; n * n];
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                let r = (u * u + v * v).sqrt();
                let limit = 1.0 + amp * (lobes * v.atan2(u) + phase).sin();
                mask[y * n + x] = u8::from(r <= limit);
            }
        }
        let area = mask.iter().map(|&m| f64::from(m)).sum::<f64>() / (n * n) as f64;
        if (MIN_AREA..=MAX_AREA).contains(&area) {
            return mask;
        }
    }
}

/// Generate sample `index` of `cfg`. Each sample draws from its own stream,
/// so generation order does not matter.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let sex = usize::from(rng.random_bool(cfg.attribute_balance));
    let bins = WeightedIndex::new(&cfg.age_bin_weights).expect("validated weights");
    let bin = bins.sample(&mut rng);
    let age = rng.random_range(bin as u32 * 20..bin as u32 * 20 + 20);
    let mask = shape_mask(cfg, &mut rng);
    let (contrast, sigma) = cfg.appearance(sex);
    let background = rng.random_range(0.2..0.4);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let data = mask
        .iter()
        .map(|&m| {
            let v = background + contrast * f64::from(m) + noise.sample(&mut rng);
            (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
        .collect();
    let n = cfg.resolution;
    SynthSample {
        sample: Sample {
            id: format!("s{index:05}"),
            image: Tensor::new(&[1, n, n], data).expect("image shape"),
            mask,
            attribute: sex,
            raw_attribute: None,
        },
        sex,
        age,
    }
}

fn sex_code(sex: usize) -> &'static str {
    if sex == 0 {
        "F"
    } else {
        "M"
    }
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    config: &'a SynthConfig,
    subgroup_counts: Vec<usize>,
}

/// Build the dataset (attribute = sex) and, when `out_root` is given, write
/// it in the standard layout with `synth_manifest.json`.
pub fn generate(cfg: &SynthConfig, out_root: Option<&Path>) -> Result<SegDataset> {
    cfg.validate()?;
    let generated: Vec<SynthSample> = (0..cfg.n_samples).map(|i| generate_sample(cfg, i)).collect();
    let ages: std::collections::HashMap<String, (usize, u32)> = generated
        .iter()
        .map(|g| (g.sample.id.clone(), (g.sex, g.age)))
        .collect();
    let spec = AttributeSpec::sex();
    let ds = SegDataset::new(
        generated.into_iter().map(|g| g.sample).collect(),
        2,
        spec.name.clone(),
        spec.labels(),
    )?;
    if let Some(root) = out_root {
        fs::create_dir_all(root).at(root)?;
        crate::data::write_dataset(root, &ds, |s| {
            let (sex, age) = ages[&s.id];
            (sex_code(sex).to_string(), age.to_string())
        })?;
        let manifest = SynthManifest {
            config: cfg,
            subgroup_counts: ds.subgroup_counts(),
        };
        let path = root.join("synth_manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).at(&path)?;
    }
    Ok(ds)
}
