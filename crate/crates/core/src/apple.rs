//! Latent perturbation generator `G_p`, attribute discriminator `D_p`, and
//! the adversarial losses that tie them to a frozen segmentor.
//!
//! * `L_D      = CE(D_p(f_p), a)`
//! * `L_G^seg  = ½ (CE(ŷ, y) + DiceLoss(ŷ, y))`
//! * `L_G^fair = −CE(D_p(f_p), a) − α·H(D_p(f_p))`
//! * `L_G      = L_G^seg + β·L_G^fair`
//!
//! with `f_p = f_o + G_p(f_o)` and `ŷ = D_s(f_p)`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use fairseg_nn::layers::{BatchNorm1d, Conv2d, ConvBlock, Linear, RunningUpdate};
use fairseg_nn::{Bound, ParamSet, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FairsegError, IoContext, Result};
use crate::segmentor::LatentVars;

/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppleHyperparams {
    /// Entropy weight.
    pub alpha: f64,
    /// Fairness weight.
    pub beta: f64,
}

impl Default for AppleHyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
        }
    }
}

impl AppleHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(FairsegError::config(name, format!("{v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// `L_D`: mean cross-entropy of the discriminator logits.
pub fn loss_discriminator<'g>(logits: Var<'g>, attrs: &[usize]) -> Var<'g> {
    logits.cross_entropy(attrs)
}

/// `L_G^seg`: half the sum of pixel cross-entropy and soft Dice loss.
pub fn loss_seg<'g>(logits: Var<'g>, mask: &[usize]) -> Var<'g> {
    logits
        .pixel_cross_entropy(mask)
        .add(logits.soft_dice_loss(mask, DICE_SMOOTH))
        .scale(0.5)
}

/// `L_G^fair`: negative cross-entropy minus `alpha` times the batch-mean
/// softmax entropy.
pub fn loss_fair<'g>(logits: Var<'g>, attrs: &[usize], alpha: f64) -> Var<'g> {
    logits
        .cross_entropy(attrs)
        .neg()
        .sub(logits.softmax_entropy().scale(alpha))
}

/// `L_G = seg + beta * fair`.
pub fn loss_generator<'g>(seg: Var<'g>, fair: Var<'g>, beta: f64) -> Var<'g> {
    seg.add(fair.scale(beta))
}

/// Scalar form of [`loss_generator`].
pub fn combine_generator_loss(seg: f64, fair: f64, beta: f64) -> f64 {
    seg + beta * fair
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Widths of the three downsampling blocks; the last one is also the
    /// bottleneck width.
    pub widths: [usize; 3],
    pub bottleneck_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128],
            bottleneck_blocks: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            widths: [16, 32, 64],
            bottleneck_blocks: 4,
        }
    }
}

/// Residual embedding perturber. Output has the input's shape and is exactly
/// zero at initialization.
#[derive(Debug, Clone)]
pub struct PerturbationGenerator {
    config: GeneratorConfig,
    channels: usize,
    spatial: (usize, usize),
    resample: bool,
    params: ParamSet,
    downs: Vec<ConvBlock>,
    bottleneck: Vec<ConvBlock>,
    ups: Vec<ConvBlock>,
    out: Conv2d,
}

impl PerturbationGenerator {
    /// Generator for `[B, channels, h, w]` embeddings. Downsampling is
    /// stride 2 only when both `h` and `w` are multiples of 8.
    pub fn new(config: GeneratorConfig, channels: usize, spatial: (usize, usize), seed: u64) -> Result<Self> {
        if config.widths.contains(&0) || channels == 0 {
            return Err(FairsegError::config("generator.widths", "widths must be positive"));
        }
        let (h, w) = spatial;
        let resample = h >= 8 && w >= 8 && h % 8 == 0 && w % 8 == 0;
        if !resample {
            log::info!("embedding {h}x{w} too small for 3 stride-2 stages; G_p keeps resolution");
        }
        let stride = if resample { 2 } else { 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let [w0, w1, w2] = config.widths;
        let downs = [(channels, w0), (w0, w1), (w1, w2)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| ConvBlock::new(&mut ps, &format!("gp.down{i}"), a, b, stride, &mut rng))
            .collect();
        let bottleneck = (0..config.bottleneck_blocks)
            .map(|i| ConvBlock::new(&mut ps, &format!("gp.mid{i}"), w2, w2, 1, &mut rng))
            .collect();
        let ups = [(w2, w1), (w1, w0)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| ConvBlock::new(&mut ps, &format!("gp.up{i}"), a, b, 1, &mut rng))
            .collect();
        let out = Conv2d::zeros(&mut ps, "gp.out", w0, channels, 3);
        Ok(Self {
            config,
            channels,
            spatial,
            resample,
            params: ps,
            downs,
            bottleneck,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.spatial
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.spatial;
        if shape.len() != 4 || shape[1] != self.channels || shape[2] != h || shape[3] != w {
            return Err(FairsegError::Shape(format!(
                "generator expects [B, {}, {h}, {w}], got {shape:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// `G_p(f)`.
    pub fn forward<'g>(&self, p: &Bound<'g>, f: Var<'g>) -> Result<Var<'g>> {
        self.check(&f.shape())?;
        let mut h = f;
        for d in &self.downs {
            h = d.forward(p, h);
        }
        for m in &self.bottleneck {
            h = m.forward(p, h);
        }
        for u in &self.ups {
            if self.resample {
                h = h.upsample_nearest2();
            }
            h = u.forward(p, h);
        }
        if self.resample {
            h = h.upsample_nearest2();
        }
        Ok(self.out.forward(p, h))
    }

    /// `f_p = f_o + G_p(f_o)`; skips pass through unchanged.
    pub fn perturb<'g>(&self, p: &Bound<'g>, latent: &LatentVars<'g>) -> Result<LatentVars<'g>> {
        let delta = self.forward(p, latent.tensor)?;
        Ok(LatentVars {
            tensor: latent.tensor.add(delta),
            skips: latent.skips.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

/// Attribute classifier on embeddings: global average pooling, then three
/// Linear-BatchNorm blocks (ReLU between them).
#[derive(Debug, Clone)]
pub struct AttributeDiscriminator {
    config: DiscriminatorConfig,
    channels: usize,
    num_subgroups: usize,
    params: ParamSet,
    blocks: Vec<(Linear, BatchNorm1d)>,
}

impl AttributeDiscriminator {
    pub fn new(config: DiscriminatorConfig, channels: usize, num_subgroups: usize, seed: u64) -> Result<Self> {
        if num_subgroups < 2 {
            return Err(FairsegError::config("num_subgroups", "discriminator needs K >= 2"));
        }
        if config.hidden == 0 {
            return Err(FairsegError::config("discriminator.hidden", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let dims = [channels, config.hidden, config.hidden, num_subgroups];
        let blocks = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                (
                    Linear::new(&mut ps, &format!("dp.fc{i}"), d[0], d[1], &mut rng),
                    BatchNorm1d::new(&mut ps, &format!("dp.bn{i}"), d[1]),
                )
            })
            .collect();
        Ok(Self {
            config,
            channels,
            num_subgroups,
            params: ps,
            blocks,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn num_subgroups(&self) -> usize {
        self.num_subgroups
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn pool<'g>(&self, f: Var<'g>) -> Result<Var<'g>> {
        let s = f.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(FairsegError::Shape(format!(
                "discriminator expects [B, {}, h, w], got {s:?}",
                self.channels
            )));
        }
        Ok(f.global_avg_pool())
    }

    /// Logits `[B, K]` using batch statistics; also returns the running
    /// statistic updates for the caller to apply.
    pub fn forward_train<'g>(&self, p: &Bound<'g>, f: Var<'g>) -> Result<(Var<'g>, Vec<RunningUpdate>)> {
        let mut h = self.pool(f)?;
        let mut updates = Vec::with_capacity(self.blocks.len());
        for (i, (fc, bn)) in self.blocks.iter().enumerate() {
            let (out, upd) = bn.forward_train(p, fc.forward(p, h));
            updates.push(upd);
            h = if i + 1 < self.blocks.len() { out.relu() } else { out };
        }
        Ok((h, updates))
    }

    /// Logits `[B, K]` using running statistics.
    pub fn forward_eval<'g>(&self, p: &Bound<'g>, f: Var<'g>) -> Result<Var<'g>> {
        let mut h = self.pool(f)?;
        for (i, (fc, bn)) in self.blocks.iter().enumerate() {
            let out = bn.forward_eval(&self.params, p, fc.forward(p, h));
            h = if i + 1 < self.blocks.len() { out.relu() } else { out };
        }
        Ok(h)
    }

    pub fn apply_updates(&mut self, updates: &[RunningUpdate]) -> Result<()> {
        for u in updates {
            u.apply(&mut self.params)?;
        }
        Ok(())
    }
}

/// `G_p`, `D_p` and their loss weights.
#[derive(Debug, Clone)]
pub struct PerturberBundle {
    pub generator: PerturbationGenerator,
    pub discriminator: AttributeDiscriminator,
    pub hyper: AppleHyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppleManifest {
    pub hyper: AppleHyperparams,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub embedding_channels: usize,
    pub embedding_spatial: (usize, usize),
    pub num_subgroups: usize,
    pub base_segmentor_sha256: String,
    pub seed: u64,
    pub generator_sha256: String,
    pub discriminator_sha256: String,
}

pub const GENERATOR_FILE: &str = "generator.bin";
pub const DISCRIMINATOR_FILE: &str = "discriminator.bin";
pub const APPLE_MANIFEST_FILE: &str = "apple_manifest.json";

impl PerturberBundle {
    /// Fresh bundle; `G_p` and `D_p` draw from distinct streams of `seed`.
    pub fn new(
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
        hyper: AppleHyperparams,
        channels: usize,
        spatial: (usize, usize),
        num_subgroups: usize,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            generator: PerturbationGenerator::new(generator, channels, spatial, seed)?,
            discriminator: AttributeDiscriminator::new(
                discriminator,
                channels,
                num_subgroups,
                seed.wrapping_add(0x9E37_79B9),
            )?,
            hyper,
        })
    }

    pub fn save(&self, dir: &Path, base_hash: &str, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        for (file, ps) in [
            (GENERATOR_FILE, self.generator.params()),
            (DISCRIMINATOR_FILE, self.discriminator.params()),
        ] {
            let path = dir.join(file);
            ps.write_archive(BufWriter::new(File::create(&path).at(&path)?))?;
        }
        let manifest = AppleManifest {
            hyper: self.hyper,
            generator: self.generator.config.clone(),
            discriminator: self.discriminator.config.clone(),
            embedding_channels: self.generator.channels,
            embedding_spatial: self.generator.spatial,
            num_subgroups: self.discriminator.num_subgroups,
            base_segmentor_sha256: base_hash.to_string(),
            seed,
            generator_sha256: self.generator.params.sha256_hex(),
            discriminator_sha256: self.discriminator.params.sha256_hex(),
        };
        let path = dir.join(APPLE_MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, AppleManifest)> {
        let path = dir.join(APPLE_MANIFEST_FILE);
        if !path.exists() {
            return Err(FairsegError::MissingCheckpoint {
                path: dir.to_path_buf(),
                hint: "train APPLE first (`fairseg train --kind apple`)".into(),
            });
        }
        let m: AppleManifest = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
        let mut bundle = Self::new(
            m.generator.clone(),
            m.discriminator.clone(),
            m.hyper,
            m.embedding_channels,
            m.embedding_spatial,
            m.num_subgroups,
            m.seed,
        )?;
        for (file, ps) in [
            (GENERATOR_FILE, bundle.generator.params_mut()),
            (DISCRIMINATOR_FILE, bundle.discriminator.params_mut()),
        ] {
            let path = dir.join(file);
            ps.load_archive(BufReader::new(File::open(&path).at(&path)?))?;
        }
        if bundle.generator.params.sha256_hex() != m.generator_sha256
            || bundle.discriminator.params.sha256_hex() != m.discriminator_sha256
        {
            return Err(FairsegError::Load(format!("{}: parameter hash mismatch", dir.display())));
        }
        Ok((bundle, m))
    }
}
