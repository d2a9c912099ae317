//! Baseline segmentor training (plain, re-sampled, per-subgroup) and the
//! alternating `D_p` / `G_p` optimization of APPLE against a frozen
//! segmentor.

use fairseg_nn::{Adam, Graph, Optimizer, ParamSet, Sgd, Tensor};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::apple::{loss_discriminator, loss_fair, loss_generator, loss_seg, PerturberBundle};
use crate::data::{split_dataset, SegDataset};
use crate::error::{FairsegError, Result};
use crate::evaluation::{evaluate, Predictor};
use crate::segmentor::{LatentVars, UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_segmentor: f64,
    /// SGD momentum for segmentor training (0 = plain SGD).
    pub momentum: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub device: String,
    pub val_fraction: f64,
    /// Random flips and 90-degree rotations.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr_segmentor: 1e-2,
            momentum: 0.0,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            alpha: 0.1,
            beta: 1.0,
            seed: 0,
            device: "cpu".into(),
            val_fraction: 0.1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(FairsegError::config(field, reason));
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        for (name, v) in [
            ("lr_segmentor", self.lr_segmentor),
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, format!("{v} must be > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} not in [0, 1)", self.momentum));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", format!("{} not in [0, 1)", self.val_fraction));
        }
        if self.device != "cpu" {
            return bad("device", format!("`{}` unsupported; only `cpu` is available", self.device));
        }
        crate::apple::AppleHyperparams {
            alpha: self.alpha,
            beta: self.beta,
        }
        .validate()
    }
}

/// Losses of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_d: Option<f64>,
    pub l_g: Option<f64>,
    pub l_g_seg: f64,
    pub l_g_fair: Option<f64>,
}

/// Epoch means of the step losses plus validation Dice per subgroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_d: Option<f64>,
    pub l_g: Option<f64>,
    pub l_g_seg: f64,
    pub l_g_fair: Option<f64>,
    pub val_dice: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl History {
    fn close_epoch(&mut self, epoch: usize, val_dice: Vec<Option<f64>>) {
        let steps: Vec<&StepRecord> = self.steps.iter().filter(|s| s.epoch == epoch).collect();
        let mean = |f: fn(&StepRecord) -> Option<f64>| {
            let v: Vec<f64> = steps.iter().filter_map(|s| f(s)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        self.epochs.push(EpochRecord {
            epoch,
            l_d: mean(|s| s.l_d),
            l_g: mean(|s| s.l_g),
            l_g_seg: mean(|s| Some(s.l_g_seg)).unwrap_or(f64::NAN),
            l_g_fair: mean(|s| s.l_g_fair),
            val_dice,
        });
    }

    /// `history.csv` contents.
    pub fn to_csv(&self, num_subgroups: usize) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["epoch", "L_D", "L_G", "L_G_seg", "L_G_fair"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..num_subgroups).map(|k| format!("val_dice_k{k}")));
        w.write_record(&header)?;
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                cell(e.l_d),
                cell(e.l_g),
                cell(Some(e.l_g_seg)),
                cell(e.l_g_fair),
            ];
            row.extend(e.val_dice.iter().map(|&d| cell(d)));
            w.write_record(&row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| FairsegError::Invalid(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Flip/rotate an image batch and its masks in place, per sample.
fn augment_batch(images: &mut Tensor, masks: &mut [usize], rng: &mut ChaCha8Rng) {
    let (b, c, h, w) = images.dims4();
    let square = h == w;
    let plane = h * w;
    for bi in 0..b {
        let flip_x = rng.random_bool(0.5);
        let flip_y = rng.random_bool(0.5);
        let rot = if square { rng.random_range(0..4u8) } else { 0 };
        if !flip_x && !flip_y && rot == 0 {
            continue;
        }
        let map = |y: usize, x: usize| -> usize {
            let (mut y, mut x) = (y, x);
            if flip_y {
                y = h - 1 - y;
            }
            if flip_x {
                x = w - 1 - x;
            }
            for _ in 0..rot {
                let (ny, nx) = (x, h - 1 - y);
                y = ny;
                x = nx;
            }
            y * w + x
        };
        let src: Vec<usize> = (0..plane).map(|i| map(i / w, i % w)).collect();
        for ci in 0..c {
            let data = &mut images.data_mut()[(bi * c + ci) * plane..][..plane];
            let orig = data.to_vec();
            for (d, &s) in data.iter_mut().zip(&src) {
                *d = orig[s];
            }
        }
        let m = &mut masks[bi * plane..][..plane];
        let orig = m.to_vec();
        for (d, &s) in m.iter_mut().zip(&src) {
            *d = orig[s];
        }
    }
}

/// How a segmentor epoch draws its samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Every sample once, shuffled.
    Shuffle,
    /// `N` draws with replacement, each weighted by `1 / |D_k|` of its subgroup.
    InverseFrequency,
}

/// Per-sample weights `1 / |D_k|`; errors if any declared subgroup is empty.
pub fn inverse_frequency_weights(attributes: &[usize], num_subgroups: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_subgroups];
    for &a in attributes {
        counts[a] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(FairsegError::Invalid(format!(
            "re-sampling needs every subgroup populated; subgroup {k} is empty"
        )));
    }
    Ok(attributes.iter().map(|&a| 1.0 / counts[a] as f64).collect())
}

/// `n` sample indices drawn with replacement under [`inverse_frequency_weights`].
pub fn resample_indices(
    attributes: &[usize],
    num_subgroups: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let weights = inverse_frequency_weights(attributes, num_subgroups)?;
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| FairsegError::Invalid(format!("re-sampling weights: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

fn epoch_order(
    ds: &SegDataset,
    sampling: Sampling,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    match sampling {
        Sampling::Shuffle => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(rng);
            Ok(idx)
        }
        Sampling::InverseFrequency => {
            resample_indices(&ds.attributes(), ds.num_subgroups(), ds.len(), rng)
        }
    }
}

fn check_finite(value: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(FairsegError::Divergence {
            epoch,
            step,
            detail: format!("{what} = {value}"),
        })
    }
}

/// Stratified validation split of `train`; returns `(fit, val)`.
fn hold_out(train: &SegDataset, fraction: f64, seed: u64) -> Result<(SegDataset, Option<SegDataset>)> {
    if fraction <= 0.0 || train.len() < 4 {
        return Ok((train.clone(), None));
    }
    let (fit, val) = split_dataset(train, 1.0 - fraction, seed)?;
    if val.is_empty() {
        log::warn!("validation split is empty; training without checkpoint selection");
        return Ok((fit, None));
    }
    Ok((fit, Some(val)))
}

/// Result of training one segmentor.
#[derive(Debug, Clone)]
pub struct SegmentorRun {
    pub model: UNet,
    pub history: History,
    /// Epoch whose parameters were kept (best mean validation Dice).
    pub selected_epoch: usize,
}

/// Train a fresh segmentor on `train`: Dice-CE loss, SGD, optional
/// augmentation, best-validation-Dice checkpoint selection.
pub fn train_segmentor(
    train: &SegDataset,
    arch: &UNetConfig,
    cfg: &TrainConfig,
    sampling: Sampling,
) -> Result<SegmentorRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(FairsegError::Invalid("training set is empty".into()));
    }
    let mut model = UNet::new(arch.clone(), cfg.seed)?;
    let (fit, val) = hold_out(train, cfg.val_fraction, cfg.seed)?;
    if sampling == Sampling::InverseFrequency {
        inverse_frequency_weights(&fit.attributes(), fit.num_subgroups())?;
    }
    let mut opt = Sgd::new(model.params(), cfg.lr_segmentor, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut history = History::default();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&fit, sampling, &mut rng)?;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, mut m, _) = fit.batch(chunk);
            if cfg.augment {
                augment_batch(&mut x, &mut m, &mut rng);
            }
            let g = Graph::new();
            let p = model.params().bind(&g, true);
            let loss = loss_seg(model.forward(&p, g.constant(x))?, &m);
            let value = loss.item();
            check_finite(value, epoch, step, "segmentation loss")?;
            let mut grads = g.backward(loss);
            let grads = p.grads(&mut grads);
            drop(p);
            opt.step(model.params_mut()?, &grads)?;
            history.steps.push(StepRecord {
                epoch,
                step,
                l_d: None,
                l_g: None,
                l_g_seg: value,
                l_g_fair: None,
            });
        }
        let val_dice = match &val {
            Some(v) => {
                let report = evaluate(&Predictor::Segmentor(&model), v)?;
                let mean = report.mean_dice();
                if best.as_ref().is_none_or(|(b, _, _)| mean > *b) {
                    best = Some((mean, epoch, model.params().clone()));
                }
                report.utilities.values
            }
            None => vec![None; train.num_subgroups()],
        };
        history.close_epoch(epoch, val_dice);
        log::info!(
            "segmentor epoch {epoch}: loss {:.4}",
            history.epochs.last().map_or(f64::NAN, |e| e.l_g_seg)
        );
    }
    let selected_epoch = match best {
        Some((_, epoch, params)) => {
            *model.params_mut()? = params;
            epoch
        }
        None => cfg.epochs - 1,
    };
    Ok(SegmentorRun {
        model,
        history,
        selected_epoch,
    })
}

/// Plain baseline.
pub fn train_baseline(train: &SegDataset, arch: &UNetConfig, cfg: &TrainConfig) -> Result<SegmentorRun> {
    train_segmentor(train, arch, cfg, Sampling::Shuffle)
}

/// RS baseline: inverse-frequency re-sampling of subgroups.
pub fn train_resampled(train: &SegDataset, arch: &UNetConfig, cfg: &TrainConfig) -> Result<SegmentorRun> {
    train_segmentor(train, arch, cfg, Sampling::InverseFrequency)
}

/// SM baseline: one segmentor per subgroup, trained on that subgroup only.
pub fn train_subgroup_models(
    train: &SegDataset,
    arch: &UNetConfig,
    cfg: &TrainConfig,
) -> Result<Vec<SegmentorRun>> {
    let groups = train.subgroup_indices();
    if let Some(k) = groups.iter().position(Vec::is_empty) {
        return Err(FairsegError::Invalid(format!(
            "subgroup models need every subgroup populated; subgroup {k} is empty"
        )));
    }
    groups
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let sub = train.subset(idx);
            if sub.len() < 4 {
                log::warn!("subgroup {k} has {} samples; training without validation", sub.len());
            }
            let sub_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(k as u64),
                ..cfg.clone()
            };
            train_segmentor(&sub, arch, &sub_cfg, Sampling::Shuffle)
        })
        .collect()
}

/// Outcome of [`train_apple`].
#[derive(Debug, Clone)]
pub struct AppleRun {
    pub history: History,
    pub frozen_hash_start: String,
    pub frozen_hash_end: String,
}

/// Alternating optimization of `D_p` (on `L_D`) and `G_p` (on `L_G`) against
/// the frozen `segmentor`, one `D_p` step per `G_p` step.
///
/// On a non-finite loss the bundle is restored to its state after the last
/// good step and the divergence error is returned.
pub fn train_apple(
    segmentor: &UNet,
    bundle: &mut PerturberBundle,
    train: &SegDataset,
    cfg: &TrainConfig,
) -> Result<AppleRun> {
    cfg.validate()?;
    if !segmentor.is_frozen() {
        return Err(FairsegError::Invalid("APPLE needs a frozen segmentor; call freeze() first".into()));
    }
    if train.is_empty() {
        return Err(FairsegError::Invalid("training set is empty".into()));
    }
    let (c, h, w) = train.image_dims().expect("non-empty");
    if c != segmentor.config().in_channels {
        return Err(FairsegError::Shape(format!(
            "dataset has {c} channels, segmentor expects {}",
            segmentor.config().in_channels
        )));
    }
    let spatial = segmentor.config().embedding_spatial(h, w)?;
    if bundle.generator.channels() != segmentor.config().embedding_channels()
        || bundle.generator.spatial() != spatial
    {
        return Err(FairsegError::Shape(format!(
            "perturber built for {}x{:?}, segmentor embedding is {}x{spatial:?}",
            bundle.generator.channels(),
            bundle.generator.spatial(),
            segmentor.config().embedding_channels()
        )));
    }
    if bundle.discriminator.num_subgroups() != train.num_subgroups() {
        return Err(FairsegError::Shape(format!(
            "discriminator has {} outputs, dataset has K = {}",
            bundle.discriminator.num_subgroups(),
            train.num_subgroups()
        )));
    }
    bundle.hyper = crate::apple::AppleHyperparams {
        alpha: cfg.alpha,
        beta: cfg.beta,
    };
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    let frozen_hash_start = segmentor.param_hash();
    let (fit, val) = hold_out(train, cfg.val_fraction, cfg.seed)?;
    let mut opt_d = Adam::new(bundle.discriminator.params(), cfg.lr_discriminator)?;
    let mut opt_g = Adam::new(bundle.generator.params(), cfg.lr_generator)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&fit, Sampling::Shuffle, &mut rng)?;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, mut m, a) = fit.batch(chunk);
            if cfg.augment {
                augment_batch(&mut x, &mut m, &mut rng);
            }
            let f_o = segmentor.embed(&x)?;
            let last_good = bundle.clone();

            // D_p step on f_p from the current G_p.
            let l_d = {
                let g = Graph::new();
                let pg = bundle.generator.params().bind(&g, false);
                let pd = bundle.discriminator.params().bind(&g, true);
                let f_p = bundle.generator.perturb(&pg, &LatentVars::constant(&g, &f_o))?;
                let (logits, updates) = bundle.discriminator.forward_train(&pd, f_p.tensor)?;
                let loss = loss_discriminator(logits, &a);
                let value = loss.item();
                check_finite(value, epoch, step, "L_D")?;
                let mut grads = g.backward(loss);
                let grads = pd.grads(&mut grads);
                drop(pd);
                opt_d.step(bundle.discriminator.params_mut(), &grads)?;
                bundle.discriminator.apply_updates(&updates)?;
                value
            };

            // G_p step against the updated D_p, on a fresh forward pass.
            let (l_g, l_seg, l_fair) = {
                let g = Graph::new();
                let pg = bundle.generator.params().bind(&g, true);
                let pd = bundle.discriminator.params().bind(&g, false);
                let ps = segmentor.params().bind(&g, false);
                let f_p = bundle.generator.perturb(&pg, &LatentVars::constant(&g, &f_o))?;
                let (d_logits, _) = bundle.discriminator.forward_train(&pd, f_p.tensor)?;
                let seg_logits = segmentor.decode(&ps, &f_p)?;
                let l_seg = loss_seg(seg_logits, &m);
                let l_fair = loss_fair(d_logits, &a, alpha);
                let l_g = loss_generator(l_seg, l_fair, beta);
                let values = (l_g.item(), l_seg.item(), l_fair.item());
                if let Err(e) = check_finite(values.0, epoch, step, "L_G") {
                    *bundle = last_good;
                    return Err(e);
                }
                let mut grads = g.backward(l_g);
                let grads = pg.grads(&mut grads);
                drop(pg);
                opt_g.step(bundle.generator.params_mut(), &grads)?;
                values
            };
            history.steps.push(StepRecord {
                epoch,
                step,
                l_d: Some(l_d),
                l_g: Some(l_g),
                l_g_seg: l_seg,
                l_g_fair: Some(l_fair),
            });
        }
        let val_dice = match &val {
            Some(v) => {
                evaluate(&Predictor::Apple(segmentor, &bundle.generator), v)?
                    .utilities
                    .values
            }
            None => vec![None; train.num_subgroups()],
        };
        history.close_epoch(epoch, val_dice);
        if let Some(e) = history.epochs.last() {
            log::info!(
                "apple epoch {epoch}: L_D {:.4} L_G {:.4} seg {:.4} fair {:.4}",
                e.l_d.unwrap_or(f64::NAN),
                e.l_g.unwrap_or(f64::NAN),
                e.l_g_seg,
                e.l_g_fair.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(AppleRun {
        history,
        frozen_hash_start,
        frozen_hash_end: segmentor.param_hash(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// `1 / K`.
    pub chance: f64,
}

/// Fit a fresh discriminator on `train_f` embeddings with Adam and report
/// its attribute accuracy on `test_f` (running-statistics mode).
pub fn train_probe(
    train_f: &Tensor,
    train_a: &[usize],
    test_f: &Tensor,
    test_a: &[usize],
    num_subgroups: usize,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<ProbeResult> {
    use crate::apple::{AttributeDiscriminator, DiscriminatorConfig};
    let channels = train_f.shape()[1];
    let mut probe =
        AttributeDiscriminator::new(DiscriminatorConfig::default(), channels, num_subgroups, cfg.seed ^ 0x5EED)?;
    let mut opt = Adam::new(probe.params(), cfg.lr_discriminator)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let n = train_a.len();
    for _ in 0..epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let rows: Vec<Tensor> = chunk.iter().map(|&i| train_f.narrow_batch(i, 1)).collect();
            let x = Tensor::stack_batch(&rows.iter().collect::<Vec<_>>())?;
            let a: Vec<usize> = chunk.iter().map(|&i| train_a[i]).collect();
            let g = Graph::new();
            let p = probe.params().bind(&g, true);
            let (logits, updates) = probe.forward_train(&p, g.constant(x))?;
            let loss = loss_discriminator(logits, &a);
            let mut grads = g.backward(loss);
            let grads = p.grads(&mut grads);
            drop(p);
            opt.step(probe.params_mut(), &grads)?;
            probe.apply_updates(&updates)?;
        }
    }
    let g = Graph::new();
    let p = probe.params().bind(&g, false);
    let logits = probe.forward_eval(&p, g.constant(test_f.clone()))?;
    let lv = logits.value();
    let correct = lv
        .data()
        .chunks(num_subgroups)
        .zip(test_a)
        .filter(|(row, &a)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == a
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test_a.len() as f64,
        chance: 1.0 / num_subgroups as f64,
    })
}
