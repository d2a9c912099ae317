//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Fixture: synthetic data, 800 train / 200 test at 64x64, difficulty gap
//! 0.5, seeds 0..3, desk-profile networks.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::gradcheck::{worst_relative_error, Which};
use common::{oracle_delta, oracle_ser, oracle_std};
use fairseg::apple::{
    loss_discriminator, loss_fair, AppleHyperparams, DiscriminatorConfig, GeneratorConfig, PerturberBundle,
};
use fairseg::data::{load_dataset, AttributeSpec, LoadOptions, SegDataset};
use fairseg::evaluation::{embeddings, evaluate, EvalReport, Predictor};
use fairseg::experiment::{execute_run, ExperimentConfig, Profile, RunKind, RunRequest, HISTORY_FILE};
use fairseg::metrics::{fairness, Ddof, UtilityVector, SER_EPSILON};
use fairseg::segmentor::{UNet, UNetConfig};
use fairseg::synth::{generate, SynthConfig};
use fairseg::training::{resample_indices, train_apple, train_baseline, train_probe, train_subgroup_models, TrainConfig};
use fairseg_nn::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const BETAS: [f64; 3] = [0.1, 1.0, 5.0];
const BASELINE_EPOCHS: usize = 10;
const APPLE_EPOCHS: usize = 8;
const PROBE_EPOCHS: usize = 5;
/// Age-bin weights of the fixture; the last bin is rare so that its
/// training subgroup stays at or below 20 samples.
const AGE_WEIGHTS: [f64; 5] = [1.0, 1.0, 1.0, 1.0, 0.08];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn progress(start: &Instant, msg: &str) {
    eprintln!("[{:>6.0}s] {msg}", start.elapsed().as_secs_f64());
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let u: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let v = UtilityVector::from_values(&u);
        for (ddof, sample) in [(Ddof::Sample, true), (Ddof::Population, false)] {
            let r = fairness(&v, ddof).unwrap();
            worst = worst
                .max((r.delta - oracle_delta(&u)).abs())
                .max((r.std - oracle_std(&u, sample)).abs())
                .max((r.ser - oracle_ser(&u, SER_EPSILON)).abs());
        }
    }
    // K = 2 identities; "exact" up to one rounding of the square root
    let mut worst_k2 = 0.0f64;
    for _ in 0..1000 {
        let u = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
        let v = UtilityVector::from_values(&u);
        let s = fairness(&v, Ddof::Sample).unwrap();
        let p = fairness(&v, Ddof::Population).unwrap();
        worst_k2 = worst_k2
            .max((s.std - s.delta / 2f64.sqrt()).abs())
            .max((p.std - p.delta / 2.0).abs());
    }
    Outcome::new(
        worst <= 1e-9 && worst_k2 <= 1e-15,
        format!("max |fairness - oracle| = {worst:.2e} over 1000 vectors; K=2 identity deviation {worst_k2:.2e}"),
    )
}

/// Reference (Δ, STD) pairs for two-group comparisons, in percent.
const TABLE_ROWS: [(&str, f64, f64); 16] = [
    ("sex, set A, U-Net", 4.51, 2.26),
    ("sex, set A, U-Net + RS", 3.69, 1.84),
    ("sex, set A, U-Net + SM", 2.30, 1.15),
    ("sex, set A, U-Net + APPLE", 3.54, 1.77),
    ("sex, set A, AttU-Net", 3.70, 1.85),
    ("sex, set A, AttU-Net + RS", 2.67, 1.33),
    ("sex, set A, AttU-Net + SM", 2.66, 1.33),
    ("sex, set A, AttU-Net + APPLE", 2.06, 1.03),
    ("sex, set A, CMUNet", 3.97, 1.99),
    ("sex, set A, CMUNet + RS", 3.83, 1.92),
    ("sex, set A, CMUNet + SM", 1.77, 0.89),
    ("sex, set A, CMUNet + APPLE", 2.81, 1.41),
    ("sex, set B, U-Net", 0.58, 0.29),
    ("sex, set B, U-Net + RS", 0.24, 0.12),
    ("sex, set B, U-Net + SM", 1.21, 0.61),
    ("sex, set B, U-Net + APPLE", 0.11, 0.06),
];

fn criterion_2() -> Outcome {
    let mut worst_pop = 0.0f64;
    let mut sample_matches = 0;
    for (_, delta, std) in TABLE_ROWS {
        let d = delta / 100.0;
        let v = UtilityVector::from_values(&[0.5 + d / 2.0, 0.5 - d / 2.0]);
        let pop = 100.0 * fairness(&v, Ddof::Population).unwrap().std;
        let samp = 100.0 * fairness(&v, Ddof::Sample).unwrap().std;
        worst_pop = worst_pop.max((pop - std).abs());
        if (samp - std).abs() <= 0.01 + 1e-9 {
            sample_matches += 1;
        }
    }
    Outcome::new(
        worst_pop <= 0.01 + 1e-9,
        format!(
            "16 rows: divisor-K STD within {worst_pop:.4} of the reference; divisor K-1 matches {sample_matches}/16"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, which, wrt_g) in [
        ("L_D/D_p", Which::Disc, false),
        ("L_seg/G_p", Which::Seg, true),
        ("L_fair/G_p", Which::Fair, true),
        ("L_G/G_p", Which::Gen, true),
    ] {
        let (worst, n) = worst_relative_error(which, wrt_g);
        pass &= worst < 1e-4 && n > 0;
        parts.push(format!("{name} {worst:.1e} ({n})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_id = 0.0f64;
    for _ in 0..1000 {
        let (b, k) = (rng.random_range(1..9), rng.random_range(2..7));
        let alpha = rng.random_range(0.0..2.0);
        let logits = Tensor::new(&[b, k], (0..b * k).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let attrs: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let g = Graph::new();
        let z = g.constant(logits);
        let lhs = loss_fair(z, &attrs, alpha).item() + loss_discriminator(z, &attrs).item();
        worst_id = worst_id.max((lhs + alpha * z.softmax_entropy().item()).abs());
    }
    pass &= worst_id <= 1e-9;
    Outcome::new(
        pass,
        format!("max relative FD error: {}; identity deviation {worst_id:.1e}", parts.join(", ")),
    )
}

fn criterion_7() -> Outcome {
    let mut attrs = vec![0usize; 100];
    attrs.extend([1usize; 50]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = resample_indices(&attrs, 2, 10_000, &mut rng).unwrap();
    let f1 = draws.iter().filter(|&&i| attrs[i] == 1).count() as f64 / 10_000.0;
    let f0 = 1.0 - f1;
    Outcome::new(
        (f0 - 0.5).abs() <= 0.02 && (f1 - 0.5).abs() <= 0.02,
        format!("draw frequencies {f0:.4} / {f1:.4}"),
    )
}

struct Fixture {
    train_sex: SegDataset,
    test_sex: SegDataset,
    train_age: SegDataset,
    test_age: SegDataset,
}

fn fixture(seed: u64, dir: &std::path::Path) -> Fixture {
    let cfg = SynthConfig {
        n_samples: 1000,
        resolution: 64,
        difficulty_gap: 0.5,
        seed,
        age_bin_weights: AGE_WEIGHTS.to_vec(),
        ..Default::default()
    };
    generate(&cfg, Some(dir)).unwrap();
    let opts = LoadOptions {
        resolution: None,
        num_classes: 2,
    };
    let sex = load_dataset(dir, &AttributeSpec::sex(), &opts).unwrap();
    let age = load_dataset(dir, &AttributeSpec::age(), &opts).unwrap();
    // samples are i.i.d. by index, so the first 800 form the training set
    let train: Vec<usize> = (0..800).collect();
    let test: Vec<usize> = (800..1000).collect();
    Fixture {
        train_sex: sex.subset(&train),
        test_sex: sex.subset(&test),
        train_age: age.subset(&train),
        test_age: age.subset(&test),
    }
}

fn train_cfg(seed: u64, epochs: usize, beta: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        beta,
        seed,
        ..Default::default()
    }
}

fn new_bundle(seg: &UNet, beta: f64, seed: u64) -> PerturberBundle {
    let arch = seg.config();
    PerturberBundle::new(
        GeneratorConfig::desk(),
        DiscriminatorConfig::default(),
        AppleHyperparams { alpha: 0.1, beta },
        arch.embedding_channels(),
        arch.embedding_spatial(64, 64).unwrap(),
        2,
        seed,
    )
    .unwrap()
}

fn delta(r: &EvalReport) -> f64 {
    r.fairness(Ddof::Sample).expect("both subgroups populated").delta
}

/// Everything measured on one seed.
struct SeedResult {
    base_dice: f64,
    base_delta: f64,
    freeze_ok: bool,
    identity_ok: bool,
    /// Per β: (mean Dice, Δ, probe accuracy).
    apple: Vec<(f64, f64, f64)>,
    base_probe: f64,
    smallest_age_group: usize,
    sm_age_delta: f64,
    base_age_delta: f64,
}

fn run_seed(seed: u64, start: &Instant) -> SeedResult {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(seed, dir.path());
    let arch = UNetConfig::desk(1, 2);

    progress(start, &format!("seed {seed}: baseline ({BASELINE_EPOCHS} epochs)"));
    let mut seg = train_baseline(&fx.train_sex, &arch, &train_cfg(seed, BASELINE_EPOCHS, 1.0)).unwrap().model;
    let hash = seg.freeze();
    let base = evaluate(&Predictor::Segmentor(&seg), &fx.test_sex).unwrap();

    let fresh = new_bundle(&seg, 1.0, seed);
    let start_eval = evaluate(&Predictor::Apple(&seg, &fresh.generator), &fx.test_sex).unwrap();
    let identity_ok = start_eval.per_sample == base.per_sample
        && start_eval.utilities == base.utilities
        && start_eval.fairness_sample == base.fairness_sample;

    let probe = |gp: Option<&fairseg::apple::PerturbationGenerator>| {
        let f_train = embeddings(&seg, gp, &fx.train_sex).unwrap();
        let f_test = embeddings(&seg, gp, &fx.test_sex).unwrap();
        train_probe(
            &f_train,
            &fx.train_sex.attributes(),
            &f_test,
            &fx.test_sex.attributes(),
            2,
            PROBE_EPOCHS,
            &train_cfg(seed, 1, 1.0),
        )
        .unwrap()
        .accuracy
    };
    let base_probe = probe(None);

    let mut freeze_ok = true;
    let mut apple = Vec::new();
    for beta in BETAS {
        progress(start, &format!("seed {seed}: APPLE beta={beta} ({APPLE_EPOCHS} epochs)"));
        let mut bundle = new_bundle(&seg, beta, seed);
        let run = train_apple(&seg, &mut bundle, &fx.train_sex, &train_cfg(seed, APPLE_EPOCHS, beta)).unwrap();
        freeze_ok &= run.frozen_hash_start == hash && run.frozen_hash_end == hash && seg.param_hash() == hash;
        let r = evaluate(&Predictor::Apple(&seg, &bundle.generator), &fx.test_sex).unwrap();
        apple.push((r.mean_dice(), delta(&r), probe(Some(&bundle.generator))));
    }

    progress(start, &format!("seed {seed}: SM on age ({BASELINE_EPOCHS} epochs per subgroup)"));
    let smallest_age_group = *fx.train_age.subgroup_counts().iter().min().unwrap();
    let sm: Vec<UNet> = train_subgroup_models(&fx.train_age, &arch, &train_cfg(seed, BASELINE_EPOCHS, 1.0))
        .unwrap()
        .into_iter()
        .map(|r| r.model)
        .collect();
    let sm_age = evaluate(&Predictor::Subgroup(&sm), &fx.test_age).unwrap();
    let base_age = evaluate(&Predictor::Segmentor(&seg), &fx.test_age).unwrap();

    let res = SeedResult {
        base_dice: base.mean_dice(),
        base_delta: delta(&base),
        freeze_ok,
        identity_ok,
        apple,
        base_probe,
        smallest_age_group,
        sm_age_delta: delta(&sm_age),
        base_age_delta: delta(&base_age),
    };
    progress(
        start,
        &format!(
            "seed {seed}: baseline dice {:.4} delta {:.4} probe {:.3}; apple (dice, delta, probe) {:?}; age delta SM {:.4} vs baseline {:.4}",
            res.base_dice, res.base_delta, res.base_probe, res.apple, res.sm_age_delta, res.base_age_delta
        ),
    );
    res
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_4(results: &[SeedResult]) -> Outcome {
    let freeze = results.iter().all(|r| r.freeze_ok);
    let identity = results.iter().all(|r| r.identity_ok);
    Outcome::new(
        freeze && identity,
        format!(
            "frozen hash unchanged over {} APPLE runs: {freeze}; zero-init evaluation bitwise equal to baseline: {identity}",
            results.len() * BETAS.len()
        ),
    )
}

fn criterion_5(results: &[SeedResult]) -> Outcome {
    let beta1 = BETAS.iter().position(|&b| b == 1.0).unwrap();
    let base_delta = mean(results.iter().map(|r| r.base_delta));
    let apple_delta = mean(results.iter().map(|r| r.apple[beta1].1));
    let base_dice = mean(results.iter().map(|r| r.base_dice));
    let apple_dice = mean(results.iter().map(|r| r.apple[beta1].0));
    let reduction = (base_delta - apple_delta) / base_delta;
    let drop = 100.0 * (base_dice - apple_dice);
    let pass = 100.0 * base_delta >= 5.0 && reduction >= 0.3 && drop <= 5.0;
    Outcome::new(
        pass,
        format!(
            "baseline delta {:.2} pts (need >= 5); APPLE beta=1 delta {:.2} pts, relative reduction {:.1}% (need >= 30%); dice drop {drop:.2} pts (need <= 5)",
            100.0 * base_delta,
            100.0 * apple_delta,
            100.0 * reduction
        ),
    )
}

fn criterion_6(results: &[SeedResult]) -> Outcome {
    // (a) adjacent increases of Δ along β, counted over all seeds
    let inversions: usize = results
        .iter()
        .map(|r| r.apple.windows(2).filter(|w| w[1].1 > w[0].1).count())
        .sum();
    let mean_delta: Vec<f64> = (0..BETAS.len()).map(|i| mean(results.iter().map(|r| r.apple[i].1))).collect();
    let a = inversions <= 1;
    // (b) mean probe accuracy along β
    let probe: Vec<f64> = (0..BETAS.len()).map(|i| mean(results.iter().map(|r| r.apple[i].2))).collect();
    let monotone = probe.windows(2).all(|w| w[1] <= w[0]);
    let near_chance = (probe[BETAS.len() - 1] - 0.5).abs() <= 0.10;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.2}", 100.0 * x)).collect::<Vec<_>>().join(" / ");
    Outcome::new(
        a && monotone && near_chance,
        format!(
            "(a) mean delta over beta {{0.1,1,5}} = {} pts, {inversions} per-seed inversions (allowed 1): {}; (b) mean probe accuracy {} % (f_o probe {:.2} %), non-increasing: {monotone}, beta=5 within 10 pts of 50%: {near_chance}",
            fmt(&mean_delta),
            if a { "ok" } else { "fail" },
            fmt(&probe),
            100.0 * mean(results.iter().map(|r| r.base_probe))
        ),
    )
}

fn criterion_8(results: &[SeedResult]) -> Outcome {
    let wins = results.iter().filter(|r| r.sm_age_delta > r.base_age_delta).count();
    let smallest = results.iter().map(|r| r.smallest_age_group).max().unwrap();
    let per_seed: Vec<String> = results
        .iter()
        .map(|r| format!("{:.2} vs {:.2}", 100.0 * r.sm_age_delta, 100.0 * r.base_age_delta))
        .collect();
    Outcome::new(
        wins >= 2 && smallest <= 20,
        format!(
            "K=5 age, smallest training subgroup <= {smallest}; SM delta exceeds baseline in {wins}/3 seeds (SM vs baseline pts: {})",
            per_seed.join(", ")
        ),
    )
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(
        &SynthConfig {
            n_samples: 200,
            seed: 5,
            ..Default::default()
        },
        Some(&data),
    )
    .unwrap();
    let mut cfg = ExperimentConfig {
        profile: Profile::Desk,
        ..Default::default()
    };
    cfg.data.root = data;
    cfg.train.epochs = 2;
    cfg.train.seed = 5;
    let (train, _) = cfg.load_split().unwrap();
    let mut same = true;
    let mut files = 0;
    for attempt in ["a", "b"] {
        let runs = tmp.path().join(attempt);
        let base = RunRequest {
            name: "base".into(),
            group: "base".into(),
            kind: RunKind::Baseline,
            config: cfg.clone(),
            base_run: None,
            force: false,
        };
        execute_run(&runs, &base, &train).unwrap();
        let base_dir = runs.join("base");
        let apple = RunRequest {
            name: "apple".into(),
            group: "apple".into(),
            kind: RunKind::Apple,
            base_run: Some(&base_dir),
            ..base.clone()
        };
        execute_run(&runs, &apple, &train).unwrap();
    }
    for run in ["base", "apple"] {
        let a = std::fs::read(tmp.path().join("a").join(run).join(HISTORY_FILE)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(run).join(HISTORY_FILE)).unwrap();
        same &= a == b && !a.is_empty();
        files += 1;
    }
    Outcome::new(same, format!("{files} history.csv pairs (baseline, APPLE) byte-identical: {same}"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut outcomes: Vec<(usize, &str, Outcome)> = vec![
        (1, "metric oracle", criterion_1()),
        (2, "two-group STD = delta/2", criterion_2()),
        (3, "gradient correctness", criterion_3()),
        (7, "RS sampler statistics", criterion_7()),
        (9, "determinism", criterion_9()),
    ];
    progress(&start, "criteria 1, 2, 3, 7, 9 done; training the seeded fixtures");
    let results: Vec<SeedResult> = SEEDS.iter().map(|&s| run_seed(s, &start)).collect();
    outcomes.push((4, "freeze contract", criterion_4(&results)));
    outcomes.push((5, "unfairness mitigation", criterion_5(&results)));
    outcomes.push((6, "beta-ablation trend", criterion_6(&results)));
    outcomes.push((8, "SM on age", criterion_8(&results)));
    outcomes.sort_by_key(|o| o.0);

    println!("acceptance results ({:.0} s):", start.elapsed().as_secs_f64());
    for (n, name, o) in &outcomes {
        println!("criterion {n} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.2.pass).map(|o| o.0.to_string()).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
