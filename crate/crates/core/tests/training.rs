use fairseg::apple::{AppleHyperparams, DiscriminatorConfig, GeneratorConfig, PerturberBundle};
use fairseg::data::{split_dataset, SegDataset};
use fairseg::evaluation::{evaluate, Predictor};
use fairseg::segmentor::{UNet, UNetConfig};
use fairseg::synth::{generate, SynthConfig};
use fairseg::training::{
    resample_indices, train_apple, train_baseline, train_probe, train_resampled, train_subgroup_models,
    TrainConfig,
};
use fairseg_nn::Tensor;
use rand::SeedableRng;

fn tiny(n: usize, seed: u64) -> SegDataset {
    generate(
        &SynthConfig {
            n_samples: n,
            resolution: 32,
            seed,
            ..Default::default()
        },
        None,
    )
    .unwrap()
}

fn arch() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        num_classes: 2,
        channels: vec![2, 4, 4, 8, 8],
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        ..Default::default()
    }
}

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        widths: [4, 4, 8],
        bottleneck_blocks: 1,
    }
}

fn bundle(seg: &UNet, k: usize, seed: u64) -> PerturberBundle {
    PerturberBundle::new(
        tiny_generator(),
        DiscriminatorConfig { hidden: 8 },
        AppleHyperparams::default(),
        seg.config().embedding_channels(),
        seg.config().embedding_spatial(32, 32).unwrap(),
        k,
        seed,
    )
    .unwrap()
}

#[test]
fn steps_per_epoch_is_ceil_of_batches() {
    let ds = tiny(30, 0);
    let cfg = TrainConfig {
        val_fraction: 0.0,
        ..quick(2)
    };
    let run = train_baseline(&ds, &arch(), &cfg).unwrap();
    // 30 samples, batch 8 -> 4 steps per epoch
    assert_eq!(run.history.steps.len(), 8);
    assert_eq!(run.history.epochs.len(), 2);
    assert_eq!(run.selected_epoch, 1);
}

#[test]
fn baseline_history_is_deterministic() {
    let ds = tiny(24, 1);
    let a = train_baseline(&ds, &arch(), &quick(2)).unwrap();
    let b = train_baseline(&ds, &arch(), &quick(2)).unwrap();
    assert_eq!(a.history.to_csv(2).unwrap(), b.history.to_csv(2).unwrap());
    assert_eq!(a.model.param_hash(), b.model.param_hash());
    let c = train_baseline(&ds, &arch(), &TrainConfig { seed: 9, ..quick(2) }).unwrap();
    assert_ne!(a.history.to_csv(2).unwrap(), c.history.to_csv(2).unwrap());
}

#[test]
fn history_csv_layout() {
    let ds = tiny(24, 1);
    let run = train_baseline(&ds, &arch(), &quick(1)).unwrap();
    let csv = run.history.to_csv(2).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epoch,L_D,L_G,L_G_seg,L_G_fair,val_dice_k0,val_dice_k1");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 7);
    assert_eq!(row[1], "");
    assert!(row[3].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn apple_keeps_segmentor_frozen_and_starts_at_identity() {
    let ds = tiny(24, 2);
    let (train, test) = split_dataset(&ds, 0.7, 0).unwrap();
    let mut seg = train_baseline(&train, &arch(), &quick(1)).unwrap().model;
    let mut b = bundle(&seg, 2, 0);
    assert!(train_apple(&seg, &mut b, &train, &quick(1)).is_err(), "unfrozen segmentor accepted");
    let hash = seg.freeze();

    let base = evaluate(&Predictor::Segmentor(&seg), &test).unwrap();
    let start = evaluate(&Predictor::Apple(&seg, &b.generator), &test).unwrap();
    assert_eq!(base.per_sample, start.per_sample);
    assert_eq!(base.fairness_sample, start.fairness_sample);

    let run = train_apple(&seg, &mut b, &train, &quick(2)).unwrap();
    assert_eq!(run.frozen_hash_start, hash);
    assert_eq!(run.frozen_hash_end, hash);
    assert_eq!(seg.param_hash(), hash);
    let e = &run.history.epochs[1];
    assert!(e.l_d.unwrap().is_finite() && e.l_g.unwrap().is_finite());
    let identity = (e.l_g.unwrap() - (e.l_g_seg + 1.0 * e.l_g_fair.unwrap())).abs();
    assert!(identity < 1e-9, "epoch means break L_G = seg + beta*fair by {identity}");
}

#[test]
fn apple_history_is_deterministic() {
    let ds = tiny(20, 3);
    let mut seg = train_baseline(&ds, &arch(), &quick(1)).unwrap().model;
    seg.freeze();
    let run = |seed| {
        let mut b = bundle(&seg, 2, seed);
        train_apple(&seg, &mut b, &ds, &quick(2)).unwrap().history.to_csv(2).unwrap()
    };
    assert_eq!(run(0), run(0));
}

#[test]
fn apple_rejects_mismatched_subgroup_count() {
    let ds = tiny(12, 4);
    let mut seg = UNet::new(arch(), 0).unwrap();
    seg.freeze();
    let mut b = bundle(&seg, 5, 0);
    assert_eq!(train_apple(&seg, &mut b, &ds, &quick(1)).unwrap_err().category(), "shape");
}

#[test]
fn inverse_frequency_draws_balance_subgroups() {
    let mut attrs = vec![0usize; 100];
    attrs.extend(vec![1usize; 50]);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let draws = resample_indices(&attrs, 2, 10_000, &mut rng).unwrap();
    let ones = draws.iter().filter(|&&i| attrs[i] == 1).count() as f64 / 10_000.0;
    assert!((ones - 0.5).abs() <= 0.02, "{ones}");
    assert!(resample_indices(&[0, 0, 0], 2, 10, &mut rng).is_err());
}

#[test]
fn resampled_training_runs() {
    let ds = tiny(24, 5);
    let run = train_resampled(&ds, &arch(), &quick(1)).unwrap();
    assert_eq!(run.history.epochs.len(), 1);
}

#[test]
fn subgroup_models_route_by_attribute() {
    let ds = tiny(24, 6);
    let runs = train_subgroup_models(&ds, &arch(), &quick(1)).unwrap();
    assert_eq!(runs.len(), 2);
    let models: Vec<UNet> = runs.into_iter().map(|r| r.model).collect();
    let p = Predictor::Subgroup(&models);
    assert!(p.requires_attribute());
    let (x, _, a) = ds.batch(&[0, 1, 2, 3]);
    let routed = p.logits(&x, &a).unwrap();
    for (i, &k) in a.iter().enumerate() {
        let own = models[k].logits(&x.narrow_batch(i, 1)).unwrap();
        assert_eq!(routed.narrow_batch(i, 1).data(), own.data());
    }
    assert!(p.logits(&x, &a[..2]).is_err());
}

#[test]
fn subgroup_models_need_every_subgroup() {
    let ds = tiny(24, 7);
    let only0: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples()[i].attribute == 0).collect();
    assert!(train_subgroup_models(&ds.subset(&only0), &arch(), &quick(1)).is_err());
}

#[test]
fn probe_learns_separable_embeddings() {
    // attribute encoded in the sign of channel 0
    let n = 64;
    let attrs: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut data = Vec::new();
    for (i, &a) in attrs.iter().enumerate() {
        for c in 0..4 {
            let v = if c == 0 { if a == 1 { 1.0 } else { -1.0 } } else { ((i * 7 + c) % 5) as f64 * 0.1 };
            data.extend([v; 4]);
        }
    }
    let f = Tensor::new(&[n, 4, 2, 2], data).unwrap();
    let r = train_probe(&f, &attrs, &f, &attrs, 2, 20, &quick(1)).unwrap();
    assert_eq!(r.chance, 0.5);
    assert!(r.accuracy > 0.9, "{}", r.accuracy);
}

#[test]
fn invalid_train_config_names_the_field() {
    let ds = tiny(8, 0);
    let err = train_baseline(&ds, &arch(), &TrainConfig { device: "cuda".into(), ..quick(1) }).unwrap_err();
    assert!(err.to_string().contains("device"));
    let err = train_baseline(&ds, &arch(), &TrainConfig { beta: -1.0, ..quick(1) }).unwrap_err();
    assert_eq!(err.category(), "config");
}
