use std::fs;

use fairseg::data::{load_dataset, AttributeSpec, LoadOptions};
use fairseg::synth::{generate, generate_sample, ShapeFamily, SynthConfig};

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_samples: 40,
        resolution: 32,
        seed,
        ..Default::default()
    }
}

#[test]
fn same_config_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small(3);
    generate(&cfg, Some(a.path())).unwrap();
    generate(&cfg, Some(b.path())).unwrap();
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = fs::read_dir(a.path().join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), 40);
        for n in names {
            assert_eq!(
                fs::read(a.path().join(sub).join(&n)).unwrap(),
                fs::read(b.path().join(sub).join(&n)).unwrap()
            );
        }
    }
    assert_eq!(
        fs::read(a.path().join("metadata.csv")).unwrap(),
        fs::read(b.path().join("metadata.csv")).unwrap()
    );
    let manifest = fs::read_to_string(a.path().join("synth_manifest.json")).unwrap();
    assert!(manifest.contains("\"difficulty_gap\""));
}

#[test]
fn masks_are_nonempty_and_within_area_band() {
    for shape in [ShapeFamily::Ellipse, ShapeFamily::Blob] {
        let cfg = SynthConfig {
            shape,
            ..small(11)
        };
        let ds = generate(&cfg, None).unwrap();
        for s in ds.samples() {
            let area = s.mask.iter().filter(|&&m| m != 0).count() as f64 / s.mask.len() as f64;
            assert!((0.01..=0.5).contains(&area), "{} area {area}", s.id);
        }
    }
}

#[test]
fn subgroup_counts_follow_balance() {
    // 99% binomial interval for n = 800, p = 0.5 is 400 ± 2.576·sqrt(200) ≈ [363, 437]
    for seed in 0..3 {
        let cfg = SynthConfig {
            n_samples: 800,
            resolution: 32,
            seed,
            ..Default::default()
        };
        let ones = (0..800).filter(|&i| generate_sample(&cfg, i).sex == 1).count();
        assert!((363..=437).contains(&ones), "seed {seed}: {ones}");
    }
}

#[test]
fn zero_gap_makes_subgroups_identical_in_law() {
    let cfg = SynthConfig {
        difficulty_gap: 0.0,
        ..small(0)
    };
    assert_eq!(cfg.appearance(0), cfg.appearance(1));
    let hard = SynthConfig {
        difficulty_gap: 0.6,
        ..small(0)
    };
    let ((c0, n0), (c1, n1)) = (hard.appearance(0), hard.appearance(1));
    assert!(c1 < c0 && n1 > n0);
}

#[test]
fn mask_geometry_ignores_the_attribute() {
    // only appearance depends on the gap; masks stay the same
    let a = generate(&small(5), None).unwrap();
    let b = generate(
        &SynthConfig {
            difficulty_gap: 0.9,
            ..small(5)
        },
        None,
    )
    .unwrap();
    for (x, y) in a.samples().iter().zip(b.samples()) {
        assert_eq!(x.mask, y.mask);
        assert_eq!(x.attribute, y.attribute);
    }
}

#[test]
fn written_layout_reloads_with_both_attributes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small(2), Some(dir.path())).unwrap();
    let opts = LoadOptions {
        resolution: None,
        num_classes: 2,
    };
    let sex = load_dataset(dir.path(), &AttributeSpec::sex(), &opts).unwrap();
    assert_eq!(sex.attributes(), ds.attributes());
    assert_eq!(sex.samples()[0].image, ds.samples()[0].image);
    let age = load_dataset(dir.path(), &AttributeSpec::age(), &opts).unwrap();
    assert_eq!(age.num_subgroups(), 5);
    assert_eq!(age.len(), 40);
}

#[test]
fn age_bin_weights_shape_the_age_distribution() {
    let cfg = SynthConfig {
        n_samples: 400,
        resolution: 32,
        age_bin_weights: vec![1.0, 1.0, 1.0, 1.0, 0.0],
        ..Default::default()
    };
    assert!((0..400).all(|i| generate_sample(&cfg, i).age < 80));
}

#[test]
fn invalid_configs_name_the_field() {
    for (cfg, field) in [
        (
            SynthConfig {
                attribute_balance: 1.5,
                ..Default::default()
            },
            "attribute_balance",
        ),
        (
            SynthConfig {
                resolution: 16,
                ..Default::default()
            },
            "resolution",
        ),
        (
            SynthConfig {
                difficulty_gap: -0.1,
                ..Default::default()
            },
            "difficulty_gap",
        ),
    ] {
        let err = generate(&cfg, None).unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains(field), "{err}");
    }
}
