use fairseg::metrics::{Ddof, FairnessReport};
use fairseg::reporting::{build_table, Column, ExperimentTable, Mark, RunEvaluation};
use proptest::prelude::*;

fn evaluation(u0: f64, u1: f64, dice: f64) -> RunEvaluation {
    let f = |ddof| {
        fairseg::metrics::fairness(&fairseg::metrics::UtilityVector::from_values(&[u0, u1]), ddof).unwrap()
    };
    RunEvaluation {
        dataset: "synth".into(),
        attribute: "sex".into(),
        mean_dice: dice,
        macro_dice: (u0 + u1) / 2.0,
        fairness_sample: f(Ddof::Sample),
        fairness_population: f(Ddof::Population),
    }
}

fn table_strategy() -> impl Strategy<Value = ExperimentTable> {
    let run = (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b, d)| evaluation(a, b, d));
    let method = prop::collection::vec(run, 1..4);
    (prop::collection::vec(method, 1..6), any::<bool>()).prop_map(|(methods, pop)| {
        let groups: Vec<(String, Vec<RunEvaluation>)> = methods
            .into_iter()
            .enumerate()
            .map(|(i, runs)| (format!("method {i}"), runs))
            .collect();
        build_table(&groups, if pop { Ddof::Population } else { Ddof::Sample }).unwrap()
    })
}

proptest! {
    #[test]
    fn csv_round_trip(table in table_strategy()) {
        let back = ExperimentTable::from_csv(&table.to_csv().unwrap()).unwrap();
        prop_assert_eq!(back, table);
    }

    #[test]
    fn markers_agree_with_values(table in table_strategy()) {
        for col in Column::ALL {
            let better = |a: f64, b: f64| if col.higher_is_better() { a > b } else { a < b };
            let best: Vec<usize> = (0..table.rows.len())
                .filter(|&i| table.rows[i].mark(col) == Some(Mark::Best))
                .collect();
            let second: Vec<usize> = (0..table.rows.len())
                .filter(|&i| table.rows[i].mark(col) == Some(Mark::Second))
                .collect();
            prop_assert_eq!(best.len(), 1);
            prop_assert_eq!(second.len(), usize::from(table.rows.len() > 1));
            let b = best[0];
            for (i, r) in table.rows.iter().enumerate() {
                // nothing beats the best; equal values only before it
                prop_assert!(!better(r.value(col), table.rows[b].value(col)));
                if i < b {
                    prop_assert!(r.value(col) != table.rows[b].value(col));
                }
            }
            if let Some(&s) = second.first() {
                for (i, r) in table.rows.iter().enumerate().filter(|&(i, _)| i != b) {
                    prop_assert!(!better(r.value(col), table.rows[s].value(col)));
                    if i < s {
                        prop_assert!(r.value(col) != table.rows[s].value(col));
                    }
                }
            }
        }
    }
}

#[test]
fn single_run_table_has_zero_std() {
    let t = build_table(&[("Baseline".into(), vec![evaluation(0.9, 0.8, 0.85)])], Ddof::Population).unwrap();
    let r = &t.rows[0];
    assert_eq!(t.rows.len(), 1);
    assert_eq!((r.avg.std, r.delta.std, r.ser.std, r.std.std), (0.0, 0.0, 0.0, 0.0));
    assert!((r.delta.mean - 10.0).abs() < 1e-9);
    assert!((r.std.mean - 5.0).abs() < 1e-9);
    // SER is not rescaled
    assert!((r.ser.mean - 2.0).abs() < 1e-9);
}

#[test]
fn renderings_mark_best_and_second() {
    let t = build_table(
        &[
            ("A".into(), vec![evaluation(0.9, 0.8, 0.85)]),
            ("B".into(), vec![evaluation(0.88, 0.86, 0.87)]),
        ],
        Ddof::Sample,
    )
    .unwrap();
    let md = t.to_markdown();
    assert!(md.contains("**87.00_{0.00}**"));
    assert!(md.contains("<u>85.00_{0.00}</u>"));
    let txt = t.to_text();
    assert!(txt.lines().any(|l| l.starts_with("B ") && l.contains('*')));
    let dir = tempfile::tempdir().unwrap();
    t.write(dir.path()).unwrap();
    for f in ["table.csv", "table.txt", "table.md"] {
        assert!(dir.path().join(f).exists());
    }
}

#[test]
fn infinite_ser_is_shown() {
    let mut e = evaluation(1.0, 0.8, 0.9);
    e.fairness_sample = FairnessReport {
        ser_infinite: true,
        ..e.fairness_sample
    };
    let t = build_table(&[("A".into(), vec![e])], Ddof::Sample).unwrap();
    assert!(t.rows[0].ser_infinite);
    assert!(t.to_text().contains("(inf)"));
}
