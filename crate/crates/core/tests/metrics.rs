use proptest::prelude::*;
use tsfm_peft::metrics::*;
use tsfm_peft::model::{sample_forecast, ForecastModel, ModelConfig, Preset};
use tsfm_peft::numerics::Rng;
use tsfm_peft::pipeline::{Vital, VitalsWindow};

/// Minimum over every monotone alignment path, enumerated recursively.
fn brute_dtw(a: &[f64], b: &[f64]) -> f64 {
    fn walk(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (a[i] - b[j]) * (a[i] - b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

#[test]
fn dtw_matches_brute_force_on_500_pairs() {
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let a: Vec<f64> = (0..1 + rng.below(6)).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..1 + rng.below(6)).map(|_| rng.normal()).collect();
        worst = worst.max((dtw(&a, &b).unwrap() - brute_dtw(&a, &b)).abs());
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn metric_examples() {
    let t: Vec<f64> = (0..36).map(|i| 0.2 + 0.01 * i as f64).collect();
    assert_eq!(mse(&t, &t).unwrap(), 0.0);
    let shifted: Vec<f64> = t.iter().map(|x| x + 0.01).collect();
    assert!((mse(&shifted, &t).unwrap() - 1e-4).abs() < 1e-15);
    assert_eq!(mse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert!(mse(&[0.0], &[1.0, 0.0]).is_err());

    assert_eq!(mape(&t, &t, MAPE_EPS).unwrap(), 0.0);
    let scaled: Vec<f64> = t.iter().map(|x| 1.1 * x).collect();
    assert!((mape(&scaled, &t, MAPE_EPS).unwrap() - 10.0).abs() < 1e-9);
    assert!(mape(&[0.5, 0.1], &[0.0, 0.1], MAPE_EPS).unwrap().is_finite());

    assert_eq!(dtw(&t, &t).unwrap(), 0.0);
    assert_eq!(dtw(&[0.0, 0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(dtw(&[0.0, 2.0], &[1.0]).unwrap(), 2.0);
    assert!(dtw(&[], &[1.0]).is_err());
}

proptest! {
    #[test]
    fn dtw_properties(a in prop::collection::vec(-5.0f64..5.0, 1..12), b in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let ab = dtw(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, dtw(&b, &a).unwrap());
        prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        if a.len() == b.len() {
            let aligned: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
            prop_assert!(ab <= aligned);
        }
    }
}

fn desk() -> ForecastModel {
    ForecastModel::new(ModelConfig::preset(Preset::Desk), &mut Rng::new(2)).unwrap()
}

fn windows(n: usize, rng: &mut Rng) -> Vec<VitalsWindow> {
    (0..n)
        .map(|i| {
            let base = 0.3 + 0.4 * rng.uniform();
            let mut s = (0..108).map(|t| base + 0.05 * (t as f64 / 9.0).sin());
            VitalsWindow {
                patient_id: format!("p{i}"),
                vital: Vital::HR,
                anchor: 1000 * i as i64,
                context: s.by_ref().take(72).collect(),
                horizon: s.collect(),
            }
        })
        .collect()
}

#[test]
fn evaluate_is_order_invariant_and_deterministic() {
    let m = desk();
    let ws = windows(4, &mut Rng::new(3));
    let cfg = EvalConfig { n_samples: 5, n_runs: 3 };
    let a = evaluate(&m, None, &ws, &cfg, &mut Rng::new(4)).unwrap();
    let mut rev = ws.clone();
    rev.reverse();
    let b = evaluate(&m, None, &rev, &cfg, &mut Rng::new(4)).unwrap();
    assert_eq!(a.table().to_csv().unwrap(), b.table().to_csv().unwrap());
    assert_eq!(a, b);
    assert_eq!(a.runs.len(), 3);
    assert_eq!(a.mse_norm, a.mse_raw / 1e-4);
    assert_eq!(a.dtw_norm, a.dtw_raw / 1e-3);
    assert!(evaluate(&m, None, &[], &cfg, &mut Rng::new(4)).is_err());
}

#[test]
fn single_run_single_sample_equals_trajectory_metrics() {
    let m = desk();
    let ws = windows(1, &mut Rng::new(5));
    let cfg = EvalConfig { n_samples: 1, n_runs: 1 };
    let rep = evaluate(&m, None, &ws, &cfg, &mut Rng::new(6)).unwrap();
    // the documented stream: master.child(run).child(window_key)
    let master = Rng::new(Rng::new(6).next_u64());
    let mut wr = master.child(0).child(window_key(&ws[0]));
    let f = sample_forecast(&m, None, &ws[0].context, 1, &mut wr).unwrap();
    let expect = window_metrics(&f.samples[0], &ws[0].horizon).unwrap();
    assert_eq!(rep.runs[0], expect);
    assert_eq!(rep.mse_raw, expect.mse);
}

#[test]
fn degenerate_model_has_zero_run_variance() {
    let mut m = ForecastModel::zeroed(ModelConfig::preset(Preset::Desk)).unwrap();
    let bias = m.params().index_of("head.bias").unwrap();
    m.params_mut().get_mut(bias).data_mut()[64] = 1e3;
    let ws = windows(2, &mut Rng::new(7));
    let rep = evaluate(&m, None, &ws, &EvalConfig { n_samples: 4, n_runs: 5 }, &mut Rng::new(8)).unwrap();
    assert!(rep.runs.iter().all(|r| *r == rep.runs[0]));
}

#[test]
fn added_noise_never_lowers_expected_mse() {
    let m = desk();
    let ws = windows(3, &mut Rng::new(9));
    let mut rng = Rng::new(10);
    for w in &ws {
        let f = sample_forecast(&m, None, &w.context, 20, &mut rng).unwrap();
        let base = mse(&f.point, &w.horizon).unwrap();
        let trials = 400;
        let noisy: f64 = (0..trials)
            .map(|_| {
                let p: Vec<f64> = f.point.iter().map(|x| x + 0.05 * rng.normal()).collect();
                mse(&p, &w.horizon).unwrap()
            })
            .sum::<f64>()
            / trials as f64;
        assert!(noisy > base, "{noisy} <= {base}");
    }
}

#[test]
fn report_table_has_run_rows_and_mean() {
    let rep = MetricReport::from_runs(
        vec![
            RunMetrics { mse: 1e-4, dtw: 2e-3, mape: 3.0 },
            RunMetrics { mse: 3e-4, dtw: 4e-3, mape: 5.0 },
        ],
        7,
    );
    assert!((rep.mse_norm - 2.0).abs() < 1e-12);
    assert!((rep.dtw_norm - 3.0).abs() < 1e-12);
    assert_eq!(rep.mape_percent, 4.0);
    let csv = rep.table().to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "run,mse_x1e-4,dtw_x1e-3,mape_pct");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));
    assert!(rep.to_text().contains("MSE x1e-4"));
}
