use faultline_core::grid::GridModel;
use faultline_core::harness::{run_sweep, ExperimentConfig, ExperimentReport};
use faultline_core::models::ModelKind;
use faultline_core::stats::spearman_rho;
use std::time::Instant;

fn point_means(report: &ExperimentReport, model: ModelKind) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut values = Vec::new();
    let mut accs = Vec::new();
    let mut asrs = Vec::new();
    for s in &report.summaries {
        if s.model == model {
            values.push(s.sweep_value);
            accs.push(s.clean_accuracy.as_ref().unwrap().mean);
            asrs.push(s.attack_success_rate.as_ref().unwrap().mean);
        }
    }
    (values, accs, asrs)
}

fn r3(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect()
}

#[test]
#[ignore]
fn probe_fourteen_trials() {
    let grid14 = GridModel::fixture_14bus();
    let grid24 = GridModel::fixture_24bus();

    // ---- experiment 1 (criterion 5) ----
    let t0 = Instant::now();
    let cfg1 = ExperimentConfig::experiment1(&grid14, 2024);
    let r1 = run_sweep(&grid14, &cfg1).unwrap();
    let el1 = t0.elapsed();
    println!("--- exp1 {el1:.0?} ---");
    for kind in [ModelKind::Fcnn, ModelKind::Cnn] {
        let (vals, accs, asrs) = point_means(&r1, kind);
        let rho = spearman_rho(&vals, &asrs).unwrap();
        let worst_gap = accs.iter().map(|a| (accs[0] - a).abs()).fold(0.0, f64::max);
        println!(
            "{kind}: rho {rho:.4} ({}) | asr@10% {:.3} ({}) | worst acc gap {:.3} ({}) | asrs {:?} accs {:?}",
            if rho > 0.9 { "PASS" } else { "FAIL" },
            asrs.last().unwrap(),
            if *asrs.last().unwrap() >= 0.90 { "PASS" } else { "FAIL" },
            worst_gap,
            if worst_gap <= 0.05 { "PASS" } else { "FAIL" },
            r3(&asrs),
            r3(&accs),
        );
    }
    println!("exp1 failed trials: {}", r1.trials.iter().filter(|t| t.error.is_some()).count());

    // ---- experiment 2 (criterion 6) ----
    let t0 = Instant::now();
    let cfg2 = ExperimentConfig::experiment2(&grid14, 2024);
    let r2 = run_sweep(&grid14, &cfg2).unwrap();
    let el2 = t0.elapsed();
    println!("--- exp2 {el2:.0?} ---");
    let (vals, _, asrs) = point_means(&r2, ModelKind::Fcnn);
    let chance = 1.0 / 21.0;
    for (v, a) in vals.iter().zip(&asrs) {
        println!("  mag {v:>6}: asr {a:.3}");
    }
    let zero = asrs[vals.iter().position(|&v| v == 0.0).unwrap()];
    let lo = asrs[0];
    let hi = *asrs.last().unwrap();
    println!(
        "zero {zero:.3} ≤ {:.3} ({}) | -200 {lo:.3} ≥ 0.8 ({}) | +200 {hi:.3} ≥ 0.8 ({})",
        chance + 0.1,
        if zero <= chance + 0.1 { "PASS" } else { "FAIL" },
        if lo >= 0.8 { "PASS" } else { "FAIL" },
        if hi >= 0.8 { "PASS" } else { "FAIL" },
    );

    // ---- experiment 3 (criterion 7) ----
    let t0 = Instant::now();
    let cfg3 = ExperimentConfig::experiment3(&grid24, 2024);
    let r3r = run_sweep(&grid24, &cfg3).unwrap();
    let mut base3 = cfg3.clone();
    base3.poison_ratio = 0.0;
    base3.values = vec![1.0];
    let rb = run_sweep(&grid24, &base3).unwrap();
    let el3 = t0.elapsed();
    println!("--- exp3 {el3:.0?} (incl. baseline) ---");
    for kind in [ModelKind::Fcnn, ModelKind::Cnn] {
        let (vals, accs, asrs) = point_means(&r3r, kind);
        let (_, bacc, _) = point_means(&rb, kind);
        let strict = asrs.windows(2).all(|w| w[1] > w[0]);
        let jump = asrs.last().unwrap() - asrs[0];
        let worst_gap = accs.iter().map(|a| (bacc[0] - a).abs()).fold(0.0, f64::max);
        println!(
            "{kind}: baseline {:.3} | strict {strict} ({}) | jump {jump:.3} ≥0.15 ({}) | worst gap {worst_gap:.3} ({}) | nnz {vals:?} asr {:?} acc {:?}",
            bacc[0],
            if strict { "PASS" } else { "FAIL" },
            if jump >= 0.15 { "PASS" } else { "FAIL" },
            if worst_gap <= 0.05 { "PASS" } else { "FAIL" },
            r3(&asrs),
            r3(&accs),
        );
    }
    println!("exp3 failed trials: {}", r3r.trials.iter().filter(|t| t.error.is_some()).count());
    println!("TOTALS exp1 {el1:.0?} exp2 {el2:.0?} exp3 {el3:.0?}");
}
