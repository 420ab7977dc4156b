use faultline_core::grid::GridModel;
use faultline_core::harness::*;
use faultline_core::models::ModelKind;
use faultline_core::stats::spearman_rho;
use std::time::Instant;

fn show(report: &ExperimentReport, models: &[ModelKind]) {
    for &m in models {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in report.summaries.iter().filter(|s| s.model == m) {
            let acc = s.clean_accuracy.as_ref().map(|c| c.mean).unwrap_or(-1.0);
            let asr = s.attack_success_rate.as_ref().map(|c| c.mean).unwrap_or(-1.0);
            println!("  {} v {:+8.3}: acc {:.3} asr {:.3}", m, s.sweep_value, acc, asr);
            xs.push(s.sweep_value);
            ys.push(asr);
        }
        match spearman_rho(&xs, &ys) {
            Ok(rho) => println!("  {} spearman {:.4}", m, rho),
            Err(e) => println!("  {} spearman err {e}", m),
        }
    }
    for t in report.trials.iter().filter(|t| t.error.is_some()) {
        println!("  FAILED {} v={} t={}: {:?}", t.model, t.sweep_value, t.trial, t.error);
    }
}

#[test]
#[ignore]
fn probe_all() {
    let grid = GridModel::fixture_14bus();
    for (name, mut config) in [
        ("exp1", ExperimentConfig::experiment1(&grid, 1234)),
        ("exp2", ExperimentConfig::experiment2(&grid, 1234)),
        ("exp3", ExperimentConfig::experiment3(&grid, 1234)),
    ] {
        config.trials = 4;
        let t0 = Instant::now();
        let report = run_sweep(&grid, &config).unwrap();
        println!("{name} ({} trials): {:?}", config.trials, t0.elapsed());
        show(&report, &config.models);
    }
}
