use faultline_core::grid::GridModel;
use faultline_core::harness::{run_sweep, ExperimentConfig};

#[test]
#[ignore]
fn probe_exp2_coordinate7() {
    let grid = GridModel::fixture_14bus();
    let mut config = ExperimentConfig::experiment2(&grid, 20260814);
    config.trials = 4;
    let t0 = std::time::Instant::now();
    let report = run_sweep(&grid, &config).unwrap();
    for s in &report.summaries {
        println!(
            "mag {:>6.0}: acc {:.3} asr {:.3}",
            s.sweep_value,
            s.clean_accuracy.as_ref().map(|c| c.mean).unwrap_or(f64::NAN),
            s.attack_success_rate.as_ref().map(|c| c.mean).unwrap_or(f64::NAN),
        );
    }
    println!("elapsed {:?}", t0.elapsed());
}
