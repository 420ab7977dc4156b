use faultline_core::grid::GridModel;
use faultline_core::harness::{run_sweep, ExperimentConfig, Schedule};
use faultline_core::models::ModelKind;
use std::time::Instant;

#[test]
#[ignore]
fn probe_exp3_target_and_rate() {
    let grid24 = GridModel::fixture_24bus();
    for (target, epochs, lr) in [
        (0usize, 300usize, 0.05f64),
        (34, 200, 0.05),
        (34, 300, 0.05),
        (34, 300, 0.03),
        (0, 300, 0.03),
    ] {
        let mut cfg = ExperimentConfig::experiment3(&grid24, 2024);
        cfg.trials = 4;
        cfg.models = vec![ModelKind::Fcnn];
        cfg.schedules = vec![];
        cfg.target_label = target;
        cfg.values = vec![1.0, 8.0];
        cfg.train.epochs = epochs;
        cfg.train.learning_rate = lr;
        let t0 = Instant::now();
        let r = run_sweep(&grid24, &cfg).unwrap();
        let mut base = cfg.clone();
        base.poison_ratio = 0.0;
        base.values = vec![1.0];
        let rb = run_sweep(&grid24, &base).unwrap();
        let b = rb.summaries[0].clean_accuracy.as_ref().unwrap().mean;
        let s1 = &r.summaries[0];
        let s8 = &r.summaries[1];
        println!(
            "target {target} ep {epochs} lr {lr}: base {b:.3} | asr1 {:.3} asr8 {:.3} slope {:.3} | acc1 {:.3} acc8 {:.3} gap {:.1}pt ({:.0?})",
            s1.attack_success_rate.as_ref().unwrap().mean,
            s8.attack_success_rate.as_ref().unwrap().mean,
            s8.attack_success_rate.as_ref().unwrap().mean - s1.attack_success_rate.as_ref().unwrap().mean,
            s1.clean_accuracy.as_ref().unwrap().mean,
            s8.clean_accuracy.as_ref().unwrap().mean,
            (b - s8.clean_accuracy.as_ref().unwrap().mean) * 100.0,
            t0.elapsed()
        );
    }
}
