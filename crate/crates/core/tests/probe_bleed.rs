use faultline_core::attack::{poison_dataset, PoisonPlan, ThreatModel, Trigger};
use faultline_core::fault::{generate_dataset, DatasetConfig};
use faultline_core::grid::GridModel;
use faultline_core::models::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

fn spread_positions(d: usize, nnz: usize, seed: u64) -> Vec<usize> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m = d - nnz + 1;
    let mut pool: Vec<usize> = (0..m).collect();
    for i in 0..nnz {
        let j = rng.random_range(i..m);
        pool.swap(i, j);
    }
    let mut q: Vec<usize> = pool[..nnz].to_vec();
    q.sort_unstable();
    q.iter().enumerate().map(|(k, &v)| v + k).collect()
}

#[test]
#[ignore]
fn probe_bleed_anatomy() {
    let grid = GridModel::fixture_24bus();
    for (count, epochs) in [(840usize, 300usize), (1680, 150)] {
        let mut dcfg = DatasetConfig::default_for(&grid);
        dcfg.sample_count = count;
        let ds = generate_dataset(&grid, &dcfg, 424242).unwrap();
        let test = DesignMatrix::test_split(&ds).unwrap();
        let d = ds.feature_dim();
        let target = 34usize;
        let mut to_target_total = 0usize;
        let mut err_total = 0usize;
        let mut base_err = 0usize;
        let mut accs = Vec::new();
        let mut asrs = Vec::new();
        for seed in 0..4u64 {
            let pos = spread_positions(d, 8, seed * 7 + 3);
            let entries: Vec<(usize, f64)> = pos.iter().map(|&p| (p, 50.0)).collect();
            let trigger = Trigger::from_entries(d, &entries, target);
            let plan = PoisonPlan {
                poison_ratio: 0.01,
                trigger: trigger.clone(),
                threat_model: ThreatModel::FeatureLevel,
                seed: seed * 13 + 1,
            };
            let poisoned = poison_dataset(&ds, &plan).unwrap();
            let mut cfg = TrainConfig::default().with_seed(seed * 31 + 5);
            cfg.epochs = epochs;
            let model = train_model(ModelKind::Fcnn, &poisoned, &cfg).unwrap();
            let base = train_model(ModelKind::Fcnn, &ds, &cfg).unwrap();
            let mut hit = 0;
            let mut fire = 0;
            let mut elig = 0;
            for (row, &label) in test.rows.iter().zip(&test.labels) {
                let pred = model.predict(row).unwrap();
                if pred == label {
                    hit += 1;
                } else {
                    err_total += 1;
                    if pred == target {
                        to_target_total += 1;
                    }
                }
                if base.predict(row).unwrap() != label {
                    base_err += 1;
                }
                if label != target {
                    elig += 1;
                    let r = faultline_core::attack::apply_trigger_values(row, &trigger).unwrap();
                    if model.predict(&r).unwrap() == target {
                        fire += 1;
                    }
                }
            }
            accs.push(hit as f64 / test.labels.len() as f64);
            asrs.push(fire as f64 / elig as f64);
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "rows {count} ep {epochs}: acc8 {:.3} asr8 {:.3} | errors {} of which to-target {} | baseline errors {}",
            mean(&accs), mean(&asrs), err_total, to_target_total, base_err
        );
    }
}
