use faultline_core::fault::{generate_dataset, DatasetConfig};
use faultline_core::grid::GridModel;

#[test]
#[ignore]
fn probe_grid14_coordinate_tails() {
    let grid = GridModel::fixture_14bus();
    let ds = generate_dataset(&grid, &DatasetConfig::default_for(&grid), 424242).unwrap();
    let d = ds.feature_dim();
    let n = ds.samples.len() as f64;
    for c in 0..d {
        let vals: Vec<f64> = ds.samples.iter().map(|s| s.features[c]).collect();
        let frac = |pred: &dyn Fn(f64) -> bool| {
            vals.iter().filter(|&&v| pred(v)).count() as f64 / n
        };
        println!(
            "coord {c:>2}: >150 {:.3} >170 {:.3} >200 {:.3} in[170,230] {:.3} <-20 {:.3} <-150 {:.3}",
            frac(&|v| v > 150.0),
            frac(&|v| v > 170.0),
            frac(&|v| v > 200.0),
            frac(&|v| (170.0..=230.0).contains(&v)),
            frac(&|v| v < -20.0),
            frac(&|v| v < -150.0),
        );
    }
}
