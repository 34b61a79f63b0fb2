// Scratch: is the synthetic task separable by a hand-built edge statistic?

use dfdet_core::config::ExperimentConfig;
use dfdet_core::data::generate_dataset;
use dfdet_core::metrics::{roc_auc, EvalRecord};
use dfdet_core::rng::derive_seed;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.seed = derive_seed(cfg.seed, "data");
    cfg.data.count = 400;
    let ds = generate_dataset(&cfg.data).unwrap();
    let s = cfg.data.image_size;

    // Max |Laplacian| over the image.
    let mut records = Vec::new();
    let mut max_stat: f64 = 0.0;
    for (i, sample) in ds.samples.iter().enumerate() {
        let img = &sample.image.data;
        let mut stat: f64 = 0.0;
        for y in 1..s - 1 {
            for x in 1..s - 1 {
                let lap = 4.0 * img[y * s + x]
                    - img[(y - 1) * s + x]
                    - img[(y + 1) * s + x]
                    - img[y * s + x - 1]
                    - img[y * s + x + 1];
                stat = stat.max(lap.abs());
            }
        }
        max_stat = max_stat.max(stat);
        records.push((i as u64, sample.label, stat));
    }
    let recs: Vec<EvalRecord> = records
        .iter()
        .map(|&(id, label, stat)| EvalRecord::with_head_name(id, label, stat / (max_stat + 1e-9), "probe").unwrap())
        .collect();
    println!("laplacian-max AUC = {:.4}", roc_auc(&recs).unwrap());

    // Mean |Laplacian| as a second stat.
    let mut records2 = Vec::new();
    for (i, sample) in ds.samples.iter().enumerate() {
        let img = &sample.image.data;
        let mut acc = 0.0;
        for y in 1..s - 1 {
            for x in 1..s - 1 {
                let lap = 4.0 * img[y * s + x]
                    - img[(y - 1) * s + x]
                    - img[(y + 1) * s + x]
                    - img[y * s + x - 1]
                    - img[y * s + x + 1];
                acc += lap.abs();
            }
        }
        records2.push(EvalRecord::with_head_name(i as u64, sample.label, (acc / 4096.0).min(1.0), "probe").unwrap());
    }
    println!("laplacian-mean AUC = {:.4}", roc_auc(&records2).unwrap());
}
