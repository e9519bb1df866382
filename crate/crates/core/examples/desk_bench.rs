//! Desk-scale training benchmark: times one interpolation epoch and a short
//! classification run on the synthetic datasets used by the acceptance
//! suite.

use ists_core::dataset_io::{generate_synthetic, ClassRule, SyntheticSpec};
use ists_core::model::{ModelConfig, Task};
use ists_core::pipelines::{PipelineConfig, Representation};
use ists_core::task_prep::SplitSpec;
use ists_core::trainer::{evaluate, prepare_data, train, ExperimentConfig, PreparedSample};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let spec = SyntheticSpec::uniform("bench", 700, 4, 50.0, 48.0, (0.5, 3.0), 0.05, None, 42);
    let (manifest, samples) = generate_synthetic(&spec).unwrap();
    println!("generate: {:.2}s", t0.elapsed().as_secs_f64());

    let model = ModelConfig {
        pipeline: PipelineConfig::new(Representation::Series),
        task: Task::Interpolation,
        n_vars: 4,
        n_classes: None,
        hidden: 64,
        layers: 2,
        heads: 4,
        ffn_mult: 4,
        max_positions: 256,
        seed: 1,
    };
    let mut config = ExperimentConfig::defaults(model, 1);
    config.split = SplitSpec::random((5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0), 1);
    config.max_epochs = 3;

    let t0 = Instant::now();
    let data = prepare_data(&config, &manifest, &samples).unwrap();
    println!(
        "prepare: {:.2}s (train={} val={} test={})",
        t0.elapsed().as_secs_f64(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );

    let t0 = Instant::now();
    let (model, record, history) = train(&config, &data).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "train {} epochs: {:.2}s ({:.2}s/epoch), best epoch {} val loss {:.5}",
        history.epochs.len(),
        dt,
        dt / history.epochs.len() as f64,
        record.epoch,
        record.metric
    );
    for e in &history.epochs {
        println!(
            "  epoch {}: train {:.5} val {:.5}",
            e.epoch, e.train_loss, e.val_loss
        );
    }
    let report = evaluate(&model, &data.test).unwrap();
    // Per-variable-mean baseline from training inputs.
    let mut sums = vec![0.0; 4];
    let mut counts = vec![0usize; 4];
    for p in &data.train {
        if let PreparedSample::Queried { input, .. } = p {
            for o in &input.observations {
                sums[o.var] += o.val;
                counts[o.var] += 1;
            }
        }
    }
    let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect();
    let mut se = 0.0;
    let mut n = 0usize;
    for p in &data.test {
        if let PreparedSample::Queried { queries, .. } = p {
            for q in &queries.queries {
                let d = q.target - means[q.var];
                se += d * d;
                n += 1;
            }
        }
    }
    println!(
        "test mse={:.5} mae={:.5}; baseline mse={:.5}",
        report.map["mse"],
        report.map["mae"],
        se / n as f64
    );
}
