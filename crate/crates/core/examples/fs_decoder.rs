//! The fused decoder: a parallel bottom stack run once per sentence and an
//! autoregressive top layer run once per emitted token. Compares it with a
//! NAT and an AR model trained on the same data.
//!
//! ```text
//! cargo run --release --example fs_decoder
//! ```

use nsqt::models::{Model, ModelConfig, ModelKind};
use nsqt::pipeline::{evaluate, gen_synthetic_task, train_ce, DecodeConfig, MetricsLog, TaskKind, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nsqt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let corpus = gen_synthetic_task(TaskKind::EchoRuns, 20, (4, 12), 1200, &mut rng)?;
    let (train, valid) = corpus.split_at(1000);
    let cfg = TrainConfig {
        max_steps: 1000,
        eval_every: 250,
        ..TrainConfig::default()
    };
    println!("{:<4} {:>8} {:>12} {:>10} {:>10}", "kind", "gleu", "invocations", "bottom", "top");
    for kind in [ModelKind::Nat, ModelKind::Ar, ModelKind::Fs] {
        let mut model = Model::new(ModelConfig::default(), kind, 1)?;
        train_ce(&mut model, &train, Some(&valid), &cfg, &mut MetricsLog::in_memory())?;
        let report = evaluate(&model, &valid, &DecodeConfig::for_kind(kind), &model.length_table)?;
        println!(
            "{kind:<4} {:>8.4} {:>12.2} {:>10} {:>10}",
            report.mean_gleu,
            report.decoder_invocations_per_sentence(),
            report.invocations.bottom,
            report.invocations.top
        );
    }
    Ok(())
}
