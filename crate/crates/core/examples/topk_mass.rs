//! How much probability the `k` most likely tokens hold at each target
//! position of a trained NAT model, with a five-bin histogram per `k`.
//!
//! ```text
//! cargo run --release --example topk_mass
//! ```

use nsqt::cli::{topk_stats, HISTOGRAM_BINS};
use nsqt::models::{Model, ModelConfig, ModelKind};
use nsqt::pipeline::{gen_synthetic_task, train_ce, MetricsLog, TaskKind, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nsqt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let corpus = gen_synthetic_task(TaskKind::EchoRuns, 20, (4, 12), 1200, &mut rng)?;
    let (train, valid) = corpus.split_at(1000);
    let mut model = Model::new(ModelConfig::default(), ModelKind::Nat, 1)?;
    let cfg = TrainConfig {
        max_steps: 600,
        eval_every: 0,
        ..TrainConfig::default()
    };
    train_ce(&mut model, &train, None, &cfg, &mut MetricsLog::in_memory())?;

    let stats = topk_stats(&model, &valid, &[1, 2, 5, 10, 20])?;
    println!("{} predictions", stats.predictions());
    print!("{:>3} {:>8}", "k", "E[P_k]");
    for b in 0..HISTOGRAM_BINS {
        print!(" {:>9}", format!("<{:.1}", (b + 1) as f64 / HISTOGRAM_BINS as f64));
    }
    println!();
    for ((k, m), h) in stats.k_list.iter().zip(&stats.means).zip(&stats.histograms) {
        print!("{k:>3} {m:>8.4}");
        for c in h {
            print!(" {c:>9}");
        }
        println!();
    }
    Ok(())
}
