//! Cross-entropy training of a small non-autoregressive model on the copy
//! task, then argmax decoding with the source-to-target length table.
//!
//! ```text
//! cargo run --release --example train_nat
//! ```

use nsqt::models::{Model, ModelConfig, ModelKind};
use nsqt::pipeline::{evaluate, gen_synthetic_task, train_ce, DecodeConfig, MetricsLog, TaskKind, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nsqt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corpus = gen_synthetic_task(TaskKind::Copy, 20, (2, 8), 1200, &mut rng)?;
    let (train, valid) = corpus.split_at(1000);
    let mut model = Model::new(ModelConfig::default(), ModelKind::Nat, 1)?;
    let cfg = TrainConfig {
        max_steps: 1500,
        eval_every: 250,
        ..TrainConfig::default()
    };
    let mut log = MetricsLog::in_memory();
    let summary = train_ce(&mut model, &train, Some(&valid), &cfg, &mut log)?;
    for (step, g) in log.series("valid", "gleu") {
        println!("step {step:>5}: valid gleu {g:.4}");
    }
    println!("{summary:?}");

    let report = evaluate(&model, &valid, &DecodeConfig::for_kind(ModelKind::Nat), &model.length_table)?;
    println!(
        "mean gleu {:.4}, corpus bleu {:.4}, exact length rate {:.3}",
        report.mean_gleu, report.corpus_bleu, report.exact_len_rate
    );
    for ((src, tgt), hyp) in valid.pairs.iter().zip(&report.hypotheses).take(3) {
        println!("src {src:?}\nref {tgt:?}\nhyp {hyp:?}");
    }
    Ok(())
}
