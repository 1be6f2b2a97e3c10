//! Sequence-level distillation: an autoregressive teacher rewrites the
//! training targets and a NAT student is trained on its outputs.
//!
//! ```text
//! cargo run --release --example distillation
//! ```

use nsqt::models::{Model, ModelConfig, ModelKind};
use nsqt::pipeline::{
    distill_corpus, gen_synthetic_task, mean_gleu, train_ce, DecodeConfig, MetricsLog, TaskKind, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nsqt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus = gen_synthetic_task(TaskKind::EchoRuns, 20, (4, 12), 1200, &mut rng)?;
    let (train, valid) = corpus.split_at(1000);
    let cfg = TrainConfig {
        max_steps: 800,
        eval_every: 200,
        ..TrainConfig::default()
    };

    let mut teacher = Model::new(ModelConfig::default(), ModelKind::Ar, 1)?;
    train_ce(&mut teacher, &train, Some(&valid), &cfg, &mut MetricsLog::in_memory())?;
    let distilled = distill_corpus(&teacher, &train, &DecodeConfig::for_kind(ModelKind::Ar))?;
    println!(
        "teacher rewrote {} of {} targets",
        distilled.corpus.len() - distilled.kept_original,
        distilled.corpus.len()
    );

    let nat = DecodeConfig::for_kind(ModelKind::Nat);
    for (name, data) in [("original", &train), ("distilled", &distilled.corpus)] {
        let mut student = Model::new(ModelConfig::default(), ModelKind::Nat, 2)?;
        train_ce(&mut student, data, Some(&valid), &cfg, &mut MetricsLog::in_memory())?;
        let score = mean_gleu(&student, &valid, &nat, &student.length_table)?;
        println!("nat student on {name} targets: valid gleu {score:.4}");
    }
    Ok(())
}
