//! Cross-entropy pre-training of a NAT model on the echo-runs task followed
//! by sequence-level fine-tuning with the top-k traversal estimator
//! (k = 5, n = 20) and a GLEU reward.
//!
//! ```text
//! cargo run --release --example finetune_rl
//! ```

use nsqt::estimators::EstimatorConfig;
use nsqt::models::{Model, ModelConfig, ModelKind};
use nsqt::pipeline::{
    finetune_rl, gen_synthetic_task, mean_gleu, train_ce, DecodeConfig, MetricsLog, TaskKind, TrainConfig,
};
use nsqt::rewards::RewardFn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nsqt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let corpus = gen_synthetic_task(TaskKind::EchoRuns, 20, (4, 12), 2200, &mut rng)?;
    let (train, valid) = corpus.split_at(2000);
    let mut model = Model::new(ModelConfig::default(), ModelKind::Nat, 1)?;
    let pre = TrainConfig {
        max_steps: 1500,
        eval_every: 250,
        patience: 3,
        ..TrainConfig::default()
    };
    train_ce(&mut model, &train, Some(&valid), &pre, &mut MetricsLog::in_memory())?;
    let dec = DecodeConfig::for_kind(ModelKind::Nat);
    let before = mean_gleu(&model, &valid, &dec, &model.length_table)?;
    println!("cross-entropy baseline: valid gleu {before:.4}");

    let fine = TrainConfig {
        max_steps: 300,
        lr: 5e-4,
        warmup: 100,
        eval_every: 50,
        patience: 100,
        ..TrainConfig::default()
    };
    let mut log = MetricsLog::in_memory();
    finetune_rl(&mut model, &train, Some(&valid), &EstimatorConfig::default(), RewardFn::gleu(), &fine, &mut log)?;
    for (step, g) in log.series("valid", "gleu") {
        println!("step {step:>4}: valid gleu {g:.4}");
    }
    let p_k = log.series("train", "p_k");
    let mean_pk = p_k.iter().map(|x| x.1).sum::<f64>() / p_k.len() as f64;
    println!("mean top-5 mass during fine-tuning {mean_pk:.3}");
    let after = mean_gleu(&model, &valid, &dec, &model.length_table)?;
    println!("after fine-tuning: valid gleu {after:.4} ({:+.4})", after - before);
    Ok(())
}
