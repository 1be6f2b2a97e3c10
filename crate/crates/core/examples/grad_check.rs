//! Finite-difference gradient checks: one primitive chain and the full
//! training loss of each decoder.
//!
//! ```text
//! cargo run --release --example grad_check
//! ```

use nsqt::models::{Dropout, Model, ModelConfig, ModelKind};
use nsqt::pipeline::ce_loss;
use nsqt::tensor::{grad_check, grad_check_params, GradCheckConfig, Tensor};

fn main() -> nsqt::Result<()> {
    let x = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4])?;
    let w = Tensor::matrix(3, 2, vec![0.7, -0.2, 0.4, 1.1, -0.9, 0.25])?;
    let report = grad_check(
        |g, p| {
            let h = g.matmul(p[0], p[1])?;
            let s = g.log_softmax_rows(h)?;
            Ok(g.sum(s))
        },
        &[x, w],
        1e-6,
        1e-5,
    )?;
    println!("log_softmax(x w): max rel error {:.2e}, passed {}", report.max_rel_error, report.passed);

    let cfg = ModelConfig {
        d_model: 8,
        d_hidden: 16,
        vocab_size: 12,
        p_dropout: 0.0,
        ..ModelConfig::default()
    };
    let (src, tgt) = (vec![4, 7, 9, 5], vec![4, 7, 7, 9, 5]);
    let check = GradCheckConfig::new(1e-6, 1e-4).sampled(3, 11);
    for kind in [ModelKind::Ar, ModelKind::Nat, ModelKind::Fs] {
        let mut model = Model::new(cfg.clone(), kind, 5)?;
        let report = grad_check_params(
            &mut model,
            |m, g| ce_loss(m, g, &src, &tgt, &mut Dropout::off()),
            &check,
        )?;
        println!(
            "{kind}: {} entries checked, max rel error {:.2e}, passed {}",
            report.checked, report.max_rel_error, report.passed
        );
    }
    Ok(())
}
