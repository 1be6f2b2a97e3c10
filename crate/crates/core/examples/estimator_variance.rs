//! Total variance of the top-k traversal estimator for several traversing
//! counts, on random per-position distributions with a GLEU reward.
//!
//! ```text
//! cargo run --release --example estimator_variance
//! ```

use nsqt::cli::{estimator_bench, BenchSettings};

fn main() -> nsqt::Result<()> {
    let settings = BenchSettings {
        k_list: vec![0, 1, 5, 10],
        n: 20,
        len: 3,
        vocab: 10,
        instances: 5,
        repetitions: 2000,
        sharpness: 2.0,
        seed: 1,
    };
    println!("{:>3} {:>14} {:>14}", "k", "total var", "max |z| vs oracle");
    for row in estimator_bench(&settings)? {
        println!("{:>3} {:>14.6e} {:>14.2}", row.k, row.mean_total_variance(), row.max_standard_score);
    }
    Ok(())
}
