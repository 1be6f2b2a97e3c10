//! Sentence GLEU, smoothed sentence BLEU and corpus BLEU on token ids.
//!
//! ```text
//! cargo run --release --example rewards
//! ```

use nsqt::rewards::{bleu_sentence, corpus_bleu, gleu};

fn main() {
    let reference = [4, 5, 6, 7];
    let cases: [(&str, Vec<u32>); 4] = [
        ("identical", vec![4, 5, 6, 7]),
        ("one substitution", vec![4, 5, 9, 7]),
        ("repeated token", vec![4, 4, 5, 6, 7]),
        ("truncated", vec![4, 5]),
    ];
    println!("{:<18} {:>8} {:>8}", "hypothesis", "gleu", "bleu");
    for (name, hyp) in &cases {
        println!(
            "{name:<18} {:>8.4} {:>8.4}",
            gleu(hyp, &reference),
            bleu_sentence(hyp, &reference)
        );
    }
    let pairs: Vec<(&[u32], &[u32])> = cases.iter().map(|(_, h)| (h.as_slice(), &reference[..])).collect();
    println!("corpus bleu over all four: {:.4}", corpus_bleu(pairs));
}
