//! Write a synthetic feature file with known true labels.
//!
//! cargo run --example synth -- OUT [classes] [hidden_dim] [per_class] [noise] [seed]
//!
//! `noise` is the fraction of pseudo-labels flipped to a random other label.

use celda::feature_store::write_feature_file;
use celda::synthetic::{accuracy_against_truth, Corruption, MixtureSpec};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(out) = args.first() else {
        eprintln!("usage: synth OUT [classes] [hidden_dim] [per_class] [noise] [seed]");
        std::process::exit(1);
    };
    let num = |i: usize, default: f64| {
        args.get(i)
            .map_or(default, |a| a.parse().expect("numeric argument"))
    };
    let spec = MixtureSpec {
        num_classes: num(1, 4.0) as usize,
        hidden_dim: num(2, 8.0) as usize,
        per_class: num(3, 1000.0) as usize,
        separation: 2.0,
        corruption: Corruption::Uniform(num(4, 0.3)),
        seed: num(5, 13.0) as u64,
        ..MixtureSpec::default()
    };
    let ds = spec.generate();
    write_feature_file(&ds, out).expect("write feature file");
    println!(
        "{} records, pseudo-label accuracy {:.4}",
        ds.len(),
        accuracy_against_truth(&ds, &ds.pseudo_labels())
    );
}
