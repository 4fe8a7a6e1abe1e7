//! Finite-difference check of the full training loss through every encoder.
//!
//!     cargo run --example gradient_check -- [eps] [samples]

use sgclip::encoders::ModelConfig;
use sgclip::objectives::LossConfig;
use sgclip::training::full_loss_gradient_check;

fn main() -> sgclip::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let eps: f64 = args.first().map_or(1e-3, |s| s.parse().expect("eps"));
    let samples: usize = args.get(1).map_or(200, |s| s.parse().expect("samples"));
    let model = ModelConfig::default();
    for loss in [
        LossConfig::default(),
        LossConfig {
            neg_in_denominator: true,
            ..LossConfig::default()
        },
    ] {
        let start = std::time::Instant::now();
        let r = full_loss_gradient_check::<f64>(&model, &loss, eps, samples, 7)?;
        println!(
            "neg_in_denominator={}: max_rel_err {:.3e} over {} samples, worst {:?} ({:.1?})",
            loss.neg_in_denominator,
            r.max_relative_error,
            r.samples,
            r.worst,
            start.elapsed()
        );
    }
    Ok(())
}
