//! Desk-scale DC motor comparison of the separable, lifted linear and lifted
//! bilinear models.
//!
//! ```text
//! cargo run --release -p kcf --example dc_motor -- dc_motor_tanh 0
//! ```

use std::time::Instant;

use kcf::dynamics::{builtin, run_experiments};
use kcf::learning::{pipeline, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let system = args.next().unwrap_or_else(|| "dc_motor_tanh".into());
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let epochs: Option<usize> = args.next().map(|s| s.parse()).transpose()?;

    let sys = builtin(&system)?;
    let data = run_experiments(&sys, &PipelineConfig::dc_motor_plan(seed))?;
    let mut config = PipelineConfig::dc_motor(seed);
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    let started = Instant::now();
    let out = pipeline(&config, &data, Some(&sys))?;
    println!(
        "{system} seed {seed}: {:.1} s",
        started.elapsed().as_secs_f64()
    );
    if let Some(r) = &out.dictionary_report {
        println!(
            "proximity train {:?} test {:?}, best epoch {:?}",
            r.train_proximity, r.test_proximity, r.best_epoch
        );
    }
    for s in &out.comparison.expect("test protocol is set").scores {
        println!(
            "{:>10} x1 {:>12.4e} x2 {:>12.4e}",
            s.name,
            s.rmse_of(0),
            s.rmse_of(1)
        );
    }
    Ok(())
}
