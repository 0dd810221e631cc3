//! Finite-difference check of every operator's analytical gradients.
//!
//! ```text
//! cargo run --release --example gradcheck -- [trials] [seed]
//! ```

use malleable25d::oracle::gradcheck::{self, GradcheckConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let trials = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let cfg = GradcheckConfig {
        trials,
        seed,
        ..GradcheckConfig::default()
    };
    let start = std::time::Instant::now();
    let report = gradcheck::run(&cfg)?;
    println!("{report}");
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    if !report.passed() {
        std::process::exit(1);
    }
    Ok(())
}
