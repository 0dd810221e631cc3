//! Generates a synthetic RGB-D segmentation dataset, writes it to disk and
//! reads it back.
//!
//! ```text
//! cargo run --release --example synthetic_scenes -- [out-dir] [regime]
//! ```

use malleable25d::synth::{export_dataset, Dataset, Regime, SceneConfig, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "scenes-out".into());
    let regime = match args.next().as_deref() {
        Some("outdoor") => Regime::Outdoor,
        _ => Regime::Indoor,
    };
    let cfg = SceneConfig {
        scenes: 40,
        regime,
        ..SceneConfig::default()
    };
    let (manifest, files) = export_dataset(&cfg, &dir)?;
    println!("wrote {} files, {} samples under {dir}", files.len(), manifest.entries.len());

    let data = Dataset::load(std::path::Path::new(&dir).join("manifest.txt"))?;
    let mut counts = vec![0usize; data.classes];
    let mut depth = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, s) in &data.samples {
        for &l in &s.labels.data {
            if let Some(c) = counts.get_mut(l as usize) {
                *c += 1;
            }
        }
        for &d in s.depth.depth().data().iter().filter(|&&d| d > 0.0) {
            depth = (depth.0.min(d), depth.1.max(d));
        }
    }
    let total: usize = counts.iter().sum();
    println!(
        "train {} / test {} samples",
        data.split(Split::Train).len(),
        data.split(Split::Test).len()
    );
    for (c, n) in counts.iter().enumerate() {
        println!("class {c}: {:.1}% of pixels", 100.0 * *n as f64 / total as f64);
    }
    println!("depth range {:.2} to {:.2} m", depth.0, depth.1);
    Ok(())
}
