//! Trains a small malleable network briefly, then inspects one block: how
//! its pixels are spread over the kernels and what each kernel contributes.
//!
//! ```text
//! cargo run --release --example kernel_features -- [iterations] [out-dir]
//! ```

use malleable25d::analysis::{assignment_histogram, dump_kernel_features, write_kernel_dump};
use malleable25d::synth::{Dataset, SceneConfig, Split};
use malleable25d::train::{fit, NetConfig, ToyNet, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let dir = args.next();

    let data = Dataset::from_config(&SceneConfig {
        scenes: 120,
        ..SceneConfig::default()
    })?;
    let net = ToyNet::build(&NetConfig {
        duplicate_banks: true,
        ..NetConfig::default()
    })?;
    let res = fit(
        net,
        &data,
        &TrainConfig {
            iterations,
            ..TrainConfig::default()
        },
    )?;
    let (block, rfield) = res.net.malleable_blocks().last().map(|(i, r)| (*i, (*r).clone())).ok_or("no malleable block")?;
    println!("block {block}: {rfield}");

    let hist = assignment_histogram(&res.net, &data, Split::Test, block)?;
    println!("{}", hist.table().to_csv());
    println!("entropy raw {:.4}, rebalanced {:.4}", hist.raw_entropy(), hist.rebalanced_entropy());

    let sample = &data.split(Split::Test)[0];
    let dump = dump_kernel_features(&res.net, sample, &data.camera, block)?;
    for (k, map) in dump.kernels.iter().enumerate() {
        println!("kernel {k}: mean |y_k| = {:.4}", map.map(f64::abs).mean());
    }
    println!("recombination error {:.2e}", dump.recombined().max_abs_diff(&dump.output)?);
    if let Some(dir) = dir {
        std::fs::create_dir_all(&dir)?;
        let files = write_kernel_dump(&dump, &dir)?;
        println!("wrote {} maps to {dir}", files.len());
    }
    Ok(())
}
