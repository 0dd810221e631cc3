//! Trains the toy segmentation network on generated scenes and reports test
//! accuracy and the learned receptive fields.
//!
//! ```text
//! cargo run --release --example train_toy -- net.kind=standard train.iterations=500
//! ```
//!
//! Arguments are `key=value` overrides with `scene.`, `net.` and `train.`
//! prefixes.

use std::time::Instant;

use malleable25d::analysis::{assignment_histogram, mean_rf_width};
use malleable25d::kvfile::KvFile;
use malleable25d::synth::{scene_config_from_kv, Dataset, SceneConfig, Split};
use malleable25d::train::{evaluate, fit_from, NetConfig, OptimState, ToyNet, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut kv = KvFile::new();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("arguments are key=value")?;
        kv.set(k, v);
    }
    let scene = scene_config_from_kv(&kv, "scene.", &SceneConfig::default())?;
    let mut net_cfg = NetConfig::read_kv(&kv, "net.")?;
    net_cfg.classes = scene.classes;
    let train = TrainConfig::read_kv(&kv, "train.")?;

    let data = Dataset::from_config(&scene)?;
    let start = Instant::now();
    let net = ToyNet::build(&net_cfg)?;
    let res = fit_from(net, OptimState::new(&train), &data, &train, |row| {
        println!("iter {:5}  lr {:.5}  loss {:.4}  acc {:.3}", row.iter, row.lr, row.loss, row.pixel_acc);
    })?;
    let test = evaluate(&res.net, &data, Split::Test, 16)?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    println!("test pixel accuracy {:.4}, mean IoU {:.4}", test.pixel_acc, test.mean_iou);
    for (i, r) in res.net.malleable_blocks() {
        println!("block {i}: {r}");
    }
    if let Some((last, _)) = res.net.malleable_blocks().last() {
        let hist = assignment_histogram(&res.net, &data, Split::Test, *last)?;
        println!("mean receptive-field width {:.4}", mean_rf_width(&res.net));
        println!(
            "block {last} assignment entropy: raw {:.4}, rebalanced {:.4}",
            hist.raw_entropy(),
            hist.rebalanced_entropy()
        );
        println!("  raw ratios {:?}", hist.raw_ratios());
        println!("  rebalanced ratios {:?}", hist.rebalanced_ratios());
    }
    Ok(())
}
