//! Parameter and operation counts of one layer for each operator kind and
//! kernel count.
//!
//! ```text
//! cargo run --release --example budget -- [c_in] [c_out] [size]
//! ```

use malleable25d::convops::{estimate_flops, LayerDescriptor, LayerKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let c_in = args.next().map(|s| s.parse()).transpose()?.unwrap_or(256);
    let c_out = args.next().map(|s| s.parse()).transpose()?.unwrap_or(256);
    let size = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);
    let layer = |kind, kernels| LayerDescriptor {
        kind,
        kernels,
        c_in,
        c_out,
        kh: 3,
        kw: 3,
        out_h: size,
        out_w: size,
        bias: false,
    };
    println!("{:<11} {:>2} {:>12} {:>16}", "kind", "K", "params", "operations");
    for kind in [LayerKind::Standard, LayerKind::DepthAware, LayerKind::Hard25D, LayerKind::Malleable] {
        let b = estimate_flops(&layer(kind, 3));
        println!("{:<11} {:>2} {:>12} {:>16}", kind.name(), 3, b.params(), b.total_ops());
    }
    println!();
    for k in 1..=8 {
        let hard = estimate_flops(&layer(LayerKind::Hard25D, k));
        let mal = estimate_flops(&layer(LayerKind::Malleable, k));
        println!(
            "K={k}: malleable adds {} params and {:.4}% operations over hard 2.5D",
            mal.params() - hard.params(),
            100.0 * (mal.total_ops() as f64 / hard.total_ops() as f64 - 1.0)
        );
    }
    Ok(())
}
