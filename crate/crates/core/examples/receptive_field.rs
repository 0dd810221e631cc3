//! Soft receptive fields along the depth axis: assignment curves, widths and
//! the hard 2.5D bins they generalize.
//!
//! ```text
//! cargo run --release --example receptive_field -- [kernels] [temperature]
//! ```

use malleable25d::analysis::{default_rf_width, export_rf_curves, hard25d_profile};
use malleable25d::rfield::{assignment_weights, rebalance, RFieldParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let kernels: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let t: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.25);

    let init = RFieldParams::init(kernels)?;
    println!("initial field: {init}");
    println!("  width {:.4}", default_rf_width(&init));

    let mut sharp = init.clone();
    sharp.t = t;
    sharp.b[0] = 1.0;
    println!("sharpened field: {sharp}");
    println!("  width {:.4}", default_rf_width(&sharp));
    println!("  rebalancing s = {:?}", rebalance(&sharp.b));

    println!("\n{:>6}  assignment g (init)", "d");
    for d in [-3.0, -1.5, -0.5, 0.0, 0.5, 1.5, 3.0] {
        let g: Vec<String> = assignment_weights(d, &init).iter().map(|v| format!("{v:.3}")).collect();
        println!("{d:>6.2}  [{}]", g.join(", "));
    }

    let curves = export_rf_curves(&sharp, -4.0, 4.0, 9)?;
    println!("\nsharpened curves:\n{}", curves.to_csv());
    let hard = hard25d_profile(kernels, -4.0, 4.0, 9)?;
    println!("hard 2.5D bins:\n{}", hard.to_csv());
    Ok(())
}
