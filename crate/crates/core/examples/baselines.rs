//! The same features and depth through a plain convolution, the depth-aware
//! convolution, hard 2.5D binning and the malleable operator.
//!
//! ```text
//! cargo run --release --example baselines -- [seed]
//! ```

use malleable25d::convops::{conv2d_forward, depthaware_forward, hard25d_forward, malleable_forward, DEFAULT_DEPTH_AWARE_ALPHA};
use malleable25d::oracle::gradcheck::RandomInstance;
use malleable25d::oracle::{naive_forward, OracleOp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = loop {
        let inst = RandomInstance::draw(&mut rng, 3, 1, 3, 10);
        if inst.spec.kernel == (3, 3) {
            break inst;
        }
    };
    println!("features {:?}, spec {:?}", inst.x.dims(), inst.spec);

    let bias = Some(inst.bias.as_slice());
    let std_y = conv2d_forward(&inst.x, &inst.banks[0], bias, &inst.spec)?;
    let std_o = naive_forward(OracleOp::Standard { weights: &inst.banks[0], bias, spec: &inst.spec }, &inst.x)?;

    let da = inst.depthaware(DEFAULT_DEPTH_AWARE_ALPHA);
    let da_y = depthaware_forward(&inst.x, &inst.depth, &da)?;
    let da_o = naive_forward(OracleOp::DepthAware { params: &da, depth: &inst.depth }, &inst.x)?;

    let hard = inst.hard25d();
    let hard_y = hard25d_forward(&inst.x, &inst.depth, &inst.camera, &hard)?;
    let hard_o = naive_forward(OracleOp::Hard25D { params: &hard, depth: &inst.depth, camera: &inst.camera }, &inst.x)?;

    let mal = inst.malleable();
    let mal_y = malleable_forward(&inst.x, &inst.depth, &inst.camera, &mal)?;
    let mal_o = naive_forward(OracleOp::Malleable { params: &mal, depth: &inst.depth, camera: &inst.camera }, &inst.x)?;

    println!("{:<12} {:>12} {:>14}", "operator", "mean |y|", "oracle diff");
    for (name, y, o) in [
        ("standard", &std_y, &std_o),
        ("depthaware", &da_y, &da_o),
        ("hard25d", &hard_y, &hard_o),
        ("malleable", &mal_y, &mal_o),
    ] {
        println!("{name:<12} {:>12.5} {:>14.2e}", y.map(f64::abs).mean(), y.max_abs_diff(o)?);
    }
    Ok(())
}
