//! One malleable convolution over a depth step: forward, per-kernel
//! decomposition and gradients of the receptive-field parameters.
//!
//! ```text
//! cargo run --release --example malleable_conv
//! ```

use malleable25d::convops::{duplicate_pretrained, malleable_backward, malleable_forward_with_tape, malleable_kernel_outputs};
use malleable25d::oracle::{naive_forward, OracleOp};
use malleable25d::{CameraIntrinsics, DepthField, RFieldParams, RfSpec, Tensor4};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (h, w) = (8, 8);
    let camera = CameraIntrinsics::new(20.0, 20.0, w as f64 / 2.0, h as f64 / 2.0)?;
    // wall at 2 m on the left, 2.3 m on the right
    let depth: Vec<f64> = (0..h * w).map(|i| if i % w < w / 2 { 2.0 } else { 2.3 }).collect();
    let depth = DepthField::new(Tensor4::from_vec([1, 1, h, w], depth)?, 1)?;
    let x = Tensor4::randn([1, 2, h, w], 1)?;

    let spec = RfSpec::same(3, 1, 1, 1);
    let pretrained = Tensor4::randn([4, 2, 3, 3], 2)?.scale(0.3);
    let params = duplicate_pretrained(&pretrained, Some(vec![0.0; 4]), RFieldParams::init(3)?, spec)?;

    let (y, tape) = malleable_forward_with_tape(&x, &depth, &camera, &params)?;
    let oracle = naive_forward(OracleOp::Malleable { params: &params, depth: &depth, camera: &camera }, &x)?;
    println!("output {:?}, max |fast - oracle| = {:.2e}", y.dims(), y.max_abs_diff(&oracle)?);

    let parts = malleable_kernel_outputs(&x, &depth, &camera, &params)?;
    for (k, p) in parts.iter().enumerate() {
        println!("kernel {k}: mean |y_k| = {:.4}", p.map(f64::abs).mean());
    }

    let grads = malleable_backward(&y, &tape, &params)?;
    let r = &grads.rfield;
    println!("d(|y|^2/2)/da = {:?}", r.a);
    println!("d(|y|^2/2)/dt = {:.6}", r.t);
    println!("d(|y|^2/2)/db = {:?}", r.b);
    Ok(())
}
