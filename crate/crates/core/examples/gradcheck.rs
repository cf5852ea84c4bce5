//! Builds a small conv + dense network on the autodiff graph and compares its
//! analytic gradients with central differences.
//!
//! cargo run --release --example gradcheck

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stethlab::autodiff::{finite_diff_check, Graph, Padding, ParameterSet, Partition, Tensor};
use stethlab::nn::{softmax_ce_loss, Activation, Conv2dLayer, DenseLayer};

fn main() -> stethlab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParameterSet::new();
    let conv = Conv2dLayer::new(
        &mut params,
        "conv",
        Partition::Encoder,
        1,
        4,
        3,
        2,
        Padding::Same,
        Activation::LeakyRelu,
        &mut rng,
    )?;
    let (h, w) = conv.output_hw(8, 8);
    let dense = DenseLayer::new(&mut params, "dense", Partition::Decoder, 4 * h * w, 3, Activation::None, &mut rng)?;
    let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let err = finite_diff_check(&mut params, 1e-5, |p| {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let a = conv.forward(&mut g, p, xi, true).expect("conv");
        let a = g.flatten(a).expect("flatten");
        let z = dense.forward(&mut g, p, a, true).expect("dense");
        let loss = softmax_ce_loss(&mut g, z, &[0, 2], None).expect("loss");
        g.forward([]).expect("forward");
        (g.value(loss).item(), g.backward(loss).expect("backward"))
    });
    println!("{} parameters, max relative gradient error {err:.2e}", params.len());
    Ok(())
}
