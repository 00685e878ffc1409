//! Reverse-mode gradients on a small graph, compared against central
//! differences.

use uqrank::tensor::check_gradients;
use uqrank::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let mut g = Graph::new();
    let x = g.param(Tensor::matrix(&[vec![0.5, -1.0, 2.0]])?);
    let w = g.param(Tensor::matrix(&[
        vec![0.1, 0.2],
        vec![-0.3, 0.4],
        vec![0.5, -0.6],
    ])?);
    let h = g.matmul(x, w)?;
    let h = g.tanh(h);
    let ls = g.log_softmax(h, 1)?;
    let loss = g.sum(ls);
    let loss = g.neg(loss);

    let grads = g.backward(loss)?;
    println!("loss = {:.6}", g.scalar(loss));
    println!("dL/dx = {:?}", grads.tensor(&g, x).data());
    println!("dL/dw = {:?}", grads.tensor(&g, w).data());

    let err = check_gradients(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.tanh(h);
            let ls = g.log_softmax(h, 1)?;
            let s = g.sum(ls);
            Ok(g.neg(s))
        },
        &[g.value(x).clone(), g.value(w).clone()],
    )?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}
