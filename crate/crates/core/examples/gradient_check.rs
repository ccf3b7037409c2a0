//! Reverse-mode gradients of a small two-layer expression, checked against
//! central differences.
//!
//! Run with: cargo run --example gradient_check

use prunekit::{Graph, Result, Tensor};

fn loss(x: &Tensor, w: &Tensor, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.param(w.clone());
    let h = g.matmul(xv, wv)?;
    let h = g.gelu(h);
    let l = g.cross_entropy(h, targets)?;
    g.backward(l)?;
    Ok((g.value(l).item(), g.grad(wv).unwrap().to_vec()))
}

fn main() -> Result<()> {
    let x = Tensor::from_fn(&[4, 3], |i| ((i * 7 % 5) as f64 - 2.0) * 0.4);
    let w = Tensor::from_fn(&[3, 5], |i| ((i * 3 % 7) as f64 - 3.0) * 0.25);
    let targets = [0, 3, 1, 4];
    let (value, grad) = loss(&x, &w, &targets)?;
    println!("loss = {value:.6}");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    println!("{:>4} {:>14} {:>14}", "i", "analytic", "numeric");
    for (i, &a) in grad.iter().enumerate() {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(&x, &plus, &targets)?.0 - loss(&x, &minus, &targets)?.0) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        println!("{i:>4} {a:>14.8} {numeric:>14.8}");
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
