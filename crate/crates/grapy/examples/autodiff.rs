//! Reverse-mode autodiff on the tape: a two-layer perceptron and its
//! gradients, checked against a central difference.

use grapy::{Tape, Tensor};

fn loss_of(w1: &Tensor, w2: &Tensor, x: &Tensor) -> grapy::Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let a = tape.leaf(w1.clone(), true);
    let b = tape.leaf(w2.clone(), true);
    let h = tape.matmul(x, a)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, b)?;
    let sq = tape.mul(y, y)?;
    let loss = tape.mean_all(sq)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item(), tape.grad(a).unwrap().clone()))
}

fn main() -> grapy::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?;
    let w1 = Tensor::from_fn(&[3, 4], |i| ((i as f64) * 0.37).sin());
    let w2 = Tensor::from_fn(&[4, 1], |i| 0.5 - 0.2 * i as f64);

    let (loss, grad) = loss_of(&w1, &w2, &x)?;
    println!("loss = {loss:.6}");
    println!("dL/dW1 = {:?}", grad.data());

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w1.len() {
        let mut plus = w1.clone();
        plus.data_mut()[i] += eps;
        let mut minus = w1.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (loss_of(&plus, &w2, &x)?.0 - loss_of(&minus, &w2, &x)?.0) / (2.0 * eps);
        worst = worst.max((numeric - grad.data()[i]).abs());
    }
    println!("max |analytic - numeric| = {worst:.2e}");
    Ok(())
}
