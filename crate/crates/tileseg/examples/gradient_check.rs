//! Check the tape's reverse-mode gradients against central finite
//! differences for a small conv-pool-linear network.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tileseg::autodiff::{finite_difference_gradient, max_rel_error, Reduction, Tape};
use tileseg::tensor::Tensor;

fn uniform(rng: &mut ChaCha20Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let x = uniform(&mut rng, vec![2, 6, 6]);
    let w = uniform(&mut rng, vec![4, 2, 3, 3]);
    let b = uniform(&mut rng, vec![4]);
    let labels = [1usize, 0, 1, 0];
    let mask = [true, true, false, true];

    // forward: conv -> relu -> maxpool -> rows -> masked cross entropy
    let forward = |xv: &Tensor, wv: &Tensor, bv: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let x = tape.input(xv);
        let w = tape.input(wv);
        let b = tape.input(bv);
        let c = tape.conv2d(x, w, b, 1, 1).unwrap();
        let a = tape.relu(c);
        let p = tape.maxpool2d(a, 3, 3);
        let rows = tape.rows_from_chw(p); // [4 cells, 4 channels]... 2x2 cells
        let loss = tape
            .masked_softmax_cross_entropy(rows, &labels, &mask, Reduction::Mean)
            .unwrap();
        tape.value(loss)[0]
    };

    // analytic gradients from one taped pass
    let mut tape = Tape::new();
    let xv = tape.param(&x);
    let wv = tape.param(&w);
    let bv = tape.param(&b);
    let c = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
    let a = tape.relu(c);
    let p = tape.maxpool2d(a, 3, 3);
    let rows = tape.rows_from_chw(p);
    let loss = tape
        .masked_softmax_cross_entropy(rows, &labels, &mask, Reduction::Mean)
        .unwrap();
    println!("loss = {:.6}", tape.value(loss)[0]);
    tape.backward(loss).unwrap();

    let h = 1e-5;
    for (name, var, source, f) in [
        (
            "input",
            xv,
            &x,
            Box::new(|t: &Tensor| forward(t, &w, &b)) as Box<dyn Fn(&Tensor) -> f64>,
        ),
        ("weights", wv, &w, Box::new(|t: &Tensor| forward(&x, t, &b))),
        ("bias", bv, &b, Box::new(|t: &Tensor| forward(&x, &w, t))),
    ] {
        let analytic = tape.grad_tensor(var).unwrap();
        let fd = finite_difference_gradient(f, source, h);
        let err = max_rel_error(&analytic, &fd);
        println!("{name:7}: {} coords, max rel error vs finite differences = {err:.3e}", fd.numel());
        assert!(err <= 1e-4);
    }
    println!("all gradients agree within 1e-4");
}
