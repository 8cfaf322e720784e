mod common;

use common::{random_tensor, rng, RandomNet};
use dmd_core::gan::{DataShape, Discriminator, NetworkSpec};
use dmd_core::tensor::finite_diff_check;
use dmd_core::{Tape, Tensor};

#[test]
fn random_networks_match_central_differences() {
    for seed in 100..130 {
        let err = RandomNet::new(seed).worst_error();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn matmul_gradient_by_hand() {
    // d/dA sum(A·B) with B = ones(2,2) is 2 everywhere: each entry of A
    // feeds two outputs with weight 1.
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
    let b = tape.constant(Tensor::ones(&[2, 2]));
    let y = tape.matmul(a, b).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[2.0; 4]);
}

#[test]
fn broadcast_gradients_reduce_to_operand_shape() {
    let mut r = rng(3);
    let b = random_tensor(&[3], &mut r);
    let x = random_tensor(&[4, 3], &mut r);
    let err = finite_diff_check(
        |tape, v| {
            let xv = tape.constant(x.clone());
            let p = tape.mul(xv, v)?;
            let q = tape.div(p, v)?;
            let r = tape.add(q, v)?;
            let t = tape.tanh(r);
            Ok(tape.sum(t))
        },
        &b,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_discriminator_gradient_wrt_input() {
    let spec = NetworkSpec {
        disc_hidden: vec![6, 5],
        conv_channels: vec![2, 3],
        ..NetworkSpec::default()
    };
    let shape = DataShape::Image {
        channels: 1,
        height: 5,
        width: 5,
    };
    let disc = Discriminator::new(&spec, shape, 1, 9).unwrap();
    let x = random_tensor(&[2, 1, 5, 5], &mut rng(4));
    let err = finite_diff_check(
        |tape, v| {
            let bound = disc.bind(tape, false);
            let out = disc.forward(tape, &bound, v, None)?;
            let p = tape.sigmoid(out.logits);
            Ok(tape.mean(p))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gradients_accumulate_across_backward_passes() {
    let mut w = Tensor::from_vec(vec![1.5, -0.5]).with_grad();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        w.accumulate_grad(tape.grad(v).unwrap()).unwrap();
    }
    assert_eq!(w.grad().unwrap(), &[2.0, 2.0]);
    w.zero_grad();
    assert!(w.grad().map_or(true, |g| g.iter().all(|&v| v == 0.0)));
}
