use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap().with_requires_grad(true)
}

/// Central differences of `f` with respect to every entry of `inputs[which]`.
fn numeric_grad(
    inputs: &[Tensor],
    which: usize,
    f: &dyn Fn(&mut Tape<'_>, &[Var]) -> Var,
) -> Vec<f64> {
    let h = 1e-5;
    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out)[0]
    };
    (0..inputs[which].numel())
        .map(|i| {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            (eval(&plus) - eval(&minus)) / (2.0 * h)
        })
        .collect()
}

fn check_grads(inputs: &[Tensor], f: &dyn Fn(&mut Tape<'_>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *v);
        let numeric = numeric_grad(inputs, k, f);
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom < 1e-4 || (a - n).abs() < 1e-9,
                "input {k}: analytic {a} vs numeric {n}"
            );
        }
    }
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn project(tape: &mut Tape<'_>, x: Var) -> Var {
    let n = tape.value(x).len();
    let weights: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let shape = tape.shape(x).to_vec();
    let w = tape.input(Tensor::new(&shape, weights).unwrap());
    let y = tape.mul(x, w).unwrap();
    tape.sum(y)
}

#[test]
fn conv2d_sliding_window_of_ones() {
    let x = Tensor::new(&[1, 3, 3], vec![1.0; 9]).unwrap();
    let w = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let b = Tensor::zeros(&[1]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 3]);
    assert_eq!(tape.value(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv2d_zero_input_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::zeros(&[1, 64, 64]);
    let w = rand_tensor(&mut rng, &[32, 1, 3, 3]);
    let b = Tensor::zeros(&[32]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    let y = tape.conv2d(xv, wv, bv, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[32, 32, 32]);
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_channel_mismatch_is_shape_error() {
    let x = Tensor::zeros(&[2, 4, 4]);
    let w = Tensor::zeros(&[1, 3, 3, 3]);
    let b = Tensor::zeros(&[1]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    assert!(matches!(tape.conv2d(xv, wv, bv, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn conv_transpose_doubles_and_scatters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = rand_tensor(&mut rng, &[64, 128, 3, 3]);
    let b = Tensor::zeros(&[128]);
    let x = Tensor::zeros(&[64, 4, 4]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    let y = tape.conv_transpose2d(xv, wv, bv, 2, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[128, 8, 8]);
    assert!(tape.value(y).iter().all(|&v| v == 0.0));

    // One nonzero input at (iy, ix) lands as v * kernel centred on
    // (2 iy, 2 ix): output (oy, ox) = 2*i - 1 + k, clipped to the image.
    let w = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let b = Tensor::zeros(&[1]);
    let mut x = Tensor::zeros(&[1, 3, 3]);
    let (iy, ix, v) = (1usize, 2usize, 1.7);
    x.data_mut()[iy * 3 + ix] = v;
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    let y = tape.conv_transpose2d(xv, wv, bv, 2, 1, 1).unwrap();
    let mut expected = vec![0.0; 36];
    for ky in 0..3 {
        for kx in 0..3 {
            let oy = 2 * iy as isize - 1 + ky as isize;
            let ox = 2 * ix as isize - 1 + kx as isize;
            if (0..6).contains(&oy) && (0..6).contains(&ox) {
                expected[oy as usize * 6 + ox as usize] += v * w.data()[ky * 3 + kx];
            }
        }
    }
    for (a, e) in tape.value(y).iter().zip(&expected) {
        assert!((a - e).abs() < 1e-15);
    }
}

#[test]
fn conv_adjoint_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(stride, op) in &[(1usize, 0usize), (2, 1)] {
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let x = rand_tensor(&mut rng, &[2, 6, 6]);
        let out_hw = conv_output_size(6, stride, 1).unwrap();
        let y = rand_tensor(&mut rng, &[3, out_hw, out_hw]);
        let zero3 = Tensor::zeros(&[3]);
        let zero2 = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let (xv, wv, b3) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&zero3));
        let cx = tape.conv2d(xv, wv, b3, stride, 1).unwrap();
        let yv = tape.leaf(&y);
        let b2 = tape.leaf(&zero2);
        let ty = tape.conv_transpose2d(yv, wv, b2, stride, 1, op).unwrap();
        assert_eq!(tape.shape(ty), x.shape());
        let lhs: f64 = tape.value(cx).iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(tape.value(ty)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn instance_norm_examples() {
    let x = Tensor::new(&[2, 1, 2], vec![1.0, 3.0, 5.0, 5.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let y = tape.instance_norm(xv, 1e-12).unwrap();
    let v = tape.value(y);
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    assert_eq!(&v[2..], &[0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[5, 7, 6]);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let y = tape.instance_norm(xv, 1e-5).unwrap();
    for c in tape.value(y).chunks(42) {
        assert!((c.iter().sum::<f64>() / 42.0).abs() < 1e-6);
    }
}

#[test]
fn relu_examples_and_subgradient() {
    let x = Tensor::from_slice(&[-1.0, 0.0, 2.0]).with_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let y = tape.relu(xv);
    assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    let g = tape.backward_with_seed(y, &[1.0, 1.0, 1.0]).unwrap();
    assert_eq!(g.get(xv).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn linear_examples() {
    let x = Tensor::from_slice(&[1.0, 1.0]);
    let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::from_slice(&[1.0, 1.0]);
    let bad = Tensor::zeros(&[2, 3]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    let y = tape.linear(xv, wv, bv).unwrap();
    assert_eq!(tape.value(y), &[4.0, 8.0]);

    let bv2 = tape.leaf(&bad);
    assert!(tape.linear(xv, bv2, bv).is_err());
}

#[test]
fn l2_normalize_examples() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_slice(&[3.0, 4.0]));
    let y = tape.l2_normalize(x, 1e-12);
    assert!((tape.value(y)[0] - 0.6).abs() < 1e-15);
    assert!((tape.value(y)[1] - 0.8).abs() < 1e-15);
    let z = tape.input(Tensor::from_slice(&[0.0, 0.0, 0.0]));
    let zn = tape.l2_normalize(z, 1e-12);
    assert_eq!(tape.value(zn), &[0.0, 0.0, 0.0]);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_slice(&[0.0, 3f64.ln()]));
    let y = tape.softmax(x).unwrap();
    assert!((tape.value(y)[0] - 0.25).abs() < 1e-15);
    assert!((tape.value(y)[1] - 0.75).abs() < 1e-15);
    let x = tape.input(Tensor::from_slice(&[2.5; 5]));
    let y = tape.softmax(x).unwrap();
    assert!(tape.value(y).iter().all(|v| (v - 0.2).abs() < 1e-15));
    let x = tape.input(Tensor::from_slice(&[-40.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y), &[1.0]);
    let x = tape.input(Tensor::from_slice(&[1000.0, -3.0, 7.5, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert!((tape.value(y).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn backward_examples() {
    let x = Tensor::from_slice(&[1.0, 2.0]).with_requires_grad(true);
    let unused = Tensor::from_slice(&[5.0]).with_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let uv = tape.leaf(&unused);
    let sq = tape.mul(xv, xv).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(xv).unwrap(), &[2.0, 4.0]);
    assert!(g.get(uv).is_none());
    assert_eq!(g.wrt(&tape, uv), vec![0.0]);
    assert!(matches!(tape.backward(sq), Err(Error::NotScalar(_))));
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 6, 6]);
    let w = rand_tensor(&mut rng, &[4, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let run = || {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let y = tape.conv2d(xv, wv, bv, 2, 1).unwrap();
        let y = tape.instance_norm(y, 1e-5).unwrap();
        let y = tape.relu(y);
        let l = project(&mut tape, y);
        let g = tape.backward(l).unwrap();
        (g.wrt(&tape, xv), g.wrt(&tape, wv), g.wrt(&tape, bv))
    };
    let (a, b2) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b2.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b2.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.2, b2.2);
}

#[test]
fn gradcheck_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for stride in [1, 2] {
        let ins = [
            rand_tensor(&mut rng, &[2, 5, 5]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_grads(&ins, &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, 1).unwrap();
            project(t, y)
        });
    }
}

#[test]
fn gradcheck_conv_transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ins = [
        rand_tensor(&mut rng, &[3, 3, 3]),
        rand_tensor(&mut rng, &[3, 2, 3, 3]),
        rand_tensor(&mut rng, &[2]),
    ];
    check_grads(&ins, &|t, v| {
        let y = t.conv_transpose2d(v[0], v[1], v[2], 2, 1, 1).unwrap();
        project(t, y)
    });
}

#[test]
fn gradcheck_instance_norm_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ins = [rand_tensor(&mut rng, &[3, 4, 4])];
    check_grads(&ins, &|t, v| {
        let y = t.instance_norm(v[0], 1e-5).unwrap();
        let y = t.relu(y);
        project(t, y)
    });
}

#[test]
fn gradcheck_linear_l2_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ins = [
        rand_tensor(&mut rng, &[6]),
        rand_tensor(&mut rng, &[4, 6]),
        rand_tensor(&mut rng, &[4]),
    ];
    check_grads(&ins, &|t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        let y = t.l2_normalize(y, 1e-12);
        project(t, y)
    });
    check_grads(&ins, &|t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        let y = t.softmax(y).unwrap();
        project(t, y)
    });
}

#[test]
fn gradcheck_view_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ins = [
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[2, 3]),
    ];
    check_grads(&ins, &|t, v| {
        let s = t.stack(v).unwrap();
        let w = t.softmax(s).unwrap();
        let f = t.mul(w, s).unwrap();
        let y = t.sum_axis0(f).unwrap();
        project(t, y)
    });
    check_grads(&ins, &|t, v| {
        let s = t.stack(v).unwrap();
        let m = t.max_axis0(s).unwrap();
        let a = t.mean_axis0(s).unwrap();
        let y = t.add(m, a).unwrap();
        project(t, y)
    });
}

#[test]
fn gradcheck_permute() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ins = [rand_tensor(&mut rng, &[4])];
    check_grads(&ins, &|t, v| {
        let y = t.permute(v[0], vec![2, 2], vec![3, 0, 0, 1]).unwrap();
        project(t, y)
    });
}
