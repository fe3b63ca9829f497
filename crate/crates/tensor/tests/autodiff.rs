use idsr_tensor::{finite_diff_grad, relative_error, Result, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Random values in [-1, 1] at least `gap` away from zero.
fn rand_off_kink(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    t(shape, &data)
}

/// Scalarizes `out` as `Σ out ⊙ r` with fixed random `r`.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = tape.constant(Tensor::uniform(tape.value(out).shape(), 1.0, &mut rng));
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

/// Relative error between backward() and central differences for the
/// gradient with respect to `inputs[which]`.
fn grad_error(inputs: &[Tensor], which: usize, seed: u64, build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |x: &Tensor, grad: bool| -> Result<(f64, Option<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let v = if i == which { x.clone() } else { v.clone() };
                tape.leaf(v.with_requires_grad(i == which))
            })
            .collect();
        let out = build(&mut tape, &vars)?;
        let s = project(&mut tape, out, seed)?;
        let value = tape.value(s).item()?;
        let g = if grad {
            tape.backward(s)?.take(vars[which])
        } else {
            None
        };
        Ok((value, g))
    };
    let analytic = eval(&inputs[which], true).unwrap().1.unwrap();
    let numeric = finite_diff_grad(|x| eval(x, false).map(|r| r.0), &inputs[which], 1e-4).unwrap();
    relative_error(analytic.data(), numeric.data())
}

const TRIALS: u64 = 100;
const TOL: f64 = 1e-4;

fn sweep(name: &str, gen: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Vec<usize>), build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let mut worst: f64 = 0.0;
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, wrt) = gen(&mut rng);
        for which in wrt {
            let e = grad_error(&inputs, which, seed, &build);
            worst = worst.max(e);
            assert!(e < TOL, "{name}: seed {seed}, input {which}: relative error {e:.3e}");
        }
    }
    println!("{name}: worst relative error {worst:.3e} over {TRIALS} trials");
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

#[test]
fn conv2d_gradients() {
    sweep(
        "conv2d",
        |rng| {
            let (b, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let (h, w) = (dim(rng, 3, 8), dim(rng, 3, 8));
            let k = dim(rng, 1, 3);
            let x = rand_tensor(rng, &[b, cin, h, w]);
            let kern = rand_tensor(rng, &[cout, cin, k, k]);
            let bias = rand_tensor(rng, &[cout]);
            (vec![x, kern, bias], vec![0, 1, 2])
        },
        |tape, v| {
            let stride = 1 + tape.value(v[1]).shape()[2] % 2;
            tape.conv2d(v[0], v[1], v[2], stride, 1)
        },
    );
}

#[test]
fn conv2d_transpose_gradients() {
    sweep(
        "conv2d_transpose",
        |rng| {
            let (b, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let (h, w) = (dim(rng, 2, 6), dim(rng, 2, 6));
            let x = rand_tensor(rng, &[b, ci, h, w]);
            let kern = rand_tensor(rng, &[ci, co, 4, 4]);
            (vec![x, kern], vec![0, 1])
        },
        |tape, v| tape.conv2d_transpose(v[0], v[1], 2, 1),
    );
}

#[test]
fn elementwise_gradients() {
    sweep(
        "bias_add",
        |rng| {
            let c = dim(rng, 1, 4);
            (vec![rand_tensor(rng, &[2, c, 3, 3]), rand_tensor(rng, &[c])], vec![0, 1])
        },
        |tape, v| tape.bias_add(v[0], v[1]),
    );
    sweep(
        "relu",
        |rng| (vec![rand_off_kink(rng, &[1, 2, 4, 4], 1e-3)], vec![0]),
        |tape, v| tape.relu(v[0]),
    );
    sweep(
        "leaky_relu",
        |rng| (vec![rand_off_kink(rng, &[1, 2, 4, 4], 1e-3)], vec![0]),
        |tape, v| tape.leaky_relu(v[0], 0.2),
    );
    let pair = |rng: &mut ChaCha8Rng| {
        let s = [dim(rng, 1, 8), dim(rng, 1, 8)];
        (vec![rand_tensor(rng, &s), rand_tensor(rng, &s)], vec![0, 1])
    };
    sweep("add", pair, |tape, v| tape.add(v[0], v[1]));
    sweep("sub", pair, |tape, v| tape.sub(v[0], v[1]));
    sweep("mul", pair, |tape, v| tape.mul(v[0], v[1]));
    sweep("div", pair, |tape, v| {
        // Keep the denominator in [1, 3].
        let d = tape.add_scalar(v[1], 2.0)?;
        tape.div(v[0], d)
    });
    let single = |rng: &mut ChaCha8Rng| {
        let s = [dim(rng, 1, 3), dim(rng, 1, 8), dim(rng, 1, 8)];
        (vec![rand_tensor(rng, &s)], vec![0])
    };
    sweep("scale", single, |tape, v| tape.scale(v[0], -1.7));
    sweep("add_scalar", single, |tape, v| tape.add_scalar(v[0], 0.3));
    sweep("sqrt", single, |tape, v| {
        let sq = tape.mul(v[0], v[0])?;
        let pos = tape.add_scalar(sq, 0.5)?;
        tape.sqrt(pos)
    });
    sweep("sum", single, |tape, v| tape.sum(v[0]));
    sweep("mean", single, |tape, v| tape.mean(v[0]));
    sweep("sum_per_sample", single, |tape, v| tape.sum_per_sample(v[0]));
    sweep("reshape", single, |tape, v| tape.flatten(v[0]));
}

#[test]
fn reduction_and_dense_gradients() {
    sweep(
        "tile_mean",
        |rng| {
            let h = dim(rng, 1, 4);
            let s = [dim(rng, 1, 2), dim(rng, 1, 2), h * dim(rng, 1, 2), h * dim(rng, 1, 2)];
            let mut x = rand_tensor(rng, &s);
            // Encode the tile size in the first value's sign-free magnitude.
            x.data_mut()[0] = h as f64 / 10.0;
            (vec![x], vec![0])
        },
        |tape, v| {
            let h = (tape.value(v[0]).data()[0] * 10.0).round() as usize;
            tape.tile_mean(v[0], h)
        },
    );
    sweep(
        "linear",
        |rng| {
            let (b, i, o) = (dim(rng, 1, 4), dim(rng, 1, 8), dim(rng, 1, 8));
            (
                vec![rand_tensor(rng, &[b, i]), rand_tensor(rng, &[o, i]), rand_tensor(rng, &[o])],
                vec![0, 1, 2],
            )
        },
        |tape, v| tape.linear(v[0], v[1], v[2]),
    );
    sweep(
        "softmax_cross_entropy",
        |rng| {
            let (b, c) = (dim(rng, 1, 6), dim(rng, 2, 8));
            (vec![rand_tensor(rng, &[b, c])], vec![0])
        },
        |tape, v| {
            let [b, c] = [tape.value(v[0]).shape()[0], tape.value(v[0]).shape()[1]];
            let labels: Vec<usize> = (0..b).map(|i| (i * 7 + 3) % c).collect();
            tape.softmax_cross_entropy(v[0], &labels)
        },
    );
}

#[test]
fn composite_conv_relu_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
    let k1 = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b1 = rand_tensor(&mut rng, &[3]);
    let k2 = rand_tensor(&mut rng, &[3, 2, 4, 4]);
    let build = |tape: &mut Tape, v: &[Var]| {
        let h = tape.conv2d(v[0], v[1], v[2], 1, 1)?;
        let h = tape.relu(h)?;
        let u = tape.conv2d_transpose(h, v[3], 2, 1)?;
        let sq = tape.mul(u, u)?;
        tape.mean(sq)
    };
    for which in 0..4 {
        let e = grad_error(&[x.clone(), k1.clone(), b1.clone(), k2.clone()], which, 9, &build);
        assert!(e < 1e-4, "input {which}: {e:.3e}");
    }
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 1, 5, 4]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(xv, k, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let zeros = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(rand_tensor(&mut rng, &[3, 2, 3, 3]));
    let bias = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let y = tape.conv2d(zeros, k, bias, 1, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 3, 4, 4]);
    for (i, v) in tape.value(y).data().iter().enumerate() {
        assert_eq!(*v, [0.5, -1.0, 2.0][i / 16]);
    }

    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[5.0]);
}

#[test]
fn conv2d_output_size_and_shape_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 7, 9]));
    let k = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.conv2d(x, k, b, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 4, 4, 5]);

    let wrong_c = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    assert!(matches!(tape.conv2d(x, wrong_c, b, 1, 0), Err(TensorError::Shape { .. })));
    let huge = tape.constant(Tensor::zeros(&[4, 2, 11, 11]));
    assert!(matches!(tape.conv2d(x, huge, b, 1, 0), Err(TensorError::Shape { .. })));
    let bad_bias = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.conv2d(x, k, bad_bias, 1, 0), Err(TensorError::Shape { .. })));
    let flat = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(tape.conv2d(flat, k, b, 1, 0), Err(TensorError::Shape { .. })));
}

#[test]
fn conv2d_transpose_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 1, 3, 5]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let unit = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d_transpose(xv, unit, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let v = tape.constant(t(&[1, 1, 1, 1], &[0.7]));
    let ones = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.conv2d_transpose(v, ones, 2, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[0.7; 4]);

    // (H−1)·stride − 2·pad + k
    let x = tape.constant(Tensor::zeros(&[2, 3, 8, 5]));
    let k = tape.constant(Tensor::zeros(&[3, 4, 4, 4]));
    let y = tape.conv2d_transpose(x, k, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 16, 10]);
}

fn adjoint_gap(seed: u64, b: usize, cin: usize, cout: usize, out_h: usize, out_w: usize, k: usize, stride: usize, pad: usize) -> Option<f64> {
    // Choose the conv input so that (H + 2p − k) is a multiple of the stride.
    let h = (out_h - 1) * stride + k;
    let w = (out_w - 1) * stride + k;
    let (h, w) = (h.checked_sub(2 * pad)?, w.checked_sub(2 * pad)?);
    if h == 0 || w == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, &[b, cin, h, w]);
    let kern = rand_tensor(&mut rng, &[cout, cin, k, k]);
    let bvec = rand_tensor(&mut rng, &[b, cout, out_h, out_w]);
    let mut tape = Tape::new();
    let (av, kv, bv) = (tape.constant(a.clone()), tape.constant(kern), tape.constant(bvec.clone()));
    let zero = tape.constant(Tensor::zeros(&[cout]));
    let ca = tape.conv2d(av, kv, zero, stride, pad).ok()?;
    let tb = tape.conv2d_transpose(bv, kv, stride, pad).unwrap();
    let lhs = tape.value(ca).dot(&bvec).unwrap();
    let rhs = a.dot(tape.value(tb)).unwrap();
    Some((lhs - rhs).abs())
}

#[test]
fn adjoint_identity_on_random_4x4() {
    for seed in 0..20 {
        let gap = adjoint_gap(seed, 1, 1, 1, 4, 4, 1, 1, 0).unwrap();
        assert!(gap < 1e-10);
        let gap = adjoint_gap(seed, 1, 1, 1, 2, 2, 3, 1, 0).unwrap();
        assert!(gap < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn adjoint_identity_random_shapes(
        seed in any::<u64>(),
        b in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        out_h in 1usize..6, out_w in 1usize..6,
        k in 1usize..5, stride in 1usize..4, pad in 0usize..2,
    ) {
        if let Some(gap) = adjoint_gap(seed, b, cin, cout, out_h, out_w, k, stride, pad) {
            prop_assert!(gap < 1e-10, "gap {}", gap);
        }
    }
}

#[test]
fn dense_and_activation_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);

    let logits = tape.constant(t(&[1, 2], &[0.3, 0.3]));
    for label in 0..2 {
        let l = tape.softmax_cross_entropy(logits, &[label]).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }
    assert_eq!(
        tape.softmax_cross_entropy(logits, &[2]).unwrap_err(),
        TensorError::LabelOutOfRange { label: 2, classes: 2 }
    );

    let input = t(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, -1.0]);
    let xv = tape.constant(input.clone());
    let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let zero = tape.constant(Tensor::zeros(&[3]));
    let y = tape.linear(xv, eye, zero).unwrap();
    assert_eq!(tape.value(y).data(), input.data());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.25).unwrap());
    let g = tape.backward(x).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[3.0, 4.0]));
    let unused = tape.param(t(&[3], &[1.0, 1.0, 1.0]));
    let c = tape.constant(t(&[2], &[9.0, 9.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0, 8.0]);
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    assert!(grads.get(c).is_none());

    assert!(matches!(tape.backward(sq), Err(TensorError::NonScalar { .. })));
}

#[test]
fn constant_inputs_record_no_gradient_path() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let y = tape.scale(x, 3.0).unwrap();
    assert!(!tape.requires_grad(y));
    let s = tape.sum(y).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(x).is_none());
}

fn build_graph(seed: u64) -> (Tape, Var, Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&mut rng, &[2, 1, 8, 8]));
    let k = tape.param(rand_tensor(&mut rng, &[4, 1, 3, 3]));
    let b = tape.param(rand_tensor(&mut rng, &[4]));
    let kt = tape.param(rand_tensor(&mut rng, &[4, 1, 4, 4]));
    let h = tape.conv2d(x, k, b, 2, 1).unwrap();
    let h = tape.leaky_relu(h, 0.2).unwrap();
    let u = tape.conv2d_transpose(h, kt, 2, 1).unwrap();
    let d = tape.sub(u, x).unwrap();
    let p = tape.tile_mean(d, 4).unwrap();
    let sq = tape.mul(p, p).unwrap();
    let out = tape.mean(sq).unwrap();
    (tape, out, k)
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn forward_is_deterministic_and_replay_is_bit_identical() {
    let (a, out_a, k) = build_graph(77);
    let (b, out_b, _) = build_graph(77);
    assert_eq!(bits(a.value(out_a)), bits(b.value(out_b)));
    let replayed = a.replay().unwrap();
    assert_eq!(replayed.len(), a.len());
    for (i, (r, v)) in replayed.iter().zip(a.values()).enumerate() {
        assert_eq!(r.shape(), v.shape(), "node {i}");
        assert_eq!(bits(r), bits(v), "node {i}");
    }
    let ga = a.backward(out_a).unwrap();
    let gb = b.backward(out_b).unwrap();
    assert_eq!(bits(ga.get(k).unwrap()), bits(gb.get(k).unwrap()));
}
