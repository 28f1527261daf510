use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, Coverage, DEFAULT_FLOOR, DEFAULT_STEP};
use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = numel(shape);
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

fn assert_grad_ok<F>(loss: F, inputs: &[Tensor], tol: f64)
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = check_gradients(loss, inputs, DEFAULT_STEP, DEFAULT_FLOOR, Coverage::All).unwrap();
    assert!(
        r.max_relative_error < tol,
        "relative error {} at {:?}: analytic {} numeric {}",
        r.max_relative_error,
        r.worst,
        r.worst_analytic,
        r.worst_numeric
    );
}

#[test]
fn add_zero_is_identity_with_unit_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let z = tape.constant(Tensor::zeros(&[3]));
    let y = tape.add(x, z).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert!(tape.grad(z).is_none());
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let y = tape.sigmoid(x);
    tape.backward(y).unwrap();
    assert_eq!(tape.item(y), 0.5);
    assert_eq!(tape.grad(x).unwrap().item(), 0.25);
}

#[test]
fn sum_and_dot_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xv = random(&[2, 5], &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(xv.clone());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(xv.clone());
    let d = tape.dot(x, x).unwrap();
    tape.backward(d).unwrap();
    for (g, v) in tape.grad(x).unwrap().data().iter().zip(xv.data()) {
        assert_eq!(*g, 2.0 * v);
    }
}

#[test]
fn non_scalar_backward_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::InvalidInput(_))));
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
    assert!(tape.dot(a, b).is_err());
    assert!(tape.matmul(a, a).is_err());
    assert!(tape.matmul(a, b).is_ok());
    let w = tape.leaf(Tensor::zeros(&[1, 4, 1, 1]));
    let x = tape.leaf(Tensor::zeros(&[2, 3, 3]));
    assert!(tape.conv2d(x, w, ConvGeometry::POINTWISE).is_err());
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 4, 6], &mut rng);
    let w = random(&[3, 2, 3, 2], &mut rng);
    let b = random(&[3], &mut rng);
    let geom = ConvGeometry {
        stride_f: 2,
        stride_t: 1,
        pad_f_lo: 1,
        pad_f_hi: 1,
        pad_t_lo: 1,
        pad_t_hi: 0,
    };
    let target = random(&[3, 2, 6], &mut rng);
    assert_grad_ok(
        |t, v| {
            let y = t.conv2d(v[0], v[1], geom)?;
            let y = t.add_channel_bias(y, v[2])?;
            let c = t.constant(target.clone());
            let d = t.mul(y, c)?;
            Ok(t.sum(d))
        },
        &[x, w, b],
        1e-4,
    );
}

#[test]
fn conv2d_output_geometry() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 32, 8]));
    let w = tape.leaf(Tensor::zeros(&[4, 2, 3, 2]));
    let geom = ConvGeometry {
        stride_f: 2,
        stride_t: 1,
        pad_f_lo: 1,
        pad_f_hi: 1,
        pad_t_lo: 1,
        pad_t_hi: 0,
    };
    let y = tape.conv2d(x, w, geom).unwrap();
    assert_eq!(tape.shape(y), &[4, 16, 8]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for the same weights and geometry
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let geom = ConvGeometry {
        stride_f: 2,
        stride_t: 1,
        pad_f_lo: 1,
        pad_f_hi: 1,
        pad_t_lo: 1,
        pad_t_hi: 0,
    };
    let xv = random(&[2, 8, 5], &mut rng);
    let wv = random(&[3, 2, 3, 2], &mut rng);
    let yv = random(&[3, 4, 5], &mut rng);
    let mut t = Tape::new();
    let (x, w, y) = (t.leaf(xv), t.leaf(wv), t.leaf(yv));
    let cx = t.conv2d(x, w, geom).unwrap();
    let lhs = t.dot(cx, y).unwrap();
    // conv_t kernel layout is [in, out, kf, kt]; reuse w as [3 -> 2]
    let ty = t.conv_transpose2d(y, w, geom, 8, 5).unwrap();
    let rhs = t.dot(x, ty).unwrap();
    assert!((t.item(lhs) - t.item(rhs)).abs() < 1e-12);
}

#[test]
fn conv_transpose_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 4, 6], &mut rng);
    let w = random(&[3, 2, 3, 2], &mut rng);
    let target = random(&[2, 8, 6], &mut rng);
    let geom = ConvGeometry {
        stride_f: 2,
        stride_t: 1,
        pad_f_lo: 1,
        pad_f_hi: 0,
        pad_t_lo: 0,
        pad_t_hi: 0,
    };
    assert_grad_ok(
        |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], geom, 8, 6)?;
            let c = t.constant(target.clone());
            let d = t.sub(y, c)?;
            t.dot(d, d)
        },
        &[x, w],
        1e-4,
    );
}

#[test]
fn elementwise_and_structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let bias = random(&[5], &mut rng);
    assert_grad_ok(
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let m = t.add_row_bias(m, v[2])?;
            let s = t.sigmoid(m);
            let h = t.tanh(m);
            let l = t.leaky_relu(m, 0.2);
            let p = t.mul(s, h)?;
            let q = t.add(p, l)?;
            let left = t.slice(q, 1, 0, 2)?;
            let right = t.slice(q, 1, 2, 5)?;
            let cat = t.concat(&[right, left], 1)?;
            let tr = t.transpose(cat)?;
            let r = t.reshape(tr, &[15])?;
            let sq = t.mul(r, r)?;
            let sq = t.scale(sq, 0.7);
            let sq = t.add_scalar(sq, 1.0);
            let lg = t.log(sq);
            let pw = t.pow(sq, 0.3);
            let z = t.sub(lg, pw)?;
            Ok(t.mean(z))
        },
        &[a, b, bias],
        1e-5,
    );
}

#[test]
fn complex_abs_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 3, 4], &mut rng);
    assert_grad_ok(
        |t, v| {
            let m = t.complex_abs(v[0])?;
            let e = t.add_scalar(m, 1e-12);
            let p = t.pow(e, -1.7);
            let g = t.mul(m, p)?;
            Ok(t.sum(g))
        },
        &[x],
        1e-5,
    );
}

#[test]
fn complex_abs_gradient_is_zero_at_origin() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2, 1]));
    let m = t.complex_abs(x).unwrap();
    let s = t.sum(m);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_is_replayable_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xv = random(&[4, 4], &mut rng);
    let run = || {
        let mut t = Tape::new();
        let x = t.leaf(xv.clone());
        let y = t.matmul(x, x).unwrap();
        let y = t.tanh(y);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let first = t.grad(x).unwrap().clone();
        t.backward(s).unwrap();
        assert_eq!(&first, t.grad(x).unwrap());
        (t.item(s), first)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xv = random(&[6], &mut rng);
    let (ca, cb) = (0.3, -1.7);
    let grads = |wa: f64, wb: f64| {
        let mut t = Tape::new();
        let x = t.leaf(xv.clone());
        let s = t.sigmoid(x);
        let l1 = t.dot(s, x).unwrap();
        let sq = t.mul(x, x).unwrap();
        let l2 = t.mean(sq);
        let a = t.scale(l1, wa);
        let b = t.scale(l2, wb);
        let l = t.add(a, b).unwrap();
        t.backward(l).unwrap();
        t.grad(x).unwrap().clone()
    };
    let combined = grads(ca, cb);
    let g1 = grads(1.0, 0.0);
    let g2 = grads(0.0, 1.0);
    for i in 0..6 {
        let want = ca * g1.data()[i] + cb * g2.data()[i];
        assert!((combined.data()[i] - want).abs() <= 1e-10 * want.abs().max(1e-12));
    }
}

#[test]
fn gradients_do_not_reach_constants() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::ones(&[2]));
    let x = t.leaf(Tensor::ones(&[2]));
    let y = t.mul(c, x).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert!(t.grad(x).is_some());
}
