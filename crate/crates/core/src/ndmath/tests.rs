use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output entry gets a distinct upstream weight.
fn project(tape: &mut Tape, y: Var, proj: &Tensor2) -> Result<Var, crate::Error> {
    let (rows, cols) = tape.value(y).shape();
    let w = tape.input(Tensor2::from_vec(cols, 1, proj.data()[..cols].to_vec())?);
    let col = tape.matmul(y, w)?;
    let r = tape.input(Tensor2::from_vec(1, rows, proj.data()[..rows].to_vec())?);
    let s = tape.matmul(r, col)?;
    Ok(tape.sum_all(s))
}

#[test]
fn affine_examples() {
    let mut p = Params::new();
    let w = p.add("w", Tensor2::identity(2));
    let b = p.add("b", Tensor2::row_vector(vec![0.0, 0.0]));
    let mut tape = Tape::new(&p);
    let x = tape.input(Tensor2::row_vector(vec![1.0, 2.0]));
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.affine(x, wv, bv).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let mut p = Params::new();
    let w = p.add(
        "w",
        Tensor2::from_vec(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap(),
    );
    let b = p.add("b", Tensor2::row_vector(vec![1.0, 1.0]));
    let mut tape = Tape::new(&p);
    let x = tape.input(Tensor2::row_vector(vec![1.0, 0.0]));
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.affine(x, wv, bv).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
}

#[test]
fn affine_backward_outer_product() {
    let mut p = Params::new();
    let w = p.add(
        "w",
        Tensor2::from_vec(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap(),
    );
    let b = p.add("b", Tensor2::row_vector(vec![0.0, 0.0]));
    let mut grads = Gradients::zeros_like(&p);
    let mut tape = Tape::new(&p);
    let x = tape.input(Tensor2::row_vector(vec![1.0, 2.0]));
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.affine(x, wv, bv).unwrap();
    let node = tape
        .backward_with(y, Tensor2::row_vector(vec![1.0, 1.0]), &mut grads)
        .unwrap();
    assert_eq!(grads.get(b).data(), &[1.0, 1.0]);
    assert_eq!(grads.get(w).data(), &[1.0, 1.0, 2.0, 2.0]);
    // ∂L/∂x = 1·Wᵀ
    assert_eq!(node.wrt(x).unwrap().data(), &[5.0, 9.0]);
}

#[test]
fn affine_shape_mismatch() {
    let mut p = Params::new();
    let w = p.add("w", Tensor2::zeros(3, 2));
    let mut tape = Tape::new(&p);
    let x = tape.input(Tensor2::row_vector(vec![1.0, 2.0]));
    let wv = tape.param(w);
    assert!(tape.matmul(x, wv).is_err());
}

#[test]
fn relu_examples() {
    let p = Params::new();
    let mut grads = Gradients::zeros_like(&p);
    let mut tape = Tape::new(&p);
    let x = tape.input(Tensor2::row_vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let yy = tape.relu(y);
    assert_eq!(tape.value(yy).data(), tape.value(y).data());
    let node = tape
        .backward_with(y, Tensor2::row_vector(vec![1.0; 3]), &mut grads)
        .unwrap();
    assert_eq!(node.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn backward_accumulates() {
    let mut p = Params::new();
    let w = p.add(
        "w",
        Tensor2::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
    );
    let mut grads = Gradients::zeros_like(&p);
    let mut tape = Tape::new(&p);
    let x = tape.input(Tensor2::row_vector(vec![1.0, -3.0]));
    let wv = tape.param(w);
    let y = tape.matmul(x, wv).unwrap();
    let s = tape.sum_all(y);
    tape.backward(s, &mut grads).unwrap();
    let once = grads.get(w).clone();
    tape.backward(s, &mut grads).unwrap();
    assert_eq!(grads.get(w), &once.map(|v| 2.0 * v));
}

/// Runs twenty random trials of a single-op gradient check.
fn trials(
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var, crate::Error>,
    a: (usize, usize),
    b: (usize, usize),
) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let mut p = Params::new();
        let ia = p.add("a", random_tensor(&mut rng, a.0, a.1));
        let ib = p.add("b", random_tensor(&mut rng, b.0, b.1));
        let proj = random_tensor(&mut rng, 1, 16);
        let err = check_param_gradients(
            &p,
            |tape| {
                let (va, vb) = (tape.param(ia), tape.param(ib));
                let y = op(tape, va, vb)?;
                project(tape, y, &proj)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "trial {trial}: relative error {err}");
    }
}

#[test]
fn gradcheck_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let mut p = Params::new();
        let x = p.add("x", random_tensor(&mut rng, 3, 4));
        let w = p.add("w", random_tensor(&mut rng, 4, 5));
        let b = p.add("b", random_tensor(&mut rng, 1, 5));
        let proj = random_tensor(&mut rng, 1, 16);
        let err = check_param_gradients(
            &p,
            |tape| {
                let (xv, wv, bv) = (tape.param(x), tape.param(w), tape.param(b));
                let y = tape.affine(xv, wv, bv)?;
                project(tape, y, &proj)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    trials(|t, a, _| Ok(t.relu(a)), (3, 4), (1, 1));
    trials(|t, a, _| Ok(t.clamp_min0(a)), (3, 4), (1, 1));
    trials(|t, a, _| Ok(t.log_sigmoid(a)), (3, 4), (1, 1));
    trials(|t, a, _| Ok(t.sum_rows(a)), (3, 4), (1, 1));
    trials(|t, a, _| t.max_rows(a), (3, 4), (1, 1));
    trials(|t, a, _| t.row(a, 1), (3, 4), (1, 1));
    trials(|t, a, _| t.cols(a, 1, 3), (3, 4), (1, 1));
    trials(|t, a, b| t.add(a, b), (2, 3), (2, 3));
    trials(|t, a, b| t.add_bias(a, b), (2, 3), (1, 3));
    trials(|t, a, b| t.concat_rows(&[a, b]), (2, 3), (1, 3));
    trials(|t, a, _| Ok(t.scale(a, -1.7)), (2, 3), (1, 1));
    trials(|t, a, _| Ok(t.shift(a, 0.3)), (2, 3), (1, 1));
}

#[test]
fn gradcheck_gather_repeats_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = Params::new();
    let table = p.add("table", random_tensor(&mut rng, 5, 3));
    let proj = random_tensor(&mut rng, 1, 16);
    let err = check_param_gradients(
        &p,
        |tape| {
            let g = tape.gather(table, &[4, 1, 4])?;
            project(tape, g, &proj)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_box_distance_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut accepted = 0;
    while accepted < 20 {
        let d = 4;
        let qc = random_tensor(&mut rng, 1, d);
        let qo = random_tensor(&mut rng, 1, d).map(f64::abs);
        let ec = random_tensor(&mut rng, 3, d);
        let eo = random_tensor(&mut rng, 3, d).map(f64::abs);
        // skip samples near the nondifferentiable points
        let near_kink = (0..3).any(|i| {
            (0..d).any(|j| {
                let delta = (qc.get(0, j) - ec.get(i, j)).abs();
                let s = qo.get(0, j) + eo.get(i, j);
                (delta - s).abs() < 1e-3 || delta < 1e-3
            })
        });
        if near_kink {
            continue;
        }
        accepted += 1;
        let mut p = Params::new();
        let ids = [
            p.add("qc", qc),
            p.add("qo", qo),
            p.add("ec", ec),
            p.add("eo", eo),
        ];
        let alpha = rng.gen_range(0.0..1.0);
        let err = check_param_gradients(
            &p,
            |tape| {
                let v: Vec<Var> = ids.iter().map(|&i| tape.param(i)).collect();
                let dist = tape.box_distance(v[0], v[1], v[2], v[3], alpha)?;
                let w = tape.input(Tensor2::from_vec(1, 3, vec![0.7, -1.3, 2.1])?);
                let s = tape.matmul(w, dist)?;
                Ok(tape.sum_all(s))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
