use std::sync::Arc;

use super::*;
use crate::tensor::{self, DetRng};

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Scalar probe `sum(w * f(inputs))` with a fixed random `w`, so every
/// output element contributes to the checked gradient.
fn probe(inputs: &[Tensor], build: &Build, weight_seed: u64) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(format!("x{i}"), t.clone()))
        .collect();
    let y = build(&mut tape, &vars)?;
    let shape = tape.value(y).shape().to_vec();
    let w = tape.input(Tensor::randn(&shape, 1.0, &mut DetRng::new(weight_seed)));
    let prod = tape.mul(y, w)?;
    let s = tape.sum(prod)?;
    Ok((tape, s))
}

fn check_against_fd(inputs: Vec<Tensor>, build: &Build) {
    let (tape, s) = probe(&inputs, build, 99).unwrap();
    let grads = tape.backward(s, &Tensor::scalar(1.0)).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let flat = x.reshape(&[x.len()]).unwrap();
        let fd = finite_difference_jacobian(
            |v| {
                let mut args = inputs.clone();
                args[i] = v.reshape(x.shape())?;
                let (t, s) = probe(&args, build, 99)?;
                Ok(t.value(s).clone())
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let g = &grads[&format!("x{i}")];
        for (a, b) in g.data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-6, "input {i}: analytic {a} vs fd {b}");
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut DetRng::new(seed))
}

#[test]
fn identity_program() {
    let x = rand(&[3], 1);
    let (outs, tape) = record(&[x.clone()], |_, v| Ok(vec![v[0]])).unwrap();
    assert_eq!(tape.len(), 1);
    assert_eq!(outs[0], x);
    let seed = rand(&[3], 2);
    let g = vjp(&tape, &seed, &[Var(0)]).unwrap();
    assert_eq!(g[0], seed);
}

#[test]
fn matmul_chain_matches_eager_bitwise() {
    let (a, b, c) = (rand(&[4, 5], 1), rand(&[5, 6], 2), rand(&[6, 3], 3));
    let (outs, tape) = record(&[a.clone(), b.clone(), c.clone()], |t, v| {
        let ab = t.matmul(v[0], v[1])?;
        Ok(vec![t.matmul(ab, v[2])?])
    })
    .unwrap();
    let eager = tensor::matmul(&tensor::matmul(&a, &b).unwrap(), &c).unwrap();
    assert!(bit_equal(&outs[0], &eager));
    assert!(tape.replay_matches().unwrap());
}

#[test]
fn silu_replay_matches_eager() {
    let x = rand(&[2, 7], 4);
    let (outs, tape) = record(&[x.clone()], |t, v| Ok(vec![t.silu(v[0])?])).unwrap();
    assert!(bit_equal(&outs[0], &tensor::silu(&x)));
    assert!(tape.replay_matches().unwrap());
}

#[test]
fn square_sum_hand_derivative() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::vector(vec![3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g["x"].data(), &[6.0]);
}

#[test]
fn seed_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::vector(vec![1.0, 2.0]));
    let y = tape.silu(x).unwrap();
    let err = tape.backward(y, &Tensor::scalar(1.0)).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn invalid_wrt_is_argument_error() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(vec![1.0]));
    let err = tape.vjp(x, &Tensor::scalar(1.0), &[Var(5)]).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
}

#[test]
fn argmax_cannot_be_recorded() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.argmax_rows(x), Err(Error::Unsupported(_))));
}

#[test]
fn fd_rules_elementwise() {
    check_against_fd(vec![rand(&[3, 4], 1), rand(&[3, 4], 2)], &|t, v| {
        let a = t.mul(v[0], v[1])?;
        let b = t.sub(a, v[1])?;
        let c = t.silu(b)?;
        let d = t.gelu(c)?;
        let e = t.sigmoid(d)?;
        let f = t.scale(e, 1.7)?;
        let g = t.add_scalar(f, -0.3)?;
        t.add(g, v[0])
    });
}

#[test]
fn fd_rules_matmul_and_scale_by() {
    check_against_fd(vec![rand(&[2, 3, 4], 1), rand(&[4, 5], 2), rand(&[1], 3)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        t.scale_by(y, v[2])
    });
}

#[test]
fn fd_rules_layer_norm_and_softmax() {
    check_against_fd(vec![rand(&[3, 6], 5)], &|t, v| {
        let y = t.layer_norm(v[0], 1e-5)?;
        t.softmax(y)
    });
}

#[test]
fn fd_rules_pool_and_inject() {
    check_against_fd(vec![rand(&[2, 5, 3], 6), rand(&[3, 3], 7)], &|t, v| {
        let pooled = t.mean_pool(v[0])?;
        let proj = t.matmul(pooled, v[1])?;
        t.inject(v[0], proj)
    });
}

#[test]
fn fd_rules_gather_and_cross_entropy() {
    let ids = Arc::new(vec![0, 2, 1, 2, 3, 0]);
    let targets = Arc::new(vec![1, 0, 3, 2, 2, 1]);
    check_against_fd(vec![rand(&[4, 3], 8), rand(&[3, 4], 9)], &move |t, v| {
        let x = t.gather(v[0], ids.clone(), 2, 3)?;
        let logits = t.matmul(x, v[1])?;
        t.cross_entropy(logits, targets.clone())
    });
}

#[test]
fn fd_rules_attention() {
    check_against_fd(
        vec![rand(&[2, 5, 4], 10), rand(&[2, 5, 4], 11), rand(&[2, 5, 4], 12)],
        &|t, v| t.causal_attention(v[0], v[1], v[2], 2),
    );
}

#[test]
fn fd_rules_diag_scan() {
    let mut decay = Tensor::zeros(&[3, 2]);
    let mut rng = DetRng::new(13);
    for v in decay.data_mut() {
        *v = 0.5 + 0.4 * rng.uniform();
    }
    let gate_raw = rand(&[2, 4, 3], 14);
    check_against_fd(
        vec![rand(&[2, 4, 3], 15), gate_raw, rand(&[2, 4, 2], 16), rand(&[2, 4, 2], 17), decay],
        &|t, v| {
            let g = t.sigmoid(v[1])?;
            t.diag_scan(v[0], g, v[2], v[3], v[4])
        },
    );
}

#[test]
fn vjp_of_linear_map_gives_rows() {
    let a = rand(&[4, 4], 20);
    let mut tape = Tape::new();
    // row-vector convention: y = m A^T, so dy/dm = A
    let m = tape.input(rand(&[1, 4], 21));
    let at = tape.input(a.transpose().unwrap());
    let y = tape.matmul(m, at).unwrap();
    for j in 0..4 {
        let mut e = Tensor::zeros(&[1, 4]);
        e.data_mut()[j] = 1.0;
        let row = tape.vjp(y, &e, &[m]).unwrap().remove(0);
        assert_eq!(row.data(), a.row(j));
    }
    let zero = tape.vjp(y, &Tensor::zeros(&[1, 4]), &[m]).unwrap();
    assert!(zero[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn stacked_vjps_match_fd_jacobian() {
    let w1 = rand(&[5, 6], 30);
    let w2 = rand(&[6, 5], 31);
    let f = |x: &Tensor| -> Result<Tensor> {
        let h = tensor::silu(&tensor::matmul(&x.reshape(&[1, 5])?, &w1)?);
        Ok(tensor::layer_norm(&tensor::matmul(&h, &w2)?, 1e-5).reshape(&[5])?)
    };
    let x0 = rand(&[5], 32);
    let mut tape = Tape::new();
    let x = tape.input(x0.reshape(&[1, 5]).unwrap());
    let a = tape.input(w1.clone());
    let b = tape.input(w2.clone());
    let h = tape.matmul(x, a).unwrap();
    let h = tape.silu(h).unwrap();
    let y = tape.matmul(h, b).unwrap();
    let y = tape.layer_norm(y, 1e-5).unwrap();
    let fd = finite_difference_jacobian(f, &x0, 1e-5).unwrap();
    for i in 0..5 {
        let mut e = Tensor::zeros(&[1, 5]);
        e.data_mut()[i] = 1.0;
        let row = tape.vjp(y, &e, &[x]).unwrap().remove(0);
        for (j, v) in row.data().iter().enumerate() {
            assert!((v - fd.at(&[i, j])).abs() < 1e-6);
        }
    }
}

#[test]
fn vjp_is_linear_in_cotangent() {
    let mut tape = Tape::new();
    let x = tape.input(rand(&[2, 4], 40));
    let w = tape.input(rand(&[4, 4], 41));
    let h = tape.matmul(x, w).unwrap();
    let y = tape.gelu(h).unwrap();
    let (u, v) = (rand(&[2, 4], 42), rand(&[2, 4], 43));
    let (a, b) = (0.7, -1.3);
    let combo = tensor::add(&tensor::scale(&u, a), &tensor::scale(&v, b)).unwrap();
    let gc = tape.vjp(y, &combo, &[x]).unwrap().remove(0);
    let gu = tape.vjp(y, &u, &[x]).unwrap().remove(0);
    let gv = tape.vjp(y, &v, &[x]).unwrap().remove(0);
    let expect = tensor::add(&tensor::scale(&gu, a), &tensor::scale(&gv, b)).unwrap();
    for (p, q) in gc.data().iter().zip(expect.data()) {
        assert!((p - q).abs() < 1e-10);
    }
}

#[test]
fn recordings_are_deterministic() {
    let x = rand(&[3, 3], 50);
    let prog = |t: &mut Tape, v: &[Var]| -> Result<Vec<Var>> {
        let y = t.matmul(v[0], v[0])?;
        let z = t.layer_norm(y, 1e-5)?;
        Ok(vec![t.sum(z)?])
    };
    let (_, a) = record(&[x.clone()], prog).unwrap();
    let (_, b) = record(&[x], prog).unwrap();
    assert_eq!(a.signature(), b.signature());
}

#[test]
fn unrelated_leaves_get_zero_gradients() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::vector(vec![1.0, 2.0]));
    let _unused = tape.param("unused", Tensor::vector(vec![5.0]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s, &Tensor::scalar(2.0)).unwrap();
    assert_eq!(g["x"].data(), &[2.0, 2.0]);
    assert_eq!(g["unused"].data(), &[0.0]);
}

#[test]
fn compare_gradients_cases() {
    let mut a = BTreeMap::new();
    a.insert("p".to_string(), rand(&[3], 60));
    a.insert("q".to_string(), rand(&[2, 2], 61));
    let same = compare_gradients(&a, &a).unwrap();
    assert_eq!((same.max_abs_error, same.rel_l2_error, same.cosine_similarity), (0.0, 0.0, 1.0));

    let neg: BTreeMap<_, _> = a.iter().map(|(k, v)| (k.clone(), tensor::scale(v, -1.0))).collect();
    let r = compare_gradients(&neg, &a).unwrap();
    assert!((r.cosine_similarity + 1.0).abs() < 1e-15);

    let mut missing = a.clone();
    missing.remove("q");
    assert!(matches!(compare_gradients(&missing, &a), Err(Error::Argument(_))));

    let csv = same.to_csv();
    assert!(csv.starts_with("param,max_abs,rel_l2\np,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn fd_jacobian_of_identity_and_linear_map() {
    let x = rand(&[4], 70);
    let id = finite_difference_jacobian(|v| Ok(v.clone()), &x, 1e-5).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((id.at(&[i, j]) - e).abs() < 1e-10);
        }
    }
    let a = rand(&[3, 4], 71);
    let lin = finite_difference_jacobian(
        |v| tensor::matmul(&v.reshape(&[1, 4])?, &a.transpose()?).and_then(|y| y.reshape(&[3])),
        &x,
        1e-5,
    )
    .unwrap();
    for (p, q) in lin.data().iter().zip(a.data()) {
        assert!((p - q).abs() < 1e-8);
    }
    assert!(finite_difference_jacobian(|v| Ok(v.clone()), &x, 0.0).is_err());
}
