use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::rng;

const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = random(shape, seed);
    let data = t.data().iter().map(|x| x.abs() + 0.1).collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces any node to a scalar through fixed random weights so every
/// output coordinate gets a distinct upstream gradient.
fn weighted(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let n = tape.value(v).len();
    let w = random(&[n], seed).into_data();
    tape.dot_const(v, w)
}

fn check_many(stores: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let mut store = ParamStore::new();
    for (i, t) in stores.into_iter().enumerate() {
        store.add(alloc::format!("p{i}"), t);
    }
    let n = store.len();
    let report = check_gradients(
        &store,
        |tape, s| {
            let vars: Vec<Var> = (0..n).map(|i| tape.param(s, ParamId(i))).collect();
            f(tape, &vars)
        },
        TOL,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn sum_of_squares_gradient() {
    let x = random(&[8], 1);
    let report = finite_diff_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-9,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");

    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone());
    let v = tape.param(&store, id);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    for (gi, xi) in g.param(id).unwrap().iter().zip(x.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-15);
    }
}

#[test]
fn matmul_family_gradients() {
    check_many(vec![random(&[16, 16], 2), random(&[16, 16], 3)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted(t, y, 4)
    });
    check_many(vec![random(&[2, 5, 7], 5), random(&[7, 3], 6)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted(t, y, 7)
    });
    check_many(vec![random(&[6, 4], 8), random(&[9, 4], 9)], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        weighted(t, y, 10)
    });
    check_many(vec![random(&[3, 4, 5], 11), random(&[3, 5, 2], 12)], |t, v| {
        let y = t.bmm(v[0], v[1], false)?;
        weighted(t, y, 13)
    });
    check_many(vec![random(&[3, 4, 5], 14), random(&[3, 6, 5], 15)], |t, v| {
        let y = t.bmm(v[0], v[1], true)?;
        weighted(t, y, 16)
    });
}

#[test]
fn elementwise_gradients() {
    check_many(vec![random(&[16, 16], 20), random(&[16, 16], 21)], |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.mul(a, v[1])?;
        let c = t.sub(b, v[0])?;
        let d = t.scale(c, 0.7);
        weighted(t, d, 22)
    });
    check_many(vec![random(&[5, 6], 23), random(&[6], 24), random(&[5, 1], 25)], |t, v| {
        let a = t.add_bias(v[0], v[1])?;
        let b = t.mul_col(a, v[2])?;
        weighted(t, b, 26)
    });
    check_many(vec![random(&[4, 4], 27)], |t, v| {
        let mask = random(&[16], 28).into_data();
        let a = t.mul_const(v[0], mask)?;
        weighted(t, a, 29)
    });
}

#[test]
fn activation_gradients() {
    check_many(vec![random(&[16, 16], 30)], |t, v| {
        let s = t.sigmoid(v[0]);
        let h = t.tanh(v[0]);
        let r = t.relu(v[0]);
        let a = t.add(s, h)?;
        let b = t.add(a, r)?;
        weighted(t, b, 31)
    });
    check_many(vec![positive(&[8, 8], 32)], |t, v| {
        let a = t.ln_eps(v[0], 1e-12);
        let b = t.ln_clamp(v[0], 1e-12);
        let c = t.add(a, b)?;
        weighted(t, c, 33)
    });
}

#[test]
fn softmax_and_norm_gradients() {
    check_many(vec![random(&[6, 16], 40)], |t, v| {
        let mut mask = vec![false; 96];
        mask[0] = true;
        mask[17] = true;
        let p = t.softmax(v[0], 1.7, Some(&mask))?;
        weighted(t, p, 41)
    });
    check_many(vec![random(&[5, 8], 42), random(&[8], 43), random(&[8], 44)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-8)?;
        weighted(t, y, 45)
    });
}

#[test]
fn structural_gradients() {
    check_many(vec![random(&[10, 4], 50)], |t, v| {
        let g = t.gather_rows(v[0], vec![3, 0, 3, 9, 5])?;
        weighted(t, g, 51)
    });
    check_many(vec![random(&[6, 3], 52)], |t, v| {
        let csr = Csr::from_rows(6, &[vec![(0, 0.5), (5, 0.5)], vec![], vec![(2, 1.0), (2, 1.0), (1, -0.3)]]).unwrap();
        let y = t.spmm(csr, v[0])?;
        weighted(t, y, 53)
    });
    check_many(vec![random(&[4, 3], 54), random(&[4, 2], 55)], |t, v| {
        let y = t.concat_cols(v[0], v[1])?;
        weighted(t, y, 56)
    });
    check_many(vec![random(&[2, 3, 6], 57)], |t, v| {
        let s = t.split_heads(v[0], 3)?;
        let m = t.merge_heads(s, 3)?;
        let sq = t.mul(s, s)?;
        let a = weighted(t, sq, 58)?;
        let b = weighted(t, m, 59)?;
        t.add(a, b)
    });
    check_many(vec![random(&[4, 6], 60)], |t, v| {
        let r = t.reshape(v[0], &[2, 12])?;
        let p = t.pick(r, vec![0, 5, 23, 5])?;
        let sq = t.mul(p, p)?;
        let m = t.mean(sq);
        let s = t.sum(r);
        let q = t.mul(s, s)?;
        t.add(m, q)
    });
}

#[test]
fn loss_gradients_reach_logits() {
    check_many(vec![random(&[3, 7], 70)], |t, v| {
        let p = t.softmax(v[0], 1.0, None)?;
        cross_entropy_rows(t, p, &[0, 6, 2])
    });
    let mut r = rng::seeded(71);
    let target: Vec<f64> = (0..3)
        .flat_map(|_| {
            let logits: Vec<f64> = (0..7).map(|_| rng::normal(&mut r)).collect();
            softmax(&logits, 1.0).unwrap()
        })
        .collect();
    check_many(vec![random(&[3, 7], 72)], move |t, v| {
        let q = t.softmax(v[0], 3.0, None)?;
        kl_rows(t, &target, q)
    });
}

#[test]
fn split_heads_layout() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new([1, 2, 4], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap());
    let s = t.split_heads(x, 2).unwrap();
    assert_eq!(t.value(s).shape(), &[2, 2, 2]);
    assert_eq!(t.value(s).data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    let m = t.merge_heads(s, 2).unwrap();
    assert_eq!(t.value(m).data(), t.value(x).data());
}

#[test]
fn masked_softmax_rows() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let p = t.softmax(x, 1.0, Some(&[true, false, false, true, true, true])).unwrap();
    let v = t.value(p).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] + v[2] - 1.0).abs() < 1e-15);
    assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn non_finite_values_name_the_op() {
    let x = Tensor::new([2], vec![-1.0, 2.0]).unwrap();
    let err = finite_diff_check(
        |t, v| {
            let l = t.ln_eps(v, 0.0);
            Ok(t.sum(l))
        },
        &x,
        TOL,
    )
    .unwrap_err();
    assert_eq!(err, Error::NonFinite { op: "ln_eps", node: 1 });
}

#[test]
fn shape_errors_are_reported() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2, 3]));
    assert!(matches!(t.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    let c = t.constant(Tensor::zeros([3, 2]));
    assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::scalar(2.0));
    let b = store.add("b", Tensor::scalar(3.0));
    store.get_mut(b).trainable = false;
    let mut t = Tape::new();
    let va = t.param(&store, a);
    let vb = t.param(&store, b);
    let y = t.mul(va, vb).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.param(a), Some(&[3.0][..]));
    assert_eq!(g.param(b), None);
}

use crate::Error;
use crate::Result;

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        v in prop::collection::vec(-30.0f64..30.0, 1..40),
        shift in -100.0f64..100.0,
        temp in 0.1f64..10.0,
    ) {
        let p = softmax(&v, temp).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted, temp).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal(
        a in prop::collection::vec(-5.0f64..5.0, 2..20),
        seed in any::<u64>(),
    ) {
        let p = softmax(&a, 1.0).unwrap();
        let mut r = rng::seeded(seed);
        let b: Vec<f64> = a.iter().map(|_| rng::normal(&mut r) * 3.0).collect();
        let q = softmax(&b, 1.0).unwrap();
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
    }
}
