use super::*;
use crate::testutil::{grad_check, random_tensor};
use crate::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_zero() {
    let mut t = Tape::new();
    let i = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let p = t.matmul(i, a).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = t.constant(m(&[&[1.0, 0.0]]));
    let c = t.constant(m(&[&[0.0], &[5.0]]));
    let q = t.matmul(r, c).unwrap();
    assert_eq!(t.value(q).data(), &[0.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
    let b = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
    let errs = grad_check(&[a, b], 1e-5, |t, v| {
        let p = t.matmul(v[0], v[1])?;
        t.sum(p)
    });
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn matmul_bt_matches_explicit_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, 4, 3, -1.0, 1.0);
    let b = random_tensor(&mut rng, 5, 3, -1.0, 1.0);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let x = t.matmul_bt(va, vb).unwrap();
    let bt = t.transpose(vb).unwrap();
    let y = t.matmul(va, bt).unwrap();
    for (p, q) in t.value(x).data().iter().zip(t.value(y).data()) {
        assert!((p - q).abs() < 1e-14);
    }
    let errs = grad_check(&[a, b], 1e-5, |t, v| {
        let p = t.matmul_bt(v[0], v[1])?;
        let s = t.mul(p, p)?;
        t.sum(s)
    });
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let x = t.constant(m(&[&[-1.0, 2.0]]));
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 2.0]);

    let z = t.scalar(0.0);
    let sp = t.softplus(z).unwrap();
    assert!((t.item(sp) - 2f64.ln()).abs() < 1e-15);

    let x = t.param(Tensor::scalar(3.0));
    let sq = t.mul(x, x).unwrap();
    let g = t.backward(sq).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn log_rejects_non_positive() {
    let mut t = Tape::new();
    let x = t.constant(m(&[&[1.0, 0.0]]));
    assert!(matches!(t.log(x), Err(Error::Domain { .. })));
    let y = t.constant(m(&[&[-0.5]]));
    assert!(matches!(t.lgamma(y), Err(Error::Domain { .. })));
}

#[test]
fn broadcasting_is_scalar_or_equal_only() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 2]));
    assert!(t.add(a, b).is_err());
    let s = t.scalar(2.0);
    let c = t.mul(s, a).unwrap();
    assert_eq!(t.shape(c), &[2, 3]);
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(m(&[&[0.0, 0.0, 0.0], &[2f64.ln(), 0.0, 0.0]]));
    let s = t.softmax_rows(x).unwrap();
    let v = t.value(s).data();
    for (got, want) in v.iter().zip([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.5, 0.25, 0.25]) {
        assert!((got - want).abs() < 1e-15);
    }
    let bad = t.constant(m(&[&[f64::NAN, 0.0]]));
    assert!(matches!(t.softmax_rows(bad), Err(Error::Numeric { .. })));
}

#[test]
fn softmax_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, 2, 4, -2.0, 2.0);
    let w = random_tensor(&mut rng, 2, 4, -1.0, 1.0);
    let errs = grad_check(&[x, w], 1e-5, |t, v| {
        let s = t.softmax_rows(v[0])?;
        let p = t.mul(s, v[1])?;
        t.sum(p)
    });
    assert!(errs[0] < 1e-6, "{errs:?}");
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g = t.param(Tensor::full(&[1, 4], 1.0));
    let b = t.param(Tensor::zeros(&[1, 4]));
    let x = t.constant(m(&[&[1.0, 1.0, 1.0, 1.0]]));
    let y = t.layer_norm_rows(x, g, b).unwrap();
    assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let g2 = t.param(Tensor::full(&[1, 2], 1.0));
    let b2 = t.param(Tensor::zeros(&[1, 2]));
    let x2 = t.constant(m(&[&[0.0, 2.0]]));
    let y2 = t.layer_norm_rows(x2, g2, b2).unwrap();
    let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    let v = t.value(y2).data();
    assert!((v[0] + expect).abs() < 1e-15 && (v[1] - expect).abs() < 1e-15);

    let short = t.constant(m(&[&[1.0]]));
    let g1 = t.param(Tensor::full(&[1, 1], 1.0));
    let b1 = t.param(Tensor::zeros(&[1, 1]));
    assert!(t.layer_norm_rows(short, g1, b1).is_err());
}

#[test]
fn layer_norm_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, 3, 5, -2.0, 2.0);
    let g = random_tensor(&mut rng, 1, 5, 0.5, 1.5);
    let b = random_tensor(&mut rng, 1, 5, -0.5, 0.5);
    let w = random_tensor(&mut rng, 3, 5, -1.0, 1.0);
    let errs = grad_check(&[x, g, b, w], 1e-5, |t, v| {
        let y = t.layer_norm_rows(v[0], v[1], v[2])?;
        let p = t.mul(y, v[3])?;
        let s = t.mul(p, p)?;
        t.sum(s)
    });
    assert!(errs.iter().all(|&e| e < 1e-5), "{errs:?}");
}

#[test]
fn lgamma_digamma_values() {
    let mut t = Tape::new();
    let x = t.constant(m(&[&[1.0, 0.5]]));
    let lg = t.lgamma(x).unwrap();
    let v = t.value(lg).data();
    assert!(v[0].abs() < 1e-14);
    assert!((v[1] - 0.572_364_942_924_700_1).abs() < 1e-12);
    let one = t.constant(Tensor::scalar(1.0));
    let dg = t.digamma(one).unwrap();
    assert!((t.item(dg) + 0.577_215_664_901_532_9).abs() < 1e-12);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let a = t.param(Tensor::scalar(2.0));
    let unused = t.param(Tensor::zeros(&[2, 2]));
    let c = t.constant(Tensor::scalar(5.0));
    let y = t.mul(a, c).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(a).unwrap().item(), 5.0);
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 4]);
    assert!(g.get(c).is_none());
}

#[test]
fn mean_rows_ignores_row_order_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, 10, 3, -1e3, 1e3);
    let mut idx: Vec<usize> = (0..10).rev().collect();
    idx.swap(2, 7);
    let y = x.select_rows(&idx);
    let mut t = Tape::new();
    let (a, b) = (t.constant(x), t.constant(y));
    let (ma, mb) = (t.mean_rows(a).unwrap(), t.mean_rows(b).unwrap());
    assert_eq!(t.value(ma), t.value(mb));
}

/// Random composition touching every differentiable primitive.
fn composite(t: &mut Tape, v: &[Var]) -> crate::Result<Var> {
    let (x, w, b, g, beta) = (v[0], v[1], v[2], v[3], v[4]);
    let h = t.matmul(x, w)?;
    let h = t.add_row_bias(h, b)?;
    let ln = t.layer_norm_rows(h, g, beta)?;
    let a = t.sigmoid(ln)?;
    let sp = t.softplus(h)?;
    let pos = t.add_scalar(sp, 0.2)?;
    let lg = t.lgamma(pos)?;
    let dg = t.digamma(pos)?;
    let lo = t.log(pos)?;
    let sm = t.softmax_rows(ln)?;
    let nr = t.normalize_rows(pos)?;
    let e = t.exp(a)?;
    let r = t.relu(h)?;
    let q = t.div(e, pos)?;
    let s1 = t.sub(lg, dg)?;
    let parts = t.concat_cols(&[s1, lo, sm, nr, q, r])?;
    let sl = t.slice_cols(parts, 2, 5)?;
    let mr = t.mean_rows(sl)?;
    let rep = t.repeat_rows(mr, 2)?;
    let tr = t.transpose(rep)?;
    let mm = t.matmul_bt(tr, tr)?;
    let sc = t.scale(mm, 0.3)?;
    let ng = t.neg(sc)?;
    let cl = t.clamp_min(ng, -1e6)?;
    let rs = t.sum_cols(cl)?;
    let total = t.mean(rs)?;
    let extra = t.sum(parts)?;
    let extra = t.scale(extra, 0.01)?;
    t.add(total, extra)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_gradients_match_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random_tensor(&mut rng, 4, 3, -1.0, 1.0),
            random_tensor(&mut rng, 3, 3, -1.0, 1.0),
            random_tensor(&mut rng, 1, 3, -0.5, 0.5),
            random_tensor(&mut rng, 1, 3, 0.5, 1.5),
            random_tensor(&mut rng, 1, 3, -0.5, 0.5),
        ];
        let errs = grad_check(&inputs, 1e-5, composite);
        for e in errs {
            prop_assert!(e < 1e-4, "rel err {}", e);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(1, n, row).unwrap());
        let b = t.constant(Tensor::matrix(1, n, shifted).unwrap());
        let (sa, sb) = (t.softmax_rows(a).unwrap(), t.softmax_rows(b).unwrap());
        let total: f64 = t.value(sa).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (p, q) in t.value(sa).data().iter().zip(t.value(sb).data()) {
            prop_assert!(*p >= 0.0);
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let inputs = [
            random_tensor(&mut rng, 4, 3, -1.0, 1.0),
            random_tensor(&mut rng, 3, 3, -1.0, 1.0),
            random_tensor(&mut rng, 1, 3, -0.5, 0.5),
            random_tensor(&mut rng, 1, 3, 0.5, 1.5),
            random_tensor(&mut rng, 1, 3, -0.5, 0.5),
        ];
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
        let out = composite(&mut t, &vars).unwrap();
        let g = t.backward(out).unwrap();
        let grads: Vec<Vec<u64>> = vars
            .iter()
            .map(|&v| g.get(v).unwrap().data().iter().map(|x| x.to_bits()).collect())
            .collect();
        (t.item(out).to_bits(), grads)
    };
    assert_eq!(run(), run());
}

#[test]
fn tensor_invariants() {
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    let g = glorot_uniform(&mut ChaCha8Rng::seed_from_u64(0), 4, 6);
    let bound = (6.0f64 / 10.0).sqrt();
    assert_eq!(g.shape(), &[4, 6]);
    assert!(g.data().iter().all(|v| v.abs() <= bound));
}
