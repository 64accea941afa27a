mod common;

use common::{random_tensor, rng, rows};
use contlab::encoder::{contrastive_loss, contrastive_loss_tape, fuse, project, EncoderParams};
use contlab::numerics::{AdamState, Tape, Tensor};
use contlab::Error;
use proptest::prelude::*;

fn params(theta_t: Tensor, theta_v: Tensor, w_a: Tensor) -> EncoderParams {
    EncoderParams {
        theta_t,
        theta_v,
        w_a,
        xi: 0.1,
    }
}

fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            for k in 0..a.cols() {
                out[i * b.cols() + j] += a.at(i, k) * b.at(k, j);
            }
        }
    }
    out
}

#[test]
fn identity_and_zero_projection() {
    let mut r = rng(1);
    let xt = random_tensor(5, 3, -1.0, 1.0, &mut r);
    let xv = random_tensor(5, 2, -1.0, 1.0, &mut r);
    let p = params(
        Tensor::identity(3),
        random_tensor(2, 3, -1.0, 1.0, &mut r),
        Tensor::zeros(&[6, 3]),
    );
    let (zt, _) = project(&xt, &xv, &p).unwrap();
    assert_eq!(zt, xt);
    let (zt, zv) = project(&Tensor::zeros(&[5, 3]), &Tensor::zeros(&[5, 2]), &p).unwrap();
    assert!(zt.data().iter().chain(zv.data()).all(|&v| v == 0.0));
    assert!(project(&xt, &Tensor::zeros(&[4, 2]), &p).is_err());
    assert!(project(&xt, &Tensor::zeros(&[5, 3]), &p).is_err());
}

#[test]
fn projection_matches_triple_loop() {
    let mut r = rng(2);
    let p = EncoderParams::init(4, 6, 3, 0.1, &mut r);
    let xt = random_tensor(7, 4, -1.0, 1.0, &mut r);
    let xv = random_tensor(7, 6, -1.0, 1.0, &mut r);
    let (zt, zv) = project(&xt, &xv, &p).unwrap();
    for (got, want) in [(zt, naive(&xt, &p.theta_t)), (zv, naive(&xv, &p.theta_v))] {
        for (a, b) in got.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn two_sample_hand_loss() {
    let z = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let l = contrastive_loss(&z, &z, 1.0).unwrap();
    assert!((l - (-(1.0 - 2f64.ln()))).abs() < 1e-7, "{l}");
}

#[test]
fn loss_guards() {
    let one = rows(&[vec![1.0, 0.0]]);
    assert!(matches!(
        contrastive_loss(&one, &one, 0.1),
        Err(Error::Input(_))
    ));
    let zero = rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
    let ok = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!(matches!(
        contrastive_loss(&zero, &ok, 0.1),
        Err(Error::Numerical(_))
    ));
    assert!(contrastive_loss(&ok, &rows(&[vec![1.0], vec![2.0]]), 0.1).is_err());
}

#[test]
fn fuse_examples() {
    let mut r = rng(3);
    let zt = random_tensor(4, 3, -1.0, 1.0, &mut r);
    let zv = random_tensor(4, 3, -1.0, 1.0, &mut r);
    let mut select = Tensor::zeros(&[6, 3]);
    let mut both = Tensor::zeros(&[6, 3]);
    for i in 0..3 {
        select.data_mut()[i * 3 + i] = 1.0;
        both.data_mut()[i * 3 + i] = 1.0;
        both.data_mut()[(i + 3) * 3 + i] = 1.0;
    }
    assert_eq!(fuse(&zt, &zv, &select).unwrap(), zt);
    assert_eq!(fuse(&zt, &zt, &both).unwrap(), zt.scale(2.0));
    let w = random_tensor(6, 2, -1.0, 1.0, &mut r);
    let want = naive(&zt.concat_cols(&zv).unwrap(), &w);
    for (a, b) in fuse(&zt, &zv, &w).unwrap().data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(fuse(&zt, &zv, &Tensor::zeros(&[5, 3])).is_err());
}

fn loss_of(xt: &Tensor, xv: &Tensor, tt: &Tensor, tv: &Tensor) -> f64 {
    contrastive_loss(&xt.matmul(tt).unwrap(), &xv.matmul(tv).unwrap(), 0.1).unwrap()
}

#[test]
fn one_adam_step_descends() {
    let mut decreased = 0;
    for seed in 1..=10 {
        let mut r = rng(seed);
        let p = EncoderParams::init(6, 6, 4, 0.1, &mut r);
        let xt = random_tensor(16, 6, -1.0, 1.0, &mut r);
        let xv = random_tensor(16, 6, -1.0, 1.0, &mut r);
        let before = loss_of(&xt, &xv, &p.theta_t, &p.theta_v);
        let mut tape = Tape::new();
        let tt = tape.param(p.theta_t.clone());
        let tv = tape.param(p.theta_v.clone());
        let (a, b) = (tape.constant(xt.clone()), tape.constant(xv.clone()));
        let zt = tape.matmul(a, tt).unwrap();
        let zv = tape.matmul(b, tv).unwrap();
        let l = contrastive_loss_tape(&mut tape, zt, zv, 0.1).unwrap();
        tape.backward(l).unwrap();
        let mut adam = AdamState::new(1e-3);
        let (mut new_t, mut new_v) = (p.theta_t.clone(), p.theta_v.clone());
        adam.step("t", &mut new_t, &tape.grad(tt)).unwrap();
        adam.step("v", &mut new_v, &tape.grad(tv)).unwrap();
        if loss_of(&xt, &xv, &new_t, &new_v) < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 9, "{decreased}/10");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_invariant_to_permutation_and_row_scaling(
        seed in 0u64..10_000,
        n in 2usize..7,
        rot in 1usize..7,
        scale in 0.1f64..10.0,
        row in 0usize..7,
    ) {
        let mut r = rng(seed);
        let zt = random_tensor(n, 3, -1.0, 1.0, &mut r);
        let zv = random_tensor(n, 3, -1.0, 1.0, &mut r);
        let base = contrastive_loss(&zt, &zv, 0.5).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let permuted = contrastive_loss(&zt.select_rows(&perm), &zv.select_rows(&perm), 0.5).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
        let mut scaled = zt.clone();
        let k = row % n;
        for v in &mut scaled.data_mut()[k * 3..k * 3 + 3] {
            *v *= scale;
        }
        prop_assert!((base - contrastive_loss(&scaled, &zv, 0.5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fuse_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (x1, x2) = (random_tensor(3, 2, -1.0, 1.0, &mut r), random_tensor(3, 2, -1.0, 1.0, &mut r));
        let (y1, y2) = (random_tensor(3, 2, -1.0, 1.0, &mut r), random_tensor(3, 2, -1.0, 1.0, &mut r));
        let w = random_tensor(4, 2, -1.0, 1.0, &mut r);
        let f = |x: &Tensor, y: &Tensor| fuse(x, y, &w).unwrap();
        let scaled = f(&x1.scale(a), &y1.scale(a));
        for (s, b) in scaled.data().iter().zip(f(&x1, &y1).data()) {
            prop_assert!((s - a * b).abs() < 1e-12);
        }
        let sum = f(&x1.add(&x2).unwrap(), &y1.add(&y2).unwrap());
        let parts = f(&x1, &y1).add(&f(&x2, &y2)).unwrap();
        for (s, p) in sum.data().iter().zip(parts.data()) {
            prop_assert!((s - p).abs() < 1e-12);
        }
    }
}
