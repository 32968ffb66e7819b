use proptest::prelude::*;

use super::{Rng, Tape, Tensor};
use crate::error::Error;
use crate::gradcheck::{check, project};

fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Nested-loop cross-correlation with zero padding, written independently of
/// the engine's kernels.
fn conv_oracle(x: &Tensor<f64>, kernel: &Tensor<f64>) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = kernel.shape()[0];
    let r = (k / 2) as i64;
    let at = |y: i64, xx: i64, ch: usize| -> f64 {
        if y < 0 || xx < 0 || y >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            x.data()[(y as usize * w + xx as usize) * c + ch]
        }
    };
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for xx in 0..w as i64 {
            for ch in 0..c {
                let mut acc = 0.0;
                for i in 0..k as i64 {
                    for j in 0..k as i64 {
                        acc += kernel.data()[(i * k as i64 + j) as usize]
                            * at(y + i - r, xx + j - r, ch);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn local_max_oracle(x: &Tensor<f64>, win: usize) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let r = (win / 2) as i64;
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for xx in 0..w as i64 {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y + dy, xx + dx);
                        let v = if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                            0.0
                        } else {
                            x.data()[(sy as usize * w + sx as usize) * c + ch]
                        };
                        best = best.max(v);
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

fn random_field(rng: &mut Rng) -> Tensor<f64> {
    let h = 1 + rng.below(8);
    let w = 1 + rng.below(8);
    let c = 1 + rng.below(4);
    Tensor::from_fn([h, w, c], |_| rng.normal())
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);

    let a = tape.constant(t(&[1, 2], &[1., 2.]));
    let b = tape.constant(t(&[2, 1], &[3., 4.]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[11.]);

    match tape.matmul(a, a) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![1, 2]);
            assert_eq!(rhs, vec![1, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradcheck() {
    let mut rng = Rng::seeded(1);
    let a = Tensor::from_fn([4, 3], |_| rng.normal());
    let b = Tensor::from_fn([3, 2], |_| rng.normal());
    let err = check(&[a, b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_constant_field_sobel_is_zero_inside() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([3, 3, 1], 1.0f32));
    let sobel = t(&[3, 3], &[-1., 0., 1., -2., 0., 2., -1., 0., 1.]);
    let y = tape.conv2d_depthwise(x, &sobel).unwrap();
    assert_eq!(tape.value(y).data()[4], 0.0);
}

#[test]
fn conv_impulse_is_flipped_kernel() {
    // Cross-correlation of a centered impulse reproduces the kernel rotated by 180°.
    let mut x = Tensor::<f64>::zeros([3, 3, 1]);
    x.data_mut()[4] = 1.0;
    let kernel = Tensor::from_fn([3, 3], |i| (i + 1) as f64);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.conv2d_depthwise(xv, &kernel).unwrap();
    let flipped: Vec<f64> = kernel.data().iter().rev().copied().collect();
    assert_eq!(tape.value(y).data(), flipped.as_slice());
    assert_eq!(tape.value(y).data(), conv_oracle(&x, &kernel).as_slice());
}

#[test]
fn conv_even_kernel_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f32>::zeros([3, 3, 1]));
    let k = Tensor::<f32>::zeros([2, 2]);
    assert!(matches!(
        tape.conv2d_depthwise(x, &k),
        Err(Error::Config(_))
    ));
    assert!(matches!(tape.local_max(x, 2), Err(Error::Config(_))));
}

#[test]
fn conv_and_local_max_match_oracles() {
    let mut rng = Rng::seeded(2);
    for _ in 0..200 {
        let x = random_field(&mut rng);
        let k = [1, 3, 5, 7][rng.below(4)];
        let kernel = Tensor::from_fn([k, k], |_| rng.normal());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.conv2d_depthwise(xv, &kernel).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(conv_oracle(&x, &kernel)) {
            assert!((a - b).abs() <= 1e-6);
        }
        let win = [1, 3, 5][rng.below(3)];
        let m = tape.local_max(xv, win).unwrap();
        assert_eq!(tape.value(m).data(), local_max_oracle(&x, win).as_slice());
    }
}

#[test]
fn conv_gradcheck() {
    let mut rng = Rng::seeded(3);
    let x = Tensor::from_fn([5, 5, 2], |_| rng.normal());
    let kernel = Tensor::from_fn([3, 3], |_| rng.normal());
    let err = check(&[x], |t, v| {
        let y = t.conv2d_depthwise(v[0], &kernel)?;
        project(t, y, 1)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn local_max_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([4, 4, 1], 0.5f32));
    let y = tape.local_max(x, 3).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.5));

    let x = tape.constant(t(&[2, 2, 1], &[1., 2., 3., 4.]));
    let y = tape.local_max(x, 3).unwrap();
    assert_eq!(tape.value(y).data(), &[4., 4., 4., 4.]);
}

#[test]
fn local_max_ties_route_to_first_argmax() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([1, 3, 1], vec![2.0, 2.0, 1.0]).unwrap());
    let y = tape.local_max(x, 3).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    // Windows 0 and 1 hold both 2.0 entries and pick index 0; window 2 only
    // sees index 1.
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 1.0, 0.0]);
}

#[test]
fn relu_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(t(&[3], &[-1., 0., 2.]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0., 0., 2.]);

    let n = tape.param(t(&[3], &[-1., -2., -3.]));
    let y = tape.relu(n);
    assert_eq!(tape.value(y).data(), &[0., 0., 0.]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(n).unwrap().data(), &[0., 0., 0.]);
}

#[test]
fn relu_gradcheck_away_from_kink() {
    let mut rng = Rng::seeded(4);
    let x = Tensor::from_fn([6, 3], |_| loop {
        let v = rng.normal();
        if v.abs() > 1e-3 {
            break v;
        }
    });
    let err = check(&[x], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 2)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn mse_examples() {
    let mut tape = Tape::<f32>::new();
    let p = tape.constant(t(&[2], &[1., 1.]));
    let same = tape.mse_loss(p, p).unwrap();
    assert_eq!(tape.value(same).data(), &[0.]);
    let target = tape.constant(t(&[2], &[0., 2.]));
    let l = tape.mse_loss(p, target).unwrap();
    assert_eq!(tape.value(l).data(), &[1.]);

    let wrong = tape.constant(t(&[3], &[0., 0., 0.]));
    assert!(matches!(
        tape.mse_loss(p, wrong),
        Err(Error::Dimension { .. })
    ));
    let trainable = tape.param(t(&[2], &[0., 0.]));
    assert!(matches!(tape.mse_loss(p, trainable), Err(Error::Usage(_))));
}

#[test]
fn mse_gradcheck() {
    let mut rng = Rng::seeded(5);
    let pred = Tensor::from_fn([7], |_| rng.normal());
    let target = Tensor::from_fn([7], |_| rng.normal());
    let err = check(&[pred], |t, v| {
        let tg = t.constant(target.clone());
        t.mse_loss(v[0], tg)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn plumbing_ops() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let z = tape.constant(Tensor::zeros([2, 3]));
    let y = tape.add(x, z).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 1], &[9., 8.]));
    let c = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(tape.value(c).data(), &[1., 2., 9., 3., 4., 8.]);
    let back = tape.slice_channels(c, 0, 2).unwrap();
    assert_eq!(tape.value(back), tape.value(a));

    assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(
        tape.slice_channels(a, 1, 3),
        Err(Error::Dimension { .. })
    ));
    let bad = tape.constant(t(&[1, 2], &[0., 0.]));
    assert!(matches!(
        tape.concat_channels(&[a, bad]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn composite_gradcheck() {
    let mut rng = Rng::seeded(6);
    let a = Tensor::from_fn([3, 2], |_| rng.normal());
    let b = Tensor::from_fn([3, 3], |_| rng.normal());
    let err = check(&[a, b], |t, v| {
        let c = t.concat_channels(&[v[0], v[1]])?;
        let e = t.exp(c);
        let s = t.scale(e, 0.3);
        let sl = t.slice_channels(s, 1, 4)?;
        let m = t.mul(sl, sl)?;
        let bsl = t.slice_channels(v[1], 0, 3)?;
        let sum = t.add(m, bsl)?;
        project(t, sum, 3)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::full([2, 3, 2], 0.7));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::<f32>::new();
    let x = tape.param(t(&[1], &[3.]));
    let zero = tape.constant(t(&[1], &[0.]));
    let l = tape.mse_loss(x, zero).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.]);

    let v = tape.param(t(&[2], &[1., 2.]));
    assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut rng = Rng::seeded(7);
    let x0 = Tensor::from_fn([4], |_| rng.normal());
    let single = |scale: f64| {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(x0.clone());
        let y = tape.exp(x);
        let y = tape.scale(y, scale);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        tape.grad(x).unwrap()
    };
    let mut tape = Tape::<f64>::new();
    let x = tape.param(x0.clone());
    let e = tape.exp(x);
    let a = tape.scale(e, 2.0);
    let b = tape.scale(x, -1.5);
    let b = tape.mul(b, x).unwrap();
    let total = tape.add(a, b).unwrap();
    let s = tape.sum(total);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    let ga = single(2.0);
    for i in 0..4 {
        let gb = -3.0 * x0.data()[i];
        assert!((g.data()[i] - (ga.data()[i] + gb)).abs() < 1e-12);
    }
}

#[test]
fn im2col_shape_and_content() {
    let x = Tensor::from_fn([4, 4, 1], |i| i as f32);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let cols = tape.im2col(xv, 3, 2, 1).unwrap();
    assert_eq!(tape.value(cols).shape(), &[2, 2, 9]);
    // Output (0,0) covers rows -1..=1, cols -1..=1.
    assert_eq!(
        &tape.value(cols).data()[..9],
        &[0., 0., 0., 0., 0., 1., 0., 4., 5.]
    );
}

#[test]
fn nca_step_gradcheck_all_parameters() {
    let report = crate::gradcheck::run_suite(11, false).unwrap();
    let step = report
        .results
        .iter()
        .find(|r| r.name == "nca_step")
        .unwrap();
    assert!(step.passed(), "{}", step.max_rel_error);
}

proptest! {
    #[test]
    fn forward_ops_are_pure(seed in any::<u64>()) {
        let mut rng = Rng::seeded(seed);
        let x = Tensor::from_fn([5, 4, 3], |_| rng.normal() as f32);
        let k = Tensor::from_fn([3, 3], |_| rng.normal() as f32);
        let run = |x: &Tensor<f32>| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let c = tape.conv2d_depthwise(v, &k).unwrap();
            let m = tape.local_max(c, 3).unwrap();
            let r = tape.relu(m);
            tape.value(r).clone()
        };
        prop_assert_eq!(run(&x), run(&x));
    }

    #[test]
    fn concat_then_slice_recovers_parts(a in 1usize..4, b in 1usize..4, rows in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::seeded(seed);
        let ta = Tensor::from_fn([rows, a], |_| rng.normal() as f32);
        let tb = Tensor::from_fn([rows, b], |_| rng.normal() as f32);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(ta.clone()), tape.constant(tb.clone()));
        let c = tape.concat_channels(&[va, vb]).unwrap();
        let sa = tape.slice_channels(c, 0, a).unwrap();
        let sb = tape.slice_channels(c, a, a + b).unwrap();
        prop_assert_eq!(tape.value(sa), &ta);
        prop_assert_eq!(tape.value(sb), &tb);
    }
}
