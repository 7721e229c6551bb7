//! Minimal dense-tensor math with tape-based reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use kernels::{matmul, sigmoid, softmax};
pub use tape::{bce_value, kl_diag_value, Elementwise, Gradients, Tape, Var, BCE_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn check(
        f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
        params: &[Tensor],
    ) -> GradCheckReport {
        grad_check(f, params, GradCheckOptions::default()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn log_domain_and_nonfinite_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(
            tape.constant(Tensor::vector(vec![1.0, f64::NAN])),
            Err(Error::NonFinite { index: 1, .. })
        ));
        let big = tape.constant(Tensor::vector(vec![1e300, 800.0])).unwrap();
        assert!(matches!(
            tape.exp(big),
            Err(Error::NonFinite {
                op: "exp",
                index: 0
            })
        ));
    }

    #[test]
    fn matmul_examples_and_shape_error() {
        let mut tape = Tape::new();
        let eye = tape
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let m = tape
            .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = tape
            .constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap())
            .unwrap();
        let b = tape
            .constant(Tensor::matrix(2, 1, vec![0.0, 5.0]).unwrap())
            .unwrap();
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0]);
        let err = tape.matmul(a, a).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "matmul", .. }));
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..9).map(f64::from).collect();
        let x = tape
            .constant(Tensor::new(vec![1, 3, 3], data.clone()).unwrap())
            .unwrap();
        let w = tape
            .constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap())
            .unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);

        let x = tape.constant(Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);

        let w = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0)).unwrap();
        assert!(matches!(
            tape.conv2d(x, w, 1, 1),
            Err(Error::Dimension { op: "conv2d", .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![3.5; 3])).unwrap();
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_identity_and_fanout() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0]);

        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn replayed_backward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let a = tape.param(random(&mut rng, &[4, 5])).unwrap();
        let b = tape.param(random(&mut rng, &[5, 3])).unwrap();
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sigmoid(p).unwrap();
        let loss = tape.mean(s).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = [random(&mut rng, &[3, 3]), random(&mut rng, &[3, 3])];
            let r = check(
                |t, v| {
                    let p = t.matmul(v[0], v[1])?;
                    t.sum(p)
                },
                &params,
            );
            assert!(r.max_rel_err <= 1e-6, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let params = [
                random(&mut rng, &[2, 5, 5]),
                random(&mut rng, &[3, 2, 3, 3]),
            ];
            let r = check(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], 2, 1)?;
                    let s = t.sigmoid(y)?;
                    t.sum(s)
                },
                &params,
            );
            assert!(r.max_rel_err <= 1e-5, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = random(&mut rng, &[2, 4]);
            let row = random(&mut rng, &[1, 4]);
            let pos = Tensor::new(
                vec![2, 4],
                (0..8).map(|_| rng.random_range(0.5..2.0)).collect(),
            )
            .unwrap();
            let r = check(
                |t, v| {
                    let a = t.add_row(v[0], v[1])?;
                    let b = t.relu(a)?;
                    let c = t.exp(v[0])?;
                    let d = t.mul(b, c)?;
                    let e = t.log(v[2])?;
                    let f = t.sub(d, e)?;
                    let g = t.neg(f)?;
                    let h = t.scale(g, 0.7)?;
                    let m = t.mean_rows(h)?;
                    let sm = t.softmax(m)?;
                    let cc = t.concat(&[sm, v[1]])?;
                    let cl = t.clamp(cc, -0.5, 0.5)?;
                    let r = t.reshape(cl, vec![8])?;
                    let sq = t.mul(r, r)?;
                    t.mean(sq)
                },
                &[x, row, pos],
            );
            assert!(r.passed, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn bias_and_loss_op_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x = random(&mut rng, &[3, 2, 2]);
            let b = random(&mut rng, &[3]);
            let logits = random(&mut rng, &[6]);
            let targets: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
            let mu = random(&mut rng, &[4]);
            let ls = random(&mut rng, &[4]);
            let mu2 = random(&mut rng, &[4]);
            let ls2 = random(&mut rng, &[4]);
            let r = check(
                |t, v| {
                    let y = t.add_channel_bias(v[0], v[1])?;
                    let s = t.sum(y)?;
                    let p = t.sigmoid(v[2])?;
                    let l = t.bce(p, &targets)?;
                    let s1 = t.exp(v[4])?;
                    let s2 = t.exp(v[6])?;
                    let kl = t.kl_diag(v[3], s1, v[5], s2)?;
                    let a = t.add(s, l)?;
                    t.add(a, kl)
                },
                &[x, b, logits, mu, ls, mu2, ls2],
            );
            assert!(r.passed, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn linear_layer_identity_weight_gradient() {
        let x = Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let w = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.param(w.clone()).unwrap();
        let y = tape.matmul(xv, wv).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        // d sum(xW)/dW[i][j] = x[i]
        let dw = g.get(wv).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(dw[i * 3 + j], x.data()[i]);
            }
        }
        let r = check(
            |t, v| {
                let xv = t.constant(x.clone())?;
                let y = t.matmul(xv, v[0])?;
                t.sum(y)
            },
            &[w],
        );
        assert!(r.passed);
    }

    #[test]
    fn minor_kink_inside_the_step_is_skipped_not_failed() {
        // 3·x² + 0.01·relu(x − 0.50003) at x = 0.5: the kink is inside
        // the ±1e-4 stencil but carries under 1% of the slope.
        let f = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            let big = t.scale(sq, 3.0)?;
            let off = t.constant(Tensor::vector(vec![0.5 + 3e-5]))?;
            let shifted = t.sub(v[0], off)?;
            let r = t.relu(shifted)?;
            let small = t.scale(r, 0.01)?;
            let y = t.add(big, small)?;
            t.sum(y)
        };
        let r = check(f, &[Tensor::vector(vec![0.5])]);
        assert!(r.passed, "{r:?}");
        assert_eq!(r.kinks_skipped, 1);

        let wrong = Elementwise::Custom {
            name: "cube_wrong",
            f: |x| x * x * x,
            df: |x| 3.0 * x * x * 1.001,
        };
        let r = check(
            move |t, v| {
                let y = t.elementwise(v[0], wrong)?;
                t.sum(y)
            },
            &[Tensor::vector(vec![0.5, -0.7])],
        );
        assert!(!r.passed && r.kinks_skipped == 0);
    }

    #[test]
    fn corrupted_backward_rule_fails_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[6]);
        let faulty = Elementwise::Custom {
            name: "faulty_sin",
            f: f64::sin,
            df: |x| 1.1 * x.cos(),
        };
        let honest = Elementwise::Custom {
            name: "sin",
            f: f64::sin,
            df: f64::cos,
        };
        let run = |op: Elementwise| {
            check(
                move |t, v| {
                    let y = t.elementwise(v[0], op)?;
                    t.sum(y)
                },
                std::slice::from_ref(&x),
            )
        };
        assert!(run(honest).passed);
        assert!(!run(faulty).passed);
    }
}
