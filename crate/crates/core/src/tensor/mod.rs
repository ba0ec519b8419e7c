//! Dense `f64` arrays with a small reverse-mode autodiff tape.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::Tensor;
pub use gradcheck::grad_check;
pub use params::{Momentum, ParamId, ParamStore, Parameter};
pub use tape::{concat, Gradients, Tape, Var, NORM_EPS};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check<F>(f: F, shape: &[usize], seed: u64)
    where
        F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, shape);
        let err = grad_check(f, &x, 1e-6).unwrap();
        assert!(err <= 1e-6, "gradient mismatch {err}");
    }

    /// Fixed random weighting so a reduction to scalar exercises every output.
    fn weigh<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Result<Var<'t>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(rand_tensor(&mut rng, &v.shape()));
        Ok(v.mul(&w)?.sum())
    }

    #[test]
    fn matmul_with_identity() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = tape.constant(Tensor::eye(2));
        assert_eq!(a.matmul(&i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(a.matmul(&b).is_err());
        assert!(a.matmul_t(&b, false, true).is_ok());
    }

    #[test]
    fn softmax_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let y = x.mul(&x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0]));
        let c = tape.constant(Tensor::vector(vec![3.0]));
        let g = tape.backward(x.mul(&c).unwrap().sum()).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn grad_matmul() {
        check(
            |t, x| {
                let w = t.constant(Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap());
                let y = x.matmul(&w)?;
                weigh(t, y, 1)
            },
            &[4, 3],
            1,
        );
        check(
            |t, x| {
                let y = x.matmul_t(&x, false, true)?;
                weigh(t, y, 2)
            },
            &[3, 4],
            2,
        );
        check(
            |t, x| {
                let y = x.matmul_t(&x, true, false)?;
                weigh(t, y, 3)
            },
            &[3, 4],
            3,
        );
    }

    #[test]
    fn grad_batched_matmul() {
        check(
            |t, x| {
                let y = x.matmul_t(&x, false, true)?;
                weigh(t, y, 4)
            },
            &[2, 3, 4],
            4,
        );
        check(
            |t, x| {
                let y = x.transpose()?.matmul(&x)?;
                weigh(t, y, 5)
            },
            &[2, 3, 2],
            5,
        );
    }

    #[test]
    fn grad_broadcast_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let other = rand_tensor(&mut rng, &[3]).map(|v| v + 2.0);
        let col = rand_tensor(&mut rng, &[4, 1]).map(|v| v + 2.0);
        for kind in 0..4 {
            let o = other.clone();
            check(
                move |t, x| {
                    let b = t.var(o.clone());
                    let y = match kind {
                        0 => x.add(&b)?,
                        1 => x.sub(&b)?,
                        2 => x.mul(&b)?,
                        _ => x.div(&b)?,
                    };
                    weigh(t, y, 6)
                },
                &[4, 3],
                10 + kind,
            );
            let c = col.clone();
            // x as the broadcast (and divisor) operand
            check(
                move |t, x| {
                    let b = t.var(c.clone());
                    let xs = x.scale(0.1).exp();
                    let y = match kind {
                        0 => b.add(&xs)?,
                        1 => b.sub(&xs)?,
                        2 => b.mul(&xs)?,
                        _ => b.div(&xs)?,
                    };
                    weigh(t, y, 7)
                },
                &[1, 3],
                20 + kind,
            );
        }
    }

    #[test]
    fn grad_elementwise() {
        check(|t, x| weigh(t, x.scale(-2.5), 1), &[5], 30);
        check(|t, x| weigh(t, x.add(&t.constant(Tensor::vector(vec![0.05; 5])))?.relu(), 2), &[5], 31);
        check(|t, x| weigh(t, x.exp(), 3), &[2, 3], 32);
        check(|t, x| weigh(t, x.mul(&x)?.add(&t.constant(Tensor::scalar(0.5)))?.log(), 4), &[2, 3], 33);
    }

    #[test]
    fn grad_reductions() {
        for axis in 0..3 {
            check(move |t, x| weigh(t, x.softmax(axis)?, 1), &[2, 3, 4], 40 + axis as u64);
            check(move |t, x| weigh(t, x.logsumexp(axis)?, 2), &[2, 3, 4], 50 + axis as u64);
            check(move |t, x| weigh(t, x.sum_axis(axis)?, 3), &[2, 3, 4], 60 + axis as u64);
            check(move |t, x| weigh(t, x.mean_axis(axis)?, 4), &[2, 3, 4], 70 + axis as u64);
            check(move |t, x| weigh(t, x.max_pool(axis)?, 5), &[2, 3, 4], 80 + axis as u64);
        }
        check(|_, x| Ok(x.mean()), &[3, 2], 90);
    }

    #[test]
    fn grad_shape_ops() {
        check(|t, x| weigh(t, x.reshape(&[6, 2])?, 1), &[3, 4], 100);
        check(|t, x| weigh(t, x.transpose()?, 2), &[3, 4], 101);
        check(|t, x| weigh(t, x.gather_rows(&[2, 0, 2, 1])?, 3), &[3, 4], 102);
        for axis in 0..2 {
            check(
                move |t, x| {
                    let y = concat(&[x, x.scale(2.0), x.exp()], axis)?;
                    weigh(t, y, 4)
                },
                &[2, 3],
                103 + axis as u64,
            );
        }
    }

    #[test]
    fn grad_feature_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = rand_tensor(&mut rng, &[4]);
        let beta = rand_tensor(&mut rng, &[4]);
        let (g2, b2) = (gamma.clone(), beta.clone());
        check(
            move |t, x| {
                let y = x.feature_norm(&t.constant(g2.clone()), &t.constant(b2.clone()), 1)?;
                weigh(t, y, 5)
            },
            &[2, 5, 4],
            110,
        );
        let xs = rand_tensor(&mut rng, &[2, 5, 4]);
        let b3 = beta.clone();
        check(
            move |t, g| {
                let y = t.constant(xs.clone()).feature_norm(&g, &t.constant(b3.clone()), 1)?;
                weigh(t, y, 6)
            },
            &[4],
            111,
        );
    }

    #[test]
    fn feature_norm_is_permutation_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[7, 3]);
        let perm = [3, 6, 0, 1, 5, 2, 4];
        let tape = Tape::new();
        let (g, b) = (
            tape.constant(Tensor::vector(vec![1.0, 2.0, 0.5])),
            tape.constant(Tensor::vector(vec![0.0, -1.0, 0.3])),
        );
        let xv = tape.constant(x);
        let y = xv.feature_norm(&g, &b, 0).unwrap().gather_rows(&perm).unwrap();
        let yp = xv.gather_rows(&perm).unwrap().feature_norm(&g, &b, 0).unwrap();
        assert_eq!(y.value().data(), yp.value().data());
    }

    #[test]
    fn params_bound_once_per_tape() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![2.0])).unwrap();
        let tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a.id(), b.id());
        let y = a.mul(&b).unwrap().sum();
        let g = tape.backward(y).unwrap();
        let grads: Vec<_> = g.params().collect();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.unwrap().data(), &[4.0]);
    }
}
