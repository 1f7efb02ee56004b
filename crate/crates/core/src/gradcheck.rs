//! Central-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// `|a − n| / (|a| + |n| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Central differences of a scalar function of several tensors.
pub fn central_differences<F>(mut eval: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut grad = Tensor::zeros(p.rows(), p.cols());
        for i in 0..p.numel() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Oracle(format!(
                    "non-finite function value at parameter {pi}, coordinate {i}"
                )));
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares taped gradients of `f` at `params` with central differences.
pub fn gradient_check_many<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> tensor::Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &leaves)?;
    let analytic = g.gradients(loss, &leaves)?;
    if !g.scalar(loss).is_finite() || analytic.iter().any(|t| !t.is_finite()) {
        return Err(Error::Oracle("non-finite value or gradient at the check point".into()));
    }
    let numeric = central_differences(
        |ps| {
            // leaves, so functions that differentiate internally still see a path
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
            let l = f(&mut g, &vars)?;
            Ok(g.scalar(l))
        },
        params,
        eps,
    )?;
    Ok(compare(analytic, numeric))
}

/// Maximum relative error between taped and finite-difference gradients of
/// `f` at `p0`.
pub fn gradient_check<F>(f: F, p0: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> tensor::Result<Var>,
{
    let report = gradient_check_many(|g, v| f(g, v[0]), std::slice::from_ref(p0), eps)?;
    Ok(report.max_rel_error)
}

pub fn compare(analytic: Vec<Tensor>, numeric: Vec<Tensor>) -> GradCheckReport {
    let mut max_rel = 0.0;
    let mut max_abs = 0.0;
    let mut worst = None;
    for (pi, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = relative_error(av, nv);
            if rel > max_rel {
                max_rel = rel;
                worst = Some((pi, i));
            }
            max_abs = f64::max(max_abs, (av - nv).abs());
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst,
        analytic,
        numeric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Result as TResult;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Reduces a tensor node to a scalar through a fixed random projection so
    /// every output coordinate contributes a distinct weight.
    fn project(g: &mut Graph, x: Var, seed: u64) -> TResult<Var> {
        let (r, c) = (g.value(x).rows(), g.value(x).cols());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(&mut rng, r, c));
        let prod = g.mul(x, w)?;
        g.sum(prod)
    }

    type UnaryCase = (&'static str, fn(&mut Graph, Var) -> TResult<Var>, (usize, usize));

    fn unary_cases() -> Vec<UnaryCase> {
        vec![
            ("transpose", |g, x| g.transpose(x), (2, 3)),
            ("affine", |g, x| g.affine(x, -1.5, 0.3), (2, 3)),
            ("col_sum", |g, x| g.col_sum(x), (3, 2)),
            ("row_sum", |g, x| g.row_sum(x), (3, 2)),
            ("sum", |g, x| g.sum(x), (3, 2)),
            ("broadcast_rows", |g, x| g.broadcast_rows(x, 3), (1, 4)),
            ("broadcast_cols", |g, x| g.broadcast_cols(x, 3), (4, 1)),
            ("fill", |g, x| g.fill(x, 2, 3), (1, 1)),
            ("sigmoid", |g, x| g.sigmoid(x), (2, 3)),
            ("relu", |g, x| g.relu(x), (2, 3)),
            ("exp", |g, x| g.exp(x), (2, 3)),
            ("log", |g, x| {
                let y = g.affine(x, 1.0, 2.0)?;
                g.log(y)
            }, (2, 3)),
            ("sqrt", |g, x| {
                let y = g.affine(x, 1.0, 2.0)?;
                g.sqrt(y)
            }, (2, 3)),
            ("recip", |g, x| {
                let y = g.affine(x, 1.0, 2.0)?;
                g.recip(y)
            }, (2, 3)),
            ("softmax_rows", |g, x| g.softmax_rows(x), (2, 4)),
            ("log_softmax_rows", |g, x| g.log_softmax_rows(x), (2, 4)),
            ("layer_norm_rows", |g, x| g.layer_norm_rows(x, 1e-5), (2, 5)),
            ("l2norm", |g, x| g.l2norm(x), (2, 3)),
            ("slice_cols", |g, x| g.slice_cols(x, 1, 2), (2, 4)),
            ("slice_rows", |g, x| g.slice_rows(x, 1, 2), (4, 2)),
            ("pad_cols", |g, x| g.pad_cols(x, 1, 5), (2, 2)),
            ("pad_rows", |g, x| g.pad_rows(x, 2, 5), (2, 2)),
            ("reshape", |g, x| g.reshape(x, 3, 2), (2, 3)),
            ("sum_squares", |g, x| g.sum_squares(x), (2, 3)),
        ]
    }

    type BinaryCase = (
        &'static str,
        fn(&mut Graph, Var, Var) -> TResult<Var>,
        (usize, usize),
        (usize, usize),
    );

    fn binary_cases() -> Vec<BinaryCase> {
        vec![
            ("matmul", |g, a, b| g.matmul(a, b), (3, 4), (4, 2)),
            ("matmul_nt", |g, a, b| g.matmul_nt(a, b), (3, 4), (2, 4)),
            ("matmul_tn", |g, a, b| g.matmul_tn(a, b), (4, 3), (4, 2)),
            ("outer", |g, a, b| g.outer(a, b), (1, 3), (1, 2)),
            ("add", |g, a, b| g.add(a, b), (2, 3), (2, 3)),
            ("sub", |g, a, b| g.sub(a, b), (2, 3), (2, 3)),
            ("mul", |g, a, b| g.mul(a, b), (2, 3), (2, 3)),
            ("scale_by", |g, a, b| g.scale_by(a, b), (2, 3), (1, 1)),
            ("add_row", |g, a, b| g.add_row(a, b), (3, 2), (1, 2)),
            ("concat_cols", |g, a, b| g.concat_cols(&[a, b]), (2, 3), (2, 1)),
            ("concat_rows", |g, a, b| g.concat_rows(&[a, b]), (1, 3), (2, 3)),
        ]
    }

    #[test]
    fn every_unary_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, op, (r, c)) in unary_cases() {
            let x = random(&mut rng, r, c);
            let err = gradient_check(|g, v| {
                let y = op(g, v)?;
                project(g, y, 3)
            }, &x, EPS)
            .unwrap();
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn every_binary_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (name, op, sa, sb) in binary_cases() {
            let a = random(&mut rng, sa.0, sa.1);
            let b = random(&mut rng, sb.0, sb.1);
            let report = gradient_check_many(
                |g, v| {
                    let y = op(g, v[0], v[1])?;
                    project(g, y, 5)
                },
                &[a, b],
                EPS,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{name}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn decay_mix_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = vec![
            random(&mut rng, 2, 3),
            random(&mut rng, 2, 3),
            random(&mut rng, 2, 3),
            Tensor::scalar(0.3),
        ];
        let report = gradient_check_many(
            |g, v| {
                let y = g.decay_mix(v[0], v[1], v[2], v[3])?;
                project(g, y, 9)
            },
            &params,
            EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    /// Differentiates `‖∇ₓ s(op(x))‖²`, which only has a correct gradient if
    /// the adjoint of every op is itself correctly taped.
    #[test]
    fn every_adjoint_is_itself_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for (name, op, (r, c)) in unary_cases() {
            if name == "relu" {
                continue; // piecewise linear: second derivative is zero a.e.
            }
            let x = random(&mut rng, r, c);
            let err = gradient_check(|g, v| {
                let y = op(g, v)?;
                let s = project(g, y, 3)?;
                let dx = g.grad(s, &[v], true)?[0];
                let p = project(g, dx, 4)?;
                g.mul(p, p)
            }, &x, EPS)
            .unwrap();
            assert!(err < 1e-6, "{name}: second-order rel err {err}");
        }
        for (name, op, sa, sb) in binary_cases() {
            let a = random(&mut rng, sa.0, sa.1);
            let b = random(&mut rng, sb.0, sb.1);
            let report = gradient_check_many(
                |g, v| {
                    let y = op(g, v[0], v[1])?;
                    let s = project(g, y, 5)?;
                    let sq = g.mul(s, s)?;
                    let d = g.grad(sq, &[v[0], v[1]], true)?;
                    let p0 = project(g, d[0], 6)?;
                    let p1 = project(g, d[1], 7)?;
                    g.add(p0, p1)
                },
                &[a, b],
                EPS,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{name}: second-order {}", report.max_rel_error);
        }
    }

    #[test]
    fn two_layer_mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = vec![
            random(&mut rng, 4, 5),
            random(&mut rng, 1, 5),
            random(&mut rng, 5, 3),
            random(&mut rng, 1, 3),
        ];
        let x = random(&mut rng, 6, 4);
        let target = random(&mut rng, 6, 3);
        let report = gradient_check_many(
            |g, v| {
                let xi = g.constant(x.clone());
                let h = g.matmul(xi, v[0])?;
                let h = g.add_row(h, v[1])?;
                let h = g.sigmoid(h)?;
                let o = g.matmul(h, v[2])?;
                let o = g.add_row(o, v[3])?;
                let t = g.constant(target.clone());
                let d = g.sub(o, t)?;
                g.sum_squares(d)
            },
            &params,
            EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn square_at_one() {
        let err = gradient_check(|g, x| g.mul(x, x), &Tensor::scalar(1.0), 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = gradient_check(|g, x| {
            let z = g.scale(x, 0.0)?;
            g.sum(z)
        }, &Tensor::row(vec![1.0, 2.0]), 1e-5)
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_function_is_an_oracle_error() {
        let res = gradient_check(|g, x| {
            let r = g.recip(x)?;
            g.sum(r)
        }, &Tensor::scalar(0.0), 1e-5);
        assert!(res.is_err());
    }

    #[test]
    fn tape_replay_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, 4, 4);
        let x = random(&mut rng, 3, 4);
        let run = || {
            let mut g = Graph::new();
            let wv = g.leaf(w.clone());
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, wv).unwrap();
            let h = g.layer_norm_rows(h, 1e-5).unwrap();
            let s = g.softmax_rows(h).unwrap();
            let l = g.sum_squares(s).unwrap();
            g.gradients(l, &[wv]).unwrap().remove(0)
        };
        let a = run();
        let b = run();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x0 = random(&mut rng, 2, 3);
                let mut g = Graph::new();
                let x = g.leaf(x0);
                let f = g.sigmoid(x).unwrap();
                let f = g.sum_squares(f).unwrap();
                let h = g.exp(x).unwrap();
                let h = g.sum(h).unwrap();
                let af = g.scale(f, a).unwrap();
                let bh = g.scale(h, b).unwrap();
                let comb = g.add(af, bh).unwrap();
                let gc = g.gradients(comb, &[x]).unwrap().remove(0);
                let gf = g.gradients(f, &[x]).unwrap().remove(0);
                let gh = g.gradients(h, &[x]).unwrap().remove(0);
                for i in 0..6 {
                    let expect = a * gf.data()[i] + b * gh.data()[i];
                    prop_assert!((gc.data()[i] - expect).abs() < 1e-12 * (1.0 + expect.abs()));
                }
            }

            #[test]
            fn softmax_is_a_probability_simplex(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
                let mut g = Graph::new();
                let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
                let s = g.softmax_rows(x).unwrap();
                for r in 0..3 {
                    let row: Vec<f64> = (0..4).map(|c| g.value(s).get(r, c)).collect();
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row.iter().all(|v| *v >= 0.0));
                }
            }

            #[test]
            fn l2norm_matches_scalar_loop(vals in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
                let mut g = Graph::new();
                let x = g.constant(Tensor::row(vals.clone()));
                let n = g.l2norm(x).unwrap();
                let mut acc = 0.0;
                for v in &vals {
                    acc += v * v;
                }
                prop_assert!((g.scalar(n) - acc.sqrt()).abs() < 1e-12);
            }
        }
    }
}
