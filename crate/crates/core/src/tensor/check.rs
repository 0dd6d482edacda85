use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Comparison of analytic and central-difference gradients for one input.
#[derive(Clone, Debug)]
pub struct InputCheck {
    /// `max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the largest absolute discrepancy.
    pub worst_index: usize,
    /// Set when the loss or a gradient was non-finite; names the element.
    pub non_finite: Option<String>,
    /// Elements whose difference quotient had to be taken with a step below
    /// `h` because `D(h)` and `D(h/2)` disagreed (a kink within `h`).
    pub refined: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs
            .iter()
            .all(|c| c.non_finite.is_none() && c.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|c| {
                if c.non_finite.is_some() {
                    f64::INFINITY
                } else {
                    c.max_rel_error
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Checks the analytic gradient of the scalar function `f` against central
/// differences with step `h`, for every element of every input.
///
/// `f` receives a fresh graph and one differentiable leaf per input and must
/// return a one-element node. The relative error of an input is measured
/// against the larger of the two gradients' max-norms, so elements whose
/// true derivative is tiny do not dominate the report.
///
/// Piecewise-smooth functions (ReLU, `abs`, bilinear lookups) have kinks; a
/// step that straddles one yields a difference quotient unrelated to the
/// derivative at the point. Each element's quotient is therefore compared
/// with the one at `h/2`, and the step keeps halving while the two disagree,
/// down to `sqrt(eps)` of the element type.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-4, 1e-2]"
        )));
    }
    let eval = |vals: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out)?.into_f64())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t)).collect();
    let out = f(&mut g, &vars)?;
    let base = g.scalar(out)?.into_f64();
    let mut reports = Vec::with_capacity(inputs.len());
    if !base.is_finite() {
        for _ in inputs {
            reports.push(InputCheck {
                max_rel_error: f64::INFINITY,
                max_abs_error: f64::INFINITY,
                worst_index: 0,
                non_finite: Some(format!("loss value {base}")),
                refined: 0,
            });
        }
        return Ok(GradCheckReport { inputs: reports, tol });
    }
    g.backward(out)?;

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.into_f64()).collect(),
            None => vec![0.0; inputs[k].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut non_finite = analytic
            .iter()
            .position(|a| !a.is_finite())
            .map(|i| format!("analytic gradient of input {k} at element {i}"));
        let mut refined = 0;
        for i in 0..analytic.len() {
            let orig = work[k].data()[i];
            let x = orig.into_f64();
            let min_step = T::epsilon().into_f64().sqrt() * x.abs().max(1.0);
            let mut quotient = |step: f64| -> Result<f64> {
                let (xp, xm) = (T::of_f64(x + step), T::of_f64(x - step));
                work[k].data_mut()[i] = xp;
                let plus = eval(&work)?;
                work[k].data_mut()[i] = xm;
                let minus = eval(&work)?;
                work[k].data_mut()[i] = orig;
                Ok((plus - minus) / (xp - xm).into_f64())
            };
            let mut step = h;
            let mut d = quotient(step)?;
            while d.is_finite() && step / 2.0 >= min_step {
                let finer = quotient(step / 2.0)?;
                let noise = T::epsilon().into_f64() * (base.abs() + 1.0) / step;
                let size = d.abs().max(finer.abs()).max(analytic[i].abs());
                let agree = (d - finer).abs() <= 0.1 * tol * size + 4.0 * noise;
                d = finer;
                if agree {
                    break;
                }
                step /= 2.0;
            }
            if step < h {
                refined += 1;
            }
            if !d.is_finite() && non_finite.is_none() {
                non_finite = Some(format!("loss at input {k} element {i} +/- h"));
            }
            numeric.push(d);
        }
        let scale = analytic
            .iter()
            .chain(&numeric)
            .fold(0f64, |m, x| m.max(x.abs()));
        let (mut worst, mut max_abs) = (0, 0f64);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = (a - n).abs();
            if e > max_abs {
                max_abs = e;
                worst = i;
            }
        }
        let rel = if scale > 0.0 { max_abs / scale } else { 0.0 };
        reports.push(InputCheck {
            max_rel_error: rel,
            max_abs_error: max_abs,
            worst_index: worst,
            non_finite,
            refined,
        });
    }
    Ok(GradCheckReport { inputs: reports, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn sum_of_squares_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[4, 3], &mut rng);
        let rep = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum(s))
            },
            &[x],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn sum_of_squares_passes_in_f32() {
        let x = Tensor::<f32>::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        let rep = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum(s))
            },
            &[x],
            1e-2,
            1e-3,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn wrong_backward_rule_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[5], &mut rng);
        let rep = grad_check(
            |g, v| {
                let xs = g.value(v[0]).to_vec();
                let out = Tensor::new(vec![5], xs.iter().map(|x| x * x).collect())?;
                // deliberately 3x instead of 2x
                let sq = g.custom(
                    &[v[0]],
                    out,
                    Box::new(|ins, _out, go| {
                        vec![ins[0].iter().zip(go).map(|(x, g)| 3.0 * x * g).collect()]
                    }),
                );
                Ok(g.sum(sq))
            },
            &[x],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(!rep.passed());
        assert!(rep.max_rel_error() > 0.1);
    }

    #[test]
    fn non_finite_loss_fails_with_location() {
        let x = Tensor::<f64>::new(vec![2], vec![0.0, 1.0]).unwrap();
        let rep = grad_check(
            |g, v| {
                let l = g.log(v[0]);
                Ok(g.sum(l))
            },
            &[x],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(!rep.passed());
        assert!(rep.inputs[0].non_finite.is_some());
    }

    #[test]
    fn kink_inside_step_is_resolved() {
        // |x| at 3e-5: the first step straddles the kink and would give 0.3
        let x = Tensor::<f64>::new(vec![2], vec![3e-5, -0.7]).unwrap();
        let rep = grad_check(
            |g, v| {
                let a = g.abs(v[0]);
                Ok(g.sum(a))
            },
            &[x],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.inputs[0].refined, 1);
    }

    #[test]
    fn step_outside_allowed_range_is_rejected() {
        let x = Tensor::<f64>::scalar(1.0);
        let f = |g: &mut Graph<f64>, v: &[Var]| Ok(g.square(v[0]));
        assert!(grad_check(f, &[x.clone()], 1e-6, 1e-3).is_err());
        assert!(grad_check(f, &[x], 0.1, 1e-3).is_err());
    }
}
