use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Per-leaf outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over the leaf's elements of `|analytic − numeric| / max(1, |analytic|)`.
    pub per_leaf: Vec<f64>,
    pub max_rel_error: f64,
}

fn eval<F>(f: &F, leaves: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    if g.check_finite().is_err() {
        return f64::NAN;
    }
    g.value(out).item()
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// `f` must be deterministic (rebuild any dropout stream inside it). A failed
/// backward pass or a non-finite probe yields an infinite error.
pub fn gradient_report<F>(leaves: &[Tensor], eps: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "finite-difference step {eps} outside [1e-7, 1e-3]"
    );
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    if g.backward(out).is_err() {
        return GradCheckReport {
            per_leaf: vec![f64::INFINITY; leaves.len()],
            max_rel_error: f64::INFINITY,
        };
    }
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut probe = leaves.to_vec();
    let mut per_leaf = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut worst = 0.0f64;
        for e in 0..leaves[li].len() {
            let orig = leaves[li].values()[e];
            probe[li].values_mut()[e] = orig + eps;
            let up = eval(&f, &probe);
            probe[li].values_mut()[e] = orig - eps;
            let down = eval(&f, &probe);
            probe[li].values_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[li].values()[e];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = if err.is_nan() {
                f64::INFINITY
            } else {
                worst.max(err)
            };
        }
        per_leaf.push(worst);
    }
    let max_rel_error = per_leaf.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        per_leaf,
        max_rel_error,
    }
}

/// Max relative discrepancy between analytic and central-difference gradients.
pub fn check_gradients<F>(leaves: &[Tensor], eps: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    gradient_report(leaves, eps, f).max_rel_error
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        let err = check_gradients(&[x], 1e-6, |g, _| g.constant(Tensor::scalar(4.0)));
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_custom_gradient_is_detected() {
        let x = Tensor::from_vec(vec![0.7, -1.3]);
        let err = check_gradients(&[x], 1e-6, |g, v| {
            let xv = g.value(v[0]).clone();
            let sq = Tensor::new(
                xv.shape().to_vec(),
                xv.values().iter().map(|a| a * a).collect(),
            )
            .unwrap();
            // d(x²)/dx reported as x instead of 2x
            let y = g.custom(
                &[v[0]],
                sq,
                Box::new(|ins, _, gout| {
                    vec![ins[0]
                        .values()
                        .iter()
                        .zip(gout)
                        .map(|(a, g)| a * g)
                        .collect()]
                }),
            );
            g.sum(y)
        });
        assert!(err > 0.1, "{err}");
    }

    #[test]
    #[should_panic(expected = "finite-difference step")]
    fn rejects_out_of_range_step() {
        check_gradients(&[Tensor::scalar(1.0)], 0.1, |g, v| g.sum(v[0]));
    }
}
