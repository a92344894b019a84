//! Central-difference verification of analytic gradients, always in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{Binding, ParamId, ParameterSet};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates probed per parameter; all of them when the parameter is smaller.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords_per_param: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
    pub per_parameter: Vec<(String, f64)>,
    /// Set when a non-finite gradient was seen: `name[index]`.
    pub failure: Option<String>,
    pub coords_checked: usize,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {} max_rel={:.3e} max_abs={:.3e} coords={}",
            self.op_name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.max_abs_error,
            self.coords_checked
        )?;
        if let Some(bad) = &self.failure {
            write!(f, " non-finite at {bad}")?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(params: &ParameterSet<f64>, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &mut Binding<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut b = Binding::new(&mut g, params, true);
    let out = f(&mut g, &mut b)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Invalid(format!(
            "gradient check needs a scalar objective, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences on every trainable entry of `params`. `params` is restored
/// before returning.
pub fn grad_check<F>(
    op_name: &str,
    params: &mut ParameterSet<f64>,
    cfg: &GradCheckConfig,
    mut f: F,
) -> Result<GradReport>
where
    F: FnMut(&mut Graph<f64>, &mut Binding<f64>) -> Result<Var>,
{
    if !(cfg.eps > 0.0 && cfg.eps <= 1e-2) {
        return Err(Error::Invalid(format!("eps {} outside (0, 1e-2]", cfg.eps)));
    }
    let analytic = {
        let mut g = Graph::new();
        let mut b = Binding::new(&mut g, params, true);
        let out = f(&mut g, &mut b)?;
        let mut grads = g.backward(out)?;
        b.grads(&mut grads)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradReport {
        op_name: op_name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        passed: true,
        per_parameter: Vec::new(),
        failure: None,
        coords_checked: 0,
    };
    for idx in 0..params.len() {
        let entry = &params.entries()[idx];
        if !entry.trainable {
            continue;
        }
        let name = entry.name.clone();
        let n = entry.value.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let id = ParamId(idx);
        let mut worst = 0.0f64;
        for i in coords {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + cfg.eps;
            let plus = evaluate(params, &mut f);
            params.get_mut(id).data_mut()[i] = orig - cfg.eps;
            let minus = evaluate(params, &mut f);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let a = analytic[idx].as_ref().map_or(0.0, |g| g.data()[i]);
            report.coords_checked += 1;
            if !a.is_finite() || !numeric.is_finite() {
                report.passed = false;
                report.failure.get_or_insert_with(|| format!("{name}[{i}]"));
                worst = f64::INFINITY;
                continue;
            }
            let rel = relative_error(a, numeric);
            worst = worst.max(rel);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_parameter.push((name, worst));
    }
    report.passed &= report.max_rel_error <= cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::CustomOp;
    use crate::numerics::tensor::Tensor;

    fn single(name: &str, data: &[f64]) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        ps.insert(name, Tensor::from_f64(&[data.len()], data).unwrap(), true)
            .unwrap();
        ps
    }

    #[test]
    fn quadratic_matches_exactly() {
        let mut ps = single("theta", &[3.0]);
        let id = ps.id("theta").unwrap();
        let rep = grad_check("half_sq", &mut ps, &GradCheckConfig::default(), |g, b| {
            let x = b.var(id);
            let sq = g.mul(x, x)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        })
        .unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_error < 1e-9, "{rep}");
        assert_eq!(ps.get(id).data(), &[3.0]);
    }

    #[test]
    fn softmax_cross_entropy_agrees_with_closed_form() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let target = 2;
        let mut ps = single("z", &logits);
        let id = ps.id("z").unwrap();
        let onehot = {
            let mut v = vec![0.0; 4];
            v[target] = 1.0;
            Tensor::from_f64(&[4], &v).unwrap()
        };
        let build = |g: &mut Graph<f64>, b: &mut Binding<f64>| {
            let z = b.var(id);
            let lp = g.log_softmax(z);
            let t = g.constant(onehot.clone());
            let picked = g.mul(lp, t)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0))
        };
        let rep = grad_check("softmax_ce", &mut ps, &GradCheckConfig::default(), build).unwrap();
        assert!(rep.passed, "{rep}");

        // second route: d/dz = softmax(z) - onehot
        let mut g = Graph::new();
        let mut b = Binding::new(&mut g, &ps, true);
        let loss = build(&mut g, &mut b).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let analytic = b.grads(&mut grads)[0].clone().unwrap();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for (i, &l) in logits.iter().enumerate() {
            let expect = (l - mx).exp() / z - if i == target { 1.0 } else { 0.0 };
            assert!((analytic.data()[i] - expect).abs() < 1e-12);
        }
    }

    struct WrongSquare;

    impl CustomOp<f64> for WrongSquare {
        fn name(&self) -> &str {
            "wrong_square"
        }
        fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
            let x = inputs[0];
            Tensor::new(x.shape(), x.data().iter().map(|v| v * v).collect())
        }
        fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, g: &[f64]) -> Vec<Vec<f64>> {
            // should be 2x
            vec![inputs[0].data().iter().zip(g).map(|(x, g)| 3.0 * x * g).collect()]
        }
    }

    #[test]
    fn wrong_backward_is_caught() {
        let mut ps = single("x", &[0.5, -1.5, 2.0]);
        let id = ps.id("x").unwrap();
        let rep = grad_check("wrong", &mut ps, &GradCheckConfig::default(), |g, b| {
            let y = g.custom(Box::new(WrongSquare), &[b.var(id)])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(!rep.passed);
        assert!(rep.max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut ps = single("x", &[0.0, 1.0]);
        let id = ps.id("x").unwrap();
        let rep = grad_check("sqrt_abs", &mut ps, &GradCheckConfig::default(), |g, b| {
            // normalizing a zero-adjacent row is fine; force a NaN through 0 * inf
            let x = b.var(id);
            let inf = g.constant(Tensor::from_f64(&[2], &[f64::INFINITY, 1.0]).unwrap());
            let y = g.mul(x, inf)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.failure.as_deref(), Some("x[0]"));
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let mut ps = single("x", &[1.0]);
        let cfg = GradCheckConfig {
            eps: 0.1,
            ..Default::default()
        };
        assert!(grad_check("x", &mut ps, &cfg, |g, b| Ok(g.sum(b.var(ParamId(0))))).is_err());
    }
}
