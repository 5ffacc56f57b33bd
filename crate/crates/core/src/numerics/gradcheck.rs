use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub epsilon: f64,
    pub tolerance: f64,
    /// Tensors larger than this are subsampled.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_coords_per_tensor: 64,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// `loss` builds a fresh graph from the given parameters and returns the
/// scalar loss node; it is called once for the analytic pass and twice per
/// checked coordinate.
pub fn finite_diff_grad_check<F>(
    store: &ParamStore,
    loss: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if config.epsilon <= 0.0 {
        return Err(Error::usage("grad check epsilon must be positive"));
    }
    let mut graph = Graph::new();
    let out = loss(&mut graph, store)?;
    graph.check_finite()?;
    let analytic = graph.backward_for(out, store)?;
    drop(graph);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(&mut g, s)?;
        g.check_finite()?;
        Ok(g.value(v).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        tolerance: config.tolerance,
    };

    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= config.max_coords_per_tensor {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, config.max_coords_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        for idx in coords {
            let original = work.get(id).data()[idx];
            work.get_mut(id).data_mut()[idx] = original + config.epsilon;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[idx] = original - config.epsilon;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * config.epsilon);
            let a = analytic.get(id).data()[idx];
            let err = relative_error(a, numeric, config.abs_floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(CoordinateCheck {
                    param: store.name(id).to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn linear_layer_is_exact_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("w", random_tensor(&mut rng, 5, 3)).unwrap();
        store.add("b", random_tensor(&mut rng, 1, 3)).unwrap();
        let x = random_tensor(&mut rng, 4, 5);
        let report = finite_diff_grad_check(
            &store,
            |g, s| {
                let xv = g.input(x.clone());
                let w = g.param(s, s.id("w").unwrap());
                let b = g.param(s, s.id("b").unwrap());
                let y = g.matmul(xv, w)?;
                let y = g.add(y, b)?;
                Ok(g.sum_all(y))
            },
            &GradCheckConfig {
                tolerance: 1e-8,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.coords_checked, 18);
    }

    #[test]
    fn sigmoid_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.add("p", random_tensor(&mut rng, 3, 4)).unwrap();
        let report = finite_diff_grad_check(
            &store,
            |g, s| {
                let p = g.param(s, s.id("p").unwrap());
                let a = g.sigmoid(p);
                let b = g.scale(a, 3.0);
                let c = g.sigmoid(b);
                let d = g.mul(c, p)?;
                Ok(g.sum_all(d))
            },
            &GradCheckConfig {
                tolerance: 1e-6,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn subsamples_large_tensors() {
        let mut store = ParamStore::new();
        store.add("big", Tensor::full(&[20, 20], 0.5)).unwrap();
        let report = finite_diff_grad_check(
            &store,
            |g, s| {
                let p = g.param(s, s.id("big").unwrap());
                let sq = g.mul(p, p)?;
                Ok(g.sum_all(sq))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.coords_checked, 64);
        assert!(report.passed());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // clamp_min deliberately zeroes the gradient below the floor, so a
        // loss that sits exactly on the kink from above disagrees with
        // central differences.
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0)).unwrap();
        let report = finite_diff_grad_check(
            &store,
            |g, s| {
                let p = g.param(s, s.id("p").unwrap());
                Ok(g.clamp_min(p, 1.0))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let store = ParamStore::new();
        let cfg = GradCheckConfig {
            epsilon: 0.0,
            ..GradCheckConfig::default()
        };
        assert!(finite_diff_grad_check(&store, |g, _| Ok(g.input(Tensor::scalar(0.0))), &cfg).is_err());
    }
}
