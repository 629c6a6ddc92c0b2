use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub epsilon: f64,
    /// Check a seeded random subset of this many coordinates; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Combine steps `h` and `h/2` (Richardson) to cancel the leading truncation term.
    pub extrapolate: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_coords: Some(500),
            seed: 0,
            extrapolate: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<CoordError>,
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central finite differences.
pub fn grad_check<F>(params: &mut ParamStore<f64>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let root = f(&mut g)?;
        g.backward(root)?
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id.index(), i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(max) if max < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = rand::seq::index::sample(&mut rng, coords.len(), max).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut eval_at = |params: &mut ParamStore<f64>, pi: usize, i: usize, delta: f64| -> Result<f64> {
        let id = ParamId(pi);
        let orig = params.get(id).value.data()[i];
        params.get_mut(id).value.data_mut()[i] = orig + delta;
        let value = {
            let mut g = Graph::new(params);
            let root = f(&mut g)?;
            g.scalar(root)
        };
        params.get_mut(id).value.data_mut()[i] = orig;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("objective at perturbed coordinate {i}")));
        }
        Ok(value)
    };

    let h = opts.epsilon;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (pi, i) in chosen {
        let central = |eval: &mut dyn FnMut(f64) -> Result<f64>, step: f64| -> Result<f64> {
            Ok((eval(step)? - eval(-step)?) / (2.0 * step))
        };
        let mut eval = |d: f64| eval_at(params, pi, i, d);
        let numeric = if opts.extrapolate {
            let coarse = central(&mut eval, h)?;
            let fine = central(&mut eval, h / 2.0)?;
            (4.0 * fine - coarse) / 3.0
        } else {
            central(&mut eval, h)?
        };
        let id = ParamId(pi);
        let a = analytic.get(id).map(|g| g[i]).unwrap_or(0.0);
        let err = relative_error(a, numeric);
        report.coords_checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(CoordError {
                param: params.get(id).name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: err,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Tensor;

    #[test]
    fn sum_of_squares() {
        let mut s = ParamStore::new();
        s.add("text.x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let r = grad_check(
            &mut s,
            |g| {
                let x = g.param(ParamId(0));
                let y = g.mul(x, x)?;
                Ok(g.sum_all(y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.coords_checked, 2);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let w = r.worst.unwrap();
        assert!([2.0, 4.0].contains(&w.analytic));
    }

    #[test]
    fn constant_objective() {
        let mut s = ParamStore::new();
        s.add("text.x", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let r = grad_check(
            &mut s,
            |g| Ok(g.constant(Tensor::from_f64(&[1], &[4.0]).unwrap())),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        let w = r.worst.unwrap();
        assert_eq!((w.analytic, w.numeric), (0.0, 0.0));
    }

    #[test]
    fn subset_is_seeded() {
        let mut s = ParamStore::new();
        s.add("text.x", Tensor::from_f64(&[300], &vec![0.5; 300]).unwrap()).unwrap();
        let opts = GradCheckOptions {
            max_coords: Some(200),
            ..GradCheckOptions::default()
        };
        let f = |g: &mut Graph<'_, f64>| {
            let x = g.param(ParamId(0));
            let y = g.exp(x);
            Ok(g.sum_all(y))
        };
        let r = grad_check(&mut s, f, &opts).unwrap();
        assert_eq!(r.coords_checked, 200);
    }

    #[test]
    fn non_finite_perturbation_is_an_error() {
        let mut s = ParamStore::new();
        s.add("text.x", Tensor::from_f64(&[1], &[0.0]).unwrap()).unwrap();
        let r = grad_check(
            &mut s,
            |g| {
                let x = g.param(ParamId(0));
                let e = g.exp(x);
                let v = g.params().get(ParamId(0)).value.data()[0];
                Ok(if v != 0.0 { g.scale(e, f64::INFINITY) } else { e })
            },
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
