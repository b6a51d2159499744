//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Most coordinates compared per parameter; larger parameters are sampled.
pub const MAX_COORDS: usize = 256;

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradientReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// `|ad - fd| / max(|ad|, |fd|, 1e-8)`
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    Ok(v)
}

/// Compares tape gradients of `f` against central differences with step
/// `eps`, on at most [`MAX_COORDS`] seeded coordinates per parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tolerance: f64, seed: u64) -> Result<GradientReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, params, eps, tolerance, seed, MAX_COORDS)
}

/// As [`grad_check`] with a custom per-parameter coordinate budget.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    tolerance: f64,
    seed: u64,
    max_coords: usize,
) -> Result<GradientReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = Rng::new(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let ad = grads.get(*var).expect("every param has a gradient");
        let n = params[pi].len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            for i in 0..max_coords {
                let j = i + rng.below(n - i);
                all.swap(i, j);
            }
            all.truncate(max_coords);
            all
        };
        let mut rep = ParamReport { max_rel_err: 0.0, worst_index: coords.first().copied().unwrap_or(0), coords_checked: coords.len() };
        for &c in &coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let up = eval(&f, &work)?;
            work[pi].data_mut()[c] = orig - eps;
            let down = eval(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = relative_error(ad.data()[c], fd);
            if err > rep.max_rel_err {
                rep.max_rel_err = err;
                rep.worst_index = c;
            }
        }
        reports.push(rep);
    }
    let passed = reports.iter().all(|r| r.max_rel_err < tolerance);
    Ok(GradientReport { params: reports, tolerance, passed })
}

/// Central differences along random unit directions spanning every
/// parameter at once.
#[derive(Clone, Debug)]
pub struct DirectionalReport {
    /// `(autodiff, finite difference)` directional derivative per direction.
    pub pairs: Vec<(f64, f64)>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `<grad, u>` against `(f(θ + eps·u) - f(θ - eps·u)) / 2eps` for
/// `directions` seeded Gaussian directions `u` of unit norm.
pub fn directional_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    tolerance: f64,
    seed: u64,
    directions: usize,
) -> Result<DirectionalReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let grads: Vec<&Tensor> = vars.iter().map(|v| grads.get(*v).expect("every param has a gradient")).collect();

    let mut rng = Rng::new(seed);
    let mut pairs = Vec::with_capacity(directions);
    for _ in 0..directions {
        let mut u: Vec<Tensor> = params.iter().map(|p| rng.normal_tensor(p.shape().to_vec(), 1.0)).collect();
        let norm = u.iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        u.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v /= norm));
        let ad: f64 = grads.iter().zip(&u).map(|(g, d)| g.dot(d)).sum::<Result<f64>>()?;
        let shifted = |sign: f64| -> Vec<Tensor> {
            params.iter().zip(&u).map(|(p, d)| p.zip_map(d, "directional_check", |a, b| a + sign * eps * b).unwrap()).collect()
        };
        let fd = (eval(&f, &shifted(1.0))? - eval(&f, &shifted(-1.0))?) / (2.0 * eps);
        pairs.push((ad, fd));
    }
    let max_rel_err = pairs.iter().map(|&(a, b)| relative_error(a, b)).fold(0.0, f64::max);
    Ok(DirectionalReport { pairs, max_rel_err, tolerance, passed: max_rel_err < tolerance })
}
