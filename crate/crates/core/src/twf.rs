//! Thresholded Wirtinger flow for the quartic least-squares objective
//! `f(b) = 1/(4n) sum_j ((x_j' b)^2 - y_j)^2`.
//!
//! The solver selects a candidate support from the marginal statistics
//! `1/n sum_j y_j x_jk^2`, takes the leading eigenvector of the measurement
//! weighted covariance on that support as a starting point, and then runs
//! gradient descent with per-iteration soft thresholding over all `p`
//! coordinates.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{estimate_noise, project, Instance, NoiseEstimate, SignalVector};

/// Guard on divisions by `phi^2`.
const TINY: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwfTuning {
    /// Step size; the actual gradient step is `mu / phi^2`.
    pub mu: f64,
    /// Support selection margin for the spectral start.
    pub alpha_init: f64,
    /// Threshold constant for the iterates.
    pub c_thr: f64,
    pub max_iter: usize,
    /// Relative l2 change below which the iteration stops.
    pub tol: f64,
    pub power_iter_tol: f64,
    pub power_iter_max: usize,
    /// Evaluate the objective at every gradient-step point and count ascents.
    pub check_descent: bool,
}

impl Default for TwfTuning {
    fn default() -> Self {
        Self {
            mu: 0.1,
            alpha_init: 1.0,
            c_thr: 1.0,
            max_iter: 500,
            tol: 1e-7,
            power_iter_tol: 1e-9,
            power_iter_max: 1000,
            check_descent: false,
        }
    }
}

impl TwfTuning {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Error::invalid(format!("tuning: {what} out of range ({v})"));
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(bad("mu must lie in (0, 1]", self.mu));
        }
        if !(self.alpha_init.is_finite() && self.alpha_init > 0.0) {
            return Err(bad("alpha_init must be positive", self.alpha_init));
        }
        if !(self.c_thr.is_finite() && self.c_thr >= 0.0) {
            return Err(bad("c_thr must be nonnegative", self.c_thr));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(bad("tol must be positive", self.tol));
        }
        if self.power_iter_tol.is_nan() || self.power_iter_tol <= 0.0 {
            return Err(bad("power_iter_tol must be positive", self.power_iter_tol));
        }
        if self.max_iter == 0 || self.power_iter_max == 0 {
            return Err(Error::invalid("tuning: iteration limits must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalEstimate {
    pub beta_tilde: SignalVector,
    pub iterations: usize,
    /// Coordinates selected for the spectral start.
    pub init_support: Vec<usize>,
    pub noise: NoiseEstimate,
    pub converged: bool,
    pub power_converged: bool,
    /// Gradient steps that increased the objective; only counted when
    /// `TwfTuning::check_descent` is set.
    pub descent_violations: usize,
}

fn check_dims(b: &SignalVector, inst: &Instance) -> Result<()> {
    if b.len() != inst.p() {
        return Err(Error::invalid(format!(
            "signal has length {} but the design has {} columns",
            b.len(),
            inst.p()
        )));
    }
    Ok(())
}

/// `X' v`, accumulated row by row in index order.
fn transpose_times(x: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(x.ncols());
    for (row, &c) in x.rows().into_iter().zip(v) {
        if c != 0.0 {
            out.scaled_add(c, &row);
        }
    }
    out
}

/// Gradient and the threshold scale `sqrt(1/n sum r_j^2 z_j^2)` at `b`,
/// where `z = X b` and `r = z^2 - y`.
fn gradient_and_scale(x: &Array2<f64>, y: &Array1<f64>, b: ArrayView1<'_, f64>) -> (Array1<f64>, f64) {
    let n = x.nrows() as f64;
    let z = project(x, b);
    let weights: Array1<f64> = z.iter().zip(y).map(|(z, y)| (z * z - y) * z).collect();
    let scale = (weights.dot(&weights) / n).sqrt();
    let mut g = transpose_times(x, &weights);
    g /= n;
    (g, scale)
}

fn objective_at(x: &Array2<f64>, y: &Array1<f64>, b: ArrayView1<'_, f64>) -> f64 {
    let z = project(x, b);
    let total: f64 = z.iter().zip(y).map(|(z, y)| (z * z - y).powi(2)).sum();
    total / (4.0 * x.nrows() as f64)
}

pub fn objective(b: &SignalVector, inst: &Instance) -> Result<f64> {
    check_dims(b, inst)?;
    Ok(objective_at(inst.x(), inst.y(), b.view()))
}

/// `1/n sum_j ((x_j' b)^2 - y_j)(x_j' b) x_j`.
pub fn gradient(b: &SignalVector, inst: &Instance) -> Result<Array1<f64>> {
    check_dims(b, inst)?;
    Ok(gradient_and_scale(inst.x(), inst.y(), b.view()).0)
}

pub fn soft_threshold(v: ArrayView1<'_, f64>, rho: f64) -> Array1<f64> {
    v.mapv(|x| {
        let m = x.abs() - rho;
        if m > 0.0 {
            m.copysign(x)
        } else {
            0.0
        }
    })
}

/// Entry of largest magnitude made positive (first such entry on ties).
fn fix_sign(v: &mut Array1<f64>) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

struct PowerResult {
    vector: Array1<f64>,
    converged: bool,
}

fn power_iteration(m: &Array2<f64>, start: Array1<f64>, tol: f64, max_iter: usize) -> PowerResult {
    let dim = m.nrows();
    let mut v = start;
    let norm = v.dot(&v).sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        v = Array1::from_elem(dim, 1.0);
    }
    let norm = v.dot(&v).sqrt();
    v /= norm;
    fix_sign(&mut v);
    for _ in 0..max_iter {
        let mut u = m.dot(&v);
        let un = u.dot(&u).sqrt();
        if !(un.is_finite() && un > 0.0) {
            // v is in the null space (or the matrix is not finite): keep it
            return PowerResult {
                vector: v,
                converged: un == 0.0,
            };
        }
        u /= un;
        fix_sign(&mut u);
        let diff = (&u - &v).mapv(|d| d * d).sum().sqrt();
        v = u;
        if diff < tol {
            return PowerResult {
                vector: v,
                converged: true,
            };
        }
    }
    PowerResult {
        vector: v,
        converged: false,
    }
}

/// Spectral starting point `phi * v` supported on the selected coordinates.
pub fn spectral_init(inst: &Instance, tuning: &TwfTuning) -> Result<SignalEstimate> {
    tuning.validate()?;
    let n = inst.n();
    let p = inst.p();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 measurements, got {n}")));
    }
    let x = inst.x();
    let y = inst.y();
    let noise = estimate_noise(y.view())?;
    let phi_sq = noise.phi_sq;

    let mut stat = Array1::<f64>::zeros(p);
    for (row, &yj) in x.rows().into_iter().zip(y) {
        stat.zip_mut_with(&row, |s, &v| *s += yj * v * v);
    }
    stat /= n as f64;

    let rate = ((n as f64 * p as f64).ln() / n as f64).sqrt();
    let cutoff = phi_sq * (1.0 + tuning.alpha_init * rate);
    let mut selected: Vec<usize> = (0..p).filter(|&k| stat[k] > cutoff).collect();
    if selected.is_empty() {
        let mut best = 0;
        for k in 1..p {
            if stat[k] > stat[best] {
                best = k;
            }
        }
        selected.push(best);
    }

    // (1/n) X_S' diag(y) X_S
    let xs = x.select(Axis(1), &selected);
    let mut weighted = xs.clone();
    for (mut row, &yj) in weighted.rows_mut().into_iter().zip(y) {
        row *= yj;
    }
    let m = xs.t().dot(&weighted) / n as f64;

    let start: Array1<f64> = selected.iter().map(|&k| (stat[k] - cutoff).max(0.0)).collect();
    let power = power_iteration(&m, start, tuning.power_iter_tol, tuning.power_iter_max);

    let phi = phi_sq.max(0.0).sqrt();
    let mut beta0 = Array1::zeros(p);
    for (&k, &v) in selected.iter().zip(&power.vector) {
        beta0[k] = phi * v;
    }

    Ok(SignalEstimate {
        beta_tilde: SignalVector::new(beta0),
        iterations: 0,
        init_support: selected,
        noise,
        converged: false,
        power_converged: power.converged,
        descent_violations: 0,
    })
}

/// Spectral start followed by thresholded gradient descent.
pub fn run_twf(inst: &Instance, tuning: &TwfTuning) -> Result<SignalEstimate> {
    let init = spectral_init(inst, tuning)?;
    refine(inst, tuning, init)
}

/// Thresholded gradient descent from an arbitrary starting point; `start`
/// supplies the initial iterate and the noise estimate.
///
/// Each step is `b <- T_rho(b - (mu/phi^2) grad f(b))` with
/// `rho = c_thr (mu/phi^2) sqrt(log(np)/n) sqrt(1/n sum r_j^2 (x_j'b)^2)`.
/// Near the signal the square-root factor is about `sigma * phi`, and it
/// vanishes at an exact noiseless fit.
pub fn refine(inst: &Instance, tuning: &TwfTuning, start: SignalEstimate) -> Result<SignalEstimate> {
    tuning.validate()?;
    check_dims(&start.beta_tilde, inst)?;
    let n = inst.n();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 measurements, got {n}")));
    }
    let x = inst.x();
    let y = inst.y();
    let step = tuning.mu / start.noise.phi_sq.max(TINY);
    let rate = ((n as f64 * inst.p() as f64).ln() / n as f64).sqrt();

    let mut b = start.beta_tilde.into_inner();
    let mut converged = false;
    let mut iterations = 0;
    let mut violations = 0;
    let mut current_obj = if tuning.check_descent {
        objective_at(x, y, b.view())
    } else {
        f64::NAN
    };

    while iterations < tuning.max_iter {
        let (g, scale) = gradient_and_scale(x, y, b.view());
        let rho = tuning.c_thr * step * rate * scale;
        let moved = &b - &(step * &g);
        iterations += 1;
        // checked before thresholding, which would map NaN to 0
        if !(rho.is_finite() && moved.iter().all(|v| v.is_finite())) {
            return Err(Error::Diverged {
                mu: tuning.mu,
                iteration: iterations,
            });
        }
        let next = soft_threshold(moved.view(), rho);
        if tuning.check_descent {
            if objective_at(x, y, moved.view()) > current_obj {
                violations += 1;
            }
            current_obj = objective_at(x, y, next.view());
        }
        let change = (&next - &b).mapv(|d| d * d).sum().sqrt();
        let size = next.dot(&next).sqrt().max(TINY);
        b = next;
        if change <= tuning.tol * size {
            converged = true;
            break;
        }
    }

    Ok(SignalEstimate {
        beta_tilde: SignalVector::new(b),
        iterations,
        init_support: start.init_support,
        noise: start.noise,
        converged,
        power_converged: start.power_converged,
        descent_violations: violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_instance, generate_signal, seeded_rng};
    use ndarray::array;

    fn naive_objective(b: &SignalVector, inst: &Instance) -> f64 {
        let mut total = 0.0;
        for j in 0..inst.n() {
            let mut z = 0.0;
            for k in 0..inst.p() {
                z += inst.x()[[j, k]] * b[k];
            }
            total += (z * z - inst.y()[j]).powi(2);
        }
        total / (4.0 * inst.n() as f64)
    }

    #[test]
    fn objective_zero_at_truth_when_noiseless() {
        let beta = generate_signal(30, 4, &mut seeded_rng(1)).unwrap();
        let inst = generate_instance(&beta, 60, 0.0, &mut seeded_rng(2)).unwrap();
        assert_eq!(objective(&beta, &inst).unwrap(), 0.0);
    }

    #[test]
    fn objective_hand_value() {
        let inst = Instance::new(array![[1.0, 2.0], [0.5, -1.0]], array![1.0, 1.0]).unwrap();
        assert!((objective(&SignalVector::zeros(2), &inst).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn objective_matches_naive_loop() {
        let mut rng = seeded_rng(3);
        let beta = generate_signal(12, 3, &mut rng).unwrap();
        let inst = generate_instance(&beta, 25, 0.5, &mut rng).unwrap();
        let b = generate_signal(12, 12, &mut rng).unwrap();
        let fast = objective(&b, &inst).unwrap();
        assert!((fast - naive_objective(&b, &inst)).abs() < 1e-12 * fast.max(1.0));
    }

    #[test]
    fn gradient_vanishes_at_truth_and_origin() {
        let beta = generate_signal(30, 4, &mut seeded_rng(4)).unwrap();
        let inst = generate_instance(&beta, 60, 0.0, &mut seeded_rng(5)).unwrap();
        assert!(gradient(&beta, &inst).unwrap().iter().all(|g| *g == 0.0));
        let noisy = generate_instance(&beta, 60, 2.0, &mut seeded_rng(5)).unwrap();
        assert!(gradient(&SignalVector::zeros(30), &noisy)
            .unwrap()
            .iter()
            .all(|g| *g == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let inst = Instance::new(array![[1.0, 2.0]], array![1.0]).unwrap();
        assert!(objective(&SignalVector::zeros(3), &inst).is_err());
        assert!(gradient(&SignalVector::zeros(3), &inst).is_err());
    }

    #[test]
    fn soft_threshold_cases() {
        let v = array![3.0, -1.0, 0.5];
        assert_eq!(soft_threshold(v.view(), 0.0), v);
        assert_eq!(soft_threshold(v.view(), 1.0), array![2.0, 0.0, 0.0]);
        assert_eq!(soft_threshold(v.view(), 3.0), array![0.0, 0.0, 0.0]);
        assert_eq!(soft_threshold(array![-4.0].view(), 1.5), array![-2.5]);
    }

    #[test]
    fn spectral_norm_is_phi_for_constant_measurements() {
        let mut rng = seeded_rng(6);
        let beta = generate_signal(8, 8, &mut rng).unwrap();
        let base = generate_instance(&beta, 40, 0.0, &mut rng).unwrap();
        let inst = Instance::new(base.x().clone(), Array1::from_elem(40, 2.5)).unwrap();
        let init = spectral_init(&inst, &TwfTuning::default()).unwrap();
        assert!((init.beta_tilde.norm() - 2.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spectral_init_rejects_tiny_samples() {
        let inst = Instance::new(array![[1.0, 2.0]], array![1.0]).unwrap();
        assert!(matches!(
            spectral_init(&inst, &TwfTuning::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn start_at_truth_is_a_fixed_point() {
        let beta = generate_signal(40, 5, &mut seeded_rng(7)).unwrap();
        let inst = generate_instance(&beta, 200, 0.0, &mut seeded_rng(8)).unwrap();
        let start = SignalEstimate {
            beta_tilde: beta.clone(),
            iterations: 0,
            init_support: beta.support(),
            noise: estimate_noise(inst.y().view()).unwrap(),
            converged: false,
            power_converged: true,
            descent_violations: 0,
        };
        let out = refine(&inst, &TwfTuning::default(), start).unwrap();
        assert_eq!(out.beta_tilde, beta);
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn huge_step_reports_divergence() {
        // far from the origin the gradient grows cubically and a full step
        // overshoots by a growing factor until the iterate overflows
        let beta = generate_signal(20, 3, &mut seeded_rng(9)).unwrap();
        let inst = generate_instance(&beta, 100, 0.0, &mut seeded_rng(10)).unwrap();
        let tuning = TwfTuning {
            mu: 1.0,
            c_thr: 0.0,
            ..TwfTuning::default()
        };
        let init = spectral_init(&inst, &tuning).unwrap();
        let start = SignalEstimate {
            beta_tilde: init.beta_tilde.scaled(10.0),
            ..init
        };
        match refine(&inst, &tuning, start) {
            Err(Error::Diverged { mu, .. }) => assert_eq!(mu, 1.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn tuning_validation() {
        assert!(TwfTuning::default().validate().is_ok());
        assert!(TwfTuning { mu: 0.0, ..Default::default() }.validate().is_err());
        assert!(TwfTuning { mu: 1.5, ..Default::default() }.validate().is_err());
        assert!(TwfTuning { tol: 0.0, ..Default::default() }.validate().is_err());
        assert!(TwfTuning { max_iter: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn power_iteration_finds_top_eigenvector() {
        let m = array![[4.0, 1.0], [1.0, 3.0]];
        let r = power_iteration(&m, array![1.0, 0.0], 1e-12, 10_000);
        assert!(r.converged);
        // top eigenvalue (7 + sqrt 5)/2
        let lambda = (7.0 + 5f64.sqrt()) / 2.0;
        let mv = m.dot(&r.vector);
        assert!((&mv - &(lambda * &r.vector)).iter().all(|d| d.abs() < 1e-9));
        assert!(r.vector[0] > 0.0);
    }
}
