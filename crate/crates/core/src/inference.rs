//! Debiased coordinate estimators built on top of a TWF fit, the
//! split-and-swap combination, and the confidence intervals derived from
//! their Gaussian limit.
//!
//! For a nonzero pilot `b` with `B = ||b||^2` the Fisher information is
//! `I(b) = B I + 2 b b'`. Its inverse has the closed form
//! `(I - 2 b b' / (3B)) / B`, so the correction vector for coordinate `k`,
//! `w_k = -I(b)^{-1} e_k / 2`, never needs a linear solve:
//!
//! ```text
//! w_k = -e_k / (2B) + b_k b / (3 B^2)
//! ```
//!
//! The debiased coordinate is `b_k + w_k' g` where `g` is the gradient of
//! the objective at `b` computed on data independent of `b`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{align_sign, estimate_noise, Instance, SignalVector};
use crate::special::{chi_sq_quantile, normal_quantile};
use crate::twf::{gradient, run_twf, SignalEstimate, TwfTuning};

fn energy(b: &SignalVector) -> Result<f64> {
    let e = b.norm_sq();
    if e > 0.0 && e.is_finite() {
        Ok(e)
    } else {
        Err(Error::SingularModel(
            "Fisher information is singular at a zero signal".into(),
        ))
    }
}

fn check_coord(b: &SignalVector, k: usize) -> Result<()> {
    if k >= b.len() {
        return Err(Error::invalid(format!(
            "coordinate {k} out of range for a signal of length {}",
            b.len()
        )));
    }
    Ok(())
}

/// `||b||^2 I + 2 b b'`.
pub fn fisher_info(b: &SignalVector) -> Result<Array2<f64>> {
    let e = energy(b)?;
    let v = b.values();
    let p = b.len();
    let mut m = Array2::from_shape_fn((p, p), |(i, j)| 2.0 * (v[i] * v[j]));
    for i in 0..p {
        m[[i, i]] += e;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionVector {
    pub w: Array1<f64>,
    pub coordinate: usize,
}

pub fn correction_vector(b: &SignalVector, k: usize) -> Result<CorrectionVector> {
    check_coord(b, k)?;
    let e = energy(b)?;
    let mut w = b.values() * (b[k] / (3.0 * e * e));
    w[k] -= 1.0 / (2.0 * e);
    Ok(CorrectionVector { w, coordinate: k })
}

/// Debiases every coordinate of `beta_tilde` with the gradient computed on
/// `inst_other`, which must be independent of `beta_tilde`.
pub fn debias_half(beta_tilde: &SignalVector, inst_other: &Instance) -> Result<Array1<f64>> {
    let e = energy(beta_tilde)?;
    let g = gradient(beta_tilde, inst_other)?;
    Ok(debias_with_gradient(beta_tilde.values().view(), e, &g))
}

// b - g/(2B) + (b'g / (3B^2)) b, i.e. b_k + w_k'g for all k at once
fn debias_with_gradient(b: ArrayView1<'_, f64>, e: f64, g: &Array1<f64>) -> Array1<f64> {
    let proj = b.dot(g) / (3.0 * e * e);
    let mut out = b.to_owned();
    out.scaled_add(-1.0 / (2.0 * e), g);
    out.scaled_add(proj, &b);
    out
}

/// Variance proxy `||b||^2 ||w_k||^2 + 2 (b' w_k)^2` of the debiased
/// coordinate `k`, in units of `sigma^2 / n`.
pub fn tau_sq(b: &SignalVector, k: usize) -> Result<f64> {
    let e = energy(b)?;
    let w = correction_vector(b, k)?.w;
    let bw = b.values().dot(&w);
    Ok(e * w.dot(&w) + 2.0 * bw * bw)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DebiasedEstimate {
    pub beta_hat1: Array1<f64>,
    pub beta_hat2: Array1<f64>,
    pub tau1_sq: Array1<f64>,
    pub tau2_sq: Array1<f64>,
    /// Weight on the first-round estimate, `tau2^2 / (tau1^2 + tau2^2)`.
    pub a: Array1<f64>,
    pub beta_swap: Array1<f64>,
    pub s_hat: usize,
    /// Rows per half.
    pub n_half: usize,
    pub sigma: f64,
}

impl DebiasedEstimate {
    pub fn p(&self) -> usize {
        self.beta_swap.len()
    }

    /// `tau1^2 tau2^2 / (tau1^2 + tau2^2)`, the variance proxy of the
    /// combined coordinate.
    pub fn combined_tau_sq(&self, k: usize) -> Result<f64> {
        let (t1, t2) = (self.tau1_sq[k], self.tau2_sq[k]);
        if !(t1 > 0.0 && t2 > 0.0) {
            return Err(Error::DegenerateEstimate(format!(
                "nonpositive variance proxy at coordinate {k} ({t1}, {t2})"
            )));
        }
        Ok(t1 * t2 / (t1 + t2))
    }

    /// Assembles the combination from the two rounds. Useful on its own
    /// when the pilot estimates come from elsewhere.
    pub fn combine(
        beta_hat1: Array1<f64>,
        beta_hat2: Array1<f64>,
        tau1_sq: Array1<f64>,
        tau2_sq: Array1<f64>,
        s_hat: usize,
        n_half: usize,
        sigma: f64,
    ) -> Result<Self> {
        let p = beta_hat1.len();
        if [beta_hat2.len(), tau1_sq.len(), tau2_sq.len()].iter().any(|&l| l != p) {
            return Err(Error::invalid("swap combination inputs must share one length"));
        }
        let mut a = Array1::zeros(p);
        let mut beta_swap = Array1::zeros(p);
        for k in 0..p {
            let (t1, t2) = (tau1_sq[k], tau2_sq[k]);
            if !(t1 > 0.0 && t2 > 0.0) {
                return Err(Error::DegenerateEstimate(format!(
                    "nonpositive variance proxy at coordinate {k} ({t1}, {t2})"
                )));
            }
            a[k] = t2 / (t1 + t2);
            beta_swap[k] = a[k] * beta_hat1[k] + (1.0 - a[k]) * beta_hat2[k];
        }
        Ok(Self {
            beta_hat1,
            beta_hat2,
            tau1_sq,
            tau2_sq,
            a,
            beta_swap,
            s_hat,
            n_half,
            sigma,
        })
    }
}

/// Result of the split-and-swap procedure, including both pilot fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwapFit {
    pub estimate: DebiasedEstimate,
    /// Pilot fitted on the first half.
    pub first: SignalEstimate,
    /// Pilot fitted on the second half, sign-aligned to `first`.
    pub second: SignalEstimate,
    /// Row indices of the first half in the full instance.
    pub half1_rows: Vec<usize>,
}

fn all_tau_sq(b: &SignalVector) -> Result<Array1<f64>> {
    (0..b.len()).map(|k| tau_sq(b, k)).collect()
}

/// Random split into halves, a TWF fit on each, cross-debiasing and the
/// variance-weighted combination.
///
/// `sigma` is the known noise level; when absent it is estimated from all
/// `2n` measurements.
pub fn swap_estimate<R: Rng + ?Sized>(
    inst_full: &Instance,
    tuning: &TwfTuning,
    sigma: Option<f64>,
    rng: &mut R,
) -> Result<SwapFit> {
    let total = inst_full.n();
    if !total.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "split-and-swap needs an even number of rows, got {total}"
        )));
    }
    let n = total / 2;
    if n < 2 {
        return Err(Error::invalid(format!("each half needs at least 2 rows, got {n}")));
    }
    if let Some(s) = sigma {
        if s < 0.0 || !s.is_finite() {
            return Err(Error::invalid(format!("noise level must be nonnegative, got {s}")));
        }
    }

    let mut rows: Vec<usize> = (0..total).collect();
    rows.shuffle(rng);
    let (mut rows1, mut rows2) = (rows[..n].to_vec(), rows[n..].to_vec());
    rows1.sort_unstable();
    rows2.sort_unstable();
    let half1 = inst_full.select_rows(&rows1);
    let half2 = inst_full.select_rows(&rows2);

    let first = run_twf(&half1, tuning)?;
    let mut second = run_twf(&half2, tuning)?;
    for (label, fit) in [("first", &first), ("second", &second)] {
        if fit.beta_tilde.is_zero() {
            return Err(Error::DegenerateEstimate(format!(
                "TWF on the {label} half returned the zero vector"
            )));
        }
    }
    second.beta_tilde = align_sign(&first.beta_tilde, &second.beta_tilde)?;

    let beta_hat1 = debias_half(&first.beta_tilde, &half2)?;
    let beta_hat2 = debias_half(&second.beta_tilde, &half1)?;
    let tau1 = all_tau_sq(&first.beta_tilde)?;
    let tau2 = all_tau_sq(&second.beta_tilde)?;

    let mut support = first.beta_tilde.support();
    support.extend(second.beta_tilde.support());
    support.sort_unstable();
    support.dedup();

    let sigma = match sigma {
        Some(s) => s,
        None => estimate_noise(inst_full.y().view())?.sigma_hat,
    };
    let estimate =
        DebiasedEstimate::combine(beta_hat1, beta_hat2, tau1, tau2, support.len(), n, sigma)?;
    Ok(SwapFit {
        estimate,
        first,
        second,
        half1_rows: rows1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

impl Interval {
    fn centered(center: f64, half_width: f64, level: f64) -> Self {
        Self {
            lo: center - half_width,
            hi: center + half_width,
            level,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn half_width(&self) -> f64 {
        (self.hi - self.lo) / 2.0
    }

    pub fn center(&self) -> f64 {
        (self.hi + self.lo) / 2.0
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Two-sided interval `beta_swap_k -/+ z_{1-alpha/2} sigma sqrt(tau^2 / n)`
/// with nominal level `1 - alpha`.
pub fn coordinate_ci(est: &DebiasedEstimate, k: usize, alpha: f64) -> Result<Interval> {
    check_alpha(alpha)?;
    if k >= est.p() {
        return Err(Error::invalid(format!("coordinate {k} out of range")));
    }
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let half = est.sigma * z / (est.n_half as f64).sqrt() * est.combined_tau_sq(k)?.sqrt();
    Ok(Interval::centered(est.beta_swap[k], half, 1.0 - alpha))
}

/// Common half-width `sqrt(3 / (8 s_hat)) sigma z_{1-alpha/2} / sqrt(n)`
/// for all coordinates simultaneously.
pub fn simultaneous_max_ci(est: &DebiasedEstimate, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if est.s_hat == 0 {
        return Err(Error::DegenerateEstimate(
            "estimated support is empty; the simultaneous bound needs s_hat >= 1".into(),
        ));
    }
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    Ok((3.0 / (8.0 * est.s_hat as f64)).sqrt() * est.sigma * z / (est.n_half as f64).sqrt())
}

// I/(4B) - b b'/(6B^2): the matrix with entries B w_k'w_l + 2 (b'w_k)(b'w_l)
fn round_covariance(b: &SignalVector) -> Result<Array2<f64>> {
    let e = energy(b)?;
    let v = b.values();
    let p = b.len();
    let c = 1.0 / (6.0 * e * e);
    let mut m = Array2::from_shape_fn((p, p), |(k, l)| -c * (v[k] * v[l]));
    for k in 0..p {
        m[[k, k]] += 1.0 / (4.0 * e);
    }
    Ok(m)
}

/// Covariance `V` of the combined estimator (units of `sigma^2 / n`).
///
/// `V_kl = a_k a_l S1_kl + (1 - a_k)(1 - a_l) S2_kl` with
/// `S_kl = ||b||^2 w_k'w_l + 2 (b'w_k)(b'w_l)`, evaluated in closed form.
pub fn covariance_matrix(
    est: &DebiasedEstimate,
    beta_tilde1: &SignalVector,
    beta_tilde2: &SignalVector,
) -> Result<Array2<f64>> {
    let p = est.p();
    if beta_tilde1.len() != p || beta_tilde2.len() != p {
        return Err(Error::invalid("pilot estimates do not match the estimate's dimension"));
    }
    let s1 = round_covariance(beta_tilde1)?;
    let s2 = round_covariance(beta_tilde2)?;
    let a = &est.a;
    Ok(Array2::from_shape_fn((p, p), |(k, l)| {
        a[k] * a[l] * s1[[k, l]] + (1.0 - a[k]) * (1.0 - a[l]) * s2[[k, l]]
    }))
}

/// Scheffé-type interval for `h' beta` with nominal level `1 - alpha`:
/// `h' beta_swap -/+ sqrt(sigma^2/n * chi2_{p, 1-alpha} * h' V h)`.
pub fn scheffe_ci(
    est: &DebiasedEstimate,
    v: &Array2<f64>,
    h: ArrayView1<'_, f64>,
    alpha: f64,
) -> Result<Interval> {
    check_alpha(alpha)?;
    let p = est.p();
    if h.len() != p || v.dim() != (p, p) {
        return Err(Error::invalid("direction or covariance does not match the estimate"));
    }
    if h.iter().all(|x| *x == 0.0) {
        return Err(Error::invalid("direction h must be nonzero"));
    }
    let mut q = h.dot(&v.dot(&h));
    if q < 0.0 {
        if q < -1e-10 {
            return Err(Error::Numeric(format!("h'Vh is negative ({q})")));
        }
        q = 0.0;
    }
    let chi = chi_sq_quantile(1.0 - alpha, p as u32)?;
    let half = (est.sigma * est.sigma / est.n_half as f64 * chi * q).sqrt();
    Ok(Interval::centered(h.dot(&est.beta_swap), half, 1.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_instance, generate_signal, seeded_rng};
    use ndarray::array;

    #[test]
    fn fisher_info_hand_values() {
        assert_eq!(
            fisher_info(&SignalVector::basis(2, 0)).unwrap(),
            array![[3.0, 0.0], [0.0, 1.0]]
        );
        assert_eq!(
            fisher_info(&SignalVector::from_vec(vec![1.0, 1.0])).unwrap(),
            array![[4.0, 2.0], [2.0, 4.0]]
        );
        assert!(matches!(
            fisher_info(&SignalVector::zeros(3)),
            Err(Error::SingularModel(_))
        ));
    }

    #[test]
    fn correction_vector_hand_values() {
        let e1 = SignalVector::basis(3, 0);
        let w = correction_vector(&e1, 0).unwrap().w;
        assert!((w[0] + 1.0 / 6.0).abs() < 1e-15);
        assert_eq!((w[1], w[2]), (0.0, 0.0));
        let w = correction_vector(&e1, 1).unwrap().w;
        assert_eq!(w, array![0.0, -0.5, 0.0]);
        assert!(correction_vector(&SignalVector::zeros(3), 0).is_err());
        assert!(correction_vector(&e1, 3).is_err());
    }

    #[test]
    fn correction_vector_support() {
        let b = SignalVector::from_vec(vec![0.0, 2.0, 0.0, -1.0, 0.0]);
        for k in 0..5 {
            let w = correction_vector(&b, k).unwrap().w;
            for (j, v) in w.iter().enumerate() {
                if *v != 0.0 {
                    assert!(j == k || b[j] != 0.0);
                }
            }
        }
    }

    #[test]
    fn tau_sq_hand_values() {
        let e1 = SignalVector::basis(2, 0);
        assert!((tau_sq(&e1, 0).unwrap() - 1.0 / 12.0).abs() < 1e-15);
        assert!((tau_sq(&e1, 1).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn debias_hand_evaluation() {
        // one row x = e1 with y = 0.4 at b = e1: z = 1, r = 0.6, g = (0.6, 0, 0)
        let inst = Instance::new(array![[1.0, 0.0, 0.0]], array![0.4]).unwrap();
        let b = SignalVector::basis(3, 0);
        let g = gradient(&b, &inst).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15);
        let hat = debias_half(&b, &inst).unwrap();
        assert!((hat[0] - 0.9).abs() < 1e-15);
        assert_eq!((hat[1], hat[2]), (0.0, 0.0));
        // direct per-coordinate w_k'g
        for k in 0..3 {
            let w = correction_vector(&b, k).unwrap().w;
            assert!((hat[k] - (b[k] + w.dot(&g))).abs() < 1e-15);
        }
    }

    #[test]
    fn debias_is_exact_at_noiseless_truth() {
        let beta = generate_signal(50, 6, &mut seeded_rng(1)).unwrap();
        let inst = generate_instance(&beta, 120, 0.0, &mut seeded_rng(2)).unwrap();
        let hat = debias_half(&beta, &inst).unwrap();
        assert_eq!(&hat, beta.values());
    }

    #[test]
    fn debias_is_sign_equivariant() {
        let mut rng = seeded_rng(3);
        let beta = generate_signal(40, 5, &mut rng).unwrap();
        let inst = generate_instance(&beta, 150, 0.8, &mut rng).unwrap();
        let pilot = generate_signal(40, 8, &mut rng).unwrap();
        let plus = debias_half(&pilot, &inst).unwrap();
        let minus = debias_half(&pilot.negated(), &inst).unwrap();
        assert_eq!(plus, -minus);
    }

    #[test]
    fn symmetric_weights_average_the_rounds() {
        let est = DebiasedEstimate::combine(
            array![1.0, 2.0],
            array![3.0, -2.0],
            array![0.5, 0.2],
            array![0.5, 0.2],
            2,
            10,
            1.0,
        )
        .unwrap();
        assert_eq!(est.a, array![0.5, 0.5]);
        assert_eq!(est.beta_swap, array![2.0, 0.0]);
        assert!(DebiasedEstimate::combine(
            array![1.0],
            array![1.0],
            array![0.0],
            array![1.0],
            1,
            10,
            1.0
        )
        .is_err());
    }

    fn toy_estimate(sigma: f64) -> DebiasedEstimate {
        DebiasedEstimate::combine(
            array![1.0, -0.5, 0.0],
            array![1.2, -0.4, 0.1],
            array![0.1, 0.2, 0.3],
            array![0.2, 0.2, 0.1],
            2,
            100,
            sigma,
        )
        .unwrap()
    }

    #[test]
    fn coordinate_ci_degenerate_widths() {
        let est = toy_estimate(1.0);
        let ci = coordinate_ci(&est, 0, 1.0 - 1e-12).unwrap();
        assert!(ci.half_width() < 1e-12);
        assert!((ci.center() - est.beta_swap[0]).abs() < 1e-15);
        let ci = coordinate_ci(&toy_estimate(0.0), 1, 0.05).unwrap();
        assert_eq!(ci.lo, ci.hi);
        assert!(coordinate_ci(&est, 5, 0.05).is_err());
        assert!(coordinate_ci(&est, 0, 0.0).is_err());
    }

    #[test]
    fn coordinate_ci_width_formula() {
        let est = toy_estimate(2.0);
        let ci = coordinate_ci(&est, 0, 0.05).unwrap();
        let tau = 0.1 * 0.2 / 0.3;
        let expected = 2.0 * 1.959963984540054 / 10.0 * f64::sqrt(tau);
        assert!((ci.half_width() - expected).abs() < 1e-12);
        assert!((ci.level - 0.95).abs() < 1e-15);
    }

    #[test]
    fn simultaneous_width() {
        let mut est = toy_estimate(1.0);
        est.s_hat = 1;
        est.n_half = 1;
        let z = normal_quantile(1.0 - 0.3173105078629141 / 2.0).unwrap();
        assert!((z - 1.0).abs() < 1e-9);
        let w = simultaneous_max_ci(&est, 0.3173105078629141).unwrap();
        assert!((w - (3.0f64 / 8.0).sqrt()).abs() < 1e-9);
        let w1 = simultaneous_max_ci(&est, 0.05).unwrap();
        est.s_hat = 2;
        let w2 = simultaneous_max_ci(&est, 0.05).unwrap();
        assert!((w2 / w1 - 0.5f64.sqrt()).abs() < 1e-15);
        est.s_hat = 0;
        assert!(matches!(
            simultaneous_max_ci(&est, 0.05),
            Err(Error::DegenerateEstimate(_))
        ));
    }

    #[test]
    fn covariance_for_identical_basis_pilots() {
        let e1 = SignalVector::basis(2, 0);
        let tau: Array1<f64> = (0..2).map(|k| tau_sq(&e1, k).unwrap()).collect();
        let est = DebiasedEstimate::combine(
            array![1.0, 0.0],
            array![1.0, 0.0],
            tau.clone(),
            tau,
            1,
            10,
            1.0,
        )
        .unwrap();
        assert_eq!(est.a, array![0.5, 0.5]);
        let v = covariance_matrix(&est, &e1, &e1).unwrap();
        assert!((v[[0, 0]] - 1.0 / 24.0).abs() < 1e-15);
        for k in 0..2 {
            let a = est.a[k];
            let diag = a * a * est.tau1_sq[k] + (1.0 - a) * (1.0 - a) * est.tau2_sq[k];
            assert!((v[[k, k]] - diag).abs() < 1e-15);
        }
    }

    #[test]
    fn scheffe_reduces_to_diagonal() {
        let est = toy_estimate(1.5);
        let b1 = SignalVector::from_vec(vec![1.0, -0.5, 0.2]);
        let b2 = SignalVector::from_vec(vec![0.9, -0.6, 0.0]);
        let v = covariance_matrix(&est, &b1, &b2).unwrap();
        let chi = chi_sq_quantile(0.95, 3).unwrap();
        for k in 0..3 {
            let mut h = Array1::zeros(3);
            h[k] = 1.0;
            let ci = scheffe_ci(&est, &v, h.view(), 0.05).unwrap();
            let expected = (1.5f64 * 1.5 / 100.0 * chi * v[[k, k]]).sqrt();
            assert!((ci.half_width() - expected).abs() < 1e-13);
            assert!((ci.center() - est.beta_swap[k]).abs() < 1e-15);
        }
        let h = array![0.3, -1.0, 2.0];
        let ci = scheffe_ci(&est, &v, h.view(), 0.05).unwrap();
        let scaled = scheffe_ci(&est, &v, (&h * 4.0).view(), 0.05).unwrap();
        assert!((scaled.lo - 4.0 * ci.lo).abs() < 1e-12);
        assert!((scaled.hi - 4.0 * ci.hi).abs() < 1e-12);
        assert!(scheffe_ci(&est, &v, Array1::zeros(3).view(), 0.05).is_err());
    }

    #[test]
    fn scheffe_rejects_indefinite_quadratic_form() {
        let est = toy_estimate(1.0);
        let v = -Array2::<f64>::eye(3);
        let h = array![1.0, 0.0, 0.0];
        assert!(matches!(
            scheffe_ci(&est, &v, h.view(), 0.05),
            Err(Error::Numeric(_))
        ));
        let tiny = Array2::<f64>::eye(3) * -1e-12;
        let ci = scheffe_ci(&est, &tiny, h.view(), 0.05).unwrap();
        assert_eq!(ci.lo, ci.hi);
    }

    #[test]
    fn swap_rejects_odd_rows() {
        let beta = SignalVector::basis(3, 0);
        let inst = generate_instance(&beta, 9, 0.0, &mut seeded_rng(0)).unwrap();
        assert!(matches!(
            swap_estimate(&inst, &TwfTuning::default(), None, &mut seeded_rng(1)),
            Err(Error::InvalidArgument(_))
        ));
    }
}
