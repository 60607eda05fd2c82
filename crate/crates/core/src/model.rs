//! Synthetic data under the real Gaussian phase retrieval model
//! `y_j = (x_j' beta)^2 + eps_j`, global sign alignment, and the
//! moment-based noise level estimate.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seeded stream used by every generator in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from `(master, stream)` with a
/// splitmix64 finalizer, so that streams do not depend on execution order.
pub fn mix_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A real signal of length `p`. The support is always recomputed from the
/// values, so it can never drift out of sync.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SignalVector {
    values: Array1<f64>,
}

impl SignalVector {
    pub fn new(values: Array1<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(p: usize) -> Self {
        Self::new(Array1::zeros(p))
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self::new(Array1::from(values))
    }

    /// Unit vector `e_k`.
    pub fn basis(p: usize, k: usize) -> Self {
        let mut v = Array1::zeros(p);
        v[k] = 1.0;
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.values
    }

    /// Indices of the nonzero entries, ascending.
    pub fn support(&self) -> Vec<usize> {
        support_of(self.values.view())
    }

    pub fn sparsity(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.dot(&self.values)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn negated(&self) -> Self {
        Self::new(-&self.values)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(&self.values * c)
    }
}

impl std::ops::Index<usize> for SignalVector {
    type Output = f64;

    fn index(&self, k: usize) -> &f64 {
        &self.values[k]
    }
}

pub(crate) fn support_of(v: ArrayView1<'_, f64>) -> Vec<usize> {
    v.iter()
        .enumerate()
        .filter_map(|(k, x)| (*x != 0.0).then_some(k))
        .collect()
}

/// Design matrix, measurements and, for synthetic data, the generating
/// signal and noise level.
#[derive(Debug, Clone)]
pub struct Instance {
    x: Array2<f64>,
    y: Array1<f64>,
    pub sigma: Option<f64>,
    pub truth: Option<SignalVector>,
}

impl Instance {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "design has {} rows but {} measurements were given",
                x.nrows(),
                y.len()
            )));
        }
        // Row access below assumes contiguous rows.
        let x = if x.is_standard_layout() {
            x
        } else {
            x.as_standard_layout().into_owned()
        };
        Ok(Self {
            x,
            y,
            sigma: None,
            truth: None,
        })
    }

    pub fn with_truth(mut self, truth: SignalVector, sigma: f64) -> Result<Self> {
        if truth.len() != self.p() {
            return Err(Error::invalid(format!(
                "truth has length {} but the design has {} columns",
                truth.len(),
                self.p()
            )));
        }
        self.truth = Some(truth);
        self.sigma = Some(sigma);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    /// The sub-instance made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Instance {
        Instance {
            x: self.x.select(ndarray::Axis(0), rows),
            y: self.y.select(ndarray::Axis(0), rows),
            sigma: self.sigma,
            truth: self.truth.clone(),
        }
    }
}

/// `x_row' b` summed over the listed coordinates only, ascending.
///
/// Every inner product between a design row and a signal goes through this
/// function so that a noiseless `y` generated from `beta` is reproduced
/// bit-for-bit when the same `beta` is plugged back in.
#[inline]
pub(crate) fn sparse_dot(row: &[f64], idx: &[usize], b: &[f64]) -> f64 {
    idx.iter().map(|&k| row[k] * b[k]).sum()
}

/// `X b` restricted to the support of `b`.
pub(crate) fn project(x: &Array2<f64>, b: ArrayView1<'_, f64>) -> Array1<f64> {
    let idx = support_of(b);
    let b = b.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| b.to_vec());
    x.rows()
        .into_iter()
        .map(|row| {
            let row = row.as_slice().expect("design rows are contiguous");
            sparse_dot(row, &idx, &b)
        })
        .collect()
}

/// Draws a signal with exactly `s` nonzero i.i.d. standard normal entries on
/// a uniformly random support.
pub fn generate_signal<R: Rng + ?Sized>(p: usize, s: usize, rng: &mut R) -> Result<SignalVector> {
    if s == 0 || s > p {
        return Err(Error::invalid(format!(
            "sparsity must satisfy 1 <= s <= p, got s = {s}, p = {p}"
        )));
    }
    // partial Fisher-Yates: the first s slots are a uniform s-subset
    let mut idx: Vec<usize> = (0..p).collect();
    for i in 0..s {
        let j = rng.random_range(i..p);
        idx.swap(i, j);
    }
    let mut values = Array1::zeros(p);
    for &k in &idx[..s] {
        let mut v: f64 = rng.sample(StandardNormal);
        while v == 0.0 {
            v = rng.sample(StandardNormal);
        }
        values[k] = v;
    }
    Ok(SignalVector::new(values))
}

/// Draws `n` rows `x_j ~ N(0, I_p)` and noise `eps_j ~ N(0, sigma^2)`.
///
/// The design is drawn before the noise and neither draw depends on `beta`,
/// so two calls with the same seed share `X` and `eps` for any signal.
pub fn generate_instance<R: Rng + ?Sized>(
    beta: &SignalVector,
    n: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Instance> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "noise level must be a finite nonnegative number, got {sigma}"
        )));
    }
    let p = beta.len();
    let x = Array2::from_shape_simple_fn((n, p), || rng.sample::<f64, _>(StandardNormal));
    let idx = beta.support();
    let b = beta.values().to_vec();
    let y: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|row| {
            let z = sparse_dot(row.as_slice().unwrap(), &idx, &b);
            let eps: f64 = rng.sample(StandardNormal);
            z * z + sigma * eps
        })
        .collect();
    Instance::new(x, y)?.with_truth(beta.clone(), sigma)
}

/// Noise standard deviation for a noise-to-signal ratio, `sigma = nsr * ||beta||^2`.
pub fn nsr_to_sigma(nsr: f64, beta: &SignalVector) -> Result<f64> {
    if nsr < 0.0 || !nsr.is_finite() {
        return Err(Error::invalid(format!(
            "noise-to-signal ratio must be finite and nonnegative, got {nsr}"
        )));
    }
    let energy = beta.norm_sq();
    if energy == 0.0 {
        return Err(Error::invalid("noise-to-signal ratio is undefined for a zero signal"));
    }
    Ok(nsr * energy)
}

/// Returns whichever of `reference` and `-reference` is closer to
/// `candidate`; ties go to `reference`.
pub fn align_sign(candidate: &SignalVector, reference: &SignalVector) -> Result<SignalVector> {
    if candidate.len() != reference.len() {
        return Err(Error::invalid(format!(
            "cannot align vectors of lengths {} and {}",
            candidate.len(),
            reference.len()
        )));
    }
    let c = candidate.values();
    let r = reference.values();
    let plus: f64 = r.iter().zip(c).map(|(r, c)| (r - c) * (r - c)).sum();
    let minus: f64 = r.iter().zip(c).map(|(r, c)| (-r - c) * (-r - c)).sum();
    Ok(if plus <= minus {
        reference.clone()
    } else {
        reference.negated()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    /// Estimate of `||beta||^2`, the mean measurement.
    pub phi_sq: f64,
    pub sigma_hat: f64,
    /// Set when `mean(y^2) - 3 phi^4` came out negative and was clamped to 0.
    pub clamped: bool,
}

pub fn estimate_noise(y: ArrayView1<'_, f64>) -> Result<NoiseEstimate> {
    if y.is_empty() {
        return Err(Error::invalid("cannot estimate noise from an empty measurement vector"));
    }
    let n = y.len() as f64;
    let phi_sq = y.sum() / n;
    let second = y.dot(&y) / n;
    let radicand = second - 3.0 * phi_sq * phi_sq;
    Ok(NoiseEstimate {
        phi_sq,
        sigma_hat: radicand.max(0.0).sqrt(),
        clamped: radicand < 0.0,
    })
}
