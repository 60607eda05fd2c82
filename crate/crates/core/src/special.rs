//! Normal and chi-square quantiles.

use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

fn check_prob(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("probability must lie in (0, 1), got {q}")))
    }
}

/// Standard normal quantile (Wichura's AS 241, about 1e-16 relative).
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(q: f64) -> Result<f64> {
    check_prob(q)?;
    let d = q - 0.5;
    if d.abs() <= 0.425 {
        let r = 0.180625 - d * d;
        let num = ((((((r * 2509.0809287301226727 + 33430.575583588128105) * r
            + 67265.770927008700853) * r + 45921.953931549871457) * r
            + 13731.693765509461125) * r + 1971.5909503065514427) * r
            + 133.14166789178437745) * r + 3.387132872796366608;
        let den = ((((((r * 5226.495278852545925 + 28729.085735721942674) * r
            + 39307.89580009271061) * r + 21213.794301586595867) * r
            + 5394.1960214247511077) * r + 687.1870074920579083) * r
            + 42.313330701600911252) * r + 1.0;
        return Ok(d * num / den);
    }
    let tail = if d < 0.0 { q } else { 1.0 - q };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((r * 7.7454501427834140764e-4 + 0.0227238449892691845833) * r
            + 0.24178072517745061177) * r + 1.27045825245236838258) * r
            + 3.64784832476320460504) * r + 5.7694972214606914055) * r
            + 4.6303378461565452959) * r + 1.42343711074968357734;
        let den = ((((((r * 1.05075007164441684324e-9 + 5.475938084995344946e-4) * r
            + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
            + 0.68976733498510000455) * r + 1.6763848301838038494) * r
            + 2.05319162663775882187) * r + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((r * 2.01033439929228813265e-7 + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386) * r + 0.026532189526576123093) * r
            + 0.29656057182850489123) * r + 1.7848265399172913358) * r
            + 5.4637849111641143699) * r + 6.6579046435011037772;
        let den = ((((((r * 2.04426310338993978564e-15 + 1.4215117583164458887e-7) * r
            + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
            + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
            + 0.59983220655588793769) * r + 1.0;
        num / den
    };
    Ok(if d < 0.0 { -val } else { val })
}

fn chi_sq_log_pdf(x: f64, half_df: f64) -> f64 {
    (half_df - 1.0) * x.ln() - x / 2.0 - half_df * std::f64::consts::LN_2 - ln_gamma(half_df)
}

/// Quantile of the chi-square distribution with `df` degrees of freedom.
///
/// Safeguarded Newton iteration on the regularized incomplete gamma
/// function, started from the Wilson-Hilferty approximation. The upper
/// tail is used when `q > 1/2` to avoid cancellation.
pub fn chi_sq_quantile(q: f64, df: u32) -> Result<f64> {
    check_prob(q)?;
    if df == 0 {
        return Err(Error::invalid("chi-square degrees of freedom must be positive"));
    }
    let k = df as f64;
    let a = k / 2.0;
    let upper = q > 0.5;
    // f(x) = 0 at the quantile; increasing in x
    let f = |x: f64| {
        if upper {
            (1.0 - q) - gamma_ur(a, x / 2.0)
        } else {
            gamma_lr(a, x / 2.0) - q
        }
    };

    let z = normal_quantile(q)?;
    let c = 2.0 / (9.0 * k);
    let wh = k * (1.0 - c + z * c.sqrt()).powi(3);
    let mut x = if wh > 0.0 { wh } else { k * q.powf(2.0 / k).max(1e-300) };

    let mut lo = 0.0;
    let mut hi = x.max(1.0);
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Numeric(format!("chi-square quantile bracket overflow (q = {q}, df = {df})")));
        }
    }
    if x <= lo || x >= hi {
        x = 0.5 * (lo + hi);
    }

    for _ in 0..200 {
        let fx = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let pdf = chi_sq_log_pdf(x, a).exp();
        let mut next = x - fx / pdf;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.abs() || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}
