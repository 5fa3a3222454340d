//! Distribution functions: Fisher F, standard normal and Student t.

use super::special::{beta_density, beta_reg, erfc};
use super::NumError;

/// `P(F <= x)` for an F law with `d1` numerator and `d2` denominator degrees
/// of freedom.
pub fn f_cdf(x: f64, d1: u32, d2: u32) -> Result<f64, NumError> {
    check_df(d1, d2)?;
    if x.is_nan() {
        return Err(NumError::Domain("F argument is NaN".into()));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let (a, b) = (f64::from(d1) / 2.0, f64::from(d2) / 2.0);
    let y = f64::from(d1) * x / (f64::from(d1) * x + f64::from(d2));
    Ok(beta_reg(y, a, b).clamp(0.0, 1.0))
}

/// Inverse of [`f_cdf`] in its first argument.
///
/// The root is located on the beta scale `y = d1 x / (d1 x + d2)`, which is
/// bounded, with safeguarded Newton steps falling back to bisection.
pub fn f_quantile(q: f64, d1: u32, d2: u32) -> Result<f64, NumError> {
    check_df(d1, d2)?;
    if !(q > 0.0 && q < 1.0) {
        return Err(NumError::Domain(format!("quantile level {q} outside (0, 1)")));
    }
    let (a, b) = (f64::from(d1) / 2.0, f64::from(d2) / 2.0);
    let y = invert_beta(q, a, b);
    Ok(f64::from(d2) * y / (f64::from(d1) * (1.0 - y)))
}

fn invert_beta(q: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut y = a / (a + b);
    for _ in 0..200 {
        let err = beta_reg(y, a, b) - q;
        if err == 0.0 {
            return y;
        }
        if err > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        if hi - lo <= f64::EPSILON * hi.max(1e-300) {
            break;
        }
        let dens = beta_density(y, a, b);
        let newton = if dens > 0.0 && dens.is_finite() {
            y - err / dens
        } else {
            f64::NAN
        };
        y = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    y
}

fn check_df(d1: u32, d2: u32) -> Result<(), NumError> {
    if d1 == 0 || d2 == 0 {
        return Err(NumError::Domain(format!(
            "degrees of freedom must be positive (got {d1}, {d2})"
        )));
    }
    Ok(())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile by Newton iteration on [`normal_cdf`].
pub fn normal_quantile(q: f64) -> Result<f64, NumError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(NumError::Domain(format!("quantile level {q} outside (0, 1)")));
    }
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    let mut z = 0.0;
    for _ in 0..200 {
        let err = normal_cdf(z) - q;
        if err > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let dens = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let step = z - err / dens;
        let next = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        if (next - z).abs() < 1e-15 * z.abs().max(1.0) {
            return Ok(next);
        }
        z = next;
    }
    Ok(z)
}

/// Student t CDF with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: u32) -> Result<f64, NumError> {
    if df == 0 {
        return Err(NumError::Domain("t distribution needs df >= 1".into()));
    }
    let nu = f64::from(df);
    let tail = 0.5 * beta_reg(nu / (nu + t * t), nu / 2.0, 0.5);
    Ok(if t >= 0.0 { 1.0 - tail } else { tail })
}
