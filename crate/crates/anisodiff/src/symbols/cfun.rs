//! Radial truncation functions for the alpha-stable symbol:
//!
//! ```text
//! c_leq(s) = int_0^s   (1 - cos t) t^{-1-alpha} dt,
//! c_gt(s)  = int_s^inf (1 - cos t) t^{-1-alpha} dt,
//! C_alpha  = c_leq(s) + c_gt(s)   (independent of s, finite on (0,2)).
//! ```
//!
//! Near zero the integrand is ~ t^{1-alpha}/2 and the head integral is the
//! alternating series
//!
//! ```text
//! c_leq(s) = sum_{k>=1} (-1)^{k+1} s^{2k-alpha} / ((2k)! (2k-alpha)),
//! ```
//!
//! used for s <= T_SPLIT where a handful of terms reach machine precision
//! with no cancellation. Past the split point we write
//!
//! ```text
//! c_gt(s) = s^{-alpha}/alpha - J(s),   J(s) = int_s^inf cos(t) t^{-1-alpha} dt,
//! ```
//!
//! and integrate J over half-period panels between consecutive zeros of the
//! cosine. The panel contributions alternate in sign with slowly varying
//! magnitude, so iterated pairwise averaging of the partial sums (repeated
//! Richardson passes for an alternating sequence) converges to near machine
//! precision within a few dozen panels.

use std::collections::HashMap;
use std::sync::Mutex;

use once_cell::sync::Lazy;

use crate::spectral_measure::gauss_legendre_on;
use crate::{Error, Result};

/// Crossover between the series head and the oscillatory tail.
pub const T_SPLIT: f64 = 0.5;

const MAX_PANELS: usize = 10_000;
const GAUSS_ORDER: usize = 16;
const AVERAGE_DEPTH: usize = 24;

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    Ok(())
}

/// Alternating series for c_leq(s); rapidly convergent for s of order one.
fn series_head(s: f64, alpha: f64) -> f64 {
    if s == 0.0 {
        return 0.0;
    }
    // term_k = s^{2k - alpha} / ((2k)! (2k - alpha)), signs (-1)^{k+1}
    let s2 = s * s;
    let mut power = s.powf(2.0 - alpha); // s^{2k - alpha} at k = 1
    let mut factorial = 2.0; // (2k)! at k = 1
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = power / (factorial * (2.0 * k as f64 - alpha));
        sum += sign * term;
        if term < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
        sign = -sign;
        power *= s2;
        let kf = 2.0 * k as f64;
        factorial *= (kf + 1.0) * (kf + 2.0);
    }
    sum
}

/// J(s) = int_s^inf cos(t) t^{-1-alpha} dt for s > 0, by half-period panels
/// with Gauss quadrature and iterated averaging of the alternating partials.
fn cos_tail(s: f64, alpha: f64) -> Result<f64> {
    let integrand = |t: f64| t.cos() * t.powf(-1.0 - alpha);
    let panel = |a: f64, b: f64| -> f64 {
        let (nodes, weights) = gauss_legendre_on(a, b, GAUSS_ORDER);
        nodes
            .iter()
            .zip(&weights)
            .map(|(t, w)| w * integrand(*t))
            .sum()
    };

    // First zero of cos at or beyond s.
    let mut k0 = ((s - std::f64::consts::FRAC_PI_2) / std::f64::consts::PI).ceil();
    if k0 < 0.0 {
        k0 = 0.0;
    }
    let mut z = std::f64::consts::FRAC_PI_2 + k0 * std::f64::consts::PI;
    while z <= s {
        z += std::f64::consts::PI;
    }

    let head = panel(s, z);
    let scale = s.powf(-alpha) / alpha;

    let mut partials: Vec<f64> = Vec::with_capacity(64);
    let mut running = head;
    let mut converged = false;
    for _ in 0..MAX_PANELS {
        let a = z;
        z += std::f64::consts::PI;
        let contribution = panel(a, z);
        running += contribution;
        partials.push(running);
        if contribution.abs() < 1e-17 * scale.max(1e-300) {
            converged = true;
            break;
        }
        if partials.len() >= 48 {
            // Alternating partials: acceleration below finishes the job.
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Quadrature(format!(
            "oscillatory tail did not converge for s = {s}, alpha = {alpha}"
        )));
    }

    // Iterated pairwise averaging of the trailing partial sums.
    let take = partials.len().min(AVERAGE_DEPTH);
    let mut v: Vec<f64> = partials[partials.len() - take..].to_vec();
    while v.len() > 1 {
        for i in 0..v.len() - 1 {
            v[i] = 0.5 * (v[i] + v[i + 1]);
        }
        v.pop();
    }
    Ok(v[0])
}

/// Total mass C_alpha = int_0^inf (1 - cos t) t^{-1-alpha} dt, cached per alpha.
pub fn c_alpha_total(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    static CACHE: Lazy<Mutex<HashMap<u64, f64>>> = Lazy::new(|| Mutex::new(HashMap::new()));
    let key = alpha.to_bits();
    if let Some(hit) = CACHE.lock().unwrap().get(&key) {
        return Ok(*hit);
    }
    let head = series_head(T_SPLIT, alpha);
    let tail = T_SPLIT.powf(-alpha) / alpha - cos_tail(T_SPLIT, alpha)?;
    let total = head + tail;
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Quadrature(format!(
            "C_alpha evaluation failed for alpha = {alpha}"
        )));
    }
    CACHE.lock().unwrap().insert(key, total);
    Ok(total)
}

/// c_leq(s, alpha) = int_0^s (1 - cos t) t^{-1-alpha} dt for s >= 0.
pub fn c_leq(s: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(s >= 0.0) {
        return Err(Error::NegativeArgument(s));
    }
    if s == 0.0 {
        return Ok(0.0);
    }
    if s <= T_SPLIT {
        Ok(series_head(s, alpha))
    } else {
        let gt = s.powf(-alpha) / alpha - cos_tail(s, alpha)?;
        Ok(c_alpha_total(alpha)? - gt)
    }
}

/// c_gt(s, alpha) = int_s^inf (1 - cos t) t^{-1-alpha} dt for s >= 0.
pub fn c_gt(s: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(s >= 0.0) {
        return Err(Error::NegativeArgument(s));
    }
    if s == 0.0 {
        return c_alpha_total(alpha);
    }
    if s <= T_SPLIT {
        Ok(c_alpha_total(alpha)? - series_head(s, alpha))
    } else {
        Ok(s.powf(-alpha) / alpha - cos_tail(s, alpha)?)
    }
}
