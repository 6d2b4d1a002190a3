//! Splitting-versus-phonon-number scaling: `s_n = A √(n + δ)` with δ = 1 on
//! the blue sideband and δ = 0 on the red one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SidebandRegime;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: usize,
    pub splitting: f64,
    pub sigma: f64,
    /// splitting − A√(n+δ)
    pub residual: f64,
    /// splitting / splitting of the first listed level with n + δ > 0
    pub ratio: f64,
    /// √((n+δ)/(n_ref+δ))
    pub expected_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub regime: SidebandRegime,
    pub offset: usize,
    /// Fitted prefactor A (same unit as the splittings).
    pub amplitude: f64,
    pub amplitude_err: f64,
    /// Free power-law exponent from a log-log fit; 0.5 for the ideal law.
    pub exponent: f64,
    pub points: Vec<ScalingPoint>,
    /// Largest |ratio/expected_ratio − 1| over the points.
    pub max_ratio_deviation: f64,
}

/// Weighted least-squares fit of `s_n = A √(n + δ)`. `splittings` maps
/// n → (splitting, σ); σ = 0 everywhere gives an unweighted fit.
pub fn extract_scaling(splittings: &BTreeMap<usize, (f64, f64)>, regime: SidebandRegime) -> Result<ScalingFit> {
    let offset = match regime {
        SidebandRegime::Bsb => 1,
        SidebandRegime::Rsb => 0,
        SidebandRegime::Carrier => {
            return Err(Error::InvalidArgument("the carrier has no phonon-number scaling".into()));
        }
    };
    if splittings.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 phonon numbers, got {}", splittings.len())));
    }
    let weighted = splittings.values().all(|&(_, s)| s > 0.0);
    let weight = |s: f64| if weighted { 1.0 / (s * s) } else { 1.0 };

    let (mut num, mut den) = (0.0, 0.0);
    for (&n, &(s, sigma)) in splittings {
        let r = ((n + offset) as f64).sqrt();
        num += weight(sigma) * s * r;
        den += weight(sigma) * r * r;
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("no level with a nonzero sideband coupling".into()));
    }
    let amplitude = num / den;
    let dof = (splittings.len() - 1) as f64;
    let chi2: f64 = splittings
        .iter()
        .map(|(&n, &(s, sigma))| weight(sigma) * (s - amplitude * ((n + offset) as f64).sqrt()).powi(2))
        .sum();
    let amplitude_err = if weighted { (1.0 / den).sqrt() } else { (chi2 / dof / den).sqrt() };

    let (&n_ref, &(s_ref, _)) = splittings
        .iter()
        .find(|(&n, _)| n + offset > 0)
        .ok_or_else(|| Error::InvalidArgument("no reference level".into()))?;
    let points: Vec<ScalingPoint> = splittings
        .iter()
        .map(|(&n, &(s, sigma))| ScalingPoint {
            n,
            splitting: s,
            sigma,
            residual: s - amplitude * ((n + offset) as f64).sqrt(),
            ratio: s / s_ref,
            expected_ratio: ((n + offset) as f64 / (n_ref + offset) as f64).sqrt(),
        })
        .collect();
    let max_ratio_deviation = points
        .iter()
        .filter(|p| p.n + offset > 0)
        .map(|p| (p.ratio / p.expected_ratio - 1.0).abs())
        .fold(0.0, f64::max);

    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.n + offset > 0 && p.splitting > 0.0)
        .map(|p| (((p.n + offset) as f64).ln(), p.splitting.ln()))
        .collect();
    let exponent = if logs.len() >= 2 {
        let k = logs.len() as f64;
        let mx = logs.iter().map(|l| l.0).sum::<f64>() / k;
        let my = logs.iter().map(|l| l.1).sum::<f64>() / k;
        let sxy: f64 = logs.iter().map(|l| (l.0 - mx) * (l.1 - my)).sum();
        let sxx: f64 = logs.iter().map(|l| (l.0 - mx).powi(2)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            f64::NAN
        }
    } else {
        f64::NAN
    };

    Ok(ScalingFit { regime, offset, amplitude, amplitude_err, exponent, points, max_ratio_deviation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact(a: f64, ns: impl Iterator<Item = usize>, offset: usize) -> BTreeMap<usize, (f64, f64)> {
        ns.map(|n| (n, (a * ((n + offset) as f64).sqrt(), 0.0))).collect()
    }

    #[test]
    fn exact_bsb_values() {
        let fit = extract_scaling(&exact(3.7, 0..6, 1), SidebandRegime::Bsb).unwrap();
        assert!((fit.amplitude - 3.7).abs() < 1e-12);
        assert!((fit.exponent - 0.5).abs() < 1e-12);
        assert!(fit.max_ratio_deviation < 1e-12);
    }

    #[test]
    fn exact_rsb_values_have_zero_residuals() {
        let fit = extract_scaling(&exact(2.0, 1..6, 0), SidebandRegime::Rsb).unwrap();
        assert!(fit.points.iter().all(|p| p.residual.abs() < 1e-12));
        assert_eq!(fit.points[0].n, 1);
    }

    #[test]
    fn rsb_ground_level_is_skipped_as_reference() {
        let mut s = exact(2.0, 1..6, 0);
        s.insert(0, (0.0, 0.0));
        let fit = extract_scaling(&s, SidebandRegime::Rsb).unwrap();
        assert!((fit.amplitude - 2.0).abs() < 1e-12);
        assert!(fit.max_ratio_deviation < 1e-12);
    }

    #[test]
    fn weighted_fit_uses_sigmas() {
        let mut s: BTreeMap<usize, (f64, f64)> = (0..4).map(|n| (n, (((n + 1) as f64).sqrt(), 0.01))).collect();
        s.insert(4, (10.0, 1e3));
        let fit = extract_scaling(&s, SidebandRegime::Bsb).unwrap();
        assert!((fit.amplitude - 1.0).abs() < 1e-3);
    }

    #[test]
    fn insufficient_points() {
        assert!(extract_scaling(&exact(1.0, 0..2, 1), SidebandRegime::Bsb).is_err());
        assert!(extract_scaling(&exact(1.0, 0..5, 1), SidebandRegime::Carrier).is_err());
    }
}
