use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Default exponent of the powered-exponential kernel.
pub const DEFAULT_GAMMA: f64 = 1.95;

/// Powered-exponential covariance `σ² exp{−|s − s'|^γ / (2τ²)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    sigma2: f64,
    tau2: f64,
    gamma: f64,
}

impl CovarianceSpec {
    pub fn new(sigma2: f64, tau2: f64, gamma: f64) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::param("sigma2", format!("must be >= 0, got {sigma2}")));
        }
        if !(tau2 > 0.0 && tau2.is_finite()) {
            return Err(Error::param("tau2", format!("must be > 0, got {tau2}")));
        }
        if !(gamma > 0.0 && gamma <= 2.0) {
            return Err(Error::param("gamma", format!("must lie in (0, 2], got {gamma}")));
        }
        Ok(CovarianceSpec { sigma2, tau2, gamma })
    }

    /// Unit-variance kernel, the identified form used for the latent field.
    pub fn unit(tau2: f64, gamma: f64) -> Result<Self> {
        Self::new(1.0, tau2, gamma)
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Covariance as a function of Euclidean distance.
    #[inline]
    pub fn at_distance(&self, d: f64) -> f64 {
        if d == 0.0 {
            return self.sigma2;
        }
        self.sigma2 * (-d.powf(self.gamma) / (2.0 * self.tau2)).exp()
    }

    /// Kernel value from a squared distance.
    #[inline]
    pub fn at_distance_sq(&self, d2: f64) -> f64 {
        if d2 == 0.0 {
            return self.sigma2;
        }
        self.sigma2 * (-d2.powf(0.5 * self.gamma) / (2.0 * self.tau2)).exp()
    }

    #[inline]
    pub fn cov(&self, s: &Point, t: &Point) -> f64 {
        self.at_distance_sq(s.distance_sq(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        let k = CovarianceSpec::unit(1.0, 2.0).unwrap();
        let o = Point::new(0.0, 0.0);
        assert_eq!(k.cov(&o, &o), 1.0);
        let v = k.cov(&o, &Point::new(1.0, 0.0));
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
        assert_eq!(k.cov(&o, &Point::new(0.3, 0.4)), k.cov(&Point::new(0.3, 0.4), &o));
    }

    #[test]
    fn kernel_strictly_decreasing() {
        let k = CovarianceSpec::unit(0.7, DEFAULT_GAMMA).unwrap();
        let vals: Vec<f64> = (0..50).map(|i| k.at_distance(i as f64 * 0.1)).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!(vals.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(CovarianceSpec::new(1.0, 0.0, 1.95).is_err());
        assert!(CovarianceSpec::new(1.0, 1.0, 2.5).is_err());
        assert!(CovarianceSpec::new(1.0, 1.0, 0.0).is_err());
        assert!(CovarianceSpec::new(-1.0, 1.0, 1.0).is_err());
    }
}
