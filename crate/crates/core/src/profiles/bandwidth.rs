//! Message-size dependent bandwidth curves.
//!
//! Bus bandwidth is modelled as a polynomial in `log2(bytes)`, fitted by
//! least squares to measured (size, time) samples and clamped to the
//! measured size range when evaluated.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ProfileError;

/// Polynomial degree used when a link is given as raw samples.
pub const DEFAULT_DEGREE: usize = 3;

const POSITIVITY_GRID: usize = 257;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthModel {
    coefficients: Vec<f64>,
    valid_range: [u64; 2],
}

impl BandwidthModel {
    /// Builds a model and checks that bandwidth stays positive over the range.
    pub fn new(coefficients: Vec<f64>, valid_range: [u64; 2]) -> Result<Self, ProfileError> {
        if coefficients.is_empty() || coefficients.iter().any(|c| !c.is_finite()) {
            return Err(ProfileError::Consistency(
                "bandwidth model needs finite coefficients".into(),
            ));
        }
        let [lo, hi] = valid_range;
        if lo == 0 || lo > hi {
            return Err(ProfileError::Consistency(format!(
                "invalid bandwidth valid_range [{lo}, {hi}]"
            )));
        }
        let model = Self { coefficients, valid_range };
        let (xlo, xhi) = model.log_range();
        for i in 0..POSITIVITY_GRID {
            let x = xlo + (xhi - xlo) * i as f64 / (POSITIVITY_GRID - 1) as f64;
            let bw = model.eval(x);
            if !(bw.is_finite() && bw > 0.0) {
                return Err(ProfileError::Consistency(format!(
                    "bandwidth model is not positive at {:.0} bytes",
                    x.exp2()
                )));
            }
        }
        Ok(model)
    }

    /// Size-independent bandwidth in bytes per second.
    pub fn constant(bytes_per_second: f64) -> Self {
        assert!(bytes_per_second > 0.0);
        Self { coefficients: vec![bytes_per_second], valid_range: [1, 1 << 50] }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn valid_range(&self) -> [u64; 2] {
        self.valid_range
    }

    fn log_range(&self) -> (f64, f64) {
        ((self.valid_range[0] as f64).log2(), (self.valid_range[1] as f64).log2())
    }

    fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    /// Bus bandwidth (bytes/s) for a message of `bytes`, clamped to the range.
    pub fn bandwidth(&self, bytes: f64) -> f64 {
        let (lo, hi) = self.log_range();
        let x = if bytes > 0.0 { bytes.log2().clamp(lo, hi) } else { lo };
        self.eval(x)
    }

    /// Transfer time in seconds; zero-byte messages take no time.
    pub fn comm_time(&self, bytes: f64) -> f64 {
        if bytes <= 0.0 {
            return 0.0;
        }
        bytes / self.bandwidth(bytes)
    }
}

/// `bytes / bandwidth(clamp(log2 bytes))`.
pub fn comm_time(model: &BandwidthModel, bytes: f64) -> f64 {
    model.comm_time(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSample {
    pub bytes: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthFit {
    pub model: BandwidthModel,
    /// Sum of squared bandwidth residuals, (bytes/s)^2.
    pub rss: f64,
    /// `||A c - y|| / ||y||`.
    pub relative_residual: f64,
}

/// Least-squares fit of bus bandwidth (bytes / seconds) as a degree-`degree`
/// polynomial in `log2(bytes)`.
pub fn fit_bandwidth(samples: &[BandwidthSample], degree: usize) -> Result<BandwidthFit, ProfileError> {
    for s in samples {
        if s.bytes == 0 || !(s.seconds.is_finite() && s.seconds > 0.0) {
            return Err(ProfileError::Consistency(format!(
                "bandwidth sample ({} bytes, {} s) must be positive",
                s.bytes, s.seconds
            )));
        }
    }
    let mut sizes: Vec<u64> = samples.iter().map(|s| s.bytes).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let cols = degree + 1;
    if sizes.len() < cols {
        return Err(ProfileError::DegenerateFit(format!(
            "{} distinct message sizes cannot determine a degree-{degree} polynomial",
            sizes.len()
        )));
    }

    let n = samples.len();
    let xs: Vec<f64> = samples.iter().map(|s| (s.bytes as f64).log2()).collect();
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.bytes as f64 / s.seconds));
    let mut a = DMatrix::from_fn(n, cols, |i, j| xs[i].powi(j as i32));

    // column equilibration keeps the Vandermonde system well scaled
    let scales: Vec<f64> = (0..cols).map(|j| a.column(j).norm()).collect();
    for (j, &s) in scales.iter().enumerate() {
        a.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-12) {
        return Err(ProfileError::DegenerateFit("least-squares system is singular".into()));
    }
    let z = svd
        .solve(&y, 0.0)
        .map_err(|e| ProfileError::DegenerateFit(e.to_string()))?;
    let resid = &a * &z - &y;
    let coefficients: Vec<f64> = z.iter().zip(&scales).map(|(c, s)| c / s).collect();

    let rss = resid.norm_squared();
    let relative_residual = resid.norm() / y.norm();
    let model = BandwidthModel::new(coefficients, [sizes[0], *sizes.last().unwrap()])?;
    Ok(BandwidthFit { model, rss, relative_residual })
}
