//! Multipath OFDM channel synthesis for a uniform planar array.
//!
//! Antenna index convention: element `(m_y, m_x)` lives at flat index
//! `m_y * M_x + m_x`, which is the ordering produced by `a_y ⊗ a_x`. The
//! `(0, 0)` corner element is the phase reference.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scene::PathSet;

/// Propagation speed used throughout, m/s.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayConfig {
    pub mx: usize,
    pub my: usize,
    /// Element spacing, meters.
    pub spacing: f64,
    /// Carrier wavelength, meters.
    pub wavelength: f64,
}

impl ArrayConfig {
    /// A `mx × my` array with half-wavelength spacing at `carrier_hz`.
    pub fn half_wavelength(mx: usize, my: usize, carrier_hz: f64) -> Self {
        let wavelength = SPEED_OF_LIGHT / carrier_hz;
        ArrayConfig { mx, my, spacing: wavelength / 2.0, wavelength }
    }

    pub fn num_elements(&self) -> usize {
        self.mx * self.my
    }

    pub fn validate(&self) -> Result<()> {
        if self.mx == 0 || self.my == 0 {
            return Err(Error::Config(format!("array needs at least one element, got {}x{}", self.mx, self.my)));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Config(format!("element spacing must be positive, got {}", self.spacing)));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::Config(format!("wavelength must be positive, got {}", self.wavelength)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfdmConfig {
    pub carrier_hz: f64,
    pub subcarriers: usize,
    pub spacing_hz: f64,
}

impl OfdmConfig {
    pub fn bandwidth(&self) -> f64 {
        self.subcarriers as f64 * self.spacing_hz
    }

    /// Width of one IFFT delay bin, seconds.
    pub fn delay_bin(&self) -> f64 {
        1.0 / self.bandwidth()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subcarriers < 2 {
            return Err(Error::Config(format!("need at least 2 subcarriers, got {}", self.subcarriers)));
        }
        if !(self.spacing_hz > 0.0 && self.spacing_hz.is_finite()) {
            return Err(Error::Config(format!("subcarrier spacing must be positive, got {}", self.spacing_hz)));
        }
        if !(self.carrier_hz > 0.0 && self.carrier_hz.is_finite()) {
            return Err(Error::Config(format!("carrier frequency must be positive, got {}", self.carrier_hz)));
        }
        Ok(())
    }
}

impl Default for OfdmConfig {
    /// 60 GHz carrier, 8 subcarriers over 50 MHz.
    fn default() -> Self {
        OfdmConfig { carrier_hz: 60.0e9, subcarriers: 8, spacing_hz: 50.0e6 / 8.0 }
    }
}

impl Default for ArrayConfig {
    /// 4 × 4 half-wavelength array at 60 GHz.
    fn default() -> Self {
        ArrayConfig::half_wavelength(4, 4, OfdmConfig::default().carrier_hz)
    }
}

/// Frequency-domain channel, antennas × subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiMatrix(pub DMatrix<Complex64>);

impl CsiMatrix {
    pub fn antennas(&self) -> usize {
        self.0.nrows()
    }

    pub fn subcarriers(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    /// Elementwise magnitude, row-major `(antenna, subcarrier)`.
    pub fn amplitudes(&self) -> Vec<f64> {
        let (m, k) = self.0.shape();
        let mut out = Vec::with_capacity(m * k);
        for row in 0..m {
            for col in 0..k {
                out.push(self.0[(row, col)].norm());
            }
        }
        out
    }

    /// Phase of each entry in (−π, π], row-major.
    pub fn phases(&self) -> Vec<f64> {
        let (m, k) = self.0.shape();
        let mut out = Vec::with_capacity(m * k);
        for row in 0..m {
            for col in 0..k {
                out.push(self.0[(row, col)].arg());
            }
        }
        out
    }

    pub fn mean_power(&self) -> f64 {
        self.0.iter().map(|h| h.norm_sqr()).sum::<f64>() / self.0.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|h| h.re.is_finite() && h.im.is_finite())
    }
}

/// UPA response toward elevation `theta`, azimuth `phi`.
pub fn steering_vector(arr: &ArrayConfig, theta: f64, phi: f64) -> Vec<Complex64> {
    let k = 2.0 * PI * arr.spacing / arr.wavelength * theta.sin();
    let (ux, uy) = (k * phi.cos(), k * phi.sin());
    let mut a = Vec::with_capacity(arr.num_elements());
    for my in 0..arr.my {
        for mx in 0..arr.mx {
            a.push(Complex64::from_polar(1.0, ux * mx as f64 + uy * my as f64));
        }
    }
    a
}

/// Per-subcarrier phase rotation for delay `tau`, subcarriers indexed from 0.
pub fn delay_steering(ofdm: &OfdmConfig, tau: f64) -> Vec<Complex64> {
    (0..ofdm.subcarriers)
        .map(|k| {
            let f = ofdm.carrier_hz + k as f64 * ofdm.spacing_hz;
            // Reduce the phase in cycles before scaling by 2π; f·τ is ~1e4 cycles at mmWave.
            let cycles = (f * tau).fract();
            Complex64::from_polar(1.0, -2.0 * PI * cycles)
        })
        .collect()
}

/// Sum of rank-one path contributions `α_l a(θ_l, φ_l) d(τ_l)ᵀ`.
pub fn synthesize_csi(paths: &PathSet, arr: &ArrayConfig, ofdm: &OfdmConfig) -> Result<CsiMatrix> {
    if paths.is_empty() {
        return Err(Error::Precondition("cannot synthesize CSI from an empty path set".into()));
    }
    let (m, k) = (arr.num_elements(), ofdm.subcarriers);
    let mut h = DMatrix::<Complex64>::zeros(m, k);
    for path in paths.iter() {
        let a = steering_vector(arr, path.theta, path.phi);
        let d = delay_steering(ofdm, path.tau);
        for (col, dk) in d.iter().enumerate() {
            let g = path.alpha * dk;
            for (row, am) in a.iter().enumerate() {
                h[(row, col)] += g * am;
            }
        }
    }
    Ok(CsiMatrix(h))
}

/// Adds circularly-symmetric complex Gaussian noise at the requested SNR;
/// `(seed, index)` selects the noise realization.
///
/// `snr_db = f64::INFINITY` disables noise and returns the input unchanged.
pub fn add_awgn(csi: &CsiMatrix, snr_db: f64, seed: u64, index: u64) -> Result<CsiMatrix> {
    if snr_db == f64::INFINITY {
        return Ok(csi.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::Precondition(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    let noise_power = csi.mean_power() / 10f64.powf(snr_db / 10.0);
    let normal = Normal::new(0.0, (noise_power / 2.0).sqrt())
        .map_err(|e| Error::Numeric(format!("noise distribution: {e}")))?;
    let mut rng = stream_rng(seed, index, Stream::Noise);
    let mut noisy = csi.0.clone();
    for h in noisy.iter_mut() {
        *h += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
    }
    Ok(CsiMatrix(noisy))
}
