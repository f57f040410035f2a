//! Single-RSU positioning: MUSIC angle search, IFFT time-of-arrival ranging
//! and a direction × range fix.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::channel::{steering_vector, ArrayConfig, CsiMatrix, OfdmConfig, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::scene::Vec3;

/// Floor applied to the MUSIC denominator.
pub const SPECTRUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl AngleGrid {
    pub fn new(theta: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        for (name, axis) in [("theta", &theta), ("phi", &phi)] {
            if axis.len() < 2 {
                return Err(Error::Config(format!("{name} grid needs at least 2 samples")));
            }
            if axis.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Config(format!("{name} grid must be strictly increasing")));
            }
        }
        Ok(AngleGrid { theta, phi })
    }

    /// Inclusive uniform grid, bounds and step in degrees.
    pub fn uniform_degrees(theta: (f64, f64), phi: (f64, f64), step: f64) -> Result<Self> {
        let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
            let n = ((hi - lo) / step).round() as usize + 1;
            (0..n).map(|i| (lo + i as f64 * step).to_radians()).collect()
        };
        AngleGrid::new(axis(theta), axis(phi))
    }

    pub fn step_theta(&self) -> f64 {
        self.theta[1] - self.theta[0]
    }

    pub fn step_phi(&self) -> f64 {
        self.phi[1] - self.phi[0]
    }
}

impl Default for AngleGrid {
    /// θ ∈ [0°, 90°], φ ∈ [−90°, 90°] at 0.5°.
    fn default() -> Self {
        AngleGrid::uniform_degrees((0.0, 90.0), (-90.0, 90.0), 0.5).expect("static grid")
    }
}

/// Signal/noise split of a Hermitian covariance.
#[derive(Debug, Clone)]
pub struct SubspaceSplit {
    pub signal: DMatrix<Complex64>,
    pub noise: DMatrix<Complex64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayProfile {
    pub magnitudes: Vec<f64>,
    /// Seconds per bin.
    pub bin_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionEstimate {
    pub position: Vec3,
    pub theta: f64,
    pub phi: f64,
    pub distance: f64,
    pub tau: f64,
}

/// `(1/K) H Hᴴ`.
pub fn sample_covariance(csi: &CsiMatrix) -> Result<DMatrix<Complex64>> {
    let h = csi.matrix();
    if h.ncols() == 0 {
        return Err(Error::Precondition("covariance needs at least one subcarrier".into()));
    }
    Ok(h * h.adjoint() / Complex64::new(h.ncols() as f64, 0.0))
}

pub fn noise_subspace(r: &DMatrix<Complex64>, num_signals: usize) -> Result<SubspaceSplit> {
    let m = r.nrows();
    if r.ncols() != m {
        return Err(Error::Precondition(format!("covariance must be square, got {}x{}", m, r.ncols())));
    }
    if num_signals == 0 || num_signals >= m {
        return Err(Error::Precondition(format!(
            "number of signals must be in 1..{m} to leave a noise subspace, got {num_signals}"
        )));
    }
    if r.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
        return Err(Error::Numeric("covariance has non-finite entries".into()));
    }
    let eig = r.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let pick = |cols: &[usize]| {
        DMatrix::from_fn(m, cols.len(), |row, col| eig.eigenvectors[(row, cols[col])])
    };
    Ok(SubspaceSplit {
        signal: pick(&order[..num_signals]),
        noise: pick(&order[num_signals..]),
        eigenvalues,
    })
}

/// Steering vectors for every grid point, row-major over `(θ, φ)`, stored as
/// the columns of one matrix.
#[derive(Debug, Clone)]
pub struct SteeringGrid {
    grid: AngleGrid,
    vectors: DMatrix<Complex64>,
}

impl SteeringGrid {
    pub fn new(arr: &ArrayConfig, grid: &AngleGrid) -> Self {
        let m = arr.num_elements();
        let points = grid.theta.len() * grid.phi.len();
        let mut vectors = DMatrix::zeros(m, points);
        for (i, &theta) in grid.theta.iter().enumerate() {
            for (j, &phi) in grid.phi.iter().enumerate() {
                let a = steering_vector(arr, theta, phi);
                vectors.column_mut(i * grid.phi.len() + j).copy_from(&DVector::from_vec(a));
            }
        }
        SteeringGrid { grid: grid.clone(), vectors }
    }

    pub fn grid(&self) -> &AngleGrid {
        &self.grid
    }

    pub fn spectrum(&self, split: &SubspaceSplit) -> Result<DMatrix<f64>> {
        if split.noise.nrows() != self.vectors.nrows() {
            return Err(Error::Precondition(format!(
                "subspace has {} rows but the array has {} elements",
                split.noise.nrows(),
                self.vectors.nrows()
            )));
        }
        if split.noise.ncols() == 0 {
            return Err(Error::Precondition("noise subspace is empty".into()));
        }
        // ‖U_nᴴ a‖² for all grid points at once.
        let projected = split.noise.adjoint() * &self.vectors;
        let (nt, np) = (self.grid.theta.len(), self.grid.phi.len());
        Ok(DMatrix::from_fn(nt, np, |i, j| {
            let denom: f64 = projected.column(i * np + j).iter().map(|z| z.norm_sqr()).sum();
            1.0 / denom.max(SPECTRUM_FLOOR)
        }))
    }
}

/// MUSIC pseudo-spectrum over `grid`, shaped `|θ| × |φ|`.
pub fn music_spectrum(split: &SubspaceSplit, arr: &ArrayConfig, grid: &AngleGrid) -> Result<DMatrix<f64>> {
    SteeringGrid::new(arr, grid).spectrum(split)
}

/// Grid coordinates of the spectrum peak; ties go to the first `(i, j)`.
pub fn estimate_angles(spectrum: &DMatrix<f64>, grid: &AngleGrid) -> Result<(f64, f64)> {
    let (rows, cols) = spectrum.shape();
    if rows == 0 || cols == 0 || rows != grid.theta.len() || cols != grid.phi.len() {
        return Err(Error::Precondition(format!(
            "spectrum {rows}x{cols} does not match grid {}x{}",
            grid.theta.len(),
            grid.phi.len()
        )));
    }
    let mut best = (0, 0);
    for i in 0..rows {
        for j in 0..cols {
            if spectrum[(i, j)] > spectrum[best] {
                best = (i, j);
            }
        }
    }
    Ok((grid.theta[best.0], grid.phi[best.1]))
}

/// Per-antenna IFFT across subcarriers, coherent antenna average, magnitude.
pub fn delay_profile(csi: &CsiMatrix, ofdm: &OfdmConfig) -> Result<DelayProfile> {
    let (m, k) = csi.matrix().shape();
    if k < 2 {
        return Err(Error::Precondition(format!("delay profile needs at least 2 subcarriers, got {k}")));
    }
    if k != ofdm.subcarriers {
        return Err(Error::Precondition(format!("CSI has {k} subcarriers, OFDM config has {}", ofdm.subcarriers)));
    }
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(k);
    let mut mean = vec![Complex64::new(0.0, 0.0); k];
    let mut row = vec![Complex64::new(0.0, 0.0); k];
    for antenna in 0..m {
        for (col, v) in row.iter_mut().enumerate() {
            *v = csi.matrix()[(antenna, col)];
        }
        ifft.process(&mut row);
        for (acc, v) in mean.iter_mut().zip(&row) {
            *acc += v;
        }
    }
    let scale = 1.0 / (k as f64 * m as f64);
    Ok(DelayProfile {
        magnitudes: mean.iter().map(|v| v.norm() * scale).collect(),
        bin_width: ofdm.delay_bin(),
    })
}

/// Delay of the strongest bin; ties go to the earliest bin.
pub fn estimate_toa(profile: &DelayProfile) -> Result<f64> {
    if profile.magnitudes.is_empty() {
        return Err(Error::Precondition("empty delay profile".into()));
    }
    let mut best = 0;
    for (i, &v) in profile.magnitudes.iter().enumerate() {
        if v > profile.magnitudes[best] {
            best = i;
        }
    }
    Ok(best as f64 * profile.bin_width)
}

/// Unit arrival direction for elevation `theta`, azimuth `phi`.
pub fn arrival_direction(theta: f64, phi: f64) -> Vec3 {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

pub fn locate(theta: f64, phi: f64, distance: f64, rsu: Vec3) -> Result<PositionEstimate> {
    if !(distance >= 0.0) {
        return Err(Error::Precondition(format!("distance must be nonnegative, got {distance}")));
    }
    let r = arrival_direction(theta, phi);
    Ok(PositionEstimate {
        position: [distance * r[0] + rsu[0], distance * r[1] + rsu[1], distance * r[2] + rsu[2]],
        theta,
        phi,
        distance,
        tau: distance / SPEED_OF_LIGHT,
    })
}

/// The complete classical chain with a cached steering grid.
#[derive(Debug, Clone)]
pub struct ClassicLocalizer {
    steering: SteeringGrid,
    ofdm: OfdmConfig,
    num_signals: usize,
}

impl ClassicLocalizer {
    pub fn new(arr: &ArrayConfig, ofdm: &OfdmConfig, grid: &AngleGrid, num_signals: usize) -> Result<Self> {
        arr.validate()?;
        ofdm.validate()?;
        Ok(ClassicLocalizer { steering: SteeringGrid::new(arr, grid), ofdm: ofdm.clone(), num_signals })
    }

    pub fn estimate_angles(&self, csi: &CsiMatrix) -> Result<(f64, f64)> {
        let split = noise_subspace(&sample_covariance(csi)?, self.num_signals)?;
        let spectrum = self.steering.spectrum(&split)?;
        estimate_angles(&spectrum, self.steering.grid())
    }

    pub fn estimate_toa(&self, csi: &CsiMatrix) -> Result<f64> {
        estimate_toa(&delay_profile(csi, &self.ofdm)?)
    }

    pub fn localize(&self, csi: &CsiMatrix, rsu: Vec3) -> Result<PositionEstimate> {
        let (theta, phi) = self.estimate_angles(csi)?;
        let tau = self.estimate_toa(csi)?;
        let mut est = locate(theta, phi, tau * SPEED_OF_LIGHT, rsu)?;
        est.tau = tau;
        Ok(est)
    }
}
