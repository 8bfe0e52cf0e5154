//! Position-dependent multipath channels and pilot-based CSI estimation.
//!
//! The synthetic channel is a geometric sum of a line-of-sight path and
//! deterministic scatter paths seen through a uniform linear array laid out
//! along the world x-axis. Scatterers are pinned to a spatial grid and derived
//! from a seed, so the response is a repeatable fingerprint of position.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::WorldCoord2D;
use crate::rng::{derive_seed, stream, TaskRng};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("pilot matrix is rank deficient; least-squares estimate undefined")]
    RankDeficient,
    #[error("noise covariance must be a symmetric positive semidefinite {expected}x{expected} matrix")]
    BadCovariance { expected: usize },
    #[error("channel shape {got:?} does not match pilot block with {antennas} antennas")]
    ShapeMismatch { got: (usize, usize), antennas: usize },
    #[error("invalid channel configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub n_pilot_symbols: usize,
    /// Subcarrier spacing (Hz).
    pub carrier_spacing: f64,
    /// Element spacing in wavelengths.
    pub antenna_spacing: f64,
    /// Number of paths at a grid node: one line-of-sight plus `n_paths - 1`
    /// scatterers.
    pub n_paths: usize,
    /// Per-entry standard deviation of the complex pilot noise.
    pub noise_std: f64,
    pub scatterer_seed: u64,
    /// Edge length of the scatterer grid cells (m).
    #[serde(default = "default_cell")]
    pub scatter_cell_size: f64,
    /// Distance at which the free-space amplitude equals one (m).
    #[serde(default = "default_reference_distance")]
    pub reference_distance: f64,
    /// Optional full noise covariance (row-major `N^P x N^P`). Defaults to
    /// `noise_std^2 * I`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_covariance: Option<Vec<f64>>,
}

fn default_cell() -> f64 {
    20.0
}

fn default_reference_distance() -> f64 {
    10.0
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: String| Err(ChannelError::InvalidConfig(m));
        if self.n_antennas == 0 || self.n_subcarriers == 0 || self.n_paths == 0 {
            return bad("n_antennas, n_subcarriers and n_paths must be at least 1".into());
        }
        if self.n_pilot_symbols <= self.n_antennas {
            return bad(format!(
                "n_pilot_symbols ({}) must exceed n_antennas ({})",
                self.n_pilot_symbols, self.n_antennas
            ));
        }
        if !(self.carrier_spacing > 0.0) || !(self.antenna_spacing > 0.0) {
            return bad("carrier_spacing and antenna_spacing must be positive".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if !(self.scatter_cell_size > 0.0) || !(self.reference_distance > 0.0) {
            return bad("scatter_cell_size and reference_distance must be positive".into());
        }
        if let Some(cov) = &self.noise_covariance {
            if cov.len() != self.n_pilot_symbols * self.n_pilot_symbols {
                return Err(ChannelError::BadCovariance { expected: self.n_pilot_symbols });
            }
        }
        Ok(())
    }
}

/// Complex `N^B x N^C` channel matrix; column `k` is the response on
/// subcarrier `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiMatrix {
    pub entries: DMatrix<Complex64>,
}

impl CsiMatrix {
    pub fn zeros(n_antennas: usize, n_subcarriers: usize) -> Self {
        Self { entries: DMatrix::zeros(n_antennas, n_subcarriers) }
    }

    pub fn n_antennas(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_subcarriers(&self) -> usize {
        self.entries.ncols()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Normalised magnitude of the inner product with another fingerprint.
    pub fn correlation(&self, other: &Self) -> f64 {
        let inner: Complex64 = self
            .entries
            .iter()
            .zip(other.entries.iter())
            .map(|(a, b)| a.conj() * b)
            .sum();
        inner.norm() / (self.frobenius_sq() * other.frobenius_sq()).sqrt()
    }
}

/// Real-valued network input: channel 0 holds the real part, channel 1 the
/// imaginary part, each row-major over (antenna, subcarrier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiTensor {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub data: Vec<f64>,
}

impl CsiTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        (2, self.n_antennas, self.n_subcarriers)
    }

    pub fn get(&self, channel: usize, antenna: usize, subcarrier: usize) -> f64 {
        self.data[(channel * self.n_antennas + antenna) * self.n_subcarriers + subcarrier]
    }
}

pub fn csi_to_real(h: &CsiMatrix) -> CsiTensor {
    let (nb, nc) = (h.n_antennas(), h.n_subcarriers());
    let plane = nb * nc;
    let mut data = vec![0.0; 2 * plane];
    for a in 0..nb {
        for k in 0..nc {
            let z = h.entries[(a, k)];
            data[a * nc + k] = z.re;
            data[plane + a * nc + k] = z.im;
        }
    }
    CsiTensor { n_antennas: nb, n_subcarriers: nc, data }
}

pub fn real_to_csi(t: &CsiTensor) -> CsiMatrix {
    let (nb, nc) = (t.n_antennas, t.n_subcarriers);
    let plane = nb * nc;
    CsiMatrix {
        entries: DMatrix::from_fn(nb, nc, |a, k| {
            Complex64::new(t.data[a * nc + k], t.data[plane + a * nc + k])
        }),
    }
}

#[derive(Debug, Clone, Copy)]
struct Path {
    amplitude: Complex64,
    /// Sine of the departure angle from array broadside.
    sin_aod: f64,
    delay: f64,
}

#[derive(Debug, Clone, Copy)]
struct Scatterer {
    position: WorldCoord2D,
    reflection: Complex64,
}

fn node_scatterers(cfg: &ChannelConfig, ix: i64, iy: i64) -> Vec<Scatterer> {
    use rand::SeedableRng;
    let seed = derive_seed(cfg.scatterer_seed, &[stream::SCATTERER, ix as u64, iy as u64]);
    let mut rng = TaskRng::seed_from_u64(seed);
    let s = cfg.scatter_cell_size;
    let centre = WorldCoord2D::new(ix as f64 * s, iy as f64 * s);
    (1..cfg.n_paths)
        .map(|_| {
            let dx = rng.random_range(-s..s);
            let dy = rng.random_range(-s..s);
            let mag = rng.random_range(0.2..0.6);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            Scatterer {
                position: centre + WorldCoord2D::new(dx, dy),
                reflection: Complex64::from_polar(mag, phase),
            }
        })
        .collect()
}

fn departure(bs: WorldCoord2D, towards: WorldCoord2D) -> (f64, f64) {
    let d = bs.distance(towards).max(1e-9);
    ((towards.x - bs.x) / d, d)
}

fn gather_paths(bs: WorldCoord2D, veh: WorldCoord2D, cfg: &ChannelConfig) -> Vec<Path> {
    let mut paths = Vec::with_capacity(1 + 4 * cfg.n_paths.saturating_sub(1));
    let (sin_los, d_los) = departure(bs, veh);
    paths.push(Path {
        amplitude: Complex64::new(cfg.reference_distance / d_los.max(1.0), 0.0),
        sin_aod: sin_los,
        delay: d_los / SPEED_OF_LIGHT,
    });
    if cfg.n_paths <= 1 {
        return paths;
    }
    // bilinear blend of the scatterer sets pinned to the four surrounding nodes
    let s = cfg.scatter_cell_size;
    let (fx, fy) = (veh.x / s, veh.y / s);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let corners = [
        (0i64, 0i64, (1.0 - tx) * (1.0 - ty)),
        (1, 0, tx * (1.0 - ty)),
        (0, 1, (1.0 - tx) * ty),
        (1, 1, tx * ty),
    ];
    for (ox, oy, w) in corners {
        if w == 0.0 {
            continue;
        }
        for sc in node_scatterers(cfg, x0 as i64 + ox, y0 as i64 + oy) {
            let (sin_aod, d1) = departure(bs, sc.position);
            let d2 = sc.position.distance(veh);
            let length = (d1 + d2).max(1.0);
            paths.push(Path {
                amplitude: sc.reflection * (w * cfg.reference_distance / length),
                sin_aod,
                delay: length / SPEED_OF_LIGHT,
            });
        }
    }
    paths
}

/// True channel between a base station and a vehicle on every subcarrier.
pub fn synthesize_channel(bs: WorldCoord2D, veh: WorldCoord2D, cfg: &ChannelConfig) -> CsiMatrix {
    let (nb, nc) = (cfg.n_antennas, cfg.n_subcarriers);
    let mut h = DMatrix::<Complex64>::zeros(nb, nc);
    let mut steer = vec![Complex64::new(0.0, 0.0); nb];
    let mut tone = vec![Complex64::new(0.0, 0.0); nc];
    for p in gather_paths(bs, veh, cfg) {
        let spatial = std::f64::consts::TAU * cfg.antenna_spacing * p.sin_aod;
        for (n, s) in steer.iter_mut().enumerate() {
            *s = Complex64::from_polar(1.0, spatial * n as f64);
        }
        let spectral = -std::f64::consts::TAU * cfg.carrier_spacing * p.delay;
        for (k, t) in tone.iter_mut().enumerate() {
            *t = Complex64::from_polar(1.0, spectral * k as f64) * p.amplitude;
        }
        for k in 0..nc {
            for n in 0..nb {
                h[(n, k)] += steer[n] * tone[k];
            }
        }
    }
    CsiMatrix { entries: h }
}

/// Pilot sequence `X`, beamformer `f` and noise covariance for one link.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotBlock {
    pub symbols: DMatrix<Complex64>,
    pub beam: DVector<Complex64>,
    pub noise_cov: DMatrix<f64>,
}

impl PilotBlock {
    /// DFT-column pilots (`X^H X = N^P I`) with an equal-gain beam.
    pub fn orthogonal(n_pilot: usize, n_antennas: usize, noise_cov: DMatrix<f64>) -> Self {
        let symbols = DMatrix::from_fn(n_pilot, n_antennas, |p, n| {
            let angle = -std::f64::consts::TAU * (p * n) as f64 / n_pilot as f64;
            Complex64::from_polar(1.0, angle)
        });
        let g = 1.0 / (n_antennas as f64).sqrt();
        Self {
            symbols,
            beam: DVector::from_element(n_antennas, Complex64::new(g, 0.0)),
            noise_cov,
        }
    }

    pub fn from_config(cfg: &ChannelConfig) -> Result<Self, ChannelError> {
        let np = cfg.n_pilot_symbols;
        let cov = match &cfg.noise_covariance {
            Some(v) => {
                if v.len() != np * np {
                    return Err(ChannelError::BadCovariance { expected: np });
                }
                DMatrix::from_row_slice(np, np, v)
            }
            None => DMatrix::identity(np, np) * (cfg.noise_std * cfg.noise_std),
        };
        Ok(Self::orthogonal(np, cfg.n_antennas, cov))
    }

    /// Effective observation matrix: pilot columns weighted by the beam.
    pub fn observation_matrix(&self) -> DMatrix<Complex64> {
        let mut a = self.symbols.clone();
        for (n, mut col) in a.column_iter_mut().enumerate() {
            col *= self.beam[n];
        }
        a
    }
}

/// Precomputed least-squares estimator for a fixed pilot block.
#[derive(Debug, Clone)]
pub struct LsEstimator {
    pinv: DMatrix<Complex64>,
    observation: DMatrix<Complex64>,
    noise_sqrt: DMatrix<Complex64>,
    noiseless: bool,
}

impl LsEstimator {
    pub fn new(pilot: &PilotBlock) -> Result<Self, ChannelError> {
        let a = pilot.observation_matrix();
        let np = a.nrows();
        let gram = a.adjoint() * &a;
        let chol = gram.cholesky().ok_or(ChannelError::RankDeficient)?;
        let pinv = chol.inverse() * a.adjoint();
        let cov = &pilot.noise_cov;
        if cov.nrows() != np || cov.ncols() != np {
            return Err(ChannelError::BadCovariance { expected: np });
        }
        let asym = (cov - cov.transpose()).abs().max();
        if asym > 1e-9 * (1.0 + cov.abs().max()) {
            return Err(ChannelError::BadCovariance { expected: np });
        }
        let eig = cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-9 * (1.0 + cov.abs().max())) {
            return Err(ChannelError::BadCovariance { expected: np });
        }
        let root = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
            * eig.eigenvectors.transpose();
        Ok(Self {
            pinv,
            observation: a,
            noise_sqrt: root.map(|x| Complex64::new(x, 0.0)),
            noiseless: cov.iter().all(|&x| x == 0.0),
        })
    }

    pub fn pseudo_inverse(&self) -> &DMatrix<Complex64> {
        &self.pinv
    }

    /// Runs the pilot exchange on every subcarrier and returns the LS estimate.
    pub fn estimate(&self, truth: &CsiMatrix, rng: &mut TaskRng) -> Result<CsiMatrix, ChannelError> {
        let nb = self.observation.ncols();
        if truth.n_antennas() != nb {
            return Err(ChannelError::ShapeMismatch {
                got: (truth.n_antennas(), truth.n_subcarriers()),
                antennas: nb,
            });
        }
        let np = self.observation.nrows();
        let mut y = &self.observation * &truth.entries;
        if !self.noiseless {
            let scale = std::f64::consts::FRAC_1_SQRT_2;
            let white = DMatrix::from_fn(np, truth.n_subcarriers(), |_, _| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re * scale, im * scale)
            });
            y += &self.noise_sqrt * white;
        }
        Ok(CsiMatrix { entries: &self.pinv * y })
    }
}

/// One-shot LS estimate; see [`LsEstimator`] for the reusable form.
pub fn estimate_csi(truth: &CsiMatrix, pilot: &PilotBlock, rng: &mut TaskRng) -> Result<CsiMatrix, ChannelError> {
    LsEstimator::new(pilot)?.estimate(truth, rng)
}
