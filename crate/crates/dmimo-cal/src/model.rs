//! Physical-layer model: scenario configuration, hardware mismatch profiles,
//! narrowband geometric multipath channels and DFT beam codebooks.
//!
//! Conventions used throughout the crate: channels are oriented tx → rx, so a
//! matrix H maps transmit-antenna signals to receive-antenna signals and the
//! reverse direction uses the plain transpose Hᵀ. Antennas form half-wavelength
//! uniform linear arrays.

use crate::error::{Error, Result};
use crate::C64;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Full scenario description consumed by the harness.
///
/// `noise_variance` applies to every pilot and data observation; pilots are
/// unit amplitude, so pilot SNR is controlled entirely through this field.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub num_aps: usize,
    pub num_users: usize,
    pub antennas_ap: usize,
    pub digital_chains_ap: usize,
    pub antennas_mu: usize,
    pub digital_chains_mu: usize,
    pub num_paths: usize,
    pub mismatch_sigma_mag: f64,
    pub mismatch_sigma_phase: f64,
    pub noise_variance: f64,
    pub tx_power: f64,
    pub master_seed: u64,
    pub num_trials: usize,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_aps", self.num_aps),
            ("num_users", self.num_users),
            ("antennas_ap", self.antennas_ap),
            ("digital_chains_ap", self.digital_chains_ap),
            ("antennas_mu", self.antennas_mu),
            ("digital_chains_mu", self.digital_chains_mu),
            ("num_paths", self.num_paths),
            ("num_trials", self.num_trials),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.digital_chains_ap > self.antennas_ap {
            return Err(Error::InvalidConfig(format!(
                "digital_chains_ap {} exceeds antennas_ap {}",
                self.digital_chains_ap, self.antennas_ap
            )));
        }
        if self.digital_chains_mu > self.antennas_mu {
            return Err(Error::InvalidConfig(format!(
                "digital_chains_mu {} exceeds antennas_mu {}",
                self.digital_chains_mu, self.antennas_mu
            )));
        }
        for (name, v) in [
            ("mismatch_sigma_mag", self.mismatch_sigma_mag),
            ("mismatch_sigma_phase", self.mismatch_sigma_phase),
            ("noise_variance", self.noise_variance),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.tx_power > 0.0) || !self.tx_power.is_finite() {
            return Err(Error::InvalidConfig("tx_power must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Per-node hardware state: diagonal gain/phase coefficients of the digital
/// chains (`t1`, `r1`, length N) and the analog chains (`t2`, `r2`, length M),
/// transmit and receive sides separately.
#[derive(Debug, Clone)]
pub struct NodeProfile {
    pub t1: DVector<C64>,
    pub r1: DVector<C64>,
    pub t2: DVector<C64>,
    pub r2: DVector<C64>,
}

impl NodeProfile {
    /// All chain coefficients exactly 1: perfectly reciprocal hardware.
    pub fn identity(n: usize, m: usize) -> Self {
        let one = C64::new(1.0, 0.0);
        NodeProfile {
            t1: DVector::from_element(n, one),
            r1: DVector::from_element(n, one),
            t2: DVector::from_element(m, one),
            r2: DVector::from_element(m, one),
        }
    }

    pub fn digital_chains(&self) -> usize {
        self.t1.len()
    }

    pub fn antennas(&self) -> usize {
        self.t2.len()
    }

    /// True analog calibration ratios r2_i / t2_i.
    pub fn alpha_true(&self) -> DVector<C64> {
        DVector::from_fn(self.t2.len(), |i, _| self.r2[i] / self.t2[i])
    }
}

/// One geometric propagation path.
#[derive(Debug, Clone, Copy)]
pub struct PathComponent {
    pub gain: C64,
    /// Angle of departure at the transmit array, radians.
    pub aod: f64,
    /// Angle of arrival at the receive array, radians.
    pub aoa: f64,
}

/// Narrowband multipath channel between two arrays, oriented tx → rx.
#[derive(Debug, Clone)]
pub struct MultipathChannel {
    /// M_rx × M_tx matrix.
    pub matrix: DMatrix<C64>,
    pub paths: Vec<PathComponent>,
}

/// Set of analog beamforming vectors, one per column. Entries have constant
/// modulus 1/√M so the set is realizable on a phase-shift network.
#[derive(Debug, Clone)]
pub struct BeamformerMatrix {
    /// M × C, columns are beams.
    pub mat: DMatrix<C64>,
    /// Meaningful only when the matrix is square.
    pub is_full_rank: bool,
}

impl BeamformerMatrix {
    /// Wraps a matrix of beams, recording invertibility for square sets.
    pub fn new(mat: DMatrix<C64>) -> Self {
        let is_full_rank = if mat.nrows() == mat.ncols() {
            let svd = mat.clone().svd(false, false);
            let sv = &svd.singular_values;
            let (max, min) = (sv.max(), sv.min());
            max > 0.0 && min / max > 1e-12
        } else {
            false
        };
        BeamformerMatrix { mat, is_full_rank }
    }

    pub fn column(&self, c: usize) -> DVector<C64> {
        self.mat.column(c).into_owned()
    }

    pub fn condition_number(&self) -> f64 {
        condition_number(&self.mat)
    }
}

/// Spectral condition number σ_max/σ_min; infinite for singular input.
pub fn condition_number(m: &DMatrix<C64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let sv = &svd.singular_values;
    let (max, min) = (sv.max(), sv.min());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Steering vector of a half-wavelength ULA: entry m is exp(jπ m sinθ)/√M.
pub fn array_response(theta: f64, m: usize) -> DVector<C64> {
    let s = theta.sin();
    let scale = 1.0 / (m as f64).sqrt();
    DVector::from_fn(m, |k, _| C64::from_polar(scale, std::f64::consts::PI * k as f64 * s))
}

/// Draws an L-path channel: gains CN(0,1), departure and arrival angles
/// uniform on (−π/2, π/2), composed as sqrt(M_rx·M_tx/L) Σ g a(aoa) a(aod)ᴴ.
///
/// Draw order per path is gain-re, gain-im, aod, aoa; fixed so a seeded RNG
/// reproduces the channel bit for bit.
pub fn gen_multipath_channel<R: Rng>(
    num_paths: usize,
    m_rx: usize,
    m_tx: usize,
    rng: &mut R,
) -> MultipathChannel {
    let gauss = Normal::new(0.0, (0.5f64).sqrt()).unwrap();
    let angle = Uniform::new(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
    let scale = ((m_rx * m_tx) as f64 / num_paths as f64).sqrt();
    let mut matrix = DMatrix::<C64>::zeros(m_rx, m_tx);
    let mut paths = Vec::with_capacity(num_paths);
    for _ in 0..num_paths {
        let gain = C64::new(gauss.sample(rng), gauss.sample(rng));
        let aod = angle.sample(rng);
        let aoa = angle.sample(rng);
        paths.push(PathComponent { gain, aod, aoa });
        let a_rx = array_response(aoa, m_rx);
        let a_tx = array_response(aod, m_tx);
        let g = gain * C64::new(scale, 0.0);
        for j in 0..m_tx {
            let tc = a_tx[j].conj() * g;
            for i in 0..m_rx {
                matrix[(i, j)] += a_rx[i] * tc;
            }
        }
    }
    MultipathChannel { matrix, paths }
}

/// Draws hardware mismatch coefficients exp(g)·exp(jφ) with g ~ N(0, σ_mag²)
/// and φ ~ U(−σ_ph, σ_ph), in the order t1, r1, t2, r2 (g before φ per entry).
/// A zero sigma produces the exact factor 1 without consuming RNG draws.
pub fn gen_mismatch_profile<R: Rng>(
    n: usize,
    m: usize,
    sigma_mag: f64,
    sigma_phase: f64,
    rng: &mut R,
) -> NodeProfile {
    let mag = if sigma_mag > 0.0 { Some(Normal::new(0.0, sigma_mag).unwrap()) } else { None };
    let ph = if sigma_phase > 0.0 { Some(Uniform::new_inclusive(-sigma_phase, sigma_phase)) } else { None };
    let draw = |rng: &mut R| {
        let g = mag.as_ref().map_or(0.0, |d| d.sample(rng));
        let phi = ph.as_ref().map_or(0.0, |d| d.sample(rng));
        C64::from_polar(g.exp(), phi)
    };
    let t1 = DVector::from_fn(n, |_, _| draw(rng));
    let r1 = DVector::from_fn(n, |_, _| draw(rng));
    let t2 = DVector::from_fn(m, |_, _| draw(rng));
    let r2 = DVector::from_fn(m, |_, _| draw(rng));
    NodeProfile { t1, r1, t2, r2 }
}

/// Unitary DFT beam codebook: entry (m, c) is exp(j2π m c / M)/√M. The index
/// product is reduced mod M before the trig call to keep angles small.
pub fn dft_codebook(m: usize) -> BeamformerMatrix {
    let scale = 1.0 / (m as f64).sqrt();
    let step = 2.0 * std::f64::consts::PI / m as f64;
    let mat = DMatrix::from_fn(m, m, |row, col| C64::from_polar(scale, step * ((row * col) % m) as f64));
    BeamformerMatrix { mat, is_full_rank: true }
}

// ── tests ───────────────────────────────────────────────────────────────────
