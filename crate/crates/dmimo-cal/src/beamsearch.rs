//! Beam selection on top of calibration sweeps: pick the strongest
//! transmit/receive pair, keep only pairs above an SNR threshold, and expand
//! a few selected beams into a full-rank probing set by phase perturbation.

use crate::airlink::ObservationMatrix;
use crate::error::{Error, Result};
use crate::model::{condition_number, BeamformerMatrix};
use crate::C64;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Condition number a perturbed probing set must reach to be invertible
/// without losing more than three digits.
pub const PERTURB_COND_LIMIT: f64 = 1e3;
const PERTURB_ATTEMPTS: usize = 32;

/// Strongest observation entry as (tx index, rx index); ties go to the
/// lexicographically smallest pair.
pub fn best_beam_pair(y: &ObservationMatrix) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_mag = f64::NEG_INFINITY;
    for i in 0..y.data.ncols() {
        for j in 0..y.data.nrows() {
            let mag = y.data[(j, i)].norm();
            if mag > best_mag {
                best_mag = mag;
                best = (i, j);
            }
        }
    }
    best
}

/// All (tx, rx) pairs whose observation SNR |Y[rx,tx]|²/σ_z² clears the
/// threshold, in transmit-major order.
pub fn filter_pairs_by_snr(
    y: &ObservationMatrix,
    sigma_z2: f64,
    threshold_db: f64,
) -> Vec<(usize, usize)> {
    let floor = 10f64.powf(threshold_db / 10.0);
    let mut out = Vec::new();
    for i in 0..y.data.ncols() {
        for j in 0..y.data.nrows() {
            if y.data[(j, i)].norm_sqr() / sigma_z2 >= floor {
                out.push((i, j));
            }
        }
    }
    out
}

/// Expands C ≤ M selected beams into an invertible M×M probing set: columns
/// are replicated cyclically, then every entry gets an independent phase
/// rotation uniform in (−ε, ε). Redrawn until the condition number clears
/// the acceptance bound. Entry moduli are untouched, so the result stays
/// realizable on a phase-shift network, and each column keeps inner product
/// ≥ 1 − ε²/2 − 1e-6 with its source beam.
pub fn perturb_full_rank<R: Rng>(
    selected: &BeamformerMatrix,
    epsilon: f64,
    rng: &mut R,
) -> Result<BeamformerMatrix> {
    let m = selected.mat.nrows();
    let c = selected.mat.ncols();
    if c == 0 || c > m {
        return Err(Error::DimensionMismatch {
            context: "perturb_full_rank",
            detail: format!("{c} selected beams for {m} antennas"),
        });
    }
    if epsilon <= 0.0 || epsilon > std::f64::consts::PI {
        return Err(Error::InvalidConfig(format!(
            "perturbation epsilon {epsilon} outside (0, pi]"
        )));
    }
    let base = DMatrix::from_fn(m, m, |i, j| selected.mat[(i, j % c)]);
    let jitter = Uniform::new(-epsilon, epsilon);
    for _ in 0..PERTURB_ATTEMPTS {
        let candidate = base.map(|e| {
            let delta: f64 = jitter.sample(rng);
            e * C64::from_polar(1.0, delta)
        });
        if condition_number(&candidate) <= PERTURB_COND_LIMIT {
            return Ok(BeamformerMatrix::new(candidate));
        }
    }
    Err(Error::PerturbationFailed { attempts: PERTURB_ATTEMPTS, limit: PERTURB_COND_LIMIT })
}

// ── tests ───────────────────────────────────────────────────────────────────
