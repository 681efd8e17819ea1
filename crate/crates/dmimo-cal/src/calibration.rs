//! Two-step reciprocity calibration of a node pair, its joint three-node
//! extension, and the two-pilot scale measurement between access points.
//!
//! Step one estimates the digital-chain coefficients from a rank-1
//! factorization of pilots swept over transmit chains behind one fixed beam
//! pair. Step two sweeps full beam codebooks both ways and solves a
//! homogeneous least-squares system for the per-antenna analog ratios
//! α = r2/t2. Every estimate is normalized so its first element is exactly 1;
//! the remaining unknown scale cancels once downlink and uplink are combined.

use crate::airlink::{gather_observations, Direction, Link, ObservationMatrix};
use crate::error::{Error, Result};
use crate::model::{condition_number, BeamformerMatrix};
use crate::C64;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Codebooks worse conditioned than this are rejected before inversion.
pub const BEAM_COND_LIMIT: f64 = 1e6;
/// Observation energy below this means the chosen beams miss the channel.
const DEGENERATE_OBS_NORM: f64 = 1e-10;
/// A leading element smaller than this cannot anchor the gauge.
const NORMALIZATION_FLOOR: f64 = 1e-12;

fn normalize_first(v: DVector<C64>, context: &'static str) -> Result<DVector<C64>> {
    let head = v[0];
    if head.norm() < NORMALIZATION_FLOOR {
        return Err(Error::NormalizationFailure { context, magnitude: head.norm() });
    }
    let mut out = v.map(|e| e / head);
    out[0] = C64::new(1.0, 0.0);
    Ok(out)
}

/// Best rank-1 fit Y ≈ r tᵀ, both factors gauge-normalized. `r` runs over
/// rows (the receive side), `t` over columns (the transmit side).
pub fn solve_rank1_ls(y: &DMatrix<C64>) -> Result<(DVector<C64>, DVector<C64>)> {
    let norm = y.norm();
    if norm < DEGENERATE_OBS_NORM {
        return Err(Error::DegenerateChannel { norm });
    }
    let svd = y.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let v_t = svd.v_t.as_ref().unwrap();
    let sv = &svd.singular_values;
    let mut k = 0;
    for i in 1..sv.len() {
        if sv[i] > sv[k] {
            k = i;
        }
    }
    // Y = σ u v^H, so row k of v_t is already the plain-transpose factor.
    let r = DVector::from_fn(u.nrows(), |i, _| u[(i, k)]);
    let t = DVector::from_fn(v_t.ncols(), |i, _| v_t[(k, i)]);
    Ok((normalize_first(r, "rank-1 receive factor")?, normalize_first(t, "rank-1 transmit factor")?))
}

/// Digital-chain estimates from one direction of pilots.
#[derive(Debug, Clone)]
pub struct DigitalEstimates {
    /// Transmit coefficients of the transmitting node, t1[0] forced to 1.
    pub t1_tx: DVector<C64>,
    /// Receive coefficients of the receiving node, r1[0] forced to 1.
    pub r1_rx: DVector<C64>,
    /// Codebook column that produced a usable effective channel.
    pub beam_index: usize,
    pub pilots_used: usize,
}

fn digital_once<R: Rng>(
    link: &mut Link,
    dir: Direction,
    f1: &DVector<C64>,
    b1: &DVector<C64>,
    pilot: C64,
    rng: &mut R,
) -> Result<(DVector<C64>, DVector<C64>)> {
    let n_tx = link.tx_node(dir).digital_chains();
    let n_rx = link.rx_node(dir).digital_chains();
    let f = DMatrix::from_fn(f1.len(), n_tx, |i, _| f1[i]);
    let b = DMatrix::from_fn(b1.len(), n_rx, |i, _| b1[i]);
    let mut y = DMatrix::<C64>::zeros(n_rx, n_tx);
    for i in 0..n_tx {
        let x = DVector::from_fn(n_tx, |j, _| if j == i { pilot } else { C64::new(0.0, 0.0) });
        let obs = link.transmit(dir, &f, &x, &b, rng)?;
        y.set_column(i, &obs);
    }
    let (r_rx, t_tx) = solve_rank1_ls(&y)?;
    Ok((t_tx, r_rx))
}

/// Estimates the transmit-side t1 and receive-side r1 digital coefficients
/// from N_tx pilots, each driving one transmit chain behind a fixed beam
/// pair. A beam pair that misses the channel is skipped and the next
/// codebook column tried; the pilots it burned stay on the bill.
pub fn digital_calibration<R: Rng>(
    link: &mut Link,
    dir: Direction,
    tx_beams: &BeamformerMatrix,
    rx_beams: &BeamformerMatrix,
    pilot: C64,
    rng: &mut R,
) -> Result<DigitalEstimates> {
    let attempts = tx_beams.mat.ncols().min(rx_beams.mat.ncols());
    let per_attempt = link.tx_node(dir).digital_chains();
    let mut pilots_used = 0;
    let mut last_degenerate = None;
    for j in 0..attempts {
        let f1 = tx_beams.column(j);
        let b1 = rx_beams.column(j);
        pilots_used += per_attempt;
        match digital_once(link, dir, &f1, &b1, pilot, rng) {
            Ok((t1_tx, r1_rx)) => {
                return Ok(DigitalEstimates { t1_tx, r1_rx, beam_index: j, pilots_used })
            }
            Err(e @ Error::DegenerateChannel { .. }) => last_degenerate = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_degenerate.unwrap_or(Error::DegenerateChannel { norm: 0.0 }))
}

/// Beam-domain observation pair for the analog solver: X from the a→b sweep,
/// Z from the b→a sweep, both unwrapped to c·R2ᵇ H T2ᵃ and c′·T2ᵇ H R2ᵃ by
/// inverting the codebooks. Receive-side digital coefficients are folded into
/// the receive codebook first (column m picks up r̂1[m mod N]) since each
/// swept group tapped a different chain.
pub fn build_xz(
    y_ab: &ObservationMatrix,
    y_ba: &ObservationMatrix,
    f: &BeamformerMatrix,
    b: &BeamformerMatrix,
    r1_hat_a: &DVector<C64>,
    r1_hat_b: &DVector<C64>,
) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    if y_ab.direction != Direction::Downlink || y_ba.direction != Direction::Uplink {
        return Err(Error::DimensionMismatch {
            context: "build_xz",
            detail: "observation sweeps must be the node_a→node_b and node_b→node_a passes".into(),
        });
    }
    let (m_a, m_b) = (f.mat.ncols(), b.mat.ncols());
    if f.mat.nrows() != m_a || b.mat.nrows() != m_b {
        return Err(Error::DimensionMismatch {
            context: "build_xz",
            detail: "codebooks must be square to be invertible".into(),
        });
    }
    if y_ab.data.nrows() != m_b || y_ab.data.ncols() != m_a || y_ba.data.nrows() != m_a || y_ba.data.ncols() != m_b {
        return Err(Error::DimensionMismatch {
            context: "build_xz",
            detail: format!(
                "observations {}x{} / {}x{} do not match codebooks {}x{} / {}x{}",
                y_ab.data.nrows(),
                y_ab.data.ncols(),
                y_ba.data.nrows(),
                y_ba.data.ncols(),
                m_b,
                m_a,
                m_b,
                m_a
            ),
        });
    }
    for (name, mat) in [("transmit codebook", &f.mat), ("receive codebook", &b.mat)] {
        let cond = condition_number(mat);
        if cond > BEAM_COND_LIMIT {
            return Err(Error::IllConditioned { what: name, cond, limit: BEAM_COND_LIMIT });
        }
    }
    let (n_a, n_b) = (r1_hat_a.len(), r1_hat_b.len());
    let b_scaled = DMatrix::from_fn(m_b, m_b, |i, j| b.mat[(i, j)] * r1_hat_b[j % n_b]);
    let f_scaled = DMatrix::from_fn(m_a, m_a, |i, j| f.mat[(i, j)] * r1_hat_a[j % n_a]);
    let f_inv = f.mat.clone().try_inverse().ok_or(Error::RankDeficient {
        detail: "transmit codebook is singular".into(),
    })?;
    let b_inv = b.mat.transpose().try_inverse().ok_or(Error::RankDeficient {
        detail: "receive codebook is singular".into(),
    })?;
    let bs_inv = b_scaled.transpose().try_inverse().ok_or(Error::RankDeficient {
        detail: "scaled receive codebook is singular".into(),
    })?;
    let fs_inv = f_scaled.try_inverse().ok_or(Error::RankDeficient {
        detail: "scaled transmit codebook is singular".into(),
    })?;
    let x = &bs_inv * &y_ab.data * &f_inv;
    let z = &b_inv * y_ba.data.transpose() * &fs_inv;
    Ok((x, z))
}

pub(crate) fn smallest_right_singular_vector(
    a: &DMatrix<C64>,
) -> Result<(DVector<C64>, f64, f64)> {
    let n = a.ncols();
    // A wide system hides its nullspace from the thin SVD; zero rows restore it.
    let mat = if a.nrows() < n {
        let mut padded = DMatrix::<C64>::zeros(n, n);
        padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
        padded
    } else {
        a.clone()
    };
    let svd = mat.svd(false, true);
    let v_t = svd.v_t.as_ref().unwrap();
    let sv = &svd.singular_values;
    let mut k = 0;
    for i in 1..sv.len() {
        if sv[i] < sv[k] {
            k = i;
        }
    }
    let mut second = f64::INFINITY;
    for i in 0..sv.len() {
        if i != k && sv[i] < second {
            second = sv[i];
        }
    }
    let v = DVector::from_fn(n, |i, _| v_t[(k, i)].conj());
    Ok((v, sv[k], second - sv[k]))
}

/// Analog-ratio estimates for the two ends of one link.
#[derive(Debug, Clone)]
pub struct AnalogSolution {
    /// node_a per-antenna ratios r2/t2, alpha[0] forced to 1.
    pub alpha: DVector<C64>,
    /// node_b per-antenna ratios, same gauge.
    pub alpha_peer: DVector<C64>,
    /// Squared smallest singular value of the homogeneous system.
    pub residual: f64,
    /// Distance to the next singular value; a small gap means the solution
    /// direction is poorly isolated.
    pub gap: f64,
}

/// Solves x_ij α_j = β z_ij α′_i in the homogeneous least-squares sense.
/// The stacked unknown is [α; βα′]; β never needs to be known because each
/// block is renormalized to its own first element.
pub fn solve_analog_ls(x: &DMatrix<C64>, z: &DMatrix<C64>) -> Result<AnalogSolution> {
    if x.shape() != z.shape() {
        return Err(Error::DimensionMismatch {
            context: "solve_analog_ls",
            detail: format!("X is {}x{}, Z is {}x{}", x.nrows(), x.ncols(), z.nrows(), z.ncols()),
        });
    }
    let (m_b, m_a) = x.shape();
    let mut a = DMatrix::<C64>::zeros(m_a * m_b, m_a + m_b);
    for i in 0..m_b {
        for j in 0..m_a {
            let row = i * m_a + j;
            a[(row, j)] = x[(i, j)];
            a[(row, m_a + i)] = -z[(i, j)];
        }
    }
    let (v, s_min, gap) = smallest_right_singular_vector(&a)?;
    let alpha = normalize_first(v.rows(0, m_a).into_owned(), "analog ratios, first node")?;
    let alpha_peer = normalize_first(v.rows(m_a, m_b).into_owned(), "analog ratios, second node")?;
    Ok(AnalogSolution { alpha, alpha_peer, residual: s_min * s_min, gap })
}

/// Full analog step: codebook sweeps in both directions, unwrap, solve.
/// Returns the solution and the pilot count it consumed.
pub fn analog_calibration<R: Rng>(
    link: &mut Link,
    f: &BeamformerMatrix,
    b: &BeamformerMatrix,
    r1_hat_a: &DVector<C64>,
    r1_hat_b: &DVector<C64>,
    pilot: C64,
    rng: &mut R,
) -> Result<(AnalogSolution, usize)> {
    let y_ab = gather_observations(link, Direction::Downlink, &f.mat, &b.mat, pilot, rng)?;
    let y_ba = gather_observations(link, Direction::Uplink, &b.mat, &f.mat, pilot, rng)?;
    let pilots = y_ab.pilots_used + y_ba.pilots_used;
    let (x, z) = build_xz(&y_ab, &y_ba, f, b, r1_hat_a, r1_hat_b)?;
    let sol = solve_analog_ls(&x, &z)?;
    Ok((sol, pilots))
}

/// Everything the two-step procedure learns about a node pair.
#[derive(Debug, Clone)]
pub struct CalibrationEstimate {
    pub t1_hat: DVector<C64>,
    pub r1_hat: DVector<C64>,
    pub t1_hat_peer: DVector<C64>,
    pub r1_hat_peer: DVector<C64>,
    pub alpha_hat: DVector<C64>,
    pub alpha_hat_peer: DVector<C64>,
    pub residual: f64,
    pub gap: f64,
    pub pilots_used: usize,
}

/// Runs digital calibration in both directions, then the analog step, and
/// collects the estimates for both ends. Non-peer fields belong to node_a.
pub fn calibrate_pair<R: Rng>(
    link: &mut Link,
    f: &BeamformerMatrix,
    b: &BeamformerMatrix,
    pilot: C64,
    rng: &mut R,
) -> Result<CalibrationEstimate> {
    let fwd = digital_calibration(link, Direction::Downlink, f, b, pilot, rng)?;
    let rev = digital_calibration(link, Direction::Uplink, b, f, pilot, rng)?;
    let (sol, analog_pilots) = analog_calibration(link, f, b, &rev.r1_rx, &fwd.r1_rx, pilot, rng)?;
    Ok(CalibrationEstimate {
        t1_hat: fwd.t1_tx,
        r1_hat: rev.r1_rx,
        t1_hat_peer: rev.t1_tx,
        r1_hat_peer: fwd.r1_rx,
        alpha_hat: sol.alpha,
        alpha_hat_peer: sol.alpha_peer,
        residual: sol.residual,
        gap: sol.gap,
        pilots_used: fwd.pilots_used + rev.pilots_used + analog_pilots,
    })
}

/// Role a beam played in the forward direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeamRole {
    Transmit,
    Receive,
}

/// Reverse-direction counterpart of a beam: a transmit beam is reused for
/// receiving as diag(α)⁻¹f, a receive beam for transmitting as diag(α)b.
/// Swapping both ends this way makes the reverse observation proportional to
/// the forward one through hardware scalars alone.
pub fn reciprocal_tandem(
    beam: &DVector<C64>,
    alpha: &DVector<C64>,
    role: BeamRole,
) -> Result<DVector<C64>> {
    if beam.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            context: "reciprocal_tandem",
            detail: format!("beam has {} entries, alpha has {}", beam.len(), alpha.len()),
        });
    }
    match role {
        BeamRole::Receive => Ok(DVector::from_fn(beam.len(), |i, _| alpha[i] * beam[i])),
        BeamRole::Transmit => {
            for i in 0..alpha.len() {
                if alpha[i].norm() == 0.0 {
                    return Err(Error::ZeroAlphaEntry { index: i });
                }
            }
            Ok(DVector::from_fn(beam.len(), |i, _| beam[i] / alpha[i]))
        }
    }
}

/// Measures the residual scale mismatch between two already-calibrated APs
/// with two pilots. Forward: node_a sends f_ref, node_b listens on b_other.
/// Reverse: both ends switch to their reciprocal tandems, so the propagation
/// term cancels in the ratio and only the first-chain hardware scales remain.
pub fn inter_ap_ratio<R: Rng>(
    link: &mut Link,
    f_ref: &DVector<C64>,
    b_other: &DVector<C64>,
    alpha_ref: &DVector<C64>,
    alpha_other: &DVector<C64>,
    pilot: C64,
    rng: &mut R,
) -> Result<(C64, usize)> {
    let x = DVector::from_element(1, pilot);
    let f = DMatrix::from_fn(f_ref.len(), 1, |i, _| f_ref[i]);
    let b = DMatrix::from_fn(b_other.len(), 1, |i, _| b_other[i]);
    let y_fwd = link.transmit(Direction::Downlink, &f, &x, &b, rng)?;
    let g = reciprocal_tandem(b_other, alpha_other, BeamRole::Receive)?;
    let w = reciprocal_tandem(f_ref, alpha_ref, BeamRole::Transmit)?;
    let g = DMatrix::from_fn(g.len(), 1, |i, _| g[i]);
    let w = DMatrix::from_fn(w.len(), 1, |i, _| w[i]);
    let y_rev = link.transmit(Direction::Uplink, &g, &x, &w, rng)?;
    let (fwd, rev) = (y_fwd[0].norm(), y_rev[0].norm());
    if rev < 1e-12 * fwd {
        return Err(Error::DegenerateRatio { forward: fwd, reverse: rev });
    }
    Ok((y_fwd[0] / y_rev[0], 2))
}

/// Analog ratios for three nodes solved in one system.
#[derive(Debug, Clone)]
pub struct JointAnalogSolution {
    /// Shared node (appears in both links), gauge-normalized.
    pub alpha: DVector<C64>,
    pub alpha_second: DVector<C64>,
    pub alpha_third: DVector<C64>,
    pub residual: f64,
    pub gap: f64,
}

/// Couples two pairwise systems that share node 1: observations (x12, z12)
/// from link 1↔2 and (x13, z13) from link 1↔3 constrain one stacked unknown
/// [α¹; β₁₂α²; β₁₃α³], so every equation helps pin down the shared block.
pub fn joint_analog_calibration(
    x12: &DMatrix<C64>,
    z12: &DMatrix<C64>,
    x13: &DMatrix<C64>,
    z13: &DMatrix<C64>,
) -> Result<JointAnalogSolution> {
    if x12.shape() != z12.shape() || x13.shape() != z13.shape() || x12.ncols() != x13.ncols() {
        return Err(Error::DimensionMismatch {
            context: "joint_analog_calibration",
            detail: format!(
                "X/Z shapes {}x{}, {}x{}, {}x{}, {}x{} are inconsistent",
                x12.nrows(),
                x12.ncols(),
                z12.nrows(),
                z12.ncols(),
                x13.nrows(),
                x13.ncols(),
                z13.nrows(),
                z13.ncols()
            ),
        });
    }
    let m1 = x12.ncols();
    let (m2, m3) = (x12.nrows(), x13.nrows());
    let mut a = DMatrix::<C64>::zeros(m1 * m2 + m1 * m3, m1 + m2 + m3);
    for i in 0..m2 {
        for j in 0..m1 {
            let row = i * m1 + j;
            a[(row, j)] = x12[(i, j)];
            a[(row, m1 + i)] = -z12[(i, j)];
        }
    }
    let base = m1 * m2;
    for i in 0..m3 {
        for j in 0..m1 {
            let row = base + i * m1 + j;
            a[(row, j)] = x13[(i, j)];
            a[(row, m1 + m2 + i)] = -z13[(i, j)];
        }
    }
    let (v, s_min, gap) = smallest_right_singular_vector(&a)?;
    let alpha = normalize_first(v.rows(0, m1).into_owned(), "joint ratios, shared node")?;
    let alpha_second = normalize_first(v.rows(m1, m2).into_owned(), "joint ratios, second node")?;
    let alpha_third = normalize_first(v.rows(m1 + m2, m3).into_owned(), "joint ratios, third node")?;
    Ok(JointAnalogSolution { alpha, alpha_second, alpha_third, residual: s_min * s_min, gap })
}

// ── tests ───────────────────────────────────────────────────────────────────
