//! Cooperative zero-forcing precoding and sum-rate scoring. Channels are
//! stored antennas × users (one column per user); the received model is
//! y = Hᵀ W D s + z with plain transposes throughout, so calibrated
//! uplink-derived estimates feed the precoder without conjugation.

use crate::error::{Error, Result};
use crate::model::condition_number;
use crate::C64;
use nalgebra::DMatrix;

/// Gram matrices worse conditioned than this mean near-collinear users.
pub const ZF_COND_LIMIT: f64 = 1e8;

/// Precoder plus the power split it will be driven with.
#[derive(Debug, Clone)]
pub struct PrecodingSetup {
    /// Antennas × users, unit-norm columns.
    pub w: DMatrix<C64>,
    /// Per-user transmit power.
    pub powers: Vec<f64>,
    pub noise_variance: f64,
}

impl PrecodingSetup {
    pub fn uniform(w: DMatrix<C64>, total_power: f64, noise_variance: f64) -> Self {
        let users = w.ncols();
        PrecodingSetup { w, powers: vec![total_power / users as f64; users], noise_variance }
    }
}

/// Pseudo-inverse of Ĥᵀ: W = Ĥ(ĤᵀĤ)⁻¹, not yet column-normalized, so that
/// ĤᵀW = I holds exactly and can be checked as a residual.
pub fn zf_precoder_unnormalized(h_hat: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let (antennas, users) = h_hat.shape();
    if users == 0 || antennas < users {
        return Err(Error::DimensionMismatch {
            context: "zf_precoder",
            detail: format!("{users} users need at least {users} antennas, have {antennas}"),
        });
    }
    let gram = h_hat.transpose() * h_hat;
    let cond = condition_number(&gram);
    if cond >= ZF_COND_LIMIT {
        return Err(Error::IllConditioned { what: "user Gram matrix", cond, limit: ZF_COND_LIMIT });
    }
    let gram_inv = gram.try_inverse().ok_or(Error::RankDeficient {
        detail: "user Gram matrix is singular: fewer effective antennas than users".into(),
    })?;
    Ok(h_hat * gram_inv)
}

/// Zero-forcing precoder with unit-norm columns, one per user.
pub fn zf_precoder(h_hat: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let mut w = zf_precoder_unnormalized(h_hat)?;
    for mut col in w.column_iter_mut() {
        let n = col.norm();
        if n == 0.0 {
            return Err(Error::RankDeficient { detail: "zero precoder column".into() });
        }
        col /= C64::new(n, 0.0);
    }
    Ok(w)
}

/// SINR_u = P_u|h_uᵀw_u|² / (Σ_{v≠u} P_v|h_uᵀw_v|² + σ_z²) with h_u the
/// u-th column of the true channel.
pub fn sinr_per_user(h_true: &DMatrix<C64>, setup: &PrecodingSetup) -> Result<Vec<f64>> {
    let users = h_true.ncols();
    if setup.w.nrows() != h_true.nrows() || setup.w.ncols() != users || setup.powers.len() != users {
        return Err(Error::DimensionMismatch {
            context: "sinr_per_user",
            detail: format!(
                "channel {}x{}, precoder {}x{}, {} powers",
                h_true.nrows(),
                h_true.ncols(),
                setup.w.nrows(),
                setup.w.ncols(),
                setup.powers.len()
            ),
        });
    }
    let cross = h_true.transpose() * &setup.w;
    let mut out = Vec::with_capacity(users);
    for u in 0..users {
        let signal = setup.powers[u] * cross[(u, u)].norm_sqr();
        let mut interference = 0.0;
        for v in 0..users {
            if v != u {
                interference += setup.powers[v] * cross[(u, v)].norm_sqr();
            }
        }
        out.push(signal / (interference + setup.noise_variance));
    }
    Ok(out)
}

/// Sum of log2(1 + SINR) over users. SINRs must be non-negative; +inf is
/// legal (a noise-free interference-free link) and yields an infinite rate.
pub fn sum_rate(sinrs: &[f64]) -> Result<f64> {
    for (i, s) in sinrs.iter().enumerate() {
        if *s < 0.0 || s.is_nan() {
            return Err(Error::InvalidInput {
                context: "sum_rate",
                detail: format!("sinr[{i}] = {s} is negative or NaN"),
            });
        }
    }
    Ok(sinrs.iter().map(|s| (1.0 + s).log2()).sum())
}

// ── tests ───────────────────────────────────────────────────────────────────
