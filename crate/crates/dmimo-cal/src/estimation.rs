//! Downlink channel acquisition without downlink pilots: estimate the
//! effective uplink over the air, flip it with the calibrated analog ratios,
//! and splice per-AP blocks into one coherent multi-AP downlink matrix.

use crate::airlink::{gather_observations, Direction, Link};
use crate::calibration::BEAM_COND_LIMIT;
use crate::error::{Error, Result};
use crate::model::{condition_number, BeamformerMatrix};
use crate::C64;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Beam-compensated channel estimate from one sweep direction.
#[derive(Debug, Clone)]
pub struct EffectiveChannel {
    /// AP antennas × MU antennas for an uplink estimate.
    pub matrix: DMatrix<C64>,
    pub direction: Direction,
    pub pilots_used: usize,
}

/// Sweeps uplink pilots (MU transmits, AP receives) and strips the codebooks
/// back off, leaving r1 t1′ s · R2 Hᵀ T2′ up to the digital-chain gauge. The
/// AP's receive digital estimates fold into its codebook columnwise because
/// successive receive groups tap successive chains.
pub fn estimate_ul_effective<R: Rng>(
    link: &mut Link,
    f: &BeamformerMatrix,
    b: &BeamformerMatrix,
    r1_hat_ap: &DVector<C64>,
    pilot: C64,
    rng: &mut R,
) -> Result<EffectiveChannel> {
    let (m_ap, m_mu) = (f.mat.ncols(), b.mat.ncols());
    if f.mat.nrows() != m_ap || b.mat.nrows() != m_mu {
        return Err(Error::DimensionMismatch {
            context: "estimate_ul_effective",
            detail: "codebooks must be square to be invertible".into(),
        });
    }
    for (name, mat) in [("AP codebook", &f.mat), ("MU codebook", &b.mat)] {
        let cond = condition_number(mat);
        if cond > BEAM_COND_LIMIT {
            return Err(Error::IllConditioned { what: name, cond, limit: BEAM_COND_LIMIT });
        }
    }
    let y_ul = gather_observations(link, Direction::Uplink, &b.mat, &f.mat, pilot, rng)?;
    let n_ap = r1_hat_ap.len();
    let f_scaled = DMatrix::from_fn(m_ap, m_ap, |i, j| f.mat[(i, j)] * r1_hat_ap[j % n_ap]);
    let ft_inv = f_scaled.transpose().try_inverse().ok_or(Error::RankDeficient {
        detail: "scaled AP codebook is singular".into(),
    })?;
    let b_inv = b.mat.clone().try_inverse().ok_or(Error::RankDeficient {
        detail: "MU codebook is singular".into(),
    })?;
    let matrix = &ft_inv * &y_ul.data * &b_inv;
    Ok(EffectiveChannel { matrix, direction: Direction::Uplink, pilots_used: y_ul.pilots_used })
}

/// Converts an uplink estimate into the downlink effective channel:
/// diag(α_mu) · ULᵀ · diag(α_ap)⁻¹. With calibrated ratios this equals
/// R2′ H T2 up to one scalar per MU, which zero-forcing cannot see.
pub fn dl_from_ul(
    ul: &EffectiveChannel,
    alpha_ap: &DVector<C64>,
    alpha_mu: &DVector<C64>,
) -> Result<DMatrix<C64>> {
    if ul.direction != Direction::Uplink {
        return Err(Error::DimensionMismatch {
            context: "dl_from_ul",
            detail: "input must be an uplink estimate".into(),
        });
    }
    let (m_ap, m_mu) = ul.matrix.shape();
    if alpha_ap.len() != m_ap || alpha_mu.len() != m_mu {
        return Err(Error::DimensionMismatch {
            context: "dl_from_ul",
            detail: format!(
                "estimate is {}x{} but ratio vectors have {} and {} entries",
                m_ap,
                m_mu,
                alpha_ap.len(),
                alpha_mu.len()
            ),
        });
    }
    for j in 0..m_ap {
        if alpha_ap[j].norm() == 0.0 {
            return Err(Error::ZeroAlphaEntry { index: j });
        }
    }
    Ok(DMatrix::from_fn(m_mu, m_ap, |i, j| alpha_mu[i] * ul.matrix[(j, i)] / alpha_ap[j]))
}

/// Stacks per-AP downlink blocks (antennas × users each) along the antenna
/// dimension after dividing block k by its measured scale ratio against the
/// reference AP, aligning every block to the reference AP's unknown scale.
/// Users stay as columns, ready for the zero-forcing precoder.
pub fn assemble_multi_ap(blocks: &[DMatrix<C64>], ratios: &[C64]) -> Result<DMatrix<C64>> {
    if blocks.is_empty() || blocks.len() != ratios.len() {
        return Err(Error::DimensionMismatch {
            context: "assemble_multi_ap",
            detail: format!("{} blocks but {} ratios", blocks.len(), ratios.len()),
        });
    }
    let users = blocks[0].ncols();
    for (k, blk) in blocks.iter().enumerate() {
        if blk.ncols() != users {
            return Err(Error::DimensionMismatch {
                context: "assemble_multi_ap",
                detail: format!("block {} serves {} users, block 0 serves {}", k, blk.ncols(), users),
            });
        }
        if ratios[k].norm() == 0.0 {
            return Err(Error::DegenerateRatio { forward: 0.0, reverse: 0.0 });
        }
    }
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::<C64>::zeros(total, users);
    let mut row = 0;
    for (blk, &c) in blocks.iter().zip(ratios) {
        for i in 0..blk.nrows() {
            for u in 0..users {
                out[(row + i, u)] = blk[(i, u)] / c;
            }
        }
        row += blk.nrows();
    }
    Ok(out)
}

// ── tests ───────────────────────────────────────────────────────────────────
