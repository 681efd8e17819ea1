//! Monte Carlo experiment orchestration: per-trial seeding, the three-arm
//! sum-rate trial, axis sweeps with CSV emission, config-file parsing, the
//! single-pair calibration report, and the planted-solution selftest battery.

use crate::airlink::{gather_observations, Direction, Link};
use crate::beamsearch::best_beam_pair;
use crate::calibration::{
    build_xz, calibrate_pair, digital_calibration, inter_ap_ratio, joint_analog_calibration,
    reciprocal_tandem, smallest_right_singular_vector, solve_analog_ls, solve_rank1_ls, BeamRole,
};
use crate::error::{Error, Result};
use crate::estimation::{assemble_multi_ap, dl_from_ul, estimate_ul_effective};
use crate::model::{
    dft_codebook, gen_mismatch_profile, gen_multipath_channel, MultipathChannel, NodeProfile,
    SystemConfig,
};
use crate::zfbf::{sinr_per_user, sum_rate, zf_precoder, PrecodingSetup};
use crate::C64;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::path::Path;
use std::str::FromStr;

// ── seeding ─────────────────────────────────────────────────────────────────

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Splitmix-style seed derivation: absorb the stream tag and trial index one
/// word at a time, scaling the running state by the golden-ratio constant so
/// absorption is position-dependent, then finalize. Trials get effectively
/// independent generator seeds, so they can run in any order or in parallel
/// without draw-order coupling.
pub fn derive_seed(master_seed: u64, stream: u64, trial_index: u64) -> u64 {
    const GAMMA: u64 = 0x9e3779b97f4a7c15;
    let mut state = master_seed;
    for word in [stream, trial_index] {
        state = mix64(state.wrapping_mul(GAMMA).wrapping_add(GAMMA).wrapping_add(word));
    }
    mix64(state)
}

// ── metrics ─────────────────────────────────────────────────────────────────

/// MSE after dividing estimate and truth by their own first elements, which
/// removes the scaling gauge every calibration estimate carries.
pub fn normalized_mse(est: &DVector<C64>, truth: &DVector<C64>) -> Result<f64> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "normalized_mse",
            detail: format!("estimate has {} entries, truth {}", est.len(), truth.len()),
        });
    }
    for (name, head) in [("estimate", est[0]), ("truth", truth[0])] {
        if head.norm() < 1e-300 {
            let _ = name;
            return Err(Error::NormalizationFailure {
                context: "normalized_mse",
                magnitude: head.norm(),
            });
        }
    }
    let (e0, t0) = (est[0], truth[0]);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..est.len() {
        num += (est[i] / e0 - truth[i] / t0).norm_sqr();
        den += (truth[i] / t0).norm_sqr();
    }
    Ok(num / den)
}

/// Per-trial estimation quality and the three-arm sum rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialMetrics {
    pub seed: u64,
    /// Mean over AP↔MU links of the normalized MSE of each estimate.
    pub mse_t1: f64,
    pub mse_r1: f64,
    pub mse_alpha: f64,
    pub mse_alpha_peer: f64,
    pub sum_rate_perfect: f64,
    pub sum_rate_calibrated: f64,
    pub sum_rate_uncalibrated: f64,
    /// Pilots actually spent by calibration plus the calibrated arm's channel
    /// estimation. The naive arm's pilots are a baseline cost, not billed.
    pub pilots_total: usize,
}

/// Trial metrics plus the channel matrices the three precoders were built on.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub metrics: TrialMetrics,
    /// True stacked downlink effective channel, antennas × users.
    pub h_true: DMatrix<C64>,
    /// Calibrated reconstruction, same shape, one scale per user away.
    pub h_cal: DMatrix<C64>,
    /// Naive reciprocity baseline: uplink transpose, no ratio correction.
    pub h_unc: DMatrix<C64>,
}

/// Pilots a trial needs when no beam fallback occurs: per AP↔MU link the
/// digital rounds in both directions, the analog sweeps in both directions,
/// and the calibrated arm's uplink estimation sweep; per non-reference AP a
/// full beam sweep of the cross link plus the two ratio pilots.
pub fn analytic_pilot_budget(config: &SystemConfig) -> usize {
    let ul_sweep = config.antennas_mu * config.antennas_ap.div_ceil(config.digital_chains_ap);
    let per_link = config.digital_chains_ap
        + config.digital_chains_mu
        + config.antennas_ap * config.antennas_mu.div_ceil(config.digital_chains_mu)
        + 2 * ul_sweep;
    let cross_sweep = config.antennas_ap * config.antennas_ap.div_ceil(config.digital_chains_ap);
    config.num_aps * config.num_users * per_link + (cross_sweep + 2) * (config.num_aps - 1)
}

fn arm_rate(h_est: &DMatrix<C64>, h_true: &DMatrix<C64>, config: &SystemConfig) -> Result<f64> {
    let w = zf_precoder(h_est)?;
    let setup = PrecodingSetup::uniform(w, config.tx_power, config.noise_variance);
    sum_rate(&sinr_per_user(h_true, &setup)?)
}

/// One Monte Carlo trial with the per-trial seed derived from
/// (master_seed, 0, trial_index). See [`run_trial_detailed`].
pub fn run_trial(config: &SystemConfig, trial_index: usize) -> Result<TrialMetrics> {
    Ok(run_trial_detailed(config, 0, trial_index)?.metrics)
}

/// One trial under a stream tag (sweeps tag each axis point so points do not
/// share draws). Draw order is fixed: AP profiles, MU profiles, AP→MU
/// channels AP-major, cross-AP channels, then pilot noise link by link with
/// the calibrated arm's estimation before the naive arm's, then cross-AP
/// pilots. Any error is annotated with the trial index.
pub fn run_trial_detailed(
    config: &SystemConfig,
    stream: u64,
    trial_index: usize,
) -> Result<TrialOutcome> {
    trial_body(config, stream, trial_index)
        .map_err(|e| Error::Trial { index: trial_index, source: Box::new(e) })
}

fn trial_body(config: &SystemConfig, stream: u64, trial_index: usize) -> Result<TrialOutcome> {
    config.validate()?;
    if config.antennas_mu != 1 || config.digital_chains_mu != 1 {
        return Err(Error::InvalidConfig(
            "the sum-rate experiment serves single-antenna users; set antennas_mu = digital_chains_mu = 1"
                .into(),
        ));
    }
    let seed = derive_seed(config.master_seed, stream, trial_index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (aps, users) = (config.num_aps, config.num_users);
    let (m_ap, n_ap) = (config.antennas_ap, config.digital_chains_ap);
    let (sig_m, sig_p) = (config.mismatch_sigma_mag, config.mismatch_sigma_phase);

    let ap_profiles: Vec<NodeProfile> =
        (0..aps).map(|_| gen_mismatch_profile(n_ap, m_ap, sig_m, sig_p, &mut rng)).collect();
    let mu_profiles: Vec<NodeProfile> =
        (0..users).map(|_| gen_mismatch_profile(1, 1, sig_m, sig_p, &mut rng)).collect();
    let direct: Vec<Vec<MultipathChannel>> = (0..aps)
        .map(|_| {
            (0..users)
                .map(|_| gen_multipath_channel(config.num_paths, 1, m_ap, &mut rng))
                .collect()
        })
        .collect();
    let cross: Vec<MultipathChannel> =
        (1..aps).map(|_| gen_multipath_channel(config.num_paths, m_ap, m_ap, &mut rng)).collect();

    let f_ap = dft_codebook(m_ap);
    let b_mu = dft_codebook(1);
    let pilot = C64::new(1.0, 0.0);
    let ones_n = DVector::from_element(n_ap, C64::new(1.0, 0.0));
    let ones_ap = DVector::from_element(m_ap, C64::new(1.0, 0.0));
    let ones_mu = DVector::from_element(1, C64::new(1.0, 0.0));

    let mut pilots_total = 0usize;
    let (mut mse_t1, mut mse_r1, mut mse_alpha, mut mse_alpha_peer) = (0.0, 0.0, 0.0, 0.0);
    let mut cal_blocks = Vec::with_capacity(aps);
    let mut unc_blocks = Vec::with_capacity(aps);
    let mut ap_alphas: Vec<DVector<C64>> = Vec::with_capacity(aps);
    for ap in 0..aps {
        let mut per_user = Vec::with_capacity(users);
        for mu in 0..users {
            let mut link = Link::new(
                ap_profiles[ap].clone(),
                mu_profiles[mu].clone(),
                direct[ap][mu].clone(),
                config.noise_variance,
            )?;
            let est = calibrate_pair(&mut link, &f_ap, &b_mu, pilot, &mut rng)?;
            pilots_total += est.pilots_used;
            let ul_cal = estimate_ul_effective(&mut link, &f_ap, &b_mu, &est.r1_hat, pilot, &mut rng)?;
            pilots_total += ul_cal.pilots_used;
            // the naive arm rides its own pilots so neither arm observes the
            // other's noise; its spend is the baseline's, not billed here
            let ul_unc = estimate_ul_effective(&mut link, &f_ap, &b_mu, &ones_n, pilot, &mut rng)?;
            mse_t1 += normalized_mse(&est.t1_hat, &ap_profiles[ap].t1)?;
            mse_r1 += normalized_mse(&est.r1_hat, &ap_profiles[ap].r1)?;
            mse_alpha += normalized_mse(&est.alpha_hat, &ap_profiles[ap].alpha_true())?;
            mse_alpha_peer += normalized_mse(&est.alpha_hat_peer, &mu_profiles[mu].alpha_true())?;
            per_user.push((est, ul_cal, ul_unc));
        }
        // every per-link solve estimates the same AP alpha; the widest
        // singular gap marks the best-conditioned system (a faded link
        // collapses the gap), so that estimate serves reconstruction and
        // the cross-AP tandems for this AP
        let alpha_ap = per_user
            .iter()
            .max_by(|a, b| a.0.gap.total_cmp(&b.0.gap))
            .map(|(est, _, _)| est.alpha_hat.clone())
            .expect("at least one user");
        let mut cal_block = DMatrix::<C64>::zeros(m_ap, users);
        let mut unc_block = DMatrix::<C64>::zeros(m_ap, users);
        for (mu, (est, ul_cal, ul_unc)) in per_user.iter().enumerate() {
            let dl_cal = dl_from_ul(ul_cal, &alpha_ap, &est.alpha_hat_peer)?;
            let dl_unc = dl_from_ul(ul_unc, &ones_ap, &ones_mu)?;
            for j in 0..m_ap {
                cal_block[(j, mu)] = dl_cal[(0, j)];
                unc_block[(j, mu)] = dl_unc[(0, j)];
            }
        }
        cal_blocks.push(cal_block);
        unc_blocks.push(unc_block);
        ap_alphas.push(alpha_ap);
    }

    let mut ratios = vec![C64::new(1.0, 0.0); aps];
    for ap in 1..aps {
        let mut cross_link = Link::new(
            ap_profiles[0].clone(),
            ap_profiles[ap].clone(),
            cross[ap - 1].clone(),
            config.noise_variance,
        )?;
        // a broadside beam can sit in a null of the cross channel, and a
        // weak tandem sum amplifies alpha estimate errors into the ratio, so
        // sweep the codebooks once and run the exchange on the strongest pair
        let sweep = gather_observations(
            &mut cross_link,
            Direction::Downlink,
            &f_ap.mat,
            &f_ap.mat,
            pilot,
            &mut rng,
        )?;
        pilots_total += sweep.pilots_used;
        let (tx_beam, rx_beam) = best_beam_pair(&sweep);
        let (c_hat, used) = inter_ap_ratio(
            &mut cross_link,
            &f_ap.column(tx_beam),
            &f_ap.column(rx_beam),
            &ap_alphas[0],
            &ap_alphas[ap],
            pilot,
            &mut rng,
        )?;
        ratios[ap] = c_hat;
        pilots_total += used;
    }
    let h_cal = assemble_multi_ap(&cal_blocks, &ratios)?;
    let h_unc = assemble_multi_ap(&unc_blocks, &vec![C64::new(1.0, 0.0); aps])?;

    // truth at the plane the calibrated path reconstructs: transmit digital
    // chain 1, per-antenna transmit hardware, air, the user's receive antenna
    // chain. The per-user scalar t1[0]*r2[0] is the gauge factor of that
    // plane; its lognormal mean power exp(2 sigma_mag^2) is divided out so
    // sweep points compare equal-gauge-power channels, while the per-antenna
    // t2 spread stays because the precoder genuinely faces it.
    let drift = C64::new((2.0 * sig_m * sig_m).exp(), 0.0);
    let mut h_true = DMatrix::<C64>::zeros(aps * m_ap, users);
    for ap in 0..aps {
        for mu in 0..users {
            let front = ap_profiles[ap].t1[0] * mu_profiles[mu].r2[0] / drift;
            for j in 0..m_ap {
                h_true[(ap * m_ap + j, mu)] =
                    front * direct[ap][mu].matrix[(0, j)] * ap_profiles[ap].t2[j];
            }
        }
    }

    let sum_rate_perfect = arm_rate(&h_true, &h_true, config)?;
    let sum_rate_calibrated = arm_rate(&h_cal, &h_true, config)?;
    let sum_rate_uncalibrated = arm_rate(&h_unc, &h_true, config)?;

    debug_assert!(pilots_total >= analytic_pilot_budget(config));
    let links = (aps * users) as f64;
    let metrics = TrialMetrics {
        seed,
        mse_t1: mse_t1 / links,
        mse_r1: mse_r1 / links,
        mse_alpha: mse_alpha / links,
        mse_alpha_peer: mse_alpha_peer / links,
        sum_rate_perfect,
        sum_rate_calibrated,
        sum_rate_uncalibrated,
        pilots_total,
    };
    let _ = trial_index;
    Ok(TrialOutcome { metrics, h_true, h_cal, h_unc })
}

// ── sweeps ──────────────────────────────────────────────────────────────────

/// Which config field a sweep varies; every other field stays at its base.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Noise,
    Aps,
    Users,
    MismatchMag,
    MismatchPhase,
    MismatchBoth,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Noise => "noise",
            SweepAxis::Aps => "aps",
            SweepAxis::Users => "users",
            SweepAxis::MismatchMag => "mismatch_mag",
            SweepAxis::MismatchPhase => "mismatch_phase",
            SweepAxis::MismatchBoth => "mismatch_both",
        }
    }

    /// Base config with this axis set to `value`; counts must be integral.
    pub fn apply(self, base: &SystemConfig, value: f64) -> Result<SystemConfig> {
        let mut point = base.clone();
        let count = |value: f64| -> Result<usize> {
            if !value.is_finite() || value < 1.0 || value.fract() != 0.0 || value > 1e6 {
                return Err(Error::InvalidConfig(format!(
                    "axis {} needs a whole number of nodes >= 1, got {value}",
                    self.name()
                )));
            }
            Ok(value as usize)
        };
        let spread = |value: f64| -> Result<f64> {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "axis {} needs a finite value >= 0, got {value}",
                    self.name()
                )));
            }
            Ok(value)
        };
        match self {
            SweepAxis::Noise => point.noise_variance = spread(value)?,
            SweepAxis::Aps => point.num_aps = count(value)?,
            SweepAxis::Users => point.num_users = count(value)?,
            SweepAxis::MismatchMag => point.mismatch_sigma_mag = spread(value)?,
            SweepAxis::MismatchPhase => point.mismatch_sigma_phase = spread(value)?,
            SweepAxis::MismatchBoth => {
                point.mismatch_sigma_mag = spread(value)?;
                point.mismatch_sigma_phase = spread(value)?;
            }
        }
        point.validate()?;
        Ok(point)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(SweepAxis::Noise),
            "aps" => Ok(SweepAxis::Aps),
            "users" => Ok(SweepAxis::Users),
            "mismatch_mag" => Ok(SweepAxis::MismatchMag),
            "mismatch_phase" => Ok(SweepAxis::MismatchPhase),
            "mismatch_both" => Ok(SweepAxis::MismatchBoth),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep axis '{other}' (expected noise, aps, users, mismatch_mag, mismatch_phase, mismatch_both)"
            ))),
        }
    }
}

/// Trial-averaged metrics for one axis value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub trials: usize,
    pub mse_t1: f64,
    pub mse_r1: f64,
    pub mse_alpha: f64,
    pub mse_alpha_peer: f64,
    pub sum_rate_perfect: f64,
    pub sum_rate_calibrated: f64,
    pub sum_rate_uncalibrated: f64,
    /// Analytic budget for the row's configuration; an individual trial can
    /// exceed it only when a blind beam forces a codebook fallback.
    pub pilots_total: usize,
}

/// One sweep point with the per-trial metrics behind its averages.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub row: SweepRow,
    pub trials: Vec<TrialMetrics>,
}

fn reduce_row(axis_value: f64, point: &SystemConfig, trials: &[TrialMetrics]) -> SweepRow {
    let n = trials.len() as f64;
    let mut row = SweepRow {
        axis_value,
        trials: trials.len(),
        mse_t1: 0.0,
        mse_r1: 0.0,
        mse_alpha: 0.0,
        mse_alpha_peer: 0.0,
        sum_rate_perfect: 0.0,
        sum_rate_calibrated: 0.0,
        sum_rate_uncalibrated: 0.0,
        pilots_total: analytic_pilot_budget(point),
    };
    // summed in trial order so the reduction is independent of scheduling
    for m in trials {
        row.mse_t1 += m.mse_t1;
        row.mse_r1 += m.mse_r1;
        row.mse_alpha += m.mse_alpha;
        row.mse_alpha_peer += m.mse_alpha_peer;
        row.sum_rate_perfect += m.sum_rate_perfect;
        row.sum_rate_calibrated += m.sum_rate_calibrated;
        row.sum_rate_uncalibrated += m.sum_rate_uncalibrated;
    }
    row.mse_t1 /= n;
    row.mse_r1 /= n;
    row.mse_alpha /= n;
    row.mse_alpha_peer /= n;
    row.sum_rate_perfect /= n;
    row.sum_rate_calibrated /= n;
    row.sum_rate_uncalibrated /= n;
    row
}

/// Runs num_trials trials per axis value and keeps the per-trial metrics.
/// Point i uses stream tag i, so each point draws independent trials. Trials
/// run in parallel; reduction happens in trial-index order.
pub fn sweep_detailed(
    config: &SystemConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one axis value".into()));
    }
    config.validate()?;
    let mut points = Vec::with_capacity(values.len());
    for (stream, &value) in values.iter().enumerate() {
        let point = axis.apply(config, value)?;
        let outcomes: Vec<Result<TrialMetrics>> = (0..point.num_trials)
            .into_par_iter()
            .map(|t| Ok(run_trial_detailed(&point, stream as u64, t)?.metrics))
            .collect();
        let trials = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        points.push(SweepPoint { row: reduce_row(value, &point, &trials), trials });
    }
    Ok(points)
}

/// Trial-averaged sweep; one row per axis value.
pub fn sweep(config: &SystemConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    Ok(sweep_detailed(config, axis, values)?.into_iter().map(|p| p.row).collect())
}

// ── CSV ─────────────────────────────────────────────────────────────────────

pub const CSV_HEADER: &str = "axis_value,trials,mse_t1,mse_r1,mse_alpha,mse_alpha_peer,sum_rate_perfect,sum_rate_calibrated,sum_rate_uncalibrated,pilots_total";

/// Renders rows with the frozen header, 12-significant-digit floats, and \n
/// line endings, so identical inputs give byte-identical files.
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::with_capacity(CSV_HEADER.len() + 1 + rows.len() * 200);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:.11e},{},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{}\n",
            r.axis_value,
            r.trials,
            r.mse_t1,
            r.mse_r1,
            r.mse_alpha,
            r.mse_alpha_peer,
            r.sum_rate_perfect,
            r.sum_rate_calibrated,
            r.sum_rate_uncalibrated,
            r.pilots_total
        ));
    }
    out
}

// ── config files ────────────────────────────────────────────────────────────

/// Parses a flat `key = value` config. `#` starts a comment; every
/// SystemConfig field must appear exactly once; unknown keys are errors.
pub fn parse_config(text: &str) -> Result<SystemConfig> {
    use std::collections::BTreeMap;
    let mut pairs: BTreeMap<&str, &str> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!(
                "line {lineno}: expected `key = value`, got `{line}`"
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "line {lineno}: empty key or value in `{line}`"
            )));
        }
        if pairs.insert(key, value).is_some() {
            return Err(Error::InvalidConfig(format!("line {lineno}: duplicate key `{key}`")));
        }
    }
    fn take<'a, T: FromStr>(
        pairs: &mut std::collections::BTreeMap<&'a str, &'a str>,
        key: &str,
    ) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = pairs
            .remove(key)
            .ok_or_else(|| Error::InvalidConfig(format!("missing key `{key}`")))?;
        raw.parse::<T>()
            .map_err(|e| Error::InvalidConfig(format!("key `{key}`: cannot parse `{raw}`: {e}")))
    }
    let config = SystemConfig {
        num_aps: take(&mut pairs, "num_aps")?,
        num_users: take(&mut pairs, "num_users")?,
        antennas_ap: take(&mut pairs, "antennas_ap")?,
        digital_chains_ap: take(&mut pairs, "digital_chains_ap")?,
        antennas_mu: take(&mut pairs, "antennas_mu")?,
        digital_chains_mu: take(&mut pairs, "digital_chains_mu")?,
        num_paths: take(&mut pairs, "num_paths")?,
        mismatch_sigma_mag: take(&mut pairs, "mismatch_sigma_mag")?,
        mismatch_sigma_phase: take(&mut pairs, "mismatch_sigma_phase")?,
        noise_variance: take(&mut pairs, "noise_variance")?,
        tx_power: take(&mut pairs, "tx_power")?,
        master_seed: take(&mut pairs, "master_seed")?,
        num_trials: take(&mut pairs, "num_trials")?,
    };
    if !pairs.is_empty() {
        let unknown: Vec<&str> = pairs.keys().copied().collect();
        return Err(Error::InvalidConfig(format!("unknown key(s): {}", unknown.join(", "))));
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<SystemConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

// ── calibration report ──────────────────────────────────────────────────────

/// Calibrates one symmetric pair of AP-grade nodes over a fresh channel and
/// reports estimation quality as `key = value` lines. The seed defaults to
/// the config's master_seed.
pub fn run_calibrate(config: &SystemConfig, seed_override: Option<u64>) -> Result<String> {
    config.validate()?;
    let seed = seed_override.unwrap_or(config.master_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (config.antennas_ap, config.digital_chains_ap);
    let node_a =
        gen_mismatch_profile(n, m, config.mismatch_sigma_mag, config.mismatch_sigma_phase, &mut rng);
    let node_b =
        gen_mismatch_profile(n, m, config.mismatch_sigma_mag, config.mismatch_sigma_phase, &mut rng);
    let channel = gen_multipath_channel(config.num_paths, m, m, &mut rng);
    let mut link = Link::new(node_a, node_b, channel, config.noise_variance)?;
    let f = dft_codebook(m);
    let est = calibrate_pair(&mut link, &f, &f, C64::new(1.0, 0.0), &mut rng)?;

    let mut out = String::new();
    out.push_str(&format!("seed = {seed}\n"));
    out.push_str(&format!("antennas = {m}\n"));
    out.push_str(&format!("digital_chains = {n}\n"));
    out.push_str(&format!("noise_variance = {:.11e}\n", config.noise_variance));
    for (key, mse) in [
        ("mse_t1", normalized_mse(&est.t1_hat, &link.node_a.t1)?),
        ("mse_r1", normalized_mse(&est.r1_hat, &link.node_a.r1)?),
        ("mse_t1_peer", normalized_mse(&est.t1_hat_peer, &link.node_b.t1)?),
        ("mse_r1_peer", normalized_mse(&est.r1_hat_peer, &link.node_b.r1)?),
        ("mse_alpha", normalized_mse(&est.alpha_hat, &link.node_a.alpha_true())?),
        ("mse_alpha_peer", normalized_mse(&est.alpha_hat_peer, &link.node_b.alpha_true())?),
    ] {
        out.push_str(&format!("{key} = {mse:.11e}\n"));
    }
    out.push_str(&format!("residual = {:.11e}\n", est.residual));
    out.push_str(&format!("gap = {:.11e}\n", est.gap));
    out.push_str(&format!("pilots_used = {}\n", est.pilots_used));
    Ok(out)
}

// ── statistics helpers ──────────────────────────────────────────────────────

/// Arithmetic mean; empty input yields NaN.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation over sqrt n);
/// fewer than two samples yield NaN.
pub fn std_err(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // ties share the average of the ranks they span
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput {
            context: "spearman_rho",
            detail: format!("needs two same-length series, got {} and {}", xs.len(), ys.len()),
        });
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput {
            context: "spearman_rho",
            detail: "series must be finite".into(),
        });
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..rx.len() {
        let (dx, dy) = (rx[i] - mx, ry[i] - my);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidInput {
            context: "spearman_rho",
            detail: "a series with all-equal values has no rank ordering".into(),
        });
    }
    Ok(cov / (vx * vy).sqrt())
}

// ── selftest ────────────────────────────────────────────────────────────────

/// Outcome of one planted-solution or oracle check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = std::result::Result<String, String>;

fn lib<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn planted_pair(seed: u64, m: usize, n: usize, noise: f64) -> std::result::Result<(Link, ChaCha8Rng), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = gen_mismatch_profile(n, m, 0.5, 0.5, &mut rng);
    let b = gen_mismatch_profile(n, m, 0.5, 0.5, &mut rng);
    let channel = gen_multipath_channel(3, m, m, &mut rng);
    let link = lib(Link::new(a, b, channel, noise))?;
    Ok((link, rng))
}

fn check_digital_planted() -> Check {
    let (mut link, mut rng) = planted_pair(101, 16, 4, 0.0)?;
    let f = dft_codebook(16);
    let s = C64::new(1.0, 0.0);
    let fwd = lib(digital_calibration(&mut link, Direction::Downlink, &f, &f, s, &mut rng))?;
    let after_fwd = link.tx_count;
    let rev = lib(digital_calibration(&mut link, Direction::Uplink, &f, &f, s, &mut rng))?;
    let rev_pilots = link.tx_count - after_fwd;
    let worst = [
        lib(normalized_mse(&fwd.t1_tx, &link.node_a.t1))?,
        lib(normalized_mse(&fwd.r1_rx, &link.node_b.r1))?,
        lib(normalized_mse(&rev.t1_tx, &link.node_b.t1))?,
        lib(normalized_mse(&rev.r1_rx, &link.node_a.r1))?,
    ]
    .into_iter()
    .fold(0.0f64, f64::max);
    if worst >= 1e-10 {
        return Err(format!("planted digital mse {worst:.3e} exceeds 1e-10"));
    }
    if after_fwd != 4 || rev_pilots != 4 || fwd.pilots_used != 4 || rev.pilots_used != 4 {
        return Err(format!(
            "digital budget {after_fwd}+{rev_pilots} link pilots, expected 4 per direction"
        ));
    }
    Ok(format!("worst mse {worst:.2e}, 4 pilots per direction"))
}

fn check_analog_planted() -> Check {
    let (mut link, mut rng) = planted_pair(202, 16, 4, 0.0)?;
    let f = dft_codebook(16);
    let est = lib(calibrate_pair(&mut link, &f, &f, C64::new(1.0, 0.0), &mut rng))?;
    let analog_pilots = link.tx_count - 8;
    let worst = lib(normalized_mse(&est.alpha_hat, &link.node_a.alpha_true()))?
        .max(lib(normalized_mse(&est.alpha_hat_peer, &link.node_b.alpha_true()))?);
    if worst >= 1e-10 {
        return Err(format!("planted analog mse {worst:.3e} exceeds 1e-10"));
    }
    if analog_pilots != 128 || est.pilots_used != 136 {
        return Err(format!(
            "analog budget {analog_pilots} link pilots ({} total), expected 64 per direction",
            est.pilots_used
        ));
    }
    Ok(format!("worst mse {worst:.2e}, 64 analog pilots per direction"))
}

fn check_tandem_reciprocity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let a = gen_mismatch_profile(2, 8, 0.5, 0.5, &mut rng);
    let b = gen_mismatch_profile(2, 8, 0.5, 0.5, &mut rng);
    let h = gen_multipath_channel(3, 8, 8, &mut rng).matrix;
    let codebook = dft_codebook(8);
    let f = codebook.column(1);
    let bm = codebook.column(2);
    let mut m_dl = C64::new(0.0, 0.0);
    for i in 0..8 {
        for j in 0..8 {
            m_dl += bm[i] * b.r2[i] * h[(i, j)] * a.t2[j] * f[j];
        }
    }
    let g = lib(reciprocal_tandem(&bm, &b.alpha_true(), BeamRole::Receive))?;
    let w = lib(reciprocal_tandem(&f, &a.alpha_true(), BeamRole::Transmit))?;
    let mut m_ul = C64::new(0.0, 0.0);
    for j in 0..8 {
        for i in 0..8 {
            m_ul += w[j] * a.r2[j] * h[(i, j)] * b.t2[i] * g[i];
        }
    }
    let rel = (m_dl - m_ul).norm() / m_dl.norm();
    if rel >= 1e-10 {
        return Err(format!("tandem reciprocity off by {rel:.3e}"));
    }
    Ok(format!("forward/reverse agree to {rel:.2e}"))
}

fn check_inter_ap_planted() -> Check {
    let (mut link, mut rng) = planted_pair(404, 16, 4, 0.0)?;
    let f = dft_codebook(16);
    let gauge = |p: &NodeProfile| {
        let a = p.alpha_true();
        let head = a[0];
        a.map(|e| e / head)
    };
    let alpha_a = gauge(&link.node_a);
    let alpha_b = gauge(&link.node_b);
    let (c_hat, billed) = lib(inter_ap_ratio(
        &mut link,
        &f.column(0),
        &f.column(0),
        &alpha_a,
        &alpha_b,
        C64::new(1.0, 0.0),
        &mut rng,
    ))?;
    let used = link.tx_count;
    let c = |p: &NodeProfile| p.t1[0] * p.t2[0] / (p.r2[0] * p.r1[0]);
    let expected = c(&link.node_a) / c(&link.node_b);
    let rel = (c_hat - expected).norm() / expected.norm();
    if rel >= 1e-10 {
        return Err(format!("cross-AP ratio off by {rel:.3e}"));
    }
    if billed != 2 || used != 2 {
        return Err(format!("cross-AP step used {used} pilots, expected 2"));
    }
    Ok(format!("ratio error {rel:.2e}, 2 pilots"))
}

fn check_joint_planted() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let p1 = gen_mismatch_profile(2, 8, 0.5, 0.5, &mut rng);
    let p2 = gen_mismatch_profile(2, 8, 0.5, 0.5, &mut rng);
    let p3 = gen_mismatch_profile(2, 8, 0.5, 0.5, &mut rng);
    let h12 = gen_multipath_channel(3, 8, 8, &mut rng);
    let h13 = gen_multipath_channel(3, 8, 8, &mut rng);
    let f = dft_codebook(8);
    let s = C64::new(1.0, 0.0);
    let mut observe = |peer: &NodeProfile, channel: MultipathChannel| {
        let mut link = lib(Link::new(p1.clone(), peer.clone(), channel, 0.0))?;
        let fwd = lib(digital_calibration(&mut link, Direction::Downlink, &f, &f, s, &mut rng))?;
        let rev = lib(digital_calibration(&mut link, Direction::Uplink, &f, &f, s, &mut rng))?;
        let y_ab = lib(gather_observations(&mut link, Direction::Downlink, &f.mat, &f.mat, s, &mut rng))?;
        let y_ba = lib(gather_observations(&mut link, Direction::Uplink, &f.mat, &f.mat, s, &mut rng))?;
        lib(build_xz(&y_ab, &y_ba, &f, &f, &rev.r1_rx, &fwd.r1_rx))
    };
    let (x12, z12) = observe(&p2, h12)?;
    let (x13, z13) = observe(&p3, h13)?;
    let joint = lib(joint_analog_calibration(&x12, &z12, &x13, &z13))?;
    let worst = lib(normalized_mse(&joint.alpha, &p1.alpha_true()))?
        .max(lib(normalized_mse(&joint.alpha_second, &p2.alpha_true()))?)
        .max(lib(normalized_mse(&joint.alpha_third, &p3.alpha_true()))?);
    if worst >= 1e-10 {
        return Err(format!("planted joint mse {worst:.3e} exceeds 1e-10"));
    }
    Ok(format!("worst mse {worst:.2e} across three nodes"))
}

fn fit_objective(y: &DMatrix<C64>, r: &DVector<C64>, t: &DVector<C64>) -> f64 {
    let p = r * t.transpose();
    let num: C64 = p.iter().zip(y.iter()).map(|(pij, yij)| pij.conj() * yij).sum();
    let den = p.norm_squared();
    let c = num / C64::new(den, 0.0);
    let mut obj = 0.0;
    for (pij, yij) in p.iter().zip(y.iter()) {
        obj += (yij - c * pij).norm_sqr();
    }
    obj
}

fn als_rank1(y: &DMatrix<C64>, iters: usize) -> (DVector<C64>, DVector<C64>) {
    let mut t = DVector::from_element(y.ncols(), C64::new(1.0, 0.0));
    let mut r = DVector::from_element(y.nrows(), C64::new(1.0, 0.0));
    for _ in 0..iters {
        let tn = t.norm_squared();
        r = y * t.map(|e| e.conj()) / C64::new(tn, 0.0);
        let rn = r.norm_squared();
        t = y.transpose() * r.map(|e| e.conj()) / C64::new(rn, 0.0);
    }
    (r, t)
}

fn check_rank1_als_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let gauss = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
    for round in 0..5 {
        let y = DMatrix::from_fn(4, 4, |_, _| {
            C64::new(gauss.sample(&mut rng), gauss.sample(&mut rng))
        });
        let (r, t) = lib(solve_rank1_ls(&y))?;
        let j_fit = fit_objective(&y, &r, &t);
        let (ra, ta) = als_rank1(&y, 500);
        let j_als = fit_objective(&y, &ra, &ta);
        if j_fit > j_als + 1e-8 {
            return Err(format!(
                "round {round}: alternating minimization beat the direct fit, {j_als:.9e} < {j_fit:.9e}"
            ));
        }
        if (j_fit - j_als).abs() > 1e-8 * (1.0 + j_als) {
            return Err(format!(
                "round {round}: objectives disagree, {j_fit:.9e} vs {j_als:.9e}"
            ));
        }
    }
    Ok("objectives agree to 1e-8 on 5 random 4x4 instances".into())
}

fn check_analog_eigen_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let gauss = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
    let m = 4;
    let draw = |rng: &mut ChaCha8Rng| C64::new(gauss.sample(rng), gauss.sample(rng));
    let alpha = DVector::from_fn(m, |_, _| draw(&mut rng) + C64::new(2.0, 0.0));
    let alpha_p = DVector::from_fn(m, |_, _| draw(&mut rng) + C64::new(2.0, 0.0));
    let beta = C64::new(1.3, -0.4);
    let z = DMatrix::from_fn(m, m, |_, _| draw(&mut rng));
    let x = DMatrix::from_fn(m, m, |i, j| {
        beta * z[(i, j)] * alpha_p[i] / alpha[j] + C64::new(1e-3, 0.0) * draw(&mut rng)
    });
    // the same homogeneous system solve_analog_ls stacks internally
    let mut a = DMatrix::<C64>::zeros(m * m, 2 * m);
    for i in 0..m {
        for j in 0..m {
            a[(i * m + j, j)] = x[(i, j)];
            a[(i * m + j, m + i)] = -z[(i, j)];
        }
    }
    let (v_svd, _s_min, _gap) = lib(smallest_right_singular_vector(&a))?;
    let aha = a.adjoint() * &a;
    let eig = nalgebra::SymmetricEigen::new(aha);
    let mut kmin = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[kmin] {
            kmin = i;
        }
    }
    let v_eig = eig.eigenvectors.column(kmin);
    let mut inner = C64::new(0.0, 0.0);
    for i in 0..v_svd.len() {
        inner += v_svd[i].conj() * v_eig[i];
    }
    let align = inner.norm() / (v_svd.norm() * v_eig.norm());
    if align < 1.0 - 1e-8 {
        return Err(format!("nullspace vs eigenvector alignment only {align:.12}"));
    }
    let sol = lib(solve_analog_ls(&x, &z))?;
    let mut wrapper_dev = 0.0f64;
    for j in 0..m {
        wrapper_dev = wrapper_dev.max((sol.alpha[j] - v_svd[j] / v_svd[0]).norm());
    }
    if wrapper_dev > 1e-9 {
        return Err(format!("solver disagrees with its own nullspace by {wrapper_dev:.3e}"));
    }
    Ok(format!("alignment 1 - {:.2e}", 1.0 - align))
}

fn check_end_to_end_constancy() -> Check {
    let config = SystemConfig {
        num_aps: 2,
        num_users: 1,
        antennas_ap: 16,
        digital_chains_ap: 4,
        antennas_mu: 1,
        digital_chains_mu: 1,
        num_paths: 3,
        mismatch_sigma_mag: 0.5,
        mismatch_sigma_phase: 0.5,
        noise_variance: 0.0,
        tx_power: 1.0,
        master_seed: 808,
        num_trials: 1,
    };
    let out = lib(run_trial_detailed(&config, 0, 0))?;
    let m = &out.metrics;
    let worst_mse = m.mse_t1.max(m.mse_r1).max(m.mse_alpha).max(m.mse_alpha_peer);
    if worst_mse >= 1e-10 {
        return Err(format!("noiseless trial mse {worst_mse:.3e} exceeds 1e-10"));
    }
    let reference = out.h_cal[(0, 0)] / out.h_true[(0, 0)];
    let mut worst = 0.0f64;
    for i in 0..out.h_true.nrows() {
        let ratio = out.h_cal[(i, 0)] / out.h_true[(i, 0)];
        worst = worst.max((ratio - reference).norm() / reference.norm());
    }
    if worst >= 1e-9 {
        return Err(format!("entrywise ratio wobbles by {worst:.3e}"));
    }
    let expected = analytic_pilot_budget(&config);
    if m.pilots_total != expected {
        return Err(format!("pilot bill {} differs from the {expected} budget", m.pilots_total));
    }
    Ok(format!("ratio constant to {worst:.2e}, {} pilots", m.pilots_total))
}

/// Runs the planted-solution and oracle checks the CLI `selftest` exposes.
pub fn run_selftest() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Check); 8] = [
        ("digital_planted_exact", check_digital_planted),
        ("analog_planted_exact", check_analog_planted),
        ("tandem_reciprocity", check_tandem_reciprocity),
        ("inter_ap_ratio_planted", check_inter_ap_planted),
        ("joint_planted_exact", check_joint_planted),
        ("rank1_als_oracle", check_rank1_als_oracle),
        ("analog_eigen_oracle", check_analog_eigen_oracle),
        ("end_to_end_constancy", check_end_to_end_constancy),
    ];
    checks
        .into_iter()
        .map(|(name, run)| match run() {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(detail) => CheckResult { name, passed: false, detail },
        })
        .collect()
}

// ── tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> SystemConfig {
        SystemConfig {
            num_aps: 1,
            num_users: 1,
            antennas_ap: 8,
            digital_chains_ap: 2,
            antennas_mu: 1,
            digital_chains_mu: 1,
            num_paths: 3,
            mismatch_sigma_mag: 0.5,
            mismatch_sigma_phase: 0.5,
            noise_variance: 0.0,
            tx_power: 1.0,
            master_seed: 7,
            num_trials: 2,
        }
    }

    fn rates_agree(a: f64, b: f64, tol: f64) -> bool {
        a == b || (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let mut seen = std::collections::HashSet::new();
        for master in 0..4u64 {
            for stream in 0..4u64 {
                for trial in 0..4u64 {
                    assert!(seen.insert(derive_seed(master, stream, trial)));
                }
            }
        }
        assert_eq!(seen.len(), 64);
        assert_eq!(derive_seed(42, 3, 9), derive_seed(42, 3, 9));
    }

    #[test]
    fn normalized_mse_ignores_any_global_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = gen_mismatch_profile(4, 4, 0.5, 0.5, &mut rng).t1;
        assert!(normalized_mse(&truth, &truth).unwrap() < 1e-30);
        let scaled = truth.map(|e| e * C64::new(2.0, -3.0));
        assert!(normalized_mse(&scaled, &truth).unwrap() < 1e-25);
    }

    #[test]
    fn normalized_mse_matches_hand_formula() {
        let truth = DVector::from_vec(vec![
            C64::new(1.0, 0.5),
            C64::new(-0.3, 0.2),
            C64::new(0.8, -1.1),
        ]);
        let bump = 0.1 * truth.norm();
        let mut est = truth.clone();
        est[1] += C64::new(bump, 0.0);
        let got = normalized_mse(&est, &truth).unwrap();
        // the bump avoids the first element, so normalization leaves it intact
        let expected = bump * bump / truth.norm_squared();
        assert!((got - expected).abs() < 1e-12 * expected);
        assert!((got - 0.01).abs() < 1e-12);
    }

    #[test]
    fn normalized_mse_rejects_bad_inputs() {
        let ok = DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(2.0, 0.0)]);
        let zero_head = DVector::from_vec(vec![C64::new(0.0, 0.0), C64::new(2.0, 0.0)]);
        let short = DVector::from_vec(vec![C64::new(1.0, 0.0)]);
        assert!(matches!(
            normalized_mse(&ok, &zero_head),
            Err(Error::NormalizationFailure { .. })
        ));
        assert!(matches!(
            normalized_mse(&ok, &short),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn noiseless_unmismatched_trial_is_exact_everywhere() {
        let mut config = base_config();
        config.mismatch_sigma_mag = 0.0;
        config.mismatch_sigma_phase = 0.0;
        let m = run_trial(&config, 0).unwrap();
        assert!(m.mse_t1 < 1e-10 && m.mse_r1 < 1e-10);
        assert!(m.mse_alpha < 1e-10 && m.mse_alpha_peer < 1e-10);
        // one noise-free user sees no interference, so every arm is limited
        // by nothing and the rates coincide exactly
        assert!(rates_agree(m.sum_rate_perfect, m.sum_rate_calibrated, 1e-8));
        assert!(rates_agree(m.sum_rate_perfect, m.sum_rate_uncalibrated, 1e-8));
        assert_eq!(m.pilots_total, analytic_pilot_budget(&config));
    }

    #[test]
    fn noiseless_mismatched_trial_reconstructs_truth() {
        let mut config = base_config();
        config.num_aps = 2;
        let out = run_trial_detailed(&config, 0, 0).unwrap();
        let m = &out.metrics;
        assert!(m.mse_t1 < 1e-10 && m.mse_r1 < 1e-10 && m.mse_alpha < 1e-10);
        assert_eq!(m.pilots_total, analytic_pilot_budget(&config));
        assert_eq!(m.pilots_total, 2 * (2 + 1 + 8 + 8) + 8 * 4 + 2);
        let reference = out.h_cal[(0, 0)] / out.h_true[(0, 0)];
        for i in 0..out.h_true.nrows() {
            let ratio = out.h_cal[(i, 0)] / out.h_true[(i, 0)];
            assert!((ratio - reference).norm() < 1e-9 * reference.norm(), "row {i}");
        }
    }

    #[test]
    fn noiseless_multiuser_reconstruction_is_constant_per_user() {
        let mut config = base_config();
        config.num_aps = 2;
        config.num_users = 2;
        let out = run_trial_detailed(&config, 0, 0).unwrap();
        for u in 0..2 {
            let reference = out.h_cal[(0, u)] / out.h_true[(0, u)];
            for i in 0..out.h_true.nrows() {
                let ratio = out.h_cal[(i, u)] / out.h_true[(i, u)];
                assert!((ratio - reference).norm() < 1e-9 * reference.norm(), "user {u} row {i}");
            }
        }
    }

    #[test]
    fn trials_are_bitwise_deterministic() {
        let config = base_config();
        let a = run_trial(&config, 5).unwrap();
        let b = run_trial(&config, 5).unwrap();
        assert_eq!(a.seed, b.seed);
        for (x, y) in [
            (a.mse_t1, b.mse_t1),
            (a.mse_r1, b.mse_r1),
            (a.mse_alpha, b.mse_alpha),
            (a.mse_alpha_peer, b.mse_alpha_peer),
            (a.sum_rate_perfect, b.sum_rate_perfect),
            (a.sum_rate_calibrated, b.sum_rate_calibrated),
            (a.sum_rate_uncalibrated, b.sum_rate_uncalibrated),
        ] {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c = run_trial(&config, 6).unwrap();
        assert_ne!(a.seed, c.seed);
    }

    #[test]
    fn calibration_wins_most_noisy_mismatched_trials() {
        let config = SystemConfig {
            num_aps: 2,
            num_users: 2,
            antennas_ap: 16,
            digital_chains_ap: 4,
            antennas_mu: 1,
            digital_chains_mu: 1,
            num_paths: 3,
            mismatch_sigma_mag: 0.5,
            mismatch_sigma_phase: 0.5,
            noise_variance: 1e-4,
            tx_power: 1.0,
            master_seed: 99,
            num_trials: 200,
        };
        let mut wins = 0;
        for t in 0..200 {
            let m = run_trial(&config, t).unwrap();
            if m.sum_rate_calibrated > m.sum_rate_uncalibrated {
                wins += 1;
            }
        }
        assert!(wins >= 180, "calibration won only {wins}/200 trials");
    }

    #[test]
    fn trial_rejects_multiantenna_users_with_trial_tag() {
        let mut config = base_config();
        config.antennas_mu = 2;
        config.digital_chains_mu = 2;
        let err = run_trial(&config, 7).unwrap_err();
        assert!(matches!(err, Error::Trial { index: 7, .. }));
        assert!(err.to_string().contains("trial 7"));
    }

    #[test]
    fn sweep_rows_average_the_same_trials_run_trial_sees() {
        let config = SystemConfig { num_trials: 3, ..base_config() };
        let rows = sweep(&config, SweepAxis::Noise, &[1e-4]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].trials, 3);
        let mut cfg_point = config.clone();
        cfg_point.noise_variance = 1e-4;
        let mut want = 0.0;
        for t in 0..3 {
            want += run_trial_detailed(&cfg_point, 0, t).unwrap().metrics.mse_alpha;
        }
        assert_eq!(rows[0].mse_alpha.to_bits(), (want / 3.0).to_bits());
        assert_eq!(rows[0].pilots_total, analytic_pilot_budget(&cfg_point));
    }

    #[test]
    fn sweep_axes_parse_apply_and_reject() {
        for (name, axis) in [
            ("noise", SweepAxis::Noise),
            ("aps", SweepAxis::Aps),
            ("users", SweepAxis::Users),
            ("mismatch_mag", SweepAxis::MismatchMag),
            ("mismatch_phase", SweepAxis::MismatchPhase),
            ("mismatch_both", SweepAxis::MismatchBoth),
        ] {
            assert_eq!(name.parse::<SweepAxis>().unwrap(), axis);
            assert_eq!(axis.name(), name);
        }
        assert!("snr".parse::<SweepAxis>().is_err());
        let base = base_config();
        assert_eq!(SweepAxis::Aps.apply(&base, 3.0).unwrap().num_aps, 3);
        assert!(SweepAxis::Aps.apply(&base, 2.5).is_err());
        assert!(SweepAxis::Users.apply(&base, 0.0).is_err());
        assert!(SweepAxis::Noise.apply(&base, -1.0).is_err());
        let both = SweepAxis::MismatchBoth.apply(&base, 0.3).unwrap();
        assert_eq!(both.mismatch_sigma_mag, 0.3);
        assert_eq!(both.mismatch_sigma_phase, 0.3);
        assert_eq!(both.num_aps, base.num_aps);
        assert!(sweep(&base, SweepAxis::Noise, &[]).is_err());
    }

    #[test]
    fn csv_layout_is_frozen() {
        let rows = vec![
            SweepRow {
                axis_value: 0.1,
                trials: 2,
                mse_t1: 0.5,
                mse_r1: 0.25,
                mse_alpha: 1.5e-3,
                mse_alpha_peer: 0.0,
                sum_rate_perfect: 12.0,
                sum_rate_calibrated: 11.0,
                sum_rate_uncalibrated: 10.0,
                pilots_total: 19,
            },
            SweepRow {
                axis_value: 2.0,
                trials: 1,
                mse_t1: 1.0,
                mse_r1: 1.0,
                mse_alpha: 1.0,
                mse_alpha_peer: 1.0,
                sum_rate_perfect: 1.0,
                sum_rate_calibrated: 1.0,
                sum_rate_uncalibrated: 1.0,
                pilots_total: 60,
            },
        ];
        let expected = "axis_value,trials,mse_t1,mse_r1,mse_alpha,mse_alpha_peer,sum_rate_perfect,sum_rate_calibrated,sum_rate_uncalibrated,pilots_total\n\
            1.00000000000e-1,2,5.00000000000e-1,2.50000000000e-1,1.50000000000e-3,0.00000000000e0,1.20000000000e1,1.10000000000e1,1.00000000000e1,19\n\
            2.00000000000e0,1,1.00000000000e0,1.00000000000e0,1.00000000000e0,1.00000000000e0,1.00000000000e0,1.00000000000e0,1.00000000000e0,60\n";
        assert_eq!(rows_to_csv(&rows), expected);
    }

    #[test]
    fn config_text_roundtrips_with_comments() {
        let text = "\
            # cluster geometry\n\
            num_aps = 2\n\
            num_users = 1   # served terminals\n\
            antennas_ap = 8\n\
            digital_chains_ap = 2\n\
            antennas_mu = 1\n\
            digital_chains_mu = 1\n\
            num_paths = 3\n\
            mismatch_sigma_mag = 0.5\n\
            mismatch_sigma_phase = 0.5\n\
            noise_variance = 1e-4\n\
            tx_power = 1.0\n\
            master_seed = 12345\n\
            num_trials = 10\n";
        let config = parse_config(text).unwrap();
        assert_eq!(config.num_aps, 2);
        assert_eq!(config.antennas_ap, 8);
        assert_eq!(config.noise_variance, 1e-4);
        assert_eq!(config.master_seed, 12345);
        assert_eq!(config.num_trials, 10);
    }

    #[test]
    fn config_parser_rejects_malformed_input() {
        let good = "\
            num_aps = 1\nnum_users = 1\nantennas_ap = 8\ndigital_chains_ap = 2\n\
            antennas_mu = 1\ndigital_chains_mu = 1\nnum_paths = 3\n\
            mismatch_sigma_mag = 0.5\nmismatch_sigma_phase = 0.5\n\
            noise_variance = 0\ntx_power = 1\nmaster_seed = 1\nnum_trials = 1\n";
        assert!(parse_config(good).is_ok());
        let unknown = format!("{good}extra_knob = 3\n");
        assert!(parse_config(&unknown).unwrap_err().to_string().contains("unknown key"));
        let dup = format!("{good}num_aps = 2\n");
        assert!(parse_config(&dup).unwrap_err().to_string().contains("duplicate key"));
        let missing = good.replace("tx_power = 1\n", "");
        assert!(parse_config(&missing).unwrap_err().to_string().contains("missing key `tx_power`"));
        let bad_value = good.replace("num_paths = 3", "num_paths = many");
        assert!(parse_config(&bad_value).unwrap_err().to_string().contains("cannot parse"));
        let no_eq = format!("{good}just words\n");
        assert!(parse_config(&no_eq).unwrap_err().to_string().contains("expected `key = value`"));
    }

    #[test]
    fn stats_helpers_match_hand_values() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((std_err(&[1.0, 2.0, 3.0]) - 1.0 / 3.0f64.sqrt()).abs() < 1e-12);
        assert!(std_err(&[1.0]).is_nan());
        let up = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 40.0]).unwrap();
        assert!((up - 1.0).abs() < 1e-12);
        let down = spearman_rho(&[1.0, 2.0, 3.0], &[5.0, 4.0, 3.0]).unwrap();
        assert!((down + 1.0).abs() < 1e-12);
        // tie in xs: ranks (1.5, 1.5, 3) against (1, 2, 3)
        let tied = spearman_rho(&[1.0, 1.0, 2.0], &[3.0, 5.0, 10.0]).unwrap();
        assert!((tied - 1.5 / 3.0f64.sqrt()).abs() < 1e-12);
        assert!(spearman_rho(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(spearman_rho(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn calibrate_report_is_deterministic_and_exact_when_noiseless() {
        let config = base_config();
        let report = run_calibrate(&config, Some(31)).unwrap();
        assert_eq!(report, run_calibrate(&config, Some(31)).unwrap());
        assert!(report.starts_with("seed = 31\n"));
        assert!(report.contains("\npilots_used = 68\n"));
        for key in ["mse_t1", "mse_r1", "mse_t1_peer", "mse_r1_peer", "mse_alpha", "mse_alpha_peer"]
        {
            let line = report
                .lines()
                .find(|l| l.starts_with(&format!("{key} = ")))
                .unwrap_or_else(|| panic!("missing {key}"));
            let value: f64 = line.split(" = ").nth(1).unwrap().parse().unwrap();
            assert!(value < 1e-10, "{key} = {value}");
        }
    }

    #[test]
    fn selftest_battery_passes() {
        for check in run_selftest() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
