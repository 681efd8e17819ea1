//! Over-the-air pilot plumbing: a bidirectional link between two hardware
//! nodes, single pilot transmissions through the full digital/analog chain,
//! and the grouped observation sweeps used by the calibration algorithms.
//!
//! The link's `tx_count` is the single source of truth for pilot budgets;
//! every transmission increments it exactly once.

use crate::error::{Error, Result};
use crate::model::{MultipathChannel, NodeProfile};
use crate::C64;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Which node transmits. `Downlink` is node_a → node_b; the uplink reverses
/// the roles and propagates through the plain transpose of the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Downlink,
    Uplink,
}

/// Two nodes joined by one propagation channel, oriented node_a → node_b
/// (rows index node_b antennas). AP↔MU links put the AP at node_a.
#[derive(Debug, Clone)]
pub struct Link {
    pub node_a: NodeProfile,
    pub node_b: NodeProfile,
    pub channel: MultipathChannel,
    pub noise_variance: f64,
    pub tx_count: usize,
}

impl Link {
    pub fn new(
        node_a: NodeProfile,
        node_b: NodeProfile,
        channel: MultipathChannel,
        noise_variance: f64,
    ) -> Result<Self> {
        if channel.matrix.nrows() != node_b.antennas() || channel.matrix.ncols() != node_a.antennas() {
            return Err(Error::DimensionMismatch {
                context: "Link::new",
                detail: format!(
                    "channel is {}x{} but node_b has {} antennas and node_a has {}",
                    channel.matrix.nrows(),
                    channel.matrix.ncols(),
                    node_b.antennas(),
                    node_a.antennas()
                ),
            });
        }
        Ok(Link { node_a, node_b, channel, noise_variance, tx_count: 0 })
    }

    fn ends(&self, dir: Direction) -> (&NodeProfile, &NodeProfile) {
        match dir {
            Direction::Downlink => (&self.node_a, &self.node_b),
            Direction::Uplink => (&self.node_b, &self.node_a),
        }
    }

    pub fn tx_node(&self, dir: Direction) -> &NodeProfile {
        self.ends(dir).0
    }

    pub fn rx_node(&self, dir: Direction) -> &NodeProfile {
        self.ends(dir).1
    }

    /// One pilot transmission: y = R1ʳˣ Bᵀ R2ʳˣ H T2ᵗˣ F T1ᵗˣ x + z.
    ///
    /// `f` holds the transmit beams (one column per driven digital chain, at
    /// most N_tx of them, coefficients taken from the front of t1), `x` the
    /// digital symbols, `b` the receive beams (at most N_rx columns). Noise is
    /// CN(0, σ_z² I) on the receive digital outputs; a zero-variance link
    /// consumes no RNG draws, keeping noiseless runs exactly linear.
    pub fn transmit<R: Rng>(
        &mut self,
        dir: Direction,
        f: &DMatrix<C64>,
        x: &DVector<C64>,
        b: &DMatrix<C64>,
        rng: &mut R,
    ) -> Result<DVector<C64>> {
        let (tx, rx) = self.ends(dir);
        if f.nrows() != tx.antennas() {
            return Err(Error::DimensionMismatch {
                context: "transmit",
                detail: format!("F has {} rows, tx node has {} antennas", f.nrows(), tx.antennas()),
            });
        }
        if f.ncols() != x.len() {
            return Err(Error::DimensionMismatch {
                context: "transmit",
                detail: format!("x has length {}, F has {} columns", x.len(), f.ncols()),
            });
        }
        if f.ncols() > tx.digital_chains() {
            return Err(Error::DimensionMismatch {
                context: "transmit",
                detail: format!(
                    "F drives {} digital chains, tx node has {}",
                    f.ncols(),
                    tx.digital_chains()
                ),
            });
        }
        if b.nrows() != rx.antennas() {
            return Err(Error::DimensionMismatch {
                context: "transmit",
                detail: format!("B has {} rows, rx node has {} antennas", b.nrows(), rx.antennas()),
            });
        }
        if b.ncols() > rx.digital_chains() {
            return Err(Error::DimensionMismatch {
                context: "transmit",
                detail: format!(
                    "B taps {} digital chains, rx node has {}",
                    b.ncols(),
                    rx.digital_chains()
                ),
            });
        }

        // T1 x, then beamform, then the analog transmit chains.
        let xt = DVector::from_fn(x.len(), |i, _| tx.t1[i] * x[i]);
        let mut antenna = f * xt;
        for i in 0..antenna.len() {
            antenna[i] *= tx.t2[i];
        }
        // Propagate: a→b uses H, b→a uses Hᵀ.
        let mut at_rx = match dir {
            Direction::Downlink => &self.channel.matrix * antenna,
            Direction::Uplink => self.channel.matrix.transpose() * antenna,
        };
        for i in 0..at_rx.len() {
            at_rx[i] *= rx.r2[i];
        }
        let mut y = b.transpose() * at_rx;
        for i in 0..y.len() {
            y[i] *= rx.r1[i];
        }
        if self.noise_variance > 0.0 {
            let comp = Normal::new(0.0, (self.noise_variance / 2.0).sqrt()).unwrap();
            for i in 0..y.len() {
                y[i] += C64::new(comp.sample(rng), comp.sample(rng));
            }
        }
        self.tx_count += 1;
        Ok(y)
    }
}

/// Beam-swept pilot observations arranged receive-beam × transmit-beam.
#[derive(Debug, Clone)]
pub struct ObservationMatrix {
    pub data: DMatrix<C64>,
    pub direction: Direction,
    pub pilots_used: usize,
}

/// Sweeps every transmit beam against every receive beam and returns the
/// observation matrix Y with Y[m, i] taken through receive beam m and
/// transmit beam i.
///
/// The pilot rides digital chain 1 of the transmitter. The receiver taps all
/// N_rx digital chains at once, so the receive beams are worked through in
/// ⌈C_rx/N_rx⌉ groups; a ragged final group is padded with the first receive
/// beam and the duplicate rows are dropped. Pilot cost: C_tx · ⌈C_rx/N_rx⌉.
pub fn gather_observations<R: Rng>(
    link: &mut Link,
    dir: Direction,
    tx_beams: &DMatrix<C64>,
    rx_beams: &DMatrix<C64>,
    pilot: C64,
    rng: &mut R,
) -> Result<ObservationMatrix> {
    let (_, rx) = link.ends(dir);
    let n_rx = rx.digital_chains();
    let c_tx = tx_beams.ncols();
    let c_rx = rx_beams.ncols();
    if c_tx == 0 || c_rx == 0 {
        return Err(Error::DimensionMismatch {
            context: "gather_observations",
            detail: "empty beam set".into(),
        });
    }
    let groups = c_rx.div_ceil(n_rx);
    let mut data = DMatrix::<C64>::zeros(c_rx, c_tx);
    let x = DVector::from_element(1, pilot);
    let mut pilots_used = 0;
    for i in 0..c_tx {
        let f = tx_beams.column(i).into_owned().reshape_generic(
            nalgebra::Dyn(tx_beams.nrows()),
            nalgebra::Dyn(1),
        );
        for k in 0..groups {
            let mut b = DMatrix::<C64>::zeros(rx_beams.nrows(), n_rx);
            for j in 0..n_rx {
                let src = k * n_rx + j;
                let col = if src < c_rx { src } else { 0 };
                b.set_column(j, &rx_beams.column(col));
            }
            let y = link.transmit(dir, &f, &x, &b, rng)?;
            pilots_used += 1;
            for j in 0..n_rx {
                let m = k * n_rx + j;
                if m < c_rx {
                    data[(m, i)] = y[j];
                }
            }
        }
    }
    Ok(ObservationMatrix { data, direction: dir, pilots_used })
}

// ── tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_mismatch_profile, gen_multipath_channel, NodeProfile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_mul(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
        let mut out = DMatrix::<C64>::zeros(a.nrows(), b.ncols());
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..a.ncols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    fn diag(v: &DVector<C64>) -> DMatrix<C64> {
        DMatrix::from_fn(v.len(), v.len(), |i, j| if i == j { v[i] } else { C64::new(0.0, 0.0) })
    }

    fn test_link(seed: u64, m_a: usize, n_a: usize, m_b: usize, n_b: usize, noise: f64) -> Link {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gen_mismatch_profile(n_a, m_a, 0.4, 0.4, &mut rng);
        let b = gen_mismatch_profile(n_b, m_b, 0.4, 0.4, &mut rng);
        let ch = gen_multipath_channel(3, m_b, m_a, &mut rng);
        Link::new(a, b, ch, noise).unwrap()
    }

    #[test]
    fn identity_chains_pass_channel_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = gen_multipath_channel(2, 3, 3, &mut rng);
        let h = ch.matrix.clone();
        let mut link = Link::new(NodeProfile::identity(3, 3), NodeProfile::identity(3, 3), ch, 0.0).unwrap();
        let eye = DMatrix::<C64>::identity(3, 3);
        let x = DVector::from_vec(vec![C64::new(1.0, 0.5), C64::new(-0.3, 0.2), C64::new(0.0, -1.1)]);
        let y = link.transmit(Direction::Downlink, &eye, &x, &eye, &mut rng).unwrap();
        let want = naive_mul(&h, &DMatrix::from_column_slice(3, 1, x.as_slice()));
        for i in 0..3 {
            assert!((y[i] - want[(i, 0)]).norm() < 1e-13);
        }
        assert_eq!(link.tx_count, 1);
    }

    #[test]
    fn transmit_matches_dense_chain_oracle() {
        let mut link = test_link(17, 4, 2, 3, 3, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let f = DMatrix::<C64>::from_fn(4, 2, |i, j| C64::new(0.2 * i as f64 - 0.1, 0.3 * j as f64 + 0.05));
        let b = DMatrix::<C64>::from_fn(3, 2, |i, j| C64::new(0.1 + 0.25 * j as f64, -0.2 * i as f64));
        let x = DVector::from_vec(vec![C64::new(0.7, -0.4), C64::new(-1.2, 0.9)]);
        let y = link.transmit(Direction::Downlink, &f, &x, &b, &mut rng).unwrap();

        // independent reassembly R1 Bᵀ R2 H T2 F T1 x from the raw profiles
        let t1 = diag(&link.node_a.t1);
        let t2 = diag(&link.node_a.t2);
        let r2 = diag(&link.node_b.r2);
        let r1 = DMatrix::from_fn(2, 2, |i, j| if i == j { link.node_b.r1[i] } else { C64::new(0.0, 0.0) });
        let chain = naive_mul(
            &r1,
            &naive_mul(
                &b.transpose(),
                &naive_mul(&r2, &naive_mul(&link.channel.matrix, &naive_mul(&t2, &naive_mul(&f, &t1)))),
            ),
        );
        let want = naive_mul(&chain, &DMatrix::from_column_slice(2, 1, x.as_slice()));
        for i in 0..2 {
            assert!((y[i] - want[(i, 0)]).norm() < 1e-12, "entry {i}");
        }
    }

    #[test]
    fn uplink_uses_transposed_channel() {
        let mut link = test_link(29, 4, 2, 3, 2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = DMatrix::<C64>::from_fn(3, 1, |i, _| C64::new(0.5, 0.1 * i as f64));
        let b = DMatrix::<C64>::from_fn(4, 2, |i, j| C64::new(0.3 * j as f64 - 0.1, 0.2 * i as f64));
        let x = DVector::from_element(1, C64::new(1.0, 0.0));
        let y = link.transmit(Direction::Uplink, &f, &x, &b, &mut rng).unwrap();

        let t1 = DMatrix::from_fn(1, 1, |_, _| link.node_b.t1[0]);
        let t2 = diag(&link.node_b.t2);
        let r2 = diag(&link.node_a.r2);
        let r1 = DMatrix::from_fn(2, 2, |i, j| if i == j { link.node_a.r1[i] } else { C64::new(0.0, 0.0) });
        let ht = link.channel.matrix.transpose();
        let chain = naive_mul(
            &r1,
            &naive_mul(&b.transpose(), &naive_mul(&r2, &naive_mul(&ht, &naive_mul(&t2, &naive_mul(&f, &t1))))),
        );
        let want = naive_mul(&chain, &DMatrix::from_column_slice(1, 1, x.as_slice()));
        for i in 0..2 {
            assert!((y[i] - want[(i, 0)]).norm() < 1e-12);
        }
    }

    #[test]
    fn noiseless_transmit_is_linear() {
        let mut link = test_link(31, 4, 4, 4, 4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = DMatrix::<C64>::from_fn(4, 4, |i, j| C64::new(0.1 * (i + j) as f64, 0.05 * i as f64));
        let b = f.clone();
        let x1 = DVector::from_fn(4, |i, _| C64::new(i as f64, -0.5));
        let x2 = DVector::from_fn(4, |i, _| C64::new(0.3, 0.2 * i as f64));
        let (al, be) = (C64::new(0.7, -1.1), C64::new(-0.2, 0.4));
        let combo = DVector::from_fn(4, |i, _| al * x1[i] + be * x2[i]);
        let y1 = link.transmit(Direction::Downlink, &f, &x1, &b, &mut rng).unwrap();
        let y2 = link.transmit(Direction::Downlink, &f, &x2, &b, &mut rng).unwrap();
        let yc = link.transmit(Direction::Downlink, &f, &combo, &b, &mut rng).unwrap();
        for i in 0..4 {
            assert!((yc[i] - (al * y1[i] + be * y2[i])).norm() < 1e-12);
        }
        assert_eq!(link.tx_count, 3);
    }

    #[test]
    fn noise_variance_matches_request() {
        let mut link = test_link(37, 2, 2, 2, 2, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = DMatrix::<C64>::identity(2, 2);
        let b = DMatrix::<C64>::identity(2, 2);
        let x = DVector::from_element(2, C64::new(1.0, 0.0));
        let mut clean = link.clone();
        clean.noise_variance = 0.0;
        let mean = clean.transmit(Direction::Downlink, &f, &x, &b, &mut rng).unwrap();
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let y = link.transmit(Direction::Downlink, &f, &x, &b, &mut rng).unwrap();
            acc += (y[0] - mean[0]).norm_sqr() + (y[1] - mean[1]).norm_sqr();
        }
        let var = acc / (2 * draws) as f64;
        assert!((var - 0.01).abs() < 0.05 * 0.01, "empirical variance {var}");
    }

    #[test]
    fn transmit_rejects_mismatched_shapes() {
        let mut link = test_link(41, 4, 2, 3, 2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = DMatrix::<C64>::zeros(3, 1); // wrong antenna count
        let x = DVector::from_element(1, C64::new(1.0, 0.0));
        let b = DMatrix::<C64>::zeros(3, 1);
        assert!(link.transmit(Direction::Downlink, &f, &x, &b, &mut rng).is_err());
        // more digital chains than the transmitter owns
        let f = DMatrix::<C64>::zeros(4, 3);
        let x = DVector::from_element(3, C64::new(1.0, 0.0));
        assert!(link.transmit(Direction::Downlink, &f, &x, &b, &mut rng).is_err());
    }

    #[test]
    fn gather_observation_pilot_counts() {
        for (m, n, want) in [(4usize, 4usize, 4usize), (8, 4, 16)] {
            let mut link = test_link(43, m, n, m, n, 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let beams = crate::model::dft_codebook(m);
            let obs = gather_observations(
                &mut link,
                Direction::Downlink,
                &beams.mat,
                &beams.mat,
                C64::new(1.0, 0.0),
                &mut rng,
            )
            .unwrap();
            assert_eq!(obs.pilots_used, want, "M={m} N={n}");
            assert_eq!(link.tx_count, want);
            assert_eq!(obs.data.nrows(), m);
            assert_eq!(obs.data.ncols(), m);
        }
    }

    #[test]
    fn gather_matches_beam_product_oracle() {
        // identity chains: Y = Bᵀ H F · s, including a ragged group (M=5, N=2).
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let ch = gen_multipath_channel(3, 5, 5, &mut rng);
        let h = ch.matrix.clone();
        let mut link = Link::new(NodeProfile::identity(2, 5), NodeProfile::identity(2, 5), ch, 0.0).unwrap();
        let beams = crate::model::dft_codebook(5);
        let s = C64::new(0.6, -0.8);
        let obs = gather_observations(&mut link, Direction::Downlink, &beams.mat, &beams.mat, s, &mut rng).unwrap();
        assert_eq!(obs.pilots_used, 5 * 3);
        let want = naive_mul(&beams.mat.transpose(), &naive_mul(&h, &beams.mat));
        for i in 0..5 {
            for j in 0..5 {
                assert!((obs.data[(i, j)] - want[(i, j)] * s).norm() < 1e-12, "({i},{j})");
            }
        }
    }
}
