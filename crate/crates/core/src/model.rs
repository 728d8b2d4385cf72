//! Network geometry, Weichselberger correlation synthesis and channel sampling.
//!
//! A link between AP `m` (L antennas) and UE `k` (N antennas) is
//! `H = U_r (Ω^{∘1/2} ⊙ G) U_t^H` with `G` i.i.d. CN(0,1). Its full
//! correlation is `R = E{vec(H) vec(H)^H}`, where `vec` stacks columns, so
//! block `(n, i)` of `R` (each `L x L`) is `E{h_n h_i^H}` for columns `h_n`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec};
use crate::rng::{self, tag};

/// Log-distance pathloss with log-normal shadowing, in dB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathlossModel {
    pub intercept_db: f64,
    pub slope_db_per_decade: f64,
    pub shadowing_std_db: f64,
    pub min_distance: f64,
}

impl Default for PathlossModel {
    fn default() -> Self {
        Self {
            intercept_db: -30.5,
            slope_db_per_decade: 36.7,
            shadowing_std_db: 4.0,
            min_distance: 10.0,
        }
    }
}

impl PathlossModel {
    /// Median gain in dB at distance `d` (clamped below at `min_distance`).
    pub fn gain_db(&self, d: f64) -> f64 {
        self.intercept_db - self.slope_db_per_decade * d.max(self.min_distance).log10()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of APs (M).
    #[serde(alias = "M")]
    pub aps: usize,
    /// Number of UEs (K).
    #[serde(alias = "K")]
    pub ues: usize,
    /// Antennas per AP (L).
    #[serde(alias = "L")]
    pub ap_antennas: usize,
    /// Antennas per UE (N).
    #[serde(alias = "N")]
    pub ue_antennas: usize,
    /// Side of the square deployment area in meters.
    pub area_side: f64,
    /// Hz; carried for reporting only.
    pub bandwidth: f64,
    /// Receiver noise power in W.
    pub noise_power: f64,
    /// Per-UE transmit power budget in W.
    pub ue_power: f64,
    pub tau_c: usize,
    pub tau_p: usize,
    pub seed: u64,
    #[serde(default)]
    pub pathloss: PathlossModel,
}

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl NetworkConfig {
    /// M=20 APs with L=2, K=10 UEs with N=4, 1 km², 20 MHz, -94 dBm noise,
    /// 200 mW, τc=200, τp=KN/2.
    pub fn reference() -> Self {
        Self {
            aps: 20,
            ues: 10,
            ap_antennas: 2,
            ue_antennas: 4,
            area_side: 1000.0,
            bandwidth: 20e6,
            noise_power: dbm_to_watt(-94.0),
            ue_power: 0.2,
            tau_c: 200,
            tau_p: 20,
            seed: 0,
            pathloss: PathlossModel::default(),
        }
    }

    /// Pilot length `KN/2` rounded up to a multiple of `N`.
    pub fn half_load_tau_p(ues: usize, ue_antennas: usize) -> usize {
        ue_antennas * ues.div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.aps == 0 || self.ues == 0 || self.ap_antennas == 0 || self.ue_antennas == 0 {
            return bad("M, K, L and N must all be at least 1");
        }
        if self.tau_p == 0 || !self.tau_p.is_multiple_of(self.ue_antennas) {
            return bad("tau_p must be a positive multiple of N");
        }
        if self.tau_p > self.tau_c {
            return bad("tau_p must not exceed tau_c");
        }
        if !(self.ue_power > 0.0 && self.ue_power.is_finite()) {
            return bad("ue_power must be positive");
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return bad("noise_power must be positive");
        }
        if !(self.area_side > 0.0 && self.area_side.is_finite()) {
            return bad("area_side must be positive");
        }
        if !(self.pathloss.min_distance > 0.0) || self.pathloss.shadowing_std_db < 0.0 {
            return bad("pathloss min_distance must be positive and shadowing std nonnegative");
        }
        Ok(())
    }

    /// Pre-log factor `1 - τp/τc`.
    pub fn prelog(&self) -> f64 {
        1.0 - self.tau_p as f64 / self.tau_c as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkLayout {
    pub ap_positions: Vec<[f64; 2]>,
    pub ue_positions: Vec<[f64; 2]>,
    /// M x K wrap-around distances in meters.
    pub distances: DMatrix<f64>,
    /// M x K large-scale fading coefficients (linear).
    pub beta: DMatrix<f64>,
}

/// Distance on a torus of the given side.
pub fn wrapped_distance(a: [f64; 2], b: [f64; 2], side: f64) -> f64 {
    let mut s = 0.0;
    for d in 0..2 {
        let mut dx = (a[d] - b[d]).abs() % side;
        dx = dx.min(side - dx);
        s += dx * dx;
    }
    s.sqrt()
}

impl NetworkLayout {
    /// Layout from explicit positions; shadowing drawn from `seed`.
    pub fn from_positions(
        config: &NetworkConfig,
        ap_positions: Vec<[f64; 2]>,
        ue_positions: Vec<[f64; 2]>,
        seed: u64,
    ) -> Self {
        let (m, k) = (ap_positions.len(), ue_positions.len());
        let distances = DMatrix::from_fn(m, k, |i, j| {
            wrapped_distance(ap_positions[i], ue_positions[j], config.area_side)
        });
        let pl = &config.pathloss;
        let mut shadow = rng::stream(seed, &[tag::SHADOWING]);
        let normal = Normal::new(0.0, pl.shadowing_std_db).expect("std validated");
        let beta = DMatrix::from_fn(m, k, |i, j| {
            let f = if pl.shadowing_std_db > 0.0 {
                normal.sample(&mut shadow)
            } else {
                0.0
            };
            db_to_linear(pl.gain_db(distances[(i, j)]) + f)
        });
        Self {
            ap_positions,
            ue_positions,
            distances,
            beta,
        }
    }

    /// Index of the AP with the largest gain to UE `k`.
    pub fn strongest_ap(&self, k: usize) -> usize {
        let col = self.beta.column(k);
        let mut best = 0;
        for m in 1..col.len() {
            if col[m] > col[best] {
                best = m;
            }
        }
        best
    }
}

/// Uniform AP and UE drop on the torus, with i.i.d. shadowing per link.
pub fn place_network(config: &NetworkConfig, seed: u64) -> NetworkLayout {
    let mut rng = rng::stream(seed, &[tag::LAYOUT]);
    let side = config.area_side;
    let mut draw = |n: usize| -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side])
            .collect()
    };
    let aps = draw(config.aps);
    let ues = draw(config.ues);
    NetworkLayout::from_positions(config, aps, ues, seed)
}

/// Statistics of one AP-UE link.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkCorrelation {
    pub u_r: CMat,
    pub u_t: CMat,
    /// L x N nonnegative coupling matrix.
    pub omega: DMatrix<f64>,
    /// LN x LN full correlation.
    pub r: CMat,
}

impl LinkCorrelation {
    pub fn from_parts(u_r: CMat, u_t: CMat, omega: DMatrix<f64>) -> Self {
        let r = assemble_correlation(&u_r, &u_t, &omega);
        Self { u_r, u_t, omega, r }
    }

    /// `β = ||Ω||₁ / (LN)`.
    pub fn beta(&self) -> f64 {
        self.omega.sum() / self.omega.len() as f64
    }

    /// Block `(n, i)` of `R`, i.e. `E{h_n h_i^H}`.
    pub fn r_block(&self, n: usize, i: usize) -> Result<CMat> {
        let l = self.u_r.nrows();
        linalg::block(&self.r, n, i, l, l)
    }

    /// Fraction of `||Ω||₁` held by the strongest column.
    pub fn dominant_fraction(&self) -> f64 {
        let total = self.omega.sum();
        let best = (0..self.omega.ncols())
            .map(|j| self.omega.column(j).sum())
            .fold(0.0, f64::max);
        if total > 0.0 {
            best / total
        } else {
            0.0
        }
    }
}

/// `R = (U_t^* ⊗ U_r) diag(vec Ω) (U_t^* ⊗ U_r)^H`.
pub fn assemble_correlation(u_r: &CMat, u_t: &CMat, omega: &DMatrix<f64>) -> CMat {
    let basis = u_t.map(|z| z.conj()).kronecker(u_r);
    let mut scaled = basis.clone();
    for (j, w) in omega.as_slice().iter().enumerate() {
        scaled.column_mut(j).scale_mut(*w);
    }
    let mut r = scaled * basis.adjoint();
    linalg::hermitize_in_place(&mut r);
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSet {
    pub aps: usize,
    pub ues: usize,
    pub ap_antennas: usize,
    pub ue_antennas: usize,
    /// Row-major over `(m, k)`.
    pub links: Vec<LinkCorrelation>,
}

impl CorrelationSet {
    pub fn link(&self, m: usize, k: usize) -> &LinkCorrelation {
        &self.links[m * self.ues + k]
    }

    pub fn r(&self, m: usize, k: usize) -> &CMat {
        &self.link(m, k).r
    }

    pub fn beta(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.aps, self.ues, |m, k| self.link(m, k).beta())
    }

    /// Build from per-link correlation matrices only (bases and coupling
    /// recovered by eigen-decomposition are not needed by the estimators,
    /// so they are left as identity / diagonal placeholders).
    pub fn from_correlations(
        aps: usize,
        ues: usize,
        ap_antennas: usize,
        ue_antennas: usize,
        rs: Vec<CMat>,
    ) -> Result<Self> {
        let ln = ap_antennas * ue_antennas;
        if rs.len() != aps * ues || rs.iter().any(|r| r.shape() != (ln, ln)) {
            return Err(Error::Dimension(
                "correlation list does not match M, K, L, N".into(),
            ));
        }
        let links = rs
            .into_iter()
            .map(|r| {
                let omega = DMatrix::from_fn(ap_antennas, ue_antennas, |a, b| {
                    r[(b * ap_antennas + a, b * ap_antennas + a)].re
                });
                LinkCorrelation {
                    u_r: linalg::eye(ap_antennas),
                    u_t: linalg::eye(ue_antennas),
                    omega,
                    r,
                }
            })
            .collect();
        Ok(Self {
            aps,
            ues,
            ap_antennas,
            ue_antennas,
            links,
        })
    }
}

/// Haar-distributed unitary via QR of a complex Gaussian matrix, with the
/// phases of `diag(R)` moved into `Q`.
pub fn haar_unitary<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMat {
    let g = rng::complex_normal_matrix(rng, n, n);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        let d = r[(j, j)];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { c(1.0) };
        q.column_mut(j).iter_mut().for_each(|z| *z *= ph);
    }
    q
}

/// Coupling matrix with total `LN·β`: one random column receives a
/// fraction `u ~ U[0.80, 0.95]`, every entry is shaped by normalized Exp(1)
/// draws. With `N = 1` the single column holds everything.
pub fn draw_coupling<R: Rng + ?Sized>(rng: &mut R, l: usize, n: usize, beta: f64) -> DMatrix<f64> {
    let total = (l * n) as f64 * beta;
    let mut omega = DMatrix::<f64>::zeros(l, n);
    if n == 1 {
        let w: Vec<f64> = (0..l).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = w.iter().sum();
        for a in 0..l {
            omega[(a, 0)] = total * w[a] / s;
        }
        return omega;
    }
    let u = rng.random_range(0.80..=0.95);
    let dominant = rng.random_range(0..n);
    let w: Vec<f64> = (0..l * n).map(|_| Exp1.sample(rng)).collect();
    let (mut s_dom, mut s_rest) = (0.0, 0.0);
    for b in 0..n {
        for a in 0..l {
            if b == dominant {
                s_dom += w[b * l + a];
            } else {
                s_rest += w[b * l + a];
            }
        }
    }
    for b in 0..n {
        for a in 0..l {
            let x = w[b * l + a];
            omega[(a, b)] = if b == dominant {
                u * total * x / s_dom
            } else {
                (1.0 - u) * total * x / s_rest
            };
        }
    }
    omega
}

pub fn synthesize_correlation(
    layout: &NetworkLayout,
    config: &NetworkConfig,
    seed: u64,
) -> CorrelationSet {
    let (m_count, k_count) = layout.beta.shape();
    let (l, n) = (config.ap_antennas, config.ue_antennas);
    let mut links = Vec::with_capacity(m_count * k_count);
    for m in 0..m_count {
        for k in 0..k_count {
            let mut rng = rng::stream(seed, &[tag::CORRELATION, m as u64, k as u64]);
            let u_r = haar_unitary(&mut rng, l);
            let u_t = haar_unitary(&mut rng, n);
            let omega = draw_coupling(&mut rng, l, n, layout.beta[(m, k)]);
            links.push(LinkCorrelation::from_parts(u_r, u_t, omega));
        }
    }
    CorrelationSet {
        aps: m_count,
        ues: k_count,
        ap_antennas: l,
        ue_antennas: n,
        links,
    }
}

/// One draw of every link.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub aps: usize,
    pub ues: usize,
    /// `L x N` matrices, row-major over `(m, k)`.
    pub h: Vec<CMat>,
}

impl ChannelRealization {
    pub fn h(&self, m: usize, k: usize) -> &CMat {
        &self.h[m * self.ues + k]
    }

    pub fn h_vec(&self, m: usize, k: usize) -> CVec {
        linalg::vec_of(self.h(m, k))
    }
}

/// `U_r (Ω^{∘1/2} ⊙ G) U_t^H` for one link.
pub fn sample_link<R: Rng + ?Sized>(link: &LinkCorrelation, rng: &mut R) -> CMat {
    let (l, n) = link.omega.shape();
    let g = CMat::from_fn(l, n, |a, b| {
        rng::complex_normal(rng) * link.omega[(a, b)].sqrt()
    });
    &link.u_r * g * link.u_t.adjoint()
}

pub fn sample_channel_with<R: Rng + ?Sized>(
    corr: &CorrelationSet,
    rng: &mut R,
) -> ChannelRealization {
    let h = corr
        .links
        .iter()
        .map(|link| sample_link(link, rng))
        .collect();
    ChannelRealization {
        aps: corr.aps,
        ues: corr.ues,
        h,
    }
}

pub fn sample_channel(corr: &CorrelationSet, seed: u64) -> ChannelRealization {
    let mut rng = rng::stream(seed, &[]);
    sample_channel_with(corr, &mut rng)
}

/// 1-based block accessor on an `PN x QN` matrix with `P x Q` tiles.
pub fn block_submatrix(a: &CMat, n: usize, i: usize, p: usize, q: usize) -> Result<CMat> {
    if n == 0 || i == 0 {
        return Err(Error::Index("block indices start at 1".into()));
    }
    linalg::block(a, n - 1, i - 1, p, q)
}
