//! Orthogonal pilot books, pilot assignment and MMSE channel estimation.
//!
//! After projecting onto its pilot book, AP `m` observes for UE `k`
//! `y_mk = Σ_{l∈P_k} τp F̃_l h_ml + q` with `F̃_l = F_{l,p}^T ⊗ I_L` and
//! `q ~ CN(0, τp σ² I)`. The MMSE estimate is `ĥ = R F̃_k^H Ψ^{-1} y` with
//! `Ψ = Σ_{l∈P_k} τp F̃_l R_ml F̃_l^H + σ² I`.

use rand::Rng;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fcp::PrecoderSet;
use crate::linalg::{self, CMat, CVec, C64};
use crate::model::{ChannelRealization, CorrelationSet, NetworkLayout};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PilotBook {
    pub tau_p: usize,
    pub ue_antennas: usize,
    /// `τp x N` matrices with `Φ_b^H Φ_b' = τp I` if `b = b'`, else 0.
    pub books: Vec<CMat>,
    /// UE index to book index.
    pub assignment: Vec<usize>,
    /// `P_k`: UEs sharing the book of `k` (including `k`), ascending.
    pub contamination: Vec<Vec<usize>>,
}

impl PilotBook {
    pub fn new(tau_p: usize, ue_antennas: usize, assignment: Vec<usize>) -> Result<Self> {
        let books = build_pilot_books(tau_p, ue_antennas)?;
        if let Some(&b) = assignment.iter().find(|&&b| b >= books.len()) {
            return Err(Error::Index(format!("book {b} of {}", books.len())));
        }
        let contamination = contamination_sets(&assignment);
        Ok(Self {
            tau_p,
            ue_antennas,
            books,
            assignment,
            contamination,
        })
    }

    pub fn shares_pilot(&self, k: usize, l: usize) -> bool {
        self.assignment[k] == self.assignment[l]
    }

    pub fn ues(&self) -> usize {
        self.assignment.len()
    }
}

fn contamination_sets(assignment: &[usize]) -> Vec<Vec<usize>> {
    (0..assignment.len())
        .map(|k| {
            (0..assignment.len())
                .filter(|&l| assignment[l] == assignment[k])
                .collect()
        })
        .collect()
}

fn unit_root(r: usize, n: usize) -> C64 {
    // exact values at multiples of a quarter turn
    let r = r % n;
    if (4 * r).is_multiple_of(n) {
        match 4 * r / n {
            0 => C64::new(1.0, 0.0),
            1 => C64::new(0.0, -1.0),
            2 => C64::new(-1.0, 0.0),
            _ => C64::new(0.0, 1.0),
        }
    } else {
        let a = -2.0 * PI * r as f64 / n as f64;
        C64::new(a.cos(), a.sin())
    }
}

/// Books from consecutive columns of the unnormalized `τp`-point DFT matrix.
pub fn build_pilot_books(tau_p: usize, n: usize) -> Result<Vec<CMat>> {
    if n == 0 || tau_p == 0 || !tau_p.is_multiple_of(n) {
        return Err(Error::InvalidConfig(format!(
            "tau_p = {tau_p} is not a positive multiple of N = {n}"
        )));
    }
    Ok((0..tau_p / n)
        .map(|b| CMat::from_fn(tau_p, n, |t, j| unit_root(t * (b * n + j), tau_p)))
        .collect())
}

/// Greedy assignment. UEs are visited in index order; the first `τp/N` get
/// distinct books. Each later UE takes, among books that are not full, the
/// one whose current users have the smallest summed gain to that UE's
/// strongest AP. A book is full at `ceil(K / (τp/N))` users, which keeps the
/// load balanced.
pub fn assign_pilots(
    layout: &NetworkLayout,
    tau_p: usize,
    n: usize,
) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    if n == 0 || tau_p < n || !tau_p.is_multiple_of(n) {
        return Err(Error::InvalidConfig(
            "tau_p must be a positive multiple of N".into(),
        ));
    }
    let books = tau_p / n;
    let k_count = layout.beta.ncols();
    let cap = k_count.div_ceil(books);
    let mut assignment = vec![usize::MAX; k_count];
    let mut load = vec![0usize; books];
    for k in 0..k_count {
        let b = if k < books {
            k
        } else {
            let master = layout.strongest_ap(k);
            let mut best = None;
            let mut best_cost = f64::INFINITY;
            for b in 0..books {
                if load[b] >= cap {
                    continue;
                }
                let cost: f64 = (0..k)
                    .filter(|&l| assignment[l] == b)
                    .map(|l| layout.beta[(master, l)])
                    .sum();
                if cost < best_cost {
                    best_cost = cost;
                    best = Some(b);
                }
            }
            best.expect("capacity covers all UEs")
        };
        assignment[k] = b;
        load[b] += 1;
    }
    let sets = contamination_sets(&assignment);
    Ok((assignment, sets))
}

/// Per-link estimation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkEstimation {
    pub psi: CMat,
    pub rhat: CMat,
    pub c: CMat,
    /// `R F̃_k^H Ψ^{-1}`, the estimator applied to the projected observation.
    pub filter: CMat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationStats {
    pub aps: usize,
    pub ues: usize,
    pub ap_antennas: usize,
    pub ue_antennas: usize,
    pub tau_p: usize,
    /// Row-major over `(m, k)`.
    pub links: Vec<LinkEstimation>,
    /// `F_{k,p}^T ⊗ I_L` per UE.
    pub ftilde: Vec<CMat>,
}

impl EstimationStats {
    pub fn link(&self, m: usize, k: usize) -> &LinkEstimation {
        &self.links[m * self.ues + k]
    }

    /// Block `(n, i)` of `R̂_mk`.
    pub fn rhat_block(&self, m: usize, k: usize, n: usize, i: usize) -> CMat {
        let l = self.ap_antennas;
        self.link(m, k)
            .rhat
            .view((n * l, i * l), (l, l))
            .into_owned()
    }

    /// Block `(n, i)` of `C_mk`.
    pub fn c_block(&self, m: usize, k: usize, n: usize, i: usize) -> CMat {
        let l = self.ap_antennas;
        self.link(m, k).c.view((n * l, i * l), (l, l)).into_owned()
    }
}

pub fn estimation_stats(
    corr: &CorrelationSet,
    book: &PilotBook,
    pilot_precoders: &[CMat],
    sigma2: f64,
) -> Result<EstimationStats> {
    let (m_count, k_count, l, n) = (corr.aps, corr.ues, corr.ap_antennas, corr.ue_antennas);
    if pilot_precoders.len() != k_count || book.ues() != k_count {
        return Err(Error::Dimension(
            "pilot precoders / assignment do not match K".into(),
        ));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidConfig("noise power must be positive".into()));
    }
    let tau_p = book.tau_p as f64;
    let ftilde: Vec<CMat> = pilot_precoders.iter().map(|f| linalg::lift(f, l)).collect();
    let mut links = Vec::with_capacity(m_count * k_count);
    for m in 0..m_count {
        for k in 0..k_count {
            let mut psi = CMat::identity(l * n, l * n) * linalg::c(sigma2);
            for &j in &book.contamination[k] {
                let ft = &ftilde[j];
                psi += ft * corr.r(m, j) * ft.adjoint() * linalg::c(tau_p);
            }
            linalg::hermitize_in_place(&mut psi);
            let r = corr.r(m, k);
            let x = linalg::solve_hpd(&psi, &(&ftilde[k] * r))
                .map_err(|_| Error::NotPd(format!("Psi for AP {m}, UE {k}")))?;
            let filter = x.adjoint();
            let mut rhat = &filter * &ftilde[k] * r * linalg::c(tau_p);
            linalg::hermitize_in_place(&mut rhat);
            let mut cm = r - &rhat;
            linalg::hermitize_in_place(&mut cm);
            links.push(LinkEstimation {
                psi,
                rhat,
                c: cm,
                filter,
            });
        }
    }
    Ok(EstimationStats {
        aps: m_count,
        ues: k_count,
        ap_antennas: l,
        ue_antennas: n,
        tau_p: book.tau_p,
        links,
        ftilde,
    })
}

/// Projected pilot observations `y_mk` (LN-vectors), row-major over `(m, k)`.
/// UEs sharing a book see the same observation, noise included.
pub fn receive_pilot<R: Rng + ?Sized>(
    channel: &ChannelRealization,
    precoders: &PrecoderSet,
    book: &PilotBook,
    sigma2: f64,
    rng: &mut R,
) -> Result<Vec<CVec>> {
    let k_count = channel.ues;
    for k in 0..k_count {
        let p = linalg::fro2(&precoders.f_p[k]);
        if p > precoders.power[k] * (1.0 + 1e-9) {
            return Err(Error::Power(format!(
                "pilot precoder of UE {k} uses {p:e} > budget {:e}",
                precoders.power[k]
            )));
        }
    }
    let tau_p = book.tau_p as f64;
    let noise_std = (tau_p * sigma2).sqrt();
    let mut out = vec![CVec::zeros(0); channel.aps * k_count];
    for m in 0..channel.aps {
        for b in 0..book.books.len() {
            let users: Vec<usize> = (0..k_count).filter(|&k| book.assignment[k] == b).collect();
            if users.is_empty() {
                continue;
            }
            let (l, n) = channel.h(m, users[0]).shape();
            let mut y = CMat::zeros(l, n);
            for &j in &users {
                y += channel.h(m, j) * &precoders.f_p[j] * linalg::c(tau_p);
            }
            for z in y.iter_mut() {
                *z += rng::complex_normal(rng) * noise_std;
            }
            let v = linalg::vec_of(&y);
            for &k in &users {
                out[m * k_count + k] = v.clone();
            }
        }
    }
    Ok(out)
}

/// `ĥ_mk` from the projected observation.
pub fn mmse_estimate(y: &CVec, stats: &EstimationStats, m: usize, k: usize) -> Result<CVec> {
    let f = &stats.link(m, k).filter;
    if y.len() != f.ncols() {
        return Err(Error::Dimension(format!(
            "observation of length {} vs {}",
            y.len(),
            f.ncols()
        )));
    }
    Ok(f * y)
}

/// Estimates for every link as `L x N` matrices, row-major over `(m, k)`.
pub fn estimate_all(observations: &[CVec], stats: &EstimationStats) -> Result<Vec<CMat>> {
    let (l, n) = (stats.ap_antennas, stats.ue_antennas);
    let mut out = Vec::with_capacity(observations.len());
    for m in 0..stats.aps {
        for k in 0..stats.ues {
            let h = mmse_estimate(&observations[m * stats.ues + k], stats, m, k)?;
            out.push(linalg::unvec(&h, l, n));
        }
    }
    Ok(out)
}

/// Channel draw plus the matching estimates, sharing one stream.
pub fn draw_with_estimates<R: Rng + ?Sized>(
    corr: &CorrelationSet,
    stats: &EstimationStats,
    precoders: &PrecoderSet,
    book: &PilotBook,
    sigma2: f64,
    rng: &mut R,
) -> Result<(ChannelRealization, Vec<CMat>)> {
    let channel = crate::model::sample_channel_with(corr, rng);
    let y = receive_pilot(&channel, precoders, book, sigma2, rng)?;
    let hhat = estimate_all(&y, stats)?;
    Ok((channel, hhat))
}
