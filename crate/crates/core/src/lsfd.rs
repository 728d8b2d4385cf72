//! Large-scale fading decoding: local combining at the APs, then a
//! statistics-based linear weighting `A_k` at the CPU.
//!
//! With `G_kl` the `MN x N` stack of `V_mk^H H_ml`, the CPU needs
//! `E{G_kk}`, `E{G_kl F̄_l G_kl^H}` and `S_k = diag_m E{V_mk^H V_mk}`.
//! APs are independent, so all of these follow from per-AP first and
//! second moments of `G^m_kl`; [`LocalMoments`] stores exactly that.

use nalgebra::DVectorView;

use crate::error::{Error, Result};
use crate::fcp::{self, ErrorLoading, PrecoderSet};
use crate::linalg::{self, c, CMat, ONE, ZERO};
use crate::model::CorrelationSet;
use crate::pilots::{self, EstimationStats, PilotBook};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Mr,
    Lmmse,
}

pub fn mr_combiner(hhat: &CMat) -> CMat {
    hhat.clone()
}

/// `(Σ_l (Ĥ_ml F̄_l Ĥ_ml^H + C'_ml) + σ² I)^{-1} Ĥ_mk F_k` at one AP.
/// `hhat_m` and `load_m` are indexed by UE.
pub fn lmmse_combiner(
    hhat_m: &[CMat],
    f_u: &[CMat],
    load_m: &[CMat],
    sigma2: f64,
    k: usize,
) -> Result<CMat> {
    let a = local_system(hhat_m, f_u, load_m, sigma2);
    linalg::solve_hpd(&a, &(&hhat_m[k] * &f_u[k]))
}

fn local_system(hhat_m: &[CMat], f_u: &[CMat], load_m: &[CMat], sigma2: f64) -> CMat {
    let l = hhat_m[0].nrows();
    let mut a = CMat::identity(l, l) * c(sigma2);
    for ((h, f), cl) in hhat_m.iter().zip(f_u).zip(load_m) {
        let hf = h * f;
        a += &hf * hf.adjoint() + cl;
    }
    linalg::hermitize_in_place(&mut a);
    a
}

/// Second-order statistics seen by the CPU.
#[derive(Clone, Debug, PartialEq)]
pub struct StatMoments {
    pub aps: usize,
    pub ues: usize,
    pub ue_antennas: usize,
    /// `E{G_kk}` per UE (MN x N).
    pub gkk_mean: Vec<CMat>,
    /// `E{G_kl F̄_l G_kl^H}` row-major over `(k, l)` (MN x MN).
    pub gkl_second: Vec<CMat>,
    /// `diag_m E{V_mk^H V_mk}` per UE (MN x MN).
    pub s: Vec<CMat>,
    pub sample_count: usize,
}

impl StatMoments {
    pub fn second(&self, k: usize, l: usize) -> &CMat {
        &self.gkl_second[k * self.ues + l]
    }

    /// `Σ_l E{G_kl F̄_l G_kl^H} + σ² S_k`.
    pub fn system(&self, k: usize, sigma2: f64) -> CMat {
        let mut t = &self.s[k] * c(sigma2);
        for l in 0..self.ues {
            t += self.second(k, l);
        }
        linalg::hermitize_in_place(&mut t);
        t
    }
}

/// Per-AP moments of `G^m_ab = V_ma^H H_mb` (combiner of UE `a`, channel of UE `b`).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalMoments {
    pub aps: usize,
    pub ues: usize,
    pub ue_antennas: usize,
    /// `E{G^m_ab}` (N x N), indexed `(m, a, b)` row-major.
    pub mean: Vec<CMat>,
    /// `E{vec(G^m_ab) vec(G^m_ab)^H}` (N² x N²), same indexing.
    pub second: Vec<CMat>,
    /// `E{V_ma^H V_ma}` (N x N), indexed `(m, a)`.
    pub vv: Vec<CMat>,
    pub sample_count: usize,
}

impl LocalMoments {
    pub fn zeros(aps: usize, ues: usize, n: usize) -> Self {
        let cnt = aps * ues * ues;
        Self {
            aps,
            ues,
            ue_antennas: n,
            mean: vec![CMat::zeros(n, n); cnt],
            second: vec![CMat::zeros(n * n, n * n); cnt],
            vv: vec![CMat::zeros(n, n); aps * ues],
            sample_count: 0,
        }
    }

    #[inline]
    pub fn idx(&self, m: usize, a: usize, b: usize) -> usize {
        (m * self.ues + a) * self.ues + b
    }

    pub fn mean(&self, m: usize, a: usize, b: usize) -> &CMat {
        &self.mean[self.idx(m, a, b)]
    }

    pub fn second_raw(&self, m: usize, a: usize, b: usize) -> &CMat {
        &self.second[self.idx(m, a, b)]
    }

    /// `E{vec G vec G^H} - vec E{G} vec E{G}^H`.
    pub fn covariance(&self, m: usize, a: usize, b: usize) -> CMat {
        let g = linalg::vec_of(self.mean(m, a, b));
        self.second_raw(m, a, b) - &g * g.adjoint()
    }

    /// `E{G_ab}` stacked over APs (MN x N).
    pub fn stacked_mean(&self, a: usize, b: usize) -> CMat {
        let n = self.ue_antennas;
        let mut out = CMat::zeros(self.aps * n, n);
        for m in 0..self.aps {
            out.view_mut((m * n, 0), (n, n))
                .copy_from(self.mean(m, a, b));
        }
        out
    }

    /// `E{G_kl F̄ G_kl^H}` for a given `F̄`.
    pub fn gkl_second(&self, k: usize, l: usize, fbar: &CMat) -> CMat {
        let n = self.ue_antennas;
        let dim = self.aps * n;
        let means: Vec<CMat> = (0..self.aps).map(|m| self.mean(m, k, l) * fbar).collect();
        let mut out = CMat::zeros(dim, dim);
        for m in 0..self.aps {
            for m2 in 0..self.aps {
                if m == m2 {
                    let s = self.second_raw(m, k, l);
                    for p2 in 0..n {
                        for p in 0..n {
                            let mut acc = ZERO;
                            for b in 0..n {
                                for a in 0..n {
                                    acc += fbar[(a, b)] * s[(p + n * a, p2 + n * b)];
                                }
                            }
                            out[(m * n + p, m * n + p2)] = acc;
                        }
                    }
                } else {
                    let blk = &means[m] * self.mean(m2, k, l).adjoint();
                    out.view_mut((m * n, m2 * n), (n, n)).copy_from(&blk);
                }
            }
        }
        linalg::hermitize_in_place(&mut out);
        out
    }

    pub fn stat_moments(&self, f_u: &[CMat]) -> StatMoments {
        let fbars: Vec<CMat> = f_u.iter().map(fcp::fbar).collect();
        let mut gkl_second = Vec::with_capacity(self.ues * self.ues);
        for k in 0..self.ues {
            for l in 0..self.ues {
                gkl_second.push(self.gkl_second(k, l, &fbars[l]));
            }
        }
        let s = (0..self.ues)
            .map(|k| {
                let blocks: Vec<CMat> = (0..self.aps)
                    .map(|m| self.vv[m * self.ues + k].clone())
                    .collect();
                linalg::block_diag(&blocks)
            })
            .collect();
        StatMoments {
            aps: self.aps,
            ues: self.ues,
            ue_antennas: self.ue_antennas,
            gkk_mean: (0..self.ues).map(|k| self.stacked_mean(k, k)).collect(),
            gkl_second,
            s,
            sample_count: self.sample_count,
        }
    }

    /// `E{G_lk^H Ā G_lk}` (N x N) for a Hermitian `MN x MN` matrix `Ā`.
    pub fn tbar(&self, l: usize, k: usize, abar: &CMat) -> CMat {
        let n = self.ue_antennas;
        let e = self.stacked_mean(l, k);
        let mut t = e.adjoint() * abar * &e;
        for m in 0..self.aps {
            let cov = self.covariance(m, l, k);
            let off = m * n;
            for b in 0..n {
                for a in 0..n {
                    let mut acc = ZERO;
                    for p2 in 0..n {
                        for p in 0..n {
                            acc += abar[(off + p, off + p2)] * cov[(p2 + n * b, p + n * a)];
                        }
                    }
                    t[(a, b)] += acc;
                }
            }
        }
        linalg::hermitize_in_place(&mut t);
        t
    }

    /// `Ḡ_{lk,ni}` (MN x MN) with entries `E{[G_lk]_{x,n} conj([G_lk]_{y,i})}`,
    /// so that `[T̄_lk]_{i,n} = tr(Ā Ḡ_{lk,ni})`.
    pub fn gbar(&self, l: usize, k: usize, n_col: usize, i_col: usize) -> CMat {
        let n = self.ue_antennas;
        let dim = self.aps * n;
        let mut out = CMat::zeros(dim, dim);
        for m in 0..self.aps {
            for m2 in 0..self.aps {
                for p in 0..n {
                    for p2 in 0..n {
                        out[(m * n + p, m2 * n + p2)] = if m == m2 {
                            self.second_raw(m, l, k)[(p + n * n_col, p2 + n * i_col)]
                        } else {
                            self.mean(m, l, k)[(p, n_col)] * self.mean(m2, l, k)[(p2, i_col)].conj()
                        };
                    }
                }
            }
        }
        out
    }

    fn scale(&mut self, s: f64) {
        let s = c(s);
        self.mean.iter_mut().for_each(|x| *x *= s);
        self.second.iter_mut().for_each(|x| *x *= s);
        self.vv.iter_mut().for_each(|x| *x *= s);
    }

    /// Moments from a fixed pool of channel and estimate draws.
    pub fn from_pool(
        pool: &RealizationPool,
        combiner: Combiner,
        f_u: &[CMat],
        load: Option<&ErrorLoading>,
        sigma2: f64,
    ) -> Result<Self> {
        let (m_count, k_count, l, n) = (pool.aps, pool.ues, pool.ap_antennas, pool.ue_antennas);
        let mut acc = Self::zeros(m_count, k_count, n);
        let load_totals: Vec<CMat> = match (combiner, load) {
            (Combiner::Lmmse, Some(ld)) => (0..m_count).map(|m| ld.ap_total(m)).collect(),
            (Combiner::Lmmse, None) => {
                return Err(Error::Dimension(
                    "L-MMSE combining needs the error loading".into(),
                ))
            }
            _ => Vec::new(),
        };
        let mut v = vec![CMat::zeros(l, n); k_count];
        let mut g = CMat::zeros(n, n);
        let mut vtv = CMat::zeros(n, n);
        for r in 0..pool.count {
            for m in 0..m_count {
                match combiner {
                    Combiner::Mr => {
                        for (a, va) in v.iter_mut().enumerate() {
                            va.copy_from(pool.hhat(r, m, a));
                        }
                    }
                    Combiner::Lmmse => {
                        let mut sys = load_totals[m].clone();
                        let mut hf = Vec::with_capacity(k_count);
                        for (u, f) in f_u.iter().enumerate() {
                            let x = pool.hhat(r, m, u) * f;
                            sys += &x * x.adjoint();
                            hf.push(x);
                        }
                        for i in 0..l {
                            sys[(i, i)] += c(sigma2);
                        }
                        let ch = linalg::cholesky(&sys)
                            .ok_or_else(|| Error::NotPd(format!("local system at AP {m}")))?;
                        for (a, va) in v.iter_mut().enumerate() {
                            *va = ch.solve(&hf[a]);
                        }
                    }
                }
                for a in 0..k_count {
                    v[a].ad_mul_to(&v[a], &mut vtv);
                    acc.vv[m * k_count + a] += &vtv;
                    for b in 0..k_count {
                        v[a].ad_mul_to(pool.h(r, m, b), &mut g);
                        let i = acc.idx(m, a, b);
                        acc.mean[i] += &g;
                        let x = DVectorView::from_slice(g.as_slice(), n * n);
                        acc.second[i].gerc(ONE, &x, &x, ONE);
                    }
                }
            }
        }
        acc.sample_count = pool.count;
        acc.scale(1.0 / pool.count as f64);
        Ok(acc)
    }
}

/// A fixed set of channel draws and their estimates, reused across
/// iterations so that successive statistics refer to the same samples.
#[derive(Clone, Debug)]
pub struct RealizationPool {
    pub aps: usize,
    pub ues: usize,
    pub ap_antennas: usize,
    pub ue_antennas: usize,
    pub count: usize,
    h: Vec<CMat>,
    hhat: Vec<CMat>,
}

impl RealizationPool {
    /// Realization `r` uses the stream `(seed, r)`.
    pub fn draw(
        corr: &CorrelationSet,
        stats: &EstimationStats,
        precoders: &PrecoderSet,
        book: &PilotBook,
        sigma2: f64,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidConfig(
                "moment estimation needs at least one realization".into(),
            ));
        }
        let mut h = Vec::with_capacity(count * corr.links.len());
        let mut hhat = Vec::with_capacity(count * corr.links.len());
        for r in 0..count {
            let mut rng = rng::stream(seed, &[r as u64]);
            let (ch, est) =
                pilots::draw_with_estimates(corr, stats, precoders, book, sigma2, &mut rng)?;
            h.extend(ch.h);
            hhat.extend(est);
        }
        Ok(Self {
            aps: corr.aps,
            ues: corr.ues,
            ap_antennas: corr.ap_antennas,
            ue_antennas: corr.ue_antennas,
            count,
            h,
            hhat,
        })
    }

    /// Pool from explicit draws; each entry is row-major over `(m, k)`.
    pub fn from_draws(aps: usize, ues: usize, draws: Vec<(Vec<CMat>, Vec<CMat>)>) -> Self {
        let (l, n) = draws[0].0[0].shape();
        let count = draws.len();
        let mut h = Vec::new();
        let mut hhat = Vec::new();
        for (a, b) in draws {
            h.extend(a);
            hhat.extend(b);
        }
        Self {
            aps,
            ues,
            ap_antennas: l,
            ue_antennas: n,
            count,
            h,
            hhat,
        }
    }

    #[inline]
    pub fn h(&self, r: usize, m: usize, k: usize) -> &CMat {
        &self.h[(r * self.aps + m) * self.ues + k]
    }

    #[inline]
    pub fn hhat(&self, r: usize, m: usize, k: usize) -> &CMat {
        &self.hhat[(r * self.aps + m) * self.ues + k]
    }

    /// Local estimates of realization `r`, row-major over `(m, k)`.
    pub fn estimates(&self, r: usize) -> &[CMat] {
        let w = self.aps * self.ues;
        &self.hhat[r * w..(r + 1) * w]
    }

    pub fn channels(&self, r: usize) -> &[CMat] {
        let w = self.aps * self.ues;
        &self.h[r * w..(r + 1) * w]
    }
}

/// Sample moments over `n_realizations` fresh draws.
#[allow(clippy::too_many_arguments)]
pub fn moment_estimate(
    corr: &CorrelationSet,
    stats: &EstimationStats,
    book: &PilotBook,
    combiner: Combiner,
    precoders: &PrecoderSet,
    sigma2: f64,
    n_realizations: usize,
    seed: u64,
) -> Result<(StatMoments, LocalMoments)> {
    let pool = RealizationPool::draw(corr, stats, precoders, book, sigma2, n_realizations, seed)?;
    let load = fcp::error_loading(stats, &precoders.f_u);
    let local = LocalMoments::from_pool(&pool, combiner, &precoders.f_u, Some(&load), sigma2)?;
    Ok((local.stat_moments(&precoders.f_u), local))
}

fn is_zero(a: &CMat) -> bool {
    a.iter().all(|z| z.norm_sqr() == 0.0)
}

/// `A_k = (Σ_l E{G_kl F̄_l G_kl^H} + σ² S_k)^{-1} E{G_kk} F_k` for all UEs.
pub fn optimal_lsfd(moments: &StatMoments, f_u: &[CMat], sigma2: f64) -> Result<Vec<CMat>> {
    (0..moments.ues)
        .map(|k| {
            let rhs = &moments.gkk_mean[k] * &f_u[k];
            if is_zero(&rhs) {
                return Ok(CMat::zeros(rhs.nrows(), rhs.ncols()));
            }
            Ok(linalg::solve_hpd_with_ridge(&moments.system(k, sigma2), &rhs)?.0)
        })
        .collect()
}

/// Weights built from the whitened interference-plus-noise covariance
/// (the desired-signal mean term removed from the system matrix).
pub fn optimal_lsfd_whitened(
    moments: &StatMoments,
    f_u: &[CMat],
    sigma2: f64,
) -> Result<Vec<CMat>> {
    (0..moments.ues)
        .map(|k| {
            let ef = &moments.gkk_mean[k] * &f_u[k];
            if is_zero(&ef) {
                return Ok(CMat::zeros(ef.nrows(), ef.ncols()));
            }
            let mut sys = moments.system(k, sigma2) - &ef * ef.adjoint();
            linalg::hermitize_in_place(&mut sys);
            Ok(linalg::solve_hpd_with_ridge(&sys, &ef)?.0)
        })
        .collect()
}

/// `I - F^H E{G_kk}^H A - A^H E{G_kk} F + A^H (Σ_l E{G F̄ G^H} + σ² S) A`.
pub fn lsfd_mse_matrix(
    a: &CMat,
    k: usize,
    moments: &StatMoments,
    f_u: &[CMat],
    sigma2: f64,
) -> CMat {
    let d = a.adjoint() * &moments.gkk_mean[k] * &f_u[k];
    let n = d.nrows();
    let mut e = linalg::eye(n) - &d - d.adjoint() + a.adjoint() * moments.system(k, sigma2) * a;
    linalg::hermitize_in_place(&mut e);
    e
}

/// `I - F^H E{G_kk}^H (Σ_l E{G F̄ G^H} + σ² S)^{-1} E{G_kk} F`.
pub fn lsfd_mse_matrix_opt(
    k: usize,
    moments: &StatMoments,
    f_u: &[CMat],
    sigma2: f64,
) -> Result<CMat> {
    let ef = &moments.gkk_mean[k] * &f_u[k];
    let n = ef.ncols();
    if is_zero(&ef) {
        return Ok(linalg::eye(n));
    }
    let x = linalg::solve_hpd_with_ridge(&moments.system(k, sigma2), &ef)?.0;
    let mut e = linalg::eye(n) - ef.adjoint() * x;
    linalg::hermitize_in_place(&mut e);
    Ok(e)
}

/// SE of UE `k` for given weights, times the pre-log.
pub fn lsfd_se(
    a: &CMat,
    k: usize,
    moments: &StatMoments,
    f_u: &[CMat],
    sigma2: f64,
    prelog: f64,
) -> Result<f64> {
    let d = a.adjoint() * &moments.gkk_mean[k] * &f_u[k];
    let mut sigma = a.adjoint() * moments.system(k, sigma2) * a - &d * d.adjoint();
    linalg::hermitize_in_place(&mut sigma);
    Ok(prelog * fcp::log2_det_gain(&d, &sigma)?)
}

/// SE of UE `k` at the optimal weights, times the pre-log.
pub fn lsfd_se_opt(
    k: usize,
    moments: &StatMoments,
    f_u: &[CMat],
    sigma2: f64,
    prelog: f64,
) -> Result<f64> {
    let ef = &moments.gkk_mean[k] * &f_u[k];
    if is_zero(&ef) {
        return Ok(0.0);
    }
    let mut sys = moments.system(k, sigma2) - &ef * ef.adjoint();
    linalg::hermitize_in_place(&mut sys);
    match linalg::solve_hpd_with_ridge(&sys, &ef) {
        Ok((x, _)) => {
            let mut g = linalg::eye(ef.ncols()) + ef.adjoint() * x;
            linalg::hermitize_in_place(&mut g);
            Ok(prelog * linalg::logdet_hpd(&g)? / std::f64::consts::LN_2)
        }
        Err(e) => Err(e),
    }
}

pub fn lsfd_se_opt_all(
    moments: &StatMoments,
    f_u: &[CMat],
    sigma2: f64,
    prelog: f64,
) -> Result<Vec<f64>> {
    (0..moments.ues)
        .map(|k| lsfd_se_opt(k, moments, f_u, sigma2, prelog))
        .collect()
}

/// `G_kl` stacked over APs for every `(k, l)` of one realization,
/// row-major over `(k, l)`.
pub fn stacked_products(v: &[CMat], h: &[CMat], aps: usize, ues: usize) -> Vec<CMat> {
    let n = h[0].ncols();
    let mut out = Vec::with_capacity(ues * ues);
    for k in 0..ues {
        for l in 0..ues {
            let mut g = CMat::zeros(aps * n, n);
            for m in 0..aps {
                let blk = v[m * ues + k].adjoint() * &h[m * ues + l];
                g.view_mut((m * n, 0), (n, n)).copy_from(&blk);
            }
            out.push(g);
        }
    }
    out
}

/// Local combiners for every `(m, k)` of one realization.
pub fn local_combiners(
    combiner: Combiner,
    hhat: &[CMat],
    aps: usize,
    ues: usize,
    f_u: &[CMat],
    load: &ErrorLoading,
    sigma2: f64,
) -> Result<Vec<CMat>> {
    match combiner {
        Combiner::Mr => Ok(hhat.iter().map(mr_combiner).collect()),
        Combiner::Lmmse => {
            let mut out = Vec::with_capacity(aps * ues);
            for m in 0..aps {
                let hm = &hhat[m * ues..(m + 1) * ues];
                let lm: Vec<CMat> = (0..ues).map(|u| load.get(m, u).clone()).collect();
                let sys = local_system(hm, f_u, &lm, sigma2);
                let ch = linalg::cholesky(&sys)
                    .ok_or_else(|| Error::NotPd(format!("local system at AP {m}")))?;
                for k in 0..ues {
                    out.push(ch.solve(&(&hm[k] * &f_u[k])));
                }
            }
            Ok(out)
        }
    }
}
