//! Analytical LSFD statistics for MR combining (`V_mk = Ĥ_mk`).
//!
//! Channels and estimates are jointly circular Gaussian, so every fourth
//! moment splits into products of second moments:
//! `E{a^H b c^H d} = tr(E{b a^H}) tr(E{d c^H}) + tr(E{d a^H} E{b c^H})`.
//! The per-AP quantities used below are
//! - `Ξ_mab = E{h_mb ĥ_ma^H} = τp R_mb F̃_b^H Ψ_ma^{-1} F̃_a R_ma` (zero unless `b ∈ P_a`),
//! - `Λ_mab = E{Ĥ_ma^H H_mb}` with `[Λ]_{n n'} = tr(Ξ^{n' n})`,
//! - `tr(R_mb^{ij} R̂_ma^{pq})` for the fluctuation part.
//!
//! The textbook route instead writes the cross term through square roots of
//! `R_mb` and `P = S F̃ R F̃^H S^H`. That factorization is exact only when
//! `S_ma F̃_b R_mb^{1/2}` is Hermitian, which holds without contamination
//! but not in general; [`CrossTerm`] keeps all three forms selectable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcp;
use crate::linalg::{self, c, pairwise_sum, CMat, C64, ZERO};
use crate::lsfd::{self, LocalMoments, StatMoments};
use crate::model::CorrelationSet;
use crate::pilots::{EstimationStats, PilotBook};

/// How the pilot-sharing cross term of the same-AP fourth moment is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossTerm {
    /// Product of cross-covariance traces, `tr(Ξ^{..}) conj(tr(Ξ^{..}))`.
    #[default]
    CrossCovariance,
    /// Square-root factorization with the summation index shared inside each trace.
    SqrtReindexed,
    /// Square-root factorization with the index pattern as commonly typeset.
    SqrtTypeset,
}

/// Quantities for a (combiner UE `a`, channel UE `b`) pair at one AP, `b ∈ P_a`.
#[derive(Clone, Debug)]
pub struct PairTerms {
    /// `E{h_mb ĥ_ma^H}` (LN x LN).
    pub xi: CMat,
    /// `E{Ĥ_ma^H H_mb}` (N x N).
    pub lambda: CMat,
    /// `τp S (Ψ - τp F̃_b R_mb F̃_b^H) S^H` with `S = R_ma F̃_a^H Ψ_ma^{-1}`.
    pub p1: CMat,
    /// `S F̃_b R_mb F̃_b^H S^H`.
    pub p2: CMat,
    /// `R_mb^{1/2}`.
    pub r_sqrt: CMat,
    /// `P2^{1/2}`.
    pub p_sqrt: CMat,
}

#[derive(Clone, Debug)]
pub struct ClosedFormMoments {
    pub aps: usize,
    pub ues: usize,
    pub ap_antennas: usize,
    pub ue_antennas: usize,
    pub tau_p: usize,
    pub variant: CrossTerm,
    /// `[Z_mk]_{n n'} = tr(R̂_mk^{n' n})`, indexed `(m, k)`.
    pub z_local: Vec<CMat>,
    /// `Z_k` stacked over APs (MN x N).
    pub z: Vec<CMat>,
    /// Block diagonal of `Z_mk` (MN x MN).
    pub s_c: Vec<CMat>,
    /// Block-diagonal fluctuation part, row-major over `(k, l)`.
    pub t1: Vec<CMat>,
    /// Pilot-sharing part, present iff `l ∈ P_k`.
    pub t2: Vec<Option<CMat>>,
    /// `Γ^{(1)}` per `(m, k, l)` (N x N).
    pub gamma1: Vec<CMat>,
    /// `Γ^{(2)}` per `(m, k, l)` when `l ∈ P_k`.
    pub gamma2: Vec<Option<CMat>>,
    /// Per `(m, a, b)` when `b ∈ P_a`.
    pub pairs: Vec<Option<PairTerms>>,
    /// `tr(R_mb^{i j} R̂_ma^{p q})` per `(m, a, b)`, index `((i N + j) N + p) N + q`.
    traces: Vec<Vec<C64>>,
}

fn tile(a: &CMat, r: usize, c_: usize, l: usize) -> CMat {
    a.view((r * l, c_ * l), (l, l)).into_owned()
}

fn trace_tensor(r: &CMat, rhat: &CMat, l: usize, n: usize) -> Vec<C64> {
    let rb: Vec<CMat> = (0..n * n).map(|x| tile(r, x / n, x % n, l)).collect();
    let hb: Vec<CMat> = (0..n * n).map(|x| tile(rhat, x / n, x % n, l)).collect();
    let mut out = Vec::with_capacity(n.pow(4));
    for x in &rb {
        for y in &hb {
            out.push(linalg::trace_of_product(x, y));
        }
    }
    out
}

fn pair_terms(
    corr: &CorrelationSet,
    stats: &EstimationStats,
    m: usize,
    a: usize,
    b: usize,
) -> Result<PairTerms> {
    let (l, n) = (corr.ap_antennas, corr.ue_antennas);
    let tau_p = c(stats.tau_p as f64);
    let est = stats.link(m, a);
    let s = &est.filter;
    let fb = &stats.ftilde[b];
    let rb = corr.r(m, b);
    let xi = rb * fb.adjoint() * s.adjoint() * tau_p;
    let lambda = CMat::from_fn(n, n, |p, q| tile(&xi, q, p, l).trace());
    let frf = fb * rb * fb.adjoint();
    let mut p2 = s * &frf * s.adjoint();
    linalg::hermitize_in_place(&mut p2);
    let mut p1 = s * (&est.psi - &frf * tau_p) * s.adjoint() * tau_p;
    linalg::hermitize_in_place(&mut p1);
    let r_sqrt = linalg::psd_sqrt(rb).map_err(|e| Error::NotPsd(sqrt_fail(&e, "R", m, a, b)))?;
    let p_sqrt = linalg::psd_sqrt(&p2).map_err(|e| Error::NotPsd(sqrt_fail(&e, "P2", m, a, b)))?;
    Ok(PairTerms {
        xi,
        lambda,
        p1,
        p2,
        r_sqrt,
        p_sqrt,
    })
}

fn sqrt_fail(e: &Error, what: &str, m: usize, a: usize, b: usize) -> f64 {
    log::error!("square root of {what} failed for AP {m}, UEs ({a}, {b}): {e}");
    match e {
        Error::NotPsd(v) => *v,
        Error::NotHermitian(v) => *v,
        _ => f64::NAN,
    }
}

impl ClosedFormMoments {
    #[inline]
    fn idx(&self, m: usize, a: usize, b: usize) -> usize {
        (m * self.ues + a) * self.ues + b
    }

    pub fn pair(&self, m: usize, a: usize, b: usize) -> Option<&PairTerms> {
        self.pairs[self.idx(m, a, b)].as_ref()
    }

    /// `tr(R_mb^{i j} R̂_ma^{p q})`.
    pub fn trace_rr(
        &self,
        m: usize,
        a: usize,
        b: usize,
        i: usize,
        j: usize,
        p: usize,
        q: usize,
    ) -> C64 {
        let n = self.ue_antennas;
        self.traces[self.idx(m, a, b)][((i * n + j) * n + p) * n + q]
    }

    pub fn t1(&self, k: usize, l: usize) -> &CMat {
        &self.t1[k * self.ues + l]
    }

    pub fn t2(&self, k: usize, l: usize) -> Option<&CMat> {
        self.t2[k * self.ues + l].as_ref()
    }

    /// `E{G_kl F̄_l G_kl^H} = T1 + T2·1{l∈P_k}`.
    pub fn second(&self, k: usize, l: usize) -> CMat {
        match self.t2(k, l) {
            Some(t2) => self.t1(k, l) + t2,
            None => self.t1(k, l).clone(),
        }
    }

    pub fn stat_moments(&self) -> StatMoments {
        let mut gkl_second = Vec::with_capacity(self.ues * self.ues);
        for k in 0..self.ues {
            for l in 0..self.ues {
                let mut s = self.second(k, l);
                linalg::hermitize_in_place(&mut s);
                gkl_second.push(s);
            }
        }
        StatMoments {
            aps: self.aps,
            ues: self.ues,
            ue_antennas: self.ue_antennas,
            gkk_mean: self.z.clone(),
            gkl_second,
            s: self.s_c.clone(),
            sample_count: 0,
        }
    }

    /// Cross term of the same-AP fourth moment
    /// `E{ĥ_ma,p^H h_mb,n h_mb,i^H ĥ_ma,p'}` under the selected variant.
    fn cross(
        &self,
        m: usize,
        a: usize,
        b: usize,
        p: usize,
        n_col: usize,
        i_col: usize,
        p2: usize,
    ) -> C64 {
        let pt = match self.pair(m, a, b) {
            Some(pt) => pt,
            None => return ZERO,
        };
        let (l, n) = (self.ap_antennas, self.ue_antennas);
        let tp2 = (self.tau_p * self.tau_p) as f64;
        let ps = |r: usize, c_: usize| tile(&pt.p_sqrt, r, c_, l);
        let rs = |r: usize, c_: usize| tile(&pt.r_sqrt, r, c_, l);
        match self.variant {
            CrossTerm::CrossCovariance => {
                tile(&pt.xi, n_col, p, l).trace() * tile(&pt.xi, i_col, p2, l).trace().conj()
            }
            CrossTerm::SqrtReindexed => {
                let f: Vec<C64> = (0..n)
                    .map(|q| linalg::trace_of_product(&ps(q, p), &rs(n_col, q)))
                    .collect();
                let g: Vec<C64> = (0..n)
                    .map(|q| linalg::trace_of_product(&ps(p2, q), &rs(q, i_col)))
                    .collect();
                pairwise_sum(&f) * pairwise_sum(&g) * tp2
            }
            CrossTerm::SqrtTypeset => {
                let mut terms = Vec::with_capacity(n * n);
                for q1 in 0..n {
                    for q2 in 0..n {
                        terms.push(
                            linalg::trace_of_product(&ps(q1, n_col), &rs(n_col, q1))
                                * linalg::trace_of_product(&ps(p2, q2), &rs(q2, i_col)),
                        );
                    }
                }
                pairwise_sum(&terms) * tp2
            }
        }
    }

    /// Cross term of `Γ^{(2)}` for the `(n, n')` entry and transmit pair `(i', i)`.
    fn gamma_cross(
        &self,
        m: usize,
        k: usize,
        l_ue: usize,
        n_: usize,
        n2: usize,
        i1: usize,
        i: usize,
    ) -> C64 {
        let pt = match self.pair(m, k, l_ue) {
            Some(pt) => pt,
            None => return ZERO,
        };
        let (l, n) = (self.ap_antennas, self.ue_antennas);
        let tp2 = (self.tau_p * self.tau_p) as f64;
        let ps = |r: usize, c_: usize| tile(&pt.p_sqrt, r, c_, l);
        let rs = |r: usize, c_: usize| tile(&pt.r_sqrt, r, c_, l);
        match self.variant {
            CrossTerm::CrossCovariance => {
                tile(&pt.xi, i1, n_, l).trace() * tile(&pt.xi, i, n2, l).trace().conj()
            }
            CrossTerm::SqrtReindexed => {
                let f: Vec<C64> = (0..n)
                    .map(|q| linalg::trace_of_product(&ps(q, n_), &rs(i1, q)))
                    .collect();
                let g: Vec<C64> = (0..n)
                    .map(|q| linalg::trace_of_product(&ps(n2, q), &rs(q, i)))
                    .collect();
                pairwise_sum(&f) * pairwise_sum(&g) * tp2
            }
            CrossTerm::SqrtTypeset => {
                let mut terms = Vec::with_capacity(n * n);
                for q1 in 0..n {
                    for q2 in 0..n {
                        terms.push(
                            linalg::trace_of_product(&ps(q1, n_), &rs(i1, q2))
                                * linalg::trace_of_product(&ps(n2, q2), &rs(q2, i)),
                        );
                    }
                }
                pairwise_sum(&terms) * tp2
            }
        }
    }

    /// Same-AP entry `E{ĥ_ma,p^H h_mb,n h_mb,i^H ĥ_ma,p'}` through the
    /// `P1 / P2` split plus the selected cross term (pilot-sharing pair).
    fn same_ap_shared(
        &self,
        m: usize,
        a: usize,
        b: usize,
        p: usize,
        n_col: usize,
        i_col: usize,
        p2: usize,
    ) -> C64 {
        let pt = self.pair(m, a, b).expect("pilot-sharing pair");
        let l = self.ap_antennas;
        let n = self.ue_antennas;
        let tp2 = (self.tau_p * self.tau_p) as f64;
        // R^{n i} and P2^{p' p} rebuilt from their square roots
        let r_ni = pt.r_sqrt_full_block(n_col, i_col, n, l);
        let mut p_pp = CMat::zeros(l, l);
        for q in 0..n {
            p_pp += tile(&pt.p_sqrt, p2, q, l) * tile(&pt.p_sqrt, q, p, l);
        }
        let first = linalg::trace_of_product(&r_ni, &tile(&pt.p1, p2, p, l));
        first
            + linalg::trace_of_product(&r_ni, &p_pp) * tp2
            + self.cross(m, a, b, p, n_col, i_col, p2)
    }

    /// Entry `[(m,p),(m',p')]` of `Ḡ_{lk,ni}` (combiner UE `l`, channel UE `k`).
    #[allow(clippy::too_many_arguments)]
    pub fn gbar_entry(
        &self,
        l: usize,
        k: usize,
        n_col: usize,
        i_col: usize,
        m: usize,
        p: usize,
        m2: usize,
        p2: usize,
    ) -> C64 {
        let shared = self.pair(m, l, k).is_some();
        match (shared, m == m2) {
            (false, false) => ZERO,
            (false, true) => self.trace_rr(m, l, k, n_col, i_col, p2, p),
            (true, false) => {
                let a = self.pair(m, l, k).unwrap();
                let b = self.pair(m2, l, k).unwrap();
                a.lambda[(p, n_col)] * b.lambda[(p2, i_col)].conj()
            }
            (true, true) => self.same_ap_shared(m, l, k, p, n_col, i_col, p2),
        }
    }

    /// `Ḡ_{lk,ni}` as an `MN x MN` matrix.
    pub fn gbar(&self, l: usize, k: usize, n_col: usize, i_col: usize) -> CMat {
        let n = self.ue_antennas;
        let dim = self.aps * n;
        CMat::from_fn(dim, dim, |x, y| {
            self.gbar_entry(l, k, n_col, i_col, x / n, x % n, y / n, y % n)
        })
    }

    /// `[T̄_lk]_{i,n} = tr(Ā Ḡ_{lk,ni})`.
    pub fn tbar(&self, l: usize, k: usize, abar: &CMat) -> CMat {
        let n = self.ue_antennas;
        let mut t = CMat::zeros(n, n);
        for n_col in 0..n {
            for i_col in 0..n {
                t[(i_col, n_col)] = linalg::trace_of_product(abar, &self.gbar(l, k, n_col, i_col));
            }
        }
        t
    }
}

impl PairTerms {
    /// `R_mb^{n i}` rebuilt from the square root, `Σ_q R̃^{n q} R̃^{q i}`.
    fn r_sqrt_full_block(&self, n_col: usize, i_col: usize, n: usize, l: usize) -> CMat {
        let mut acc = CMat::zeros(l, l);
        for q in 0..n {
            acc += tile(&self.r_sqrt, n_col, q, l) * tile(&self.r_sqrt, q, i_col, l);
        }
        acc
    }
}

/// Analytical statistics for MR combining at the data precoders `f_u`.
pub fn cf_moments(
    corr: &CorrelationSet,
    stats: &EstimationStats,
    book: &PilotBook,
    f_u: &[CMat],
    variant: CrossTerm,
) -> Result<ClosedFormMoments> {
    let (m_count, k_count, l, n) = (corr.aps, corr.ues, corr.ap_antennas, corr.ue_antennas);
    let mut pairs = Vec::with_capacity(m_count * k_count * k_count);
    let mut traces = Vec::with_capacity(m_count * k_count * k_count);
    for m in 0..m_count {
        for a in 0..k_count {
            for b in 0..k_count {
                traces.push(trace_tensor(corr.r(m, b), &stats.link(m, a).rhat, l, n));
                pairs.push(if book.shares_pilot(a, b) {
                    Some(pair_terms(corr, stats, m, a, b)?)
                } else {
                    None
                });
            }
        }
    }
    let z_local: Vec<CMat> = (0..m_count * k_count)
        .map(|x| {
            let rh = &stats.links[x].rhat;
            CMat::from_fn(n, n, |p, q| tile(rh, q, p, l).trace())
        })
        .collect();
    let z: Vec<CMat> = (0..k_count)
        .map(|k| {
            let mut out = CMat::zeros(m_count * n, n);
            for m in 0..m_count {
                out.view_mut((m * n, 0), (n, n))
                    .copy_from(&z_local[m * k_count + k]);
            }
            out
        })
        .collect();
    let s_c: Vec<CMat> = (0..k_count)
        .map(|k| {
            let blocks: Vec<CMat> = (0..m_count)
                .map(|m| z_local[m * k_count + k].clone())
                .collect();
            linalg::block_diag(&blocks)
        })
        .collect();
    let mut cfm = ClosedFormMoments {
        aps: m_count,
        ues: k_count,
        ap_antennas: l,
        ue_antennas: n,
        tau_p: stats.tau_p,
        variant,
        z_local,
        z,
        s_c,
        t1: Vec::new(),
        t2: Vec::new(),
        gamma1: Vec::new(),
        gamma2: Vec::new(),
        pairs,
        traces,
    };
    let fbars: Vec<CMat> = f_u.iter().map(fcp::fbar).collect();
    let tp2 = (stats.tau_p * stats.tau_p) as f64;
    let mut gamma1 = Vec::with_capacity(m_count * k_count * k_count);
    let mut gamma2 = Vec::with_capacity(m_count * k_count * k_count);
    for m in 0..m_count {
        for k in 0..k_count {
            for lu in 0..k_count {
                let fb = &fbars[lu];
                let g1 = CMat::from_fn(n, n, |nn, n2| {
                    let mut terms = Vec::with_capacity(n * n);
                    for i in 0..n {
                        for i1 in 0..n {
                            terms.push(fb[(i1, i)] * cfm.trace_rr(m, k, lu, i1, i, n2, nn));
                        }
                    }
                    pairwise_sum(&terms)
                });
                let g2 = cfm.pair(m, k, lu).map(|pt| {
                    // R^{i'i} and P2^{n'n} rebuilt from the square-root tiles
                    let r_blocks: Vec<CMat> = (0..n * n)
                        .map(|x| pt.r_sqrt_full_block(x / n, x % n, n, l))
                        .collect();
                    let p_blocks: Vec<CMat> = (0..n * n)
                        .map(|x| {
                            let (r, c_) = (x / n, x % n);
                            let mut acc = CMat::zeros(l, l);
                            for q in 0..n {
                                acc += tile(&pt.p_sqrt, r, q, l) * tile(&pt.p_sqrt, q, c_, l);
                            }
                            acc
                        })
                        .collect();
                    CMat::from_fn(n, n, |nn, n2| {
                        let mut terms = Vec::with_capacity(n * n);
                        for i in 0..n {
                            for i1 in 0..n {
                                let w = fb[(i1, i)];
                                if w == ZERO {
                                    continue;
                                }
                                let r_ii = &r_blocks[i1 * n + i];
                                let v = linalg::trace_of_product(r_ii, &tile(&pt.p1, n2, nn, l))
                                    + linalg::trace_of_product(r_ii, &p_blocks[n2 * n + nn]) * tp2
                                    + cfm.gamma_cross(m, k, lu, nn, n2, i1, i);
                                terms.push(w * v);
                            }
                        }
                        pairwise_sum(&terms)
                    })
                });
                gamma1.push(g1);
                gamma2.push(g2);
            }
        }
    }
    let dim = m_count * n;
    let mut t1 = Vec::with_capacity(k_count * k_count);
    let mut t2 = Vec::with_capacity(k_count * k_count);
    for k in 0..k_count {
        for lu in 0..k_count {
            let gi = |m: usize| (m * k_count + k) * k_count + lu;
            let blocks: Vec<CMat> = (0..m_count).map(|m| gamma1[gi(m)].clone()).collect();
            t1.push(linalg::block_diag(&blocks));
            if book.shares_pilot(k, lu) {
                let mut t = CMat::zeros(dim, dim);
                for m in 0..m_count {
                    for m2 in 0..m_count {
                        let blk = if m == m2 {
                            gamma2[gi(m)].as_ref().unwrap() - &gamma1[gi(m)]
                        } else {
                            let a = &cfm.pair(m, k, lu).unwrap().lambda;
                            let b = &cfm.pair(m2, k, lu).unwrap().lambda;
                            a * &fbars[lu] * b.adjoint()
                        };
                        t.view_mut((m * n, m2 * n), (n, n)).copy_from(&blk);
                    }
                }
                t2.push(Some(t));
            } else {
                t2.push(None);
            }
        }
    }
    cfm.gamma1 = gamma1;
    cfm.gamma2 = gamma2;
    cfm.t1 = t1;
    cfm.t2 = t2;
    Ok(cfm)
}

/// Per-AP moments for MR combining in the layout used by the sample-based
/// estimator, so the precoder algorithm can run on either source.
pub fn mr_local_moments(
    corr: &CorrelationSet,
    stats: &EstimationStats,
    book: &PilotBook,
) -> LocalMoments {
    let (m_count, k_count, l, n) = (corr.aps, corr.ues, corr.ap_antennas, corr.ue_antennas);
    let mut lm = LocalMoments::zeros(m_count, k_count, n);
    let tau_p = c(stats.tau_p as f64);
    for m in 0..m_count {
        for a in 0..k_count {
            let rh = &stats.link(m, a).rhat;
            lm.vv[m * k_count + a] = CMat::from_fn(n, n, |p, q| tile(rh, q, p, l).trace());
            let rh_tiles: Vec<CMat> = (0..n * n).map(|x| tile(rh, x / n, x % n, l)).collect();
            for b in 0..k_count {
                let rb = corr.r(m, b);
                let mean = if book.shares_pilot(a, b) {
                    let xi =
                        rb * stats.ftilde[b].adjoint() * stats.link(m, a).filter.adjoint() * tau_p;
                    CMat::from_fn(n, n, |p, q| tile(&xi, q, p, l).trace())
                } else {
                    CMat::zeros(n, n)
                };
                let rb_tiles: Vec<CMat> = (0..n * n).map(|x| tile(rb, x / n, x % n, l)).collect();
                let g = linalg::vec_of(&mean);
                // E{G_{p'b'} conj(G_{pa'})} = mean·conj(mean) + tr(R̂^{p p'} R^{b' a'})
                let mut second = &g * g.adjoint();
                for a1 in 0..n {
                    for p in 0..n {
                        for b1 in 0..n {
                            for p2 in 0..n {
                                second[(p2 + n * b1, p + n * a1)] += linalg::trace_of_product(
                                    &rh_tiles[p * n + p2],
                                    &rb_tiles[b1 * n + a1],
                                );
                            }
                        }
                    }
                }
                let i = lm.idx(m, a, b);
                lm.mean[i] = mean;
                lm.second[i] = second;
            }
        }
    }
    lm.sample_count = 0;
    lm
}

/// SE, optimal weights and MSE matrices from closed-form statistics.
#[derive(Clone, Debug)]
pub struct ClosedFormSolution {
    pub se: Vec<f64>,
    pub weights: Vec<CMat>,
    pub mse: Vec<CMat>,
}

pub fn cf_se_and_lsfd(
    cfm: &ClosedFormMoments,
    f_u: &[CMat],
    sigma2: f64,
    prelog: f64,
) -> Result<ClosedFormSolution> {
    let sm = cfm.stat_moments();
    let weights = lsfd::optimal_lsfd(&sm, f_u, sigma2)?;
    let se = lsfd::lsfd_se_opt_all(&sm, f_u, sigma2, prelog)?;
    let mse = (0..cfm.ues)
        .map(|k| lsfd::lsfd_mse_matrix_opt(k, &sm, f_u, sigma2))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClosedFormSolution { se, weights, mse })
}

/// Precoder of UE `k` at multiplier `lambda`, with every `T̄_lk`
/// assembled entry by entry from the fourth-moment tensors.
pub fn cf_precoder_update(
    cfm: &ClosedFormMoments,
    weights: &[CMat],
    mse: &[CMat],
    mu: &[f64],
    lambda: f64,
    k: usize,
) -> Result<CMat> {
    let (bracket, numerator) = cf_precoder_terms(cfm, weights, mse, mu, k)?;
    crate::wmmse::apply_multiplier(&bracket, &numerator, lambda)
}

/// `(Σ_l μ_l T̄_lk, μ_k Z_k^H A_k E_k^{-1})` for UE `k`.
pub fn cf_precoder_terms(
    cfm: &ClosedFormMoments,
    weights: &[CMat],
    mse: &[CMat],
    mu: &[f64],
    k: usize,
) -> Result<(CMat, CMat)> {
    let n = cfm.ue_antennas;
    let mut bracket = CMat::zeros(n, n);
    for l in 0..cfm.ues {
        let w = linalg::inverse_hpd(&mse[l])?;
        let abar = &weights[l] * w * weights[l].adjoint();
        bracket += cfm.tbar(l, k, &abar) * c(mu[l]);
    }
    linalg::hermitize_in_place(&mut bracket);
    let w_k = linalg::inverse_hpd(&mse[k])?;
    let numerator = cfm.z[k].adjoint() * &weights[k] * w_k * c(mu[k]);
    Ok((bracket, numerator))
}
