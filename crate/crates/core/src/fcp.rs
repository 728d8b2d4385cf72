//! Fully-centralized processing: the CPU stacks all local estimates and
//! applies MMSE combining per coherence block.

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat};
use crate::pilots::EstimationStats;

/// Pilot and data precoders with per-UE power budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecoderSet {
    pub f_u: Vec<CMat>,
    pub f_p: Vec<CMat>,
    pub power: Vec<f64>,
}

impl PrecoderSet {
    /// `√(p/N) I` for both pilot and data.
    pub fn identity(ues: usize, n: usize, p: f64) -> Self {
        let f = linalg::eye(n) * c((p / n as f64).sqrt());
        Self {
            f_u: vec![f.clone(); ues],
            f_p: vec![f; ues],
            power: vec![p; ues],
        }
    }

    pub fn with_data(&self, f_u: Vec<CMat>) -> Self {
        Self {
            f_u,
            f_p: self.f_p.clone(),
            power: self.power.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, p) in self.power.iter().enumerate() {
            let lim = p + 1e-9 * p.max(1.0);
            for (what, f) in [("data", &self.f_u[k]), ("pilot", &self.f_p[k])] {
                let used = linalg::fro2(f);
                if used > lim {
                    return Err(Error::Power(format!(
                        "{what} precoder of UE {k}: {used:e} > {p:e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `F F^H`.
pub fn fbar(f: &CMat) -> CMat {
    f * f.adjoint()
}

/// Stacked estimates `Ĥ_k` (ML x N) and the per-link error covariances.
#[derive(Clone, Debug)]
pub struct CollectiveEstimate<'a> {
    pub aps: usize,
    pub ap_antennas: usize,
    pub ue_antennas: usize,
    pub hhat: Vec<CMat>,
    pub stats: &'a EstimationStats,
}

impl<'a> CollectiveEstimate<'a> {
    /// `local` holds `Ĥ_mk` (L x N), row-major over `(m, k)`.
    pub fn new(local: &[CMat], stats: &'a EstimationStats) -> Self {
        let (m_count, k_count, l, n) = (stats.aps, stats.ues, stats.ap_antennas, stats.ue_antennas);
        let hhat = (0..k_count)
            .map(|k| {
                let mut h = CMat::zeros(m_count * l, n);
                for m in 0..m_count {
                    h.view_mut((m * l, 0), (l, n))
                        .copy_from(&local[m * k_count + k]);
                }
                h
            })
            .collect();
        Self {
            aps: m_count,
            ap_antennas: l,
            ue_antennas: n,
            hhat,
            stats,
        }
    }

    pub fn ues(&self) -> usize {
        self.hhat.len()
    }

    /// `C_{k,ni} = E{h̃_{k,n} h̃_{k,i}^H}`, block diagonal over APs.
    pub fn error_block(&self, k: usize, n: usize, i: usize) -> CMat {
        let blocks: Vec<CMat> = (0..self.aps)
            .map(|m| self.stats.c_block(m, k, n, i))
            .collect();
        linalg::block_diag(&blocks)
    }
}

/// `C'_ml = Σ_{a,b} [F̄_l]_{ab} C_ml^{ab}` for every `(m, l)`.
#[derive(Clone, Debug)]
pub struct ErrorLoading {
    pub aps: usize,
    pub ues: usize,
    /// Row-major over `(m, l)`, each `L x L`.
    pub per_link: Vec<CMat>,
}

impl ErrorLoading {
    pub fn get(&self, m: usize, l: usize) -> &CMat {
        &self.per_link[m * self.ues + l]
    }

    /// `Σ_l C'_ml` at AP `m`.
    pub fn ap_total(&self, m: usize) -> CMat {
        let mut s = self.get(m, 0).clone();
        for l in 1..self.ues {
            s += self.get(m, l);
        }
        s
    }

    /// Block-diagonal `C'_l` (ML x ML).
    pub fn stacked(&self, l: usize) -> CMat {
        let blocks: Vec<CMat> = (0..self.aps).map(|m| self.get(m, l).clone()).collect();
        linalg::block_diag(&blocks)
    }

    /// Block-diagonal `Σ_l C'_l`.
    pub fn stacked_total(&self) -> CMat {
        let blocks: Vec<CMat> = (0..self.aps).map(|m| self.ap_total(m)).collect();
        linalg::block_diag(&blocks)
    }
}

/// `Σ_{a,b} F̄_{ab} X^{ab}` for an `LN x LN` matrix `X` with `L x L` tiles.
pub fn load_blocks(x: &CMat, fbar: &CMat, l: usize) -> CMat {
    let n = fbar.nrows();
    let mut out = CMat::zeros(l, l);
    for b in 0..n {
        for a in 0..n {
            let w = fbar[(a, b)];
            if w == linalg::ZERO {
                continue;
            }
            for q in 0..l {
                for j in 0..l {
                    out[(j, q)] += w * x[(a * l + j, b * l + q)];
                }
            }
        }
    }
    out
}

pub fn error_loading(stats: &EstimationStats, f_u: &[CMat]) -> ErrorLoading {
    let l = stats.ap_antennas;
    let fbars: Vec<CMat> = f_u.iter().map(fbar).collect();
    let mut per_link = Vec::with_capacity(stats.aps * stats.ues);
    for m in 0..stats.aps {
        for u in 0..stats.ues {
            let mut cl = load_blocks(&stats.link(m, u).c, &fbars[u], l);
            linalg::hermitize_in_place(&mut cl);
            per_link.push(cl);
        }
    }
    ErrorLoading {
        aps: stats.aps,
        ues: stats.ues,
        per_link,
    }
}

/// `Σ_l (Ĥ_l F̄_l Ĥ_l^H + C'_l) + σ² I`.
pub fn system_matrix(
    coll: &CollectiveEstimate,
    f_u: &[CMat],
    load: &ErrorLoading,
    sigma2: f64,
) -> CMat {
    let dim = coll.aps * coll.ap_antennas;
    let mut s = load.stacked_total();
    for (h, f) in coll.hhat.iter().zip(f_u) {
        let hf = h * f;
        s += &hf * hf.adjoint();
    }
    for i in 0..dim {
        s[(i, i)] += c(sigma2);
    }
    linalg::hermitize_in_place(&mut s);
    s
}

/// MMSE combiners `V_k = Σ^{-1} Ĥ_k F_k` for all UEs.
pub fn mmse_combiners(
    coll: &CollectiveEstimate,
    f_u: &[CMat],
    load: &ErrorLoading,
    sigma2: f64,
) -> Result<Vec<CMat>> {
    let s = system_matrix(coll, f_u, load, sigma2);
    let ch =
        linalg::cholesky(&s).ok_or_else(|| Error::NotPd("centralized system matrix".into()))?;
    Ok(coll
        .hhat
        .iter()
        .zip(f_u)
        .map(|(h, f)| ch.solve(&(h * f)))
        .collect())
}

pub fn mmse_combiner(
    coll: &CollectiveEstimate,
    f_u: &[CMat],
    load: &ErrorLoading,
    sigma2: f64,
    k: usize,
) -> Result<CMat> {
    let s = system_matrix(coll, f_u, load, sigma2);
    linalg::solve_hpd(&s, &(&coll.hhat[k] * &f_u[k]))
}

/// `I - V^H Ĥ_k F_k - F_k^H Ĥ_k^H V + V^H Σ V` for an arbitrary combiner.
pub fn fcp_mse_matrix(
    v: &CMat,
    k: usize,
    coll: &CollectiveEstimate,
    f_u: &[CMat],
    load: &ErrorLoading,
    sigma2: f64,
) -> CMat {
    let s = system_matrix(coll, f_u, load, sigma2);
    let d = v.adjoint() * &coll.hhat[k] * &f_u[k];
    let n = d.nrows();
    let mut e = linalg::eye(n) - &d - d.adjoint() + v.adjoint() * s * v;
    linalg::hermitize_in_place(&mut e);
    e
}

/// `I - F_k^H Ĥ_k^H Σ^{-1} Ĥ_k F_k` (the MSE matrix at the MMSE combiner).
pub fn fcp_mse_matrix_opt(
    k: usize,
    coll: &CollectiveEstimate,
    f_u: &[CMat],
    load: &ErrorLoading,
    sigma2: f64,
) -> Result<CMat> {
    let s = system_matrix(coll, f_u, load, sigma2);
    let hf = &coll.hhat[k] * &f_u[k];
    let x = linalg::solve_hpd(&s, &hf)?;
    let mut e = linalg::eye(hf.ncols()) - hf.adjoint() * x;
    linalg::hermitize_in_place(&mut e);
    Ok(e)
}

/// `log2 |I + D^H Σ^{-1} D|` with a zero shortcut for `D = 0`.
pub(crate) fn log2_det_gain(d: &CMat, sigma: &CMat) -> Result<f64> {
    if d.iter().all(|z| z.norm_sqr() == 0.0) {
        return Ok(0.0);
    }
    let x = linalg::solve_hpd(sigma, d)?;
    let mut g = linalg::eye(d.ncols()) + d.adjoint() * x;
    linalg::hermitize_in_place(&mut g);
    Ok(linalg::logdet_hpd(&g)? / std::f64::consts::LN_2)
}

/// Per-realization SE of UE `k` for a given combiner, times the pre-log.
pub fn fcp_se(
    v: &CMat,
    k: usize,
    coll: &CollectiveEstimate,
    f_u: &[CMat],
    load: &ErrorLoading,
    sigma2: f64,
    prelog: f64,
) -> Result<f64> {
    let hf = &coll.hhat[k] * &f_u[k];
    let mut inner = system_matrix(coll, f_u, load, sigma2) - &hf * hf.adjoint();
    linalg::hermitize_in_place(&mut inner);
    let d = v.adjoint() * &hf;
    let mut sigma = v.adjoint() * inner * v;
    linalg::hermitize_in_place(&mut sigma);
    Ok(prelog * log2_det_gain(&d, &sigma)?)
}

/// `log2 |I + F_k^H Ĥ_k^H (Σ - Ĥ_k F̄_k Ĥ_k^H)^{-1} Ĥ_k F_k|`, times the pre-log.
pub fn fcp_se_opt(
    k: usize,
    coll: &CollectiveEstimate,
    f_u: &[CMat],
    load: &ErrorLoading,
    sigma2: f64,
    prelog: f64,
) -> Result<f64> {
    let s = system_matrix(coll, f_u, load, sigma2);
    se_opt_from_system(&s, k, coll, f_u, prelog)
}

pub(crate) fn se_opt_from_system(
    s: &CMat,
    k: usize,
    coll: &CollectiveEstimate,
    f_u: &[CMat],
    prelog: f64,
) -> Result<f64> {
    let hf = &coll.hhat[k] * &f_u[k];
    let mut inner = s - &hf * hf.adjoint();
    linalg::hermitize_in_place(&mut inner);
    Ok(prelog * log2_det_gain(&hf, &inner)?)
}

/// SE of every UE at the MMSE combiner.
pub fn fcp_se_opt_all(
    coll: &CollectiveEstimate,
    f_u: &[CMat],
    load: &ErrorLoading,
    sigma2: f64,
    prelog: f64,
) -> Result<Vec<f64>> {
    let s = system_matrix(coll, f_u, load, sigma2);
    (0..coll.ues())
        .map(|k| se_opt_from_system(&s, k, coll, f_u, prelog))
        .collect()
}
