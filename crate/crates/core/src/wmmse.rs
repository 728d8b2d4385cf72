//! Iterative WMMSE precoder design for both processing schemes.
//!
//! Each iteration updates the receiver (combiner or LSFD weights), the MSE
//! weights `W = E^{-1}`, and then every UE's precoder through a
//! power-constrained quadratic solve `F(λ) = (B + λI)^{-1} c`.

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcp::{self, CollectiveEstimate};
use crate::linalg::{self, c, CMat};
use crate::lsfd::{self, Combiner, LocalMoments, RealizationPool, StatMoments};
use crate::pilots::EstimationStats;

/// Whether UE precoders within one iteration see the previous iterate
/// (Jacobi) or the peers already updated in this sweep (Gauss-Seidel).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    #[default]
    Jacobi,
    GaussSeidel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IwmmseConfig {
    /// Per-UE priorities; empty means all ones.
    pub mu: Vec<f64>,
    pub max_iter: usize,
    pub epsilon: f64,
    pub bisect_tol: f64,
    pub bisect_max_iter: usize,
    pub order: UpdateOrder,
}

impl Default for IwmmseConfig {
    fn default() -> Self {
        Self {
            mu: Vec::new(),
            max_iter: 20,
            epsilon: 5e-4,
            bisect_tol: 1e-10,
            bisect_max_iter: 200,
            order: UpdateOrder::Jacobi,
        }
    }
}

impl IwmmseConfig {
    pub fn weights(&self, ues: usize) -> Result<Vec<f64>> {
        if self.mu.is_empty() {
            return Ok(vec![1.0; ues]);
        }
        if self.mu.len() != ues {
            return Err(Error::Dimension(format!(
                "{} priorities for {ues} UEs",
                self.mu.len()
            )));
        }
        Ok(self.mu.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::InvalidConfig("priorities must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if !(self.bisect_tol > 0.0) || self.bisect_max_iter == 0 {
            return Err(Error::InvalidConfig(
                "bisection tolerance and iteration cap must be positive".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    Decreased,
    MaxIter,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::Decreased => "decreased",
            StopReason::MaxIter => "max_iter",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Weighted sum SE `Σ μ_k SE_k`.
    pub objective: f64,
    pub se: Vec<f64>,
    pub power: Vec<f64>,
    /// Multipliers of the update that produced this iterate (zeros for the start point).
    pub lambda: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct IwmmseTrajectory {
    pub records: Vec<IterationRecord>,
    pub precoders: Vec<Vec<CMat>>,
    pub stop_reason: StopReason,
    pub selected_iteration: usize,
}

impl IwmmseTrajectory {
    pub fn selected(&self) -> &[CMat] {
        &self.precoders[self.selected_iteration]
    }

    pub fn selected_record(&self) -> &IterationRecord {
        &self.records[self.selected_iteration]
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    /// CSV-ready rows: iteration, objective, per-UE SE, per-UE power,
    /// per-UE multiplier, stop reason (last row only).
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.17e}"))
                .collect::<Vec<_>>()
                .join(";")
        };
        let last = self.records.len() - 1;
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                vec![
                    r.iteration.to_string(),
                    format!("{:.17e}", r.objective),
                    join(&r.se),
                    join(&r.power),
                    join(&r.lambda),
                    if i == last {
                        self.stop_reason.to_string()
                    } else {
                        String::new()
                    },
                ]
            })
            .collect()
    }
}

/// `W = E^{-1}`.
pub fn weight_update(e: &CMat) -> Result<CMat> {
    let mut w = linalg::inverse_hpd(e)?;
    linalg::hermitize_in_place(&mut w);
    Ok(w)
}

#[derive(Clone, Debug)]
pub struct PowerSolution {
    pub f: CMat,
    pub lambda: f64,
    pub power: f64,
    pub iterations: usize,
}

/// Multiplier search on a decreasing trace function.
///
/// Returns `0` when `trace(0) <= p` (a non-finite or failed evaluation counts
/// as infeasible). Otherwise brackets from `hi0`, doubling, and bisects to
/// `|trace - p| <= tol p`.
pub fn bisect_on_trace<T>(
    mut trace: T,
    p: f64,
    hi0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, usize)>
where
    T: FnMut(f64) -> Option<f64>,
{
    let feasible = |t: Option<f64>| matches!(t, Some(v) if v.is_finite() && v <= p);
    if feasible(trace(0.0)) {
        return Ok((0.0, 0));
    }
    let mut hi = if hi0.is_finite() && hi0 > 0.0 {
        hi0
    } else {
        1.0
    };
    let mut it = 0;
    loop {
        match trace(hi) {
            Some(v) if v.is_finite() && v < p => break,
            _ => {}
        }
        hi *= 2.0;
        it += 1;
        if it > max_iter || !hi.is_finite() {
            return Err(Error::Bisection(format!(
                "no feasible upper multiplier after {max_iter} doublings"
            )));
        }
    }
    let mut lo = 0.0;
    let mut best = hi;
    for step in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok((best, it + step));
        }
        match trace(mid) {
            Some(v) if v.is_finite() => {
                if (v - p).abs() <= tol * p {
                    return Ok((mid, it + step + 1));
                }
                if v > p {
                    lo = mid;
                } else {
                    hi = mid;
                    best = mid;
                }
            }
            _ => lo = mid,
        }
    }
    Err(Error::Bisection(format!(
        "no convergence in {max_iter} bisection steps"
    )))
}

/// Multiplier search on an arbitrary precoder map `λ -> F(λ)`.
pub fn bisect_lambda<F>(
    mut f_of: F,
    p: f64,
    hi0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PowerSolution>
where
    F: FnMut(f64) -> Result<CMat>,
{
    let (lambda, iterations) = bisect_on_trace(
        |x| f_of(x).ok().map(|f| linalg::fro2(&f)),
        p,
        hi0,
        tol,
        max_iter,
    )?;
    let f = f_of(lambda)?;
    let power = linalg::fro2(&f);
    Ok(PowerSolution {
        f,
        lambda,
        power,
        iterations,
    })
}

/// `(B + λI)^{-1} c` through a Cholesky solve.
pub fn apply_multiplier(bracket: &CMat, numerator: &CMat, lambda: f64) -> Result<CMat> {
    let mut b = bracket.clone();
    for i in 0..b.nrows() {
        b[(i, i)] += c(lambda);
    }
    linalg::solve_hpd(&b, numerator)
}

/// Minimizer of `tr(F^H B F) - 2 Re tr(c^H F)` subject to `‖F‖² <= p`.
///
/// With `B = U Λ U^H` and `Φ = U^H c c^H U`, the trace is
/// `Σ_n Φ_nn / (Λ_n + λ)²`. Slightly negative eigenvalues are clipped.
pub fn solve_power_constrained(
    bracket: &CMat,
    numerator: &CMat,
    p: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PowerSolution> {
    let (vals, u) = linalg::hermitian_eigen(bracket);
    let lam: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
    let y = u.adjoint() * numerator;
    let phi: Vec<f64> = (0..y.nrows())
        .map(|r| y.row(r).iter().map(|z| z.norm_sqr()).sum())
        .collect();
    if phi.iter().all(|&v| v == 0.0) {
        return Ok(PowerSolution {
            f: CMat::zeros(numerator.nrows(), numerator.ncols()),
            lambda: 0.0,
            power: 0.0,
            iterations: 0,
        });
    }
    let trace = |x: f64| -> Option<f64> {
        let mut t = 0.0;
        for (ph, l) in phi.iter().zip(&lam) {
            let d = l + x;
            if *ph == 0.0 {
                continue;
            }
            if d <= 0.0 {
                return None;
            }
            t += ph / (d * d);
        }
        Some(t)
    };
    let hi0 = numerator.norm() / p.sqrt();
    let (lambda, iterations) = bisect_on_trace(trace, p, hi0, tol, max_iter)?;
    let mut scaled = y;
    for (r, l) in lam.iter().enumerate() {
        let d = l + lambda;
        let s = if d > 0.0 { 1.0 / d } else { 0.0 };
        scaled.row_mut(r).scale_mut(s);
    }
    let f = u * scaled;
    let power = linalg::fro2(&f);
    Ok(PowerSolution {
        f,
        lambda,
        power,
        iterations,
    })
}

/// Combiners, MSE matrices and weights of the centralized receiver at `f_u`.
#[derive(Clone, Debug)]
pub struct FcpReceiver {
    pub v: Vec<CMat>,
    pub e: Vec<CMat>,
    pub w: Vec<CMat>,
}

pub fn fcp_receiver(coll: &CollectiveEstimate, f_u: &[CMat], sigma2: f64) -> Result<FcpReceiver> {
    let load = fcp::error_loading(coll.stats, f_u);
    let v = fcp::mmse_combiners(coll, f_u, &load, sigma2)?;
    let mut e = Vec::with_capacity(v.len());
    let mut w = Vec::with_capacity(v.len());
    for k in 0..v.len() {
        let ek = fcp::fcp_mse_matrix_opt(k, coll, f_u, &load, sigma2)?;
        w.push(weight_update(&ek)?);
        e.push(ek);
    }
    Ok(FcpReceiver { v, e, w })
}

/// `Q = Σ_l μ_l V_l W_l V_l^H`.
fn weighted_outer(v: &[CMat], w: &[CMat], mu: &[f64]) -> CMat {
    let dim = v[0].nrows();
    let mut q = CMat::zeros(dim, dim);
    for ((vl, wl), &m) in v.iter().zip(w).zip(mu) {
        q += vl * wl * vl.adjoint() * c(m);
    }
    linalg::hermitize_in_place(&mut q);
    q
}

/// `(B_k, c_k)` of the centralized precoder update:
/// `B_k = Σ_l μ_l (Ĥ_k^H V_l W_l V_l^H Ĥ_k + C̄_kl)` with
/// `[C̄_kl]_{i,n} = tr(V_l W_l V_l^H C_{k,ni})`, and `c_k = μ_k Ĥ_k^H V_k W_k`.
pub fn fcp_precoder_terms(
    coll: &CollectiveEstimate,
    rx: &FcpReceiver,
    mu: &[f64],
    k: usize,
) -> (CMat, CMat) {
    let q = weighted_outer(&rx.v, &rx.w, mu);
    fcp_terms_from_q(coll, &q, rx, mu, k)
}

fn fcp_terms_from_q(
    coll: &CollectiveEstimate,
    q: &CMat,
    rx: &FcpReceiver,
    mu: &[f64],
    k: usize,
) -> (CMat, CMat) {
    let (l, n) = (coll.ap_antennas, coll.ue_antennas);
    let hk = &coll.hhat[k];
    let mut b = hk.adjoint() * q * hk;
    for m in 0..coll.aps {
        let qm = q.view((m * l, m * l), (l, l)).into_owned();
        let ck = &coll.stats.link(m, k).c;
        for i in 0..n {
            for nn in 0..n {
                let blk = ck.view((nn * l, i * l), (l, l)).into_owned();
                b[(i, nn)] += linalg::trace_of_product(&qm, &blk);
            }
        }
    }
    linalg::hermitize_in_place(&mut b);
    let num = hk.adjoint() * &rx.v[k] * &rx.w[k] * c(mu[k]);
    (b, num)
}

/// `F_k(λ)` for the centralized scheme.
pub fn precoder_update_fcp(
    coll: &CollectiveEstimate,
    rx: &FcpReceiver,
    mu: &[f64],
    lambda: f64,
    k: usize,
) -> Result<CMat> {
    let (b, num) = fcp_precoder_terms(coll, rx, mu, k);
    apply_multiplier(&b, &num, lambda)
}

/// LSFD weights, MSE matrices and MSE weights at `f_u`.
#[derive(Clone, Debug)]
pub struct LsfdReceiver {
    pub a: Vec<CMat>,
    pub e: Vec<CMat>,
    pub w: Vec<CMat>,
}

pub fn lsfd_receiver(sm: &StatMoments, f_u: &[CMat], sigma2: f64) -> Result<LsfdReceiver> {
    let a = lsfd::optimal_lsfd(sm, f_u, sigma2)?;
    let mut e = Vec::with_capacity(a.len());
    let mut w = Vec::with_capacity(a.len());
    for k in 0..a.len() {
        let ek = lsfd::lsfd_mse_matrix_opt(k, sm, f_u, sigma2)?;
        w.push(weight_update(&ek)?);
        e.push(ek);
    }
    Ok(LsfdReceiver { a, e, w })
}

/// `(Σ_l μ_l E{G_lk^H A_l W_l A_l^H G_lk}, μ_k E{G_kk}^H A_k W_k)`.
pub fn lsfd_precoder_terms(
    local: &LocalMoments,
    sm: &StatMoments,
    rx: &LsfdReceiver,
    mu: &[f64],
    k: usize,
) -> (CMat, CMat) {
    let n = local.ue_antennas;
    let mut b = CMat::zeros(n, n);
    for l in 0..local.ues {
        let abar = &rx.a[l] * &rx.w[l] * rx.a[l].adjoint();
        b += local.tbar(l, k, &abar) * c(mu[l]);
    }
    linalg::hermitize_in_place(&mut b);
    let num = sm.gkk_mean[k].adjoint() * &rx.a[k] * &rx.w[k] * c(mu[k]);
    (b, num)
}

pub fn precoder_update_lsfd(
    local: &LocalMoments,
    sm: &StatMoments,
    rx: &LsfdReceiver,
    mu: &[f64],
    lambda: f64,
    k: usize,
) -> Result<CMat> {
    let (b, num) = lsfd_precoder_terms(local, sm, rx, mu, k);
    apply_multiplier(&b, &num, lambda)
}

fn weighted(se: &[f64], mu: &[f64]) -> f64 {
    se.iter().zip(mu).map(|(s, m)| s * m).sum()
}

fn check_start(f: &[CMat], power: &[f64], ues: usize) -> Result<()> {
    if f.len() != ues || power.len() != ues {
        return Err(Error::Dimension(format!(
            "{} precoders / {} budgets for {ues} UEs",
            f.len(),
            power.len()
        )));
    }
    for (k, (fk, p)) in f.iter().zip(power).enumerate() {
        let used = linalg::fro2(fk);
        if used > p * (1.0 + 1e-9) {
            return Err(Error::Power(format!(
                "initial precoder of UE {k}: {used:e} > {p:e}"
            )));
        }
    }
    Ok(())
}

/// Applies the stopping rule to the latest record; `None` means continue.
fn stop_check(records: &[IterationRecord], cfg: &IwmmseConfig) -> Option<(StopReason, usize)> {
    let i = records.len() - 1;
    let cur = records[i].objective;
    let prev = records[i - 1].objective;
    if cur < prev {
        return Some((StopReason::Decreased, i - 1));
    }
    let rel = if prev > 0.0 {
        (cur - prev).abs() / prev
    } else if cur == prev {
        0.0
    } else {
        f64::INFINITY
    };
    if rel <= cfg.epsilon {
        return Some((StopReason::Converged, i));
    }
    if i >= cfg.max_iter {
        return Some((StopReason::MaxIter, i));
    }
    None
}

/// Iterative precoder design for centralized processing on one realization.
pub fn run_iwmmse_fcp(
    coll: &CollectiveEstimate,
    f_init: &[CMat],
    power: &[f64],
    sigma2: f64,
    prelog: f64,
    cfg: &IwmmseConfig,
) -> Result<IwmmseTrajectory> {
    cfg.validate()?;
    let ues = coll.ues();
    check_start(f_init, power, ues)?;
    let mu = cfg.weights(ues)?;
    let evaluate = |f: &[CMat]| -> Result<Vec<f64>> {
        let load = fcp::error_loading(coll.stats, f);
        fcp::fcp_se_opt_all(coll, f, &load, sigma2, prelog)
    };
    let mut f: Vec<CMat> = f_init.to_vec();
    let se0 = evaluate(&f).map_err(|e| e.at_iteration(0))?;
    let mut records = vec![IterationRecord {
        iteration: 0,
        objective: weighted(&se0, &mu),
        power: f.iter().map(linalg::fro2).collect(),
        se: se0,
        lambda: vec![0.0; ues],
    }];
    let mut precoders = vec![f.clone()];
    loop {
        let it = records.len();
        let step = || -> Result<(Vec<CMat>, Vec<f64>)> {
            let mut next = f.clone();
            let mut lambdas = vec![0.0; ues];
            let mut rx = fcp_receiver(coll, &f, sigma2)?;
            let mut q = weighted_outer(&rx.v, &rx.w, &mu);
            for k in 0..ues {
                let (b, num) = fcp_terms_from_q(coll, &q, &rx, &mu, k);
                let sol = solve_power_constrained(
                    &b,
                    &num,
                    power[k],
                    cfg.bisect_tol,
                    cfg.bisect_max_iter,
                )?;
                next[k] = sol.f;
                lambdas[k] = sol.lambda;
                if cfg.order == UpdateOrder::GaussSeidel && k + 1 < ues {
                    rx = fcp_receiver(coll, &next, sigma2)?;
                    q = weighted_outer(&rx.v, &rx.w, &mu);
                }
            }
            Ok((next, lambdas))
        };
        let (next, lambdas) = step().map_err(|e| e.at_iteration(it))?;
        let se = evaluate(&next).map_err(|e| e.at_iteration(it))?;
        f = next;
        records.push(IterationRecord {
            iteration: it,
            objective: weighted(&se, &mu),
            power: f.iter().map(linalg::fro2).collect(),
            se,
            lambda: lambdas,
        });
        precoders.push(f.clone());
        if let Some((stop_reason, selected_iteration)) = stop_check(&records, cfg) {
            return Ok(IwmmseTrajectory {
                records,
                precoders,
                stop_reason,
                selected_iteration,
            });
        }
    }
}

/// Where the LSFD statistics come from at each iterate.
#[derive(Clone, Copy, Debug)]
pub enum MomentSource<'a> {
    /// Statistics independent of the data precoders (MR combining).
    Fixed(&'a LocalMoments),
    /// Sample moments over a fixed pool, recomputed at every iterate.
    Pool {
        pool: &'a RealizationPool,
        combiner: Combiner,
        stats: &'a EstimationStats,
    },
}

impl<'a> MomentSource<'a> {
    pub fn local(&self, f_u: &[CMat], sigma2: f64) -> Result<Cow<'a, LocalMoments>> {
        match *self {
            MomentSource::Fixed(lm) => Ok(Cow::Borrowed(lm)),
            MomentSource::Pool {
                pool,
                combiner,
                stats,
            } => {
                let load = fcp::error_loading(stats, f_u);
                Ok(Cow::Owned(LocalMoments::from_pool(
                    pool,
                    combiner,
                    f_u,
                    Some(&load),
                    sigma2,
                )?))
            }
        }
    }

    fn ues(&self) -> usize {
        match self {
            MomentSource::Fixed(lm) => lm.ues,
            MomentSource::Pool { pool, .. } => pool.ues,
        }
    }
}

/// Iterative precoder design for LSFD on statistics.
pub fn run_iwmmse_lsfd(
    source: MomentSource,
    f_init: &[CMat],
    power: &[f64],
    sigma2: f64,
    prelog: f64,
    cfg: &IwmmseConfig,
) -> Result<IwmmseTrajectory> {
    cfg.validate()?;
    let ues = source.ues();
    check_start(f_init, power, ues)?;
    let mu = cfg.weights(ues)?;
    let mut f: Vec<CMat> = f_init.to_vec();
    let mut local = source.local(&f, sigma2).map_err(|e| e.at_iteration(0))?;
    let mut sm = local.stat_moments(&f);
    let se0 = lsfd::lsfd_se_opt_all(&sm, &f, sigma2, prelog).map_err(|e| e.at_iteration(0))?;
    let mut records = vec![IterationRecord {
        iteration: 0,
        objective: weighted(&se0, &mu),
        power: f.iter().map(linalg::fro2).collect(),
        se: se0,
        lambda: vec![0.0; ues],
    }];
    let mut precoders = vec![f.clone()];
    loop {
        let it = records.len();
        let step = || -> Result<(Vec<CMat>, Vec<f64>)> {
            let mut next = f.clone();
            let mut lambdas = vec![0.0; ues];
            let mut loc = local.clone();
            let mut stat = sm.clone();
            let mut rx = lsfd_receiver(&stat, &next, sigma2)?;
            for k in 0..ues {
                let (b, num) = lsfd_precoder_terms(&loc, &stat, &rx, &mu, k);
                let sol = solve_power_constrained(
                    &b,
                    &num,
                    power[k],
                    cfg.bisect_tol,
                    cfg.bisect_max_iter,
                )?;
                next[k] = sol.f;
                lambdas[k] = sol.lambda;
                if cfg.order == UpdateOrder::GaussSeidel && k + 1 < ues {
                    loc = source.local(&next, sigma2)?;
                    stat = loc.stat_moments(&next);
                    rx = lsfd_receiver(&stat, &next, sigma2)?;
                }
            }
            Ok((next, lambdas))
        };
        let (next, lambdas) = step().map_err(|e| e.at_iteration(it))?;
        local = source
            .local(&next, sigma2)
            .map_err(|e| e.at_iteration(it))?;
        sm = local.stat_moments(&next);
        let se =
            lsfd::lsfd_se_opt_all(&sm, &next, sigma2, prelog).map_err(|e| e.at_iteration(it))?;
        f = next;
        records.push(IterationRecord {
            iteration: it,
            objective: weighted(&se, &mu),
            power: f.iter().map(linalg::fro2).collect(),
            se,
            lambda: lambdas,
        });
        precoders.push(f.clone());
        if let Some((stop_reason, selected_iteration)) = stop_check(&records, cfg) {
            return Ok(IwmmseTrajectory {
                records,
                precoders,
                stop_reason,
                selected_iteration,
            });
        }
    }
}

/// Weighted sum-MSE objective `Σ μ_k (tr(W_k E_k) - ln|W_k|)` in nats.
pub fn wmmse_objective(e: &[CMat], w: &[CMat], mu: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for ((ek, wk), m) in e.iter().zip(w).zip(mu) {
        total += m * (linalg::trace_of_product(wk, ek).re - linalg::logdet_hpd(wk)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eye, max_abs_diff};

    #[test]
    fn weights_invert_mse() {
        assert_eq!(weight_update(&eye(3)).unwrap(), eye(3));
        let mut e = CMat::zeros(2, 2);
        e[(0, 0)] = c(0.5);
        e[(1, 1)] = c(0.25);
        let w = weight_update(&e).unwrap();
        assert!((w[(0, 0)] - c(2.0)).norm() < 1e-14 && (w[(1, 1)] - c(4.0)).norm() < 1e-14);
    }

    fn random_problem(seed: u64, n: usize) -> (CMat, CMat) {
        let mut rng = crate::rng::stream(seed, &[]);
        let x = crate::rng::complex_normal_matrix(&mut rng, n + 2, n);
        let b = x.adjoint() * &x;
        let num = crate::rng::complex_normal_matrix(&mut rng, n, n);
        (b, num)
    }

    #[test]
    fn inactive_constraint_gives_zero_multiplier() {
        let (b, num) = random_problem(1, 3);
        let sol = solve_power_constrained(&b, &num, 1e12, 1e-10, 200).unwrap();
        assert_eq!(sol.lambda, 0.0);
        let direct = linalg::solve_hpd(&b, &num).unwrap();
        assert!(max_abs_diff(&sol.f, &direct) < 1e-9 * direct.norm());
    }

    #[test]
    fn active_constraint_hits_budget() {
        let (b, num) = random_problem(2, 4);
        let p = 1e-3;
        let sol = solve_power_constrained(&b, &num, p, 1e-10, 200).unwrap();
        assert!(sol.lambda > 0.0);
        assert!((sol.power - p).abs() <= 1e-8 * p);
        let direct = apply_multiplier(&b, &num, sol.lambda).unwrap();
        assert!(max_abs_diff(&sol.f, &direct) < 1e-9 * direct.norm());
    }

    #[test]
    fn singular_bracket_is_handled() {
        let b = CMat::zeros(2, 2);
        let num = eye(2);
        let sol = solve_power_constrained(&b, &num, 0.5, 1e-10, 200).unwrap();
        assert!((sol.power - 0.5).abs() <= 1e-8 * 0.5);
        let zero = solve_power_constrained(&b, &CMat::zeros(2, 2), 0.5, 1e-10, 200).unwrap();
        assert_eq!(zero.power, 0.0);
    }

    #[test]
    fn generic_bisection_agrees_with_eigen_solver() {
        let (b, num) = random_problem(3, 2);
        let p = 1e-2;
        let a = solve_power_constrained(&b, &num, p, 1e-12, 300).unwrap();
        let g = bisect_lambda(
            |x| apply_multiplier(&b, &num, x),
            p,
            num.norm() / p.sqrt(),
            1e-12,
            300,
        )
        .unwrap();
        assert!((a.lambda - g.lambda).abs() <= 1e-8 * a.lambda);
    }

    #[test]
    fn stop_rule_selects_previous_on_decrease() {
        let rec = |i: usize, r: f64| IterationRecord {
            iteration: i,
            objective: r,
            se: vec![],
            power: vec![],
            lambda: vec![],
        };
        let cfg = IwmmseConfig::default();
        assert_eq!(
            stop_check(&[rec(0, 1.0), rec(1, 0.9)], &cfg),
            Some((StopReason::Decreased, 0))
        );
        assert_eq!(
            stop_check(&[rec(0, 1.0), rec(1, 1.0001)], &cfg),
            Some((StopReason::Converged, 1))
        );
        assert_eq!(stop_check(&[rec(0, 1.0), rec(1, 2.0)], &cfg), None);
        let short = IwmmseConfig { max_iter: 1, ..cfg };
        assert_eq!(
            stop_check(&[rec(0, 1.0), rec(1, 2.0)], &short),
            Some((StopReason::MaxIter, 1))
        );
    }
}
