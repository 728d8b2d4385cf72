mod common;

use cfmimo::closedform::{self, CrossTerm};
use cfmimo::fcp;
use cfmimo::linalg::{self, c, max_abs_diff, CMat};
use cfmimo::lsfd::{self, Combiner, LocalMoments, RealizationPool};
use cfmimo::wmmse;
use common::*;

/// Sampled E{G_kl F̄_l G_kl^H} for every pair.
fn sampled_second(inst: &Instance, f_u: &[CMat], seed: u64, samples: usize) -> Vec<MeanAcc> {
    let (m, k) = (inst.cfg.aps, inst.cfg.ues);
    let dim = m * inst.cfg.ue_antennas;
    let fbars: Vec<CMat> = f_u.iter().map(fcp::fbar).collect();
    let mut acc: Vec<MeanAcc> = (0..k * k).map(|_| MeanAcc::new(dim * dim)).collect();
    for r in 0..samples {
        let (h, hhat) = draw(inst, seed, r as u64);
        for a in 0..k {
            for b in 0..k {
                let g = stacked_g(&hhat, &h, m, k, a, b);
                acc[a * k + b].add(flat(&(&g * &fbars[b] * g.adjoint())));
            }
        }
    }
    acc
}

#[test]
fn default_cross_term_matches_sampling_under_contamination() {
    // three UEs on two orthogonal pilot groups: at least one shared pilot
    let inst = instance(2, 3, 2, 2, 2, 7);
    assert!((0..3).any(|a| (0..3).any(|b| a != b && inst.book.shares_pilot(a, b))));
    let f_u = random_precoders(3, 2, inst.cfg.ue_power, 7);
    let cfm = closedform::cf_moments(
        &inst.corr,
        &inst.stats,
        &inst.book,
        &f_u,
        CrossTerm::CrossCovariance,
    )
    .unwrap();
    let acc = sampled_second(&inst, &f_u, 7, 20_000);
    let mut cmp = Comparison::default();
    for a in 0..3 {
        for b in 0..3 {
            cmp.merge(acc[a * 3 + b].compare(&flat(&cfm.second(a, b)), 4.0));
        }
    }
    assert!(cmp.failures.is_empty(), "{:?}", cmp.failures);
}

#[test]
fn cross_term_variants_only_touch_shared_pilot_pairs() {
    let inst = instance(2, 3, 2, 2, 2, 7);
    let f_u = random_precoders(3, 2, inst.cfg.ue_power, 7);
    let base = closedform::cf_moments(
        &inst.corr,
        &inst.stats,
        &inst.book,
        &f_u,
        CrossTerm::CrossCovariance,
    )
    .unwrap();
    let typeset = closedform::cf_moments(
        &inst.corr,
        &inst.stats,
        &inst.book,
        &f_u,
        CrossTerm::SqrtTypeset,
    )
    .unwrap();
    let contaminated = |a: usize| (0..3).any(|j| j != a && inst.book.shares_pilot(a, j));
    let mut differs = false;
    for a in 0..3 {
        for b in 0..3 {
            let d = max_abs_diff(&base.second(a, b), &typeset.second(a, b));
            let scale = base.second(a, b).camax();
            if !inst.book.shares_pilot(a, b) || !contaminated(a) {
                assert!(
                    d <= 1e-10 * scale.max(1e-300),
                    "pair ({a},{b}) should not depend on the cross term"
                );
            } else if d > 1e-6 * scale {
                differs = true;
            }
        }
    }
    assert!(
        differs,
        "the typeset variant should change some shared-pilot pair"
    );

    // orthogonal pilots: the reindexed square-root form collapses to the exact one
    let clean = instance(2, 2, 2, 2, 4, 8);
    let f_u = random_precoders(2, 2, clean.cfg.ue_power, 8);
    let a = closedform::cf_moments(
        &clean.corr,
        &clean.stats,
        &clean.book,
        &f_u,
        CrossTerm::CrossCovariance,
    )
    .unwrap();
    let b = closedform::cf_moments(
        &clean.corr,
        &clean.stats,
        &clean.book,
        &f_u,
        CrossTerm::SqrtReindexed,
    )
    .unwrap();
    for k in 0..2 {
        for l in 0..2 {
            let s = a.second(k, l).camax();
            assert!(max_abs_diff(&a.second(k, l), &b.second(k, l)) <= 1e-9 * s);
        }
    }
}

#[test]
fn closed_form_se_agrees_with_sampled_mr_moments() {
    let inst = instance(3, 3, 2, 2, 2, 11);
    let f_u = inst.pre.f_u.clone();
    let sigma2 = inst.cfg.noise_power;
    let prelog = inst.cfg.prelog();
    let cfm = closedform::cf_moments(
        &inst.corr,
        &inst.stats,
        &inst.book,
        &f_u,
        CrossTerm::default(),
    )
    .unwrap();
    let sol = closedform::cf_se_and_lsfd(&cfm, &f_u, sigma2, prelog).unwrap();
    let per_ap =
        closedform::mr_local_moments(&inst.corr, &inst.stats, &inst.book).stat_moments(&f_u);
    let exact = lsfd::lsfd_se_opt_all(&per_ap, &f_u, sigma2, prelog).unwrap();
    for k in 0..3 {
        assert!((sol.se[k] - exact[k]).abs() <= 1e-9 * exact[k].max(1.0));
    }
    let pool = RealizationPool::draw(
        &inst.corr,
        &inst.stats,
        &inst.pre,
        &inst.book,
        sigma2,
        20_000,
        11,
    )
    .unwrap();
    let sampled = LocalMoments::from_pool(&pool, Combiner::Mr, &f_u, None, sigma2)
        .unwrap()
        .stat_moments(&f_u);
    let se = lsfd::lsfd_se_opt_all(&sampled, &f_u, sigma2, prelog).unwrap();
    for k in 0..3 {
        let rel = (se[k] - sol.se[k]).abs() / sol.se[k];
        assert!(
            rel < 0.02,
            "UE {k}: sampled {} vs closed form {}",
            se[k],
            sol.se[k]
        );
    }
}

#[test]
fn closed_form_precoder_matches_per_ap_update() {
    let inst = instance(3, 3, 2, 2, 2, 13);
    let f_u = random_precoders(3, 2, inst.cfg.ue_power, 13);
    let sigma2 = inst.cfg.noise_power;
    let cfm = closedform::cf_moments(
        &inst.corr,
        &inst.stats,
        &inst.book,
        &f_u,
        CrossTerm::default(),
    )
    .unwrap();
    let sol = closedform::cf_se_and_lsfd(&cfm, &f_u, sigma2, inst.cfg.prelog()).unwrap();
    let local = closedform::mr_local_moments(&inst.corr, &inst.stats, &inst.book);
    let sm = local.stat_moments(&f_u);
    let rx = wmmse::lsfd_receiver(&sm, &f_u, sigma2).unwrap();
    let mu = [1.0, 0.5, 2.0];
    for k in 0..3 {
        for lambda in [0.0, 1e-3, 1.0] {
            let a = closedform::cf_precoder_update(&cfm, &sol.weights, &sol.mse, &mu, lambda, k)
                .unwrap();
            let b = wmmse::precoder_update_lsfd(&local, &sm, &rx, &mu, lambda, k).unwrap();
            assert!(
                max_abs_diff(&a, &b) <= 1e-8 * b.camax().max(1e-12),
                "UE {k}, lambda {lambda}"
            );
        }
    }
}

#[test]
fn large_multiplier_drives_precoder_to_zero() {
    let inst = instance(2, 2, 2, 2, 2, 17);
    let f_u = inst.pre.f_u.clone();
    let cfm = closedform::cf_moments(
        &inst.corr,
        &inst.stats,
        &inst.book,
        &f_u,
        CrossTerm::default(),
    )
    .unwrap();
    let sol =
        closedform::cf_se_and_lsfd(&cfm, &f_u, inst.cfg.noise_power, inst.cfg.prelog()).unwrap();
    let mut last = f64::INFINITY;
    for lambda in [1e2, 1e4, 1e6, 1e8] {
        let f =
            closedform::cf_precoder_update(&cfm, &sol.weights, &sol.mse, &[1.0, 1.0], lambda, 0)
                .unwrap();
        let p = linalg::fro2(&f);
        assert!(p < last);
        last = p;
    }
    assert!(last < 1e-6 * inst.cfg.ue_power);
}

#[test]
fn single_antenna_single_ap_hand_check() {
    // one AP, one UE, scalar channel: Z = E{|ĥ|²} = β̂, SE = prelog·log2(1 + signal / rest)
    let inst = instance(1, 1, 1, 1, 1, 19);
    let p = inst.cfg.ue_power;
    let f_u = vec![CMat::from_element(1, 1, c(p.sqrt()))];
    let sigma2 = inst.cfg.noise_power;
    let cfm = closedform::cf_moments(
        &inst.corr,
        &inst.stats,
        &inst.book,
        &f_u,
        CrossTerm::default(),
    )
    .unwrap();
    let beta = inst.corr.r(0, 0)[(0, 0)].re;
    let bhat = inst.stats.link(0, 0).rhat[(0, 0)].re;
    assert!((cfm.z[0][(0, 0)].re - bhat).abs() <= 1e-12 * bhat);
    // E{|ĥ|²|h|²} = 2β̂² + β̂(β - β̂) for jointly Gaussian scalars
    let fourth = 2.0 * bhat * bhat + bhat * (beta - bhat);
    let second = cfm.second(0, 0)[(0, 0)].re / p;
    assert!((second - fourth).abs() <= 1e-9 * fourth);
    let sol = closedform::cf_se_and_lsfd(&cfm, &f_u, sigma2, inst.cfg.prelog()).unwrap();
    let signal = p * bhat * bhat;
    let rest = p * fourth - signal + sigma2 * bhat;
    let expected = inst.cfg.prelog() * (1.0 + signal / rest).log2();
    assert!((sol.se[0] - expected).abs() <= 1e-9 * expected);
}
