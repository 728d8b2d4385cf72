#![allow(dead_code)]

use cfmimo::fcp::PrecoderSet;
use cfmimo::linalg::{c, CMat, C64};
use cfmimo::model::{place_network, synthesize_correlation, CorrelationSet, NetworkConfig};
use cfmimo::pilots::{self, assign_pilots, estimation_stats, EstimationStats, PilotBook};
use cfmimo::rng;

pub struct Instance {
    pub cfg: NetworkConfig,
    pub corr: CorrelationSet,
    pub book: PilotBook,
    pub pre: PrecoderSet,
    pub stats: EstimationStats,
}

pub fn config(m: usize, k: usize, l: usize, n: usize, tau_p: usize) -> NetworkConfig {
    NetworkConfig {
        aps: m,
        ues: k,
        ap_antennas: l,
        ue_antennas: n,
        tau_p,
        area_side: 300.0,
        ..NetworkConfig::reference()
    }
}

pub fn instance_from(cfg: NetworkConfig, seed: u64) -> Instance {
    let lay = place_network(&cfg, seed);
    let corr = synthesize_correlation(&lay, &cfg, seed);
    let (assign, _) = assign_pilots(&lay, cfg.tau_p, cfg.ue_antennas).unwrap();
    let book = PilotBook::new(cfg.tau_p, cfg.ue_antennas, assign).unwrap();
    let pre = PrecoderSet::identity(cfg.ues, cfg.ue_antennas, cfg.ue_power);
    let stats = estimation_stats(&corr, &book, &pre.f_p, cfg.noise_power).unwrap();
    Instance {
        cfg,
        corr,
        book,
        pre,
        stats,
    }
}

pub fn instance(m: usize, k: usize, l: usize, n: usize, tau_p: usize, seed: u64) -> Instance {
    instance_from(config(m, k, l, n, tau_p), seed)
}

/// Random data precoders scaled to use a random share of each budget.
pub fn random_precoders(k: usize, n: usize, p: f64, seed: u64) -> Vec<CMat> {
    let mut r = rng::stream(seed, &[0xF0]);
    (0..k)
        .map(|_| {
            let f = rng::complex_normal_matrix(&mut r, n, n);
            let share: f64 = rand::Rng::random_range(&mut r, 0.3..1.0);
            let s = (share * p / cfmimo::linalg::fro2(&f)).sqrt();
            f * c(s)
        })
        .collect()
}

/// Channel and estimate draw `r` of an instance (independent of any pool).
pub fn draw(inst: &Instance, seed: u64, r: u64) -> (Vec<CMat>, Vec<CMat>) {
    let mut s = rng::stream(seed, &[0xD1, r]);
    let (ch, hhat) = pilots::draw_with_estimates(
        &inst.corr,
        &inst.stats,
        &inst.pre,
        &inst.book,
        inst.cfg.noise_power,
        &mut s,
    )
    .unwrap();
    (ch.h, hhat)
}

/// Running mean with per-entry standard errors for complex arrays.
#[derive(Clone, Debug)]
pub struct MeanAcc {
    sum: Vec<C64>,
    sq_re: Vec<f64>,
    sq_im: Vec<f64>,
    count: usize,
}

impl MeanAcc {
    pub fn new(len: usize) -> Self {
        Self {
            sum: vec![C64::new(0.0, 0.0); len],
            sq_re: vec![0.0; len],
            sq_im: vec![0.0; len],
            count: 0,
        }
    }

    pub fn add(&mut self, x: impl IntoIterator<Item = C64>) {
        for (i, z) in x.into_iter().enumerate() {
            self.sum[i] += z;
            self.sq_re[i] += z.re * z.re;
            self.sq_im[i] += z.im * z.im;
        }
        self.count += 1;
    }

    pub fn mean(&self) -> Vec<C64> {
        let n = self.count as f64;
        self.sum.iter().map(|z| z / n).collect()
    }

    /// Standard error of the complex mean, `sqrt((var_re + var_im) / n)`.
    pub fn se(&self) -> Vec<f64> {
        let n = self.count as f64;
        (0..self.sum.len())
            .map(|i| {
                let mr = self.sum[i].re / n;
                let mi = self.sum[i].im / n;
                let vr = (self.sq_re[i] / n - mr * mr).max(0.0) * n / (n - 1.0);
                let vi = (self.sq_im[i] / n - mi * mi).max(0.0) * n / (n - 1.0);
                ((vr + vi) / n).sqrt()
            })
            .collect()
    }

    /// Entries where `|expected - mean| > nsig * se`, plus the largest z-score.
    pub fn compare(&self, expected: &[C64], nsig: f64) -> Comparison {
        let mean = self.mean();
        let se = self.se();
        let scale = mean.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let mut out = Comparison::default();
        for i in 0..expected.len() {
            let d = (expected[i] - mean[i]).norm();
            // exact agreement (both structurally zero) or rounding-level difference
            if d <= 1e-12 * scale {
                out.checked += 1;
                continue;
            }
            let z = if se[i] > 0.0 {
                d / se[i]
            } else {
                f64::INFINITY
            };
            out.max_z = out.max_z.max(z);
            if z > nsig {
                out.failures.push((i, z));
            }
            out.checked += 1;
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct Comparison {
    pub checked: usize,
    pub failures: Vec<(usize, f64)>,
    pub max_z: f64,
}

impl Comparison {
    pub fn merge(&mut self, other: Comparison) {
        self.checked += other.checked;
        self.failures.extend(other.failures);
        self.max_z = self.max_z.max(other.max_z);
    }
}

pub fn flat(a: &CMat) -> Vec<C64> {
    a.iter().copied().collect()
}

/// `G_kl` stacked over APs: block `m` is `Ĥ_mk^H H_ml`.
pub fn stacked_g(hhat: &[CMat], h: &[CMat], aps: usize, ues: usize, k: usize, l: usize) -> CMat {
    let n = h[0].ncols();
    let mut g = CMat::zeros(aps * n, n);
    for m in 0..aps {
        let blk = hhat[m * ues + k].adjoint() * &h[m * ues + l];
        g.view_mut((m * n, 0), (n, n)).copy_from(&blk);
    }
    g
}

/// Random Hermitian PSD matrix of size `n`.
pub fn random_psd(n: usize, seed: u64) -> CMat {
    let mut r = rng::stream(seed, &[0xA5]);
    let x = rng::complex_normal_matrix(&mut r, n, n);
    &x * x.adjoint()
}
