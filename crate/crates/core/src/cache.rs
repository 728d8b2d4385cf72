//! Binary cache for correlation sets and LSFD statistics.
//!
//! Layout (little-endian): magic `CFW1`, version `u32`, then `M, K, L, N`
//! as `u32`, followed by row-major complex doubles (re, im).
//! Correlation files hold `U_r, U_t, Ω, R` for each link in `(m, k)` order.
//! Statistics files hold `E{G_kk}` per `k`, `E{G_kl F̄_l G_kl^H}` per
//! `(k, l)`, then `S_k` per `k`; `L` is written as zero.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{CMat, C64};
use crate::lsfd::StatMoments;
use crate::model::{CorrelationSet, LinkCorrelation, NetworkConfig};

const MAGIC: &[u8; 4] = b"CFW1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub aps: u32,
    pub ues: u32,
    pub ap_antennas: u32,
    pub ue_antennas: u32,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_matrix(out: &mut Vec<u8>, a: &CMat) {
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            out.extend_from_slice(&a[(r, c)].re.to_le_bytes());
            out.extend_from_slice(&a[(r, c)].im.to_le_bytes());
        }
    }
}

fn put_header(out: &mut Vec<u8>, h: Header) {
    out.extend_from_slice(MAGIC);
    put_u32(out, VERSION);
    for v in [h.aps, h.ues, h.ap_antennas, h.ue_antennas] {
        put_u32(out, v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<CMat> {
        let mut a = CMat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let re = self.f64()?;
                let im = self.f64()?;
                a[(r, c)] = C64::new(re, im);
            }
        }
        Ok(a)
    }

    fn header(&mut self) -> Result<Header> {
        if self.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(Header {
            aps: self.u32()?,
            ues: self.u32()?,
            ap_antennas: self.u32()?,
            ue_antennas: self.u32()?,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn dim(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Format(format!("dimension {x} does not fit in u32")))
}

pub fn encode_correlation(corr: &CorrelationSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_header(
        &mut out,
        Header {
            aps: dim(corr.aps)?,
            ues: dim(corr.ues)?,
            ap_antennas: dim(corr.ap_antennas)?,
            ue_antennas: dim(corr.ue_antennas)?,
        },
    );
    for link in &corr.links {
        put_matrix(&mut out, &link.u_r);
        put_matrix(&mut out, &link.u_t);
        put_matrix(&mut out, &link.omega.map(|x| C64::new(x, 0.0)));
        put_matrix(&mut out, &link.r);
    }
    Ok(out)
}

pub fn decode_correlation(buf: &[u8]) -> Result<CorrelationSet> {
    let mut rd = Reader { buf, pos: 0 };
    let h = rd.header()?;
    let (m, k, l, n) = (
        h.aps as usize,
        h.ues as usize,
        h.ap_antennas as usize,
        h.ue_antennas as usize,
    );
    let mut links = Vec::with_capacity(m * k);
    for _ in 0..m * k {
        let u_r = rd.matrix(l, l)?;
        let u_t = rd.matrix(n, n)?;
        let om = rd.matrix(l, n)?;
        if om.iter().any(|z| z.im != 0.0 || z.re < 0.0) {
            return Err(Error::Format(
                "coupling matrix must be real and nonnegative".into(),
            ));
        }
        let omega = DMatrix::from_fn(l, n, |i, j| om[(i, j)].re);
        let r = rd.matrix(l * n, l * n)?;
        links.push(LinkCorrelation { u_r, u_t, omega, r });
    }
    rd.finish()?;
    Ok(CorrelationSet {
        aps: m,
        ues: k,
        ap_antennas: l,
        ue_antennas: n,
        links,
    })
}

pub fn encode_moments(sm: &StatMoments) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_header(
        &mut out,
        Header {
            aps: dim(sm.aps)?,
            ues: dim(sm.ues)?,
            ap_antennas: 0,
            ue_antennas: dim(sm.ue_antennas)?,
        },
    );
    for a in sm.gkk_mean.iter().chain(&sm.gkl_second).chain(&sm.s) {
        put_matrix(&mut out, a);
    }
    Ok(out)
}

pub fn decode_moments(buf: &[u8]) -> Result<StatMoments> {
    let mut rd = Reader { buf, pos: 0 };
    let h = rd.header()?;
    let (m, k, n) = (h.aps as usize, h.ues as usize, h.ue_antennas as usize);
    let d = m * n;
    let gkk_mean = (0..k)
        .map(|_| rd.matrix(d, n))
        .collect::<Result<Vec<_>>>()?;
    let gkl_second = (0..k * k)
        .map(|_| rd.matrix(d, d))
        .collect::<Result<Vec<_>>>()?;
    let s = (0..k)
        .map(|_| rd.matrix(d, d))
        .collect::<Result<Vec<_>>>()?;
    rd.finish()?;
    Ok(StatMoments {
        aps: m,
        ues: k,
        ue_antennas: n,
        gkk_mean,
        gkl_second,
        s,
        sample_count: 0,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn save_correlation(path: &Path, corr: &CorrelationSet) -> Result<()> {
    write_atomic(path, &encode_correlation(corr)?)
}

pub fn load_correlation(path: &Path) -> Result<CorrelationSet> {
    decode_correlation(&read_all(path)?)
}

pub fn save_moments(path: &Path, sm: &StatMoments) -> Result<()> {
    write_atomic(path, &encode_moments(sm)?)
}

pub fn load_moments(path: &Path) -> Result<StatMoments> {
    decode_moments(&read_all(path)?)
}

/// Cache key: sha256 over the JSON form of the configuration and the seed.
pub fn cache_key(config: &NetworkConfig, seed: u64) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&json);
    h.update(seed.to_le_bytes());
    hex::encode(h.finalize())
}

pub fn cache_path(dir: &Path, config: &NetworkConfig, seed: u64, kind: &str) -> PathBuf {
    dir.join(format!("{kind}-{}.cfw", cache_key(config, seed)))
}

/// Loads the correlation set from `dir` or synthesizes and stores it.
pub fn correlation_cached<F>(
    dir: &Path,
    config: &NetworkConfig,
    seed: u64,
    make: F,
) -> Result<CorrelationSet>
where
    F: FnOnce() -> CorrelationSet,
{
    let path = cache_path(dir, config, seed, "corr");
    if path.exists() {
        match load_correlation(&path) {
            Ok(c) if c.aps == config.aps && c.ues == config.ues => return Ok(c),
            Ok(_) => log::warn!(
                "cache entry {} has other dimensions; rebuilding",
                path.display()
            ),
            Err(e) => log::warn!("unreadable cache entry {}: {e}; rebuilding", path.display()),
        }
    }
    let corr = make();
    save_correlation(&path, &corr)?;
    Ok(corr)
}
