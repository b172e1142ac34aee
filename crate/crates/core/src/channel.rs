//! Channel dataset generation, perturbation, and binary persistence.
//!
//! Channels follow a log-distance path-loss model with Rayleigh small-scale
//! fading. User distances are drawn uniformly from `[d_min_km, d_max_km]`
//! and all large-scale gains are rescaled by one constant so the expected
//! path-loss-to-noise ratio equals `mean_plnr_db`. Channels are stored
//! pre-divided by the noise amplitude, so the per-user noise power is 1 in
//! every rate formula.
//!
//! Dataset files (`CRGD`) are bit-exact: magic bytes, a little-endian
//! `u32` version, a `u64` header length, a UTF-8 JSON header, then one
//! `K x N_T` complex matrix per sample, row-major, each entry as two
//! IEEE-754 little-endian `f64` (re, im).

use crate::error::{Error, Result};
use crate::parallel::par_map_indexed;
use crate::rng::{DetRng, ALGORITHM_ID};
use crate::tensor::ComplexTensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 4] = b"CRGD";
pub const DATASET_VERSION: u32 = 1;

/// Simulation scenario constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_t: usize,
    pub k_users: usize,
    /// Power budget (linear watts).
    pub p_max: f64,
    /// Per-user rate requirement (bit/s/Hz).
    pub r_req: f64,
    /// Noise power spectral density (dBm/Hz).
    #[serde(default = "default_noise_psd")]
    pub noise_psd_dbm_hz: f64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_hz: f64,
    /// Average path-loss-to-noise ratio (dB).
    #[serde(default = "default_mean_plnr")]
    pub mean_plnr_db: f64,
    /// User-distance interval (km) for the uniform distance draw.
    #[serde(default = "default_d_min")]
    pub d_min_km: f64,
    #[serde(default = "default_d_max")]
    pub d_max_km: f64,
    pub seed: u64,
}

fn default_noise_psd() -> f64 {
    -162.0
}
fn default_bandwidth() -> f64 {
    1e7
}
fn default_mean_plnr() -> f64 {
    10.0
}
fn default_d_min() -> f64 {
    0.08
}
fn default_d_max() -> f64 {
    0.18
}

impl ScenarioConfig {
    pub fn new(n_t: usize, k_users: usize, p_max: f64, r_req: f64, seed: u64) -> Self {
        ScenarioConfig {
            n_t,
            k_users,
            p_max,
            r_req,
            noise_psd_dbm_hz: default_noise_psd(),
            bandwidth_hz: default_bandwidth(),
            mean_plnr_db: default_mean_plnr(),
            d_min_km: default_d_min(),
            d_max_km: default_d_max(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t < 1 || self.k_users < 1 {
            return Err(Error::contract(format!("n_t {} / k_users {} must be >= 1", self.n_t, self.k_users)));
        }
        if !(self.p_max > 0.0) {
            return Err(Error::contract(format!("p_max must be positive, got {}", self.p_max)));
        }
        if self.r_req < 0.0 {
            return Err(Error::contract(format!("r_req must be non-negative, got {}", self.r_req)));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::contract(format!("bandwidth must be positive, got {}", self.bandwidth_hz)));
        }
        if !(self.d_min_km > 0.0 && self.d_max_km >= self.d_min_km) {
            return Err(Error::contract(format!(
                "distance interval [{}, {}] km is invalid",
                self.d_min_km, self.d_max_km
            )));
        }
        Ok(())
    }

    /// Total noise power in dBm: PSD plus `10·log10(bandwidth)`.
    pub fn noise_power_dbm(&self) -> f64 {
        self.noise_psd_dbm_hz + 10.0 * self.bandwidth_hz.log10()
    }

    /// Total noise power in milliwatts.
    pub fn noise_power_mw(&self) -> f64 {
        10f64.powf(self.noise_power_dbm() / 10.0)
    }

    /// Calibration constant applied to every large-scale gain so that
    /// `E[PL·κ/noise] = 10^(mean_plnr_db / 10)` under the uniform
    /// distance draw.
    fn gain_calibration(&self) -> f64 {
        let target = 10f64.powf(self.mean_plnr_db / 10.0);
        let mean_pl = if self.d_max_km == self.d_min_km {
            path_loss_linear(self.d_min_km)
        } else {
            // E[C · d^-3.67] over U[a, b] = C · (a^-2.67 - b^-2.67) / (2.67 (b - a))
            let (a, b) = (self.d_min_km, self.d_max_km);
            let c = 10f64.powf(-14.07);
            c * (a.powf(-2.67) - b.powf(-2.67)) / (2.67 * (b - a))
        };
        target * self.noise_power_mw() / mean_pl
    }
}

/// Linear path-loss gain at distance `d_km` kilometers:
/// `10^(-(140.7 + 36.7 log10 d) / 10)`.
pub fn path_loss_linear(d_km: f64) -> f64 {
    10f64.powf(-(140.7 + 36.7 * d_km.log10()) / 10.0)
}

/// One channel realization, normalized to unit noise power.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    /// `K x N_T` channel matrix; row k is user k.
    pub h: ComplexTensor,
    /// Per-user noise power after normalization (always 1).
    pub sigma2: f64,
}

/// Draw one channel sample. Per user: distance, then interleaved
/// (re, im) Gaussian pairs per antenna, all from `rng`.
pub fn sample_channel(config: &ScenarioConfig, rng: &mut DetRng) -> ChannelSample {
    let kappa = config.gain_calibration();
    let noise = config.noise_power_mw();
    let (k, nt) = (config.k_users, config.n_t);
    let mut re = vec![0.0; k * nt];
    let mut im = vec![0.0; k * nt];
    let half = 0.5f64.sqrt();
    for u in 0..k {
        let d = rng.uniform_in(config.d_min_km, config.d_max_km);
        let amp = (kappa * path_loss_linear(d) / noise).sqrt();
        for a in 0..nt {
            re[u * nt + a] = amp * half * rng.normal();
            im[u * nt + a] = amp * half * rng.normal();
        }
    }
    ChannelSample { h: ComplexTensor::from_parts(vec![k, nt], re, im).unwrap(), sigma2: 1.0 }
}

/// Add a channel estimation error with per-entry variance
/// `rel_var · ‖H_(k,:)‖²` on row k. `rel_var = 0` returns the sample
/// unchanged without consuming randomness.
pub fn apply_csi_error(sample: &ChannelSample, rel_var: f64, rng: &mut DetRng) -> ChannelSample {
    if rel_var == 0.0 {
        return sample.clone();
    }
    let (k, nt) = (sample.h.rows(), sample.h.cols());
    let mut out = sample.clone();
    for u in 0..k {
        let mut row_sq = 0.0;
        for a in 0..nt {
            let (r, i) = sample.h.at2(u, a);
            row_sq += r * r + i * i;
        }
        let std = (rel_var * row_sq / 2.0).sqrt();
        for a in 0..nt {
            out.h.re_mut()[u * nt + a] += std * rng.normal();
            out.h.im_mut()[u * nt + a] += std * rng.normal();
        }
    }
    out
}

/// Whether a generated dataset carries a train/validation/test split
/// (Type A) or is test-only (Type B).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitKind {
    #[serde(rename = "A")]
    TrainValTest,
    #[serde(rename = "B")]
    TestOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub samples: Vec<ChannelSample>,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_samples(&self) -> &[ChannelSample] {
        &self.samples[self.train.clone()]
    }

    pub fn val_samples(&self) -> &[ChannelSample] {
        &self.samples[self.val.clone()]
    }

    pub fn test_samples(&self) -> &[ChannelSample] {
        &self.samples[self.test.clone()]
    }

    /// FNV-1a over the payload bytes; used to key reference-solution
    /// caches.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for s in &self.samples {
            for i in 0..s.h.numel() {
                eat(s.h.re()[i]);
                eat(s.h.im()[i]);
            }
        }
        h
    }
}

/// Default 9:1:1 split: validation and test each get `count / 11`
/// (floor), training gets the remainder.
fn default_split(count: usize) -> (usize, usize, usize) {
    let eleventh = count / 11;
    (count - 2 * eleventh, eleventh, eleventh)
}

/// Generate `count` i.i.d. samples. Sample `i` uses the independent
/// substream `(config.seed, i)`, so parallel and serial generation are
/// bit-identical.
pub fn generate_dataset(config: &ScenarioConfig, count: usize, kind: SplitKind) -> Result<Dataset> {
    config.validate()?;
    if count < 1 {
        return Err(Error::contract("dataset count must be >= 1"));
    }
    let (tr, va, te) = match kind {
        SplitKind::TrainValTest => default_split(count),
        SplitKind::TestOnly => (0, 0, count),
    };
    generate_with_counts(config, (tr, va, te))
}

/// Generate with explicit split sizes (train, validation, test).
pub fn generate_with_counts(config: &ScenarioConfig, counts: (usize, usize, usize)) -> Result<Dataset> {
    config.validate()?;
    let count = counts.0 + counts.1 + counts.2;
    if count < 1 {
        return Err(Error::contract("dataset count must be >= 1"));
    }
    let cfg = config.clone();
    let samples = par_map_indexed(count, move |i| {
        let mut rng = DetRng::new(cfg.seed, i as u64);
        sample_channel(&cfg, &mut rng)
    });
    Ok(Dataset {
        config: config.clone(),
        samples,
        train: 0..counts.0,
        val: counts.0..counts.0 + counts.1,
        test: counts.0 + counts.1..count,
    })
}

/// Sequential twin of [`generate_with_counts`]; used by the bench suite
/// to compare against the parallel path.
pub fn generate_with_counts_serial(config: &ScenarioConfig, counts: (usize, usize, usize)) -> Result<Dataset> {
    config.validate()?;
    let count = counts.0 + counts.1 + counts.2;
    let samples = crate::parallel::map_indexed_serial(count, |i| {
        let mut rng = DetRng::new(config.seed, i as u64);
        sample_channel(config, &mut rng)
    });
    Ok(Dataset {
        config: config.clone(),
        samples,
        train: 0..counts.0,
        val: counts.0..counts.0 + counts.1,
        test: counts.0 + counts.1..count,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    config: ScenarioConfig,
    count: u64,
    split: [[u64; 2]; 3],
    rng_algorithm: String,
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(d, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_dataset(d: &Dataset, w: &mut impl Write) -> Result<()> {
    let header = DatasetHeader {
        config: d.config.clone(),
        count: d.samples.len() as u64,
        split: [
            [d.train.start as u64, d.train.end as u64],
            [d.val.start as u64, d.val.end as u64],
            [d.test.start as u64, d.test.end as u64],
        ],
        rng_algorithm: ALGORITHM_ID.to_string(),
    };
    let hjson = serde_json::to_vec(&header).expect("header serialization cannot fail");
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(hjson.len() as u64).to_le_bytes())?;
    w.write_all(&hjson)?;
    for s in &d.samples {
        for i in 0..s.h.numel() {
            w.write_all(&s.h.re()[i].to_le_bytes())?;
            w.write_all(&s.h.im()[i].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    read_dataset(&bytes)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = SliceReader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"CRGD\"", magic)));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(r.take(8, "header length")?.try_into().unwrap()) as usize;
    let hstart = r.pos;
    let hbytes = r.take(hlen, "header")?;
    let header: DatasetHeader = serde_json::from_slice(hbytes)
        .map_err(|e| Error::format(hstart as u64, format!("header json: {e}")))?;
    let (k, nt) = (header.config.k_users, header.config.n_t);
    let per_sample = k * nt * 16;
    let want = header.count as usize * per_sample;
    let payload = r.take(want, "sample payload")?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut samples = Vec::with_capacity(header.count as usize);
    for s in 0..header.count as usize {
        let mut re = vec![0.0; k * nt];
        let mut im = vec![0.0; k * nt];
        for i in 0..k * nt {
            let off = s * per_sample + i * 16;
            re[i] = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
            im[i] = f64::from_le_bytes(payload[off + 8..off + 16].try_into().unwrap());
        }
        samples.push(ChannelSample { h: ComplexTensor::from_parts(vec![k, nt], re, im).unwrap(), sigma2: 1.0 });
    }
    let ranges: Vec<Range<usize>> = header
        .split
        .iter()
        .map(|[s, e]| *s as usize..*e as usize)
        .collect();
    for rg in &ranges {
        if rg.end > samples.len() || rg.start > rg.end {
            return Err(Error::format(hstart as u64, format!("split range {:?} outside 0..{}", rg, samples.len())));
        }
    }
    Ok(Dataset {
        config: header.config,
        samples,
        train: ranges[0].clone(),
        val: ranges[1].clone(),
        test: ranges[2].clone(),
    })
}

struct SliceReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> SliceReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what} ({} of {n} bytes available)", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Read a dataset from any byte source.
pub fn read_dataset_from(mut r: impl Read) -> Result<Dataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    read_dataset(&buf)
}
