//! `.v2i` sample files and train/test splitting.
//!
//! Byte layout, little-endian throughout:
//!
//! ```text
//! magic        8 bytes  "V2IDATA\0"
//! version      u32      (1)
//! count        u64
//! M, K, W, H   4 × u32  antennas, subcarriers, image width, image height
//! digest       32 bytes SHA-256 of the canonical generating configuration
//! seed         u64
//! config       u32 length + UTF-8 canonical configuration text
//! records      count × fixed stride:
//!   id         u64
//!   csi        M·K × (re f64, im f64), antenna-major
//!   image      H·W × f64 in [0, 1], row-major
//!   p_ue       3 × f64
//!   p_rsu      3 × f64
//!   num_paths  u32
//!   los        θ f64, φ f64, τ f64
//!   flags      u8 target missed, u8 spurious blob present
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::camera::render_pseudo_image;
use crate::channel::{add_awgn, synthesize_csi, CsiMatrix, SPEED_OF_LIGHT};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scene::{derive_paths, distance, sample_scene, Vec3};

pub const DATASET_MAGIC: &[u8; 8] = b"V2IDATA\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub csi: CsiMatrix,
    /// `height × width`, row-major.
    pub image: Vec<f64>,
    pub ue: Vec3,
    pub rsu: Vec3,
    pub num_paths: u32,
    pub los_theta: f64,
    pub los_phi: f64,
    pub los_tau: f64,
    pub target_missed: bool,
    pub false_positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: u64,
    pub antennas: u32,
    pub subcarriers: u32,
    pub width: u32,
    pub height: u32,
    pub digest: [u8; 32],
    pub seed: u64,
    pub config_text: String,
}

impl DatasetHeader {
    pub fn for_config(cfg: &ExperimentConfig, count: usize) -> Self {
        DatasetHeader {
            version: DATASET_VERSION,
            count: count as u64,
            antennas: cfg.array.num_elements() as u32,
            subcarriers: cfg.ofdm.subcarriers as u32,
            width: cfg.camera.width as u32,
            height: cfg.camera.height as u32,
            digest: cfg.digest(),
            seed: cfg.scene.seed,
            config_text: cfg.canonical_text(),
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config_text)
    }

    /// Fails if `cfg` is not the configuration this file was generated from.
    pub fn verify_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        if cfg.digest() != self.digest {
            return Err(Error::Data("dataset was generated from a different configuration (digest mismatch)".into()));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        let (m, k) = (self.antennas as usize, self.subcarriers as usize);
        8 + 16 * m * k + 8 * (self.width as usize * self.height as usize) + 48 + 4 + 24 + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Simulates sample `index` of the experiment: scene, CSI (with noise) and frame.
pub fn generate_sample(cfg: &ExperimentConfig, index: u64) -> Result<SampleRecord> {
    let scene = sample_scene(&cfg.scene, index)?;
    let paths = derive_paths(&scene, cfg.scene.scatterer_decay)?;
    let clean = synthesize_csi(&paths, &cfg.array, &cfg.ofdm)?;
    let csi = add_awgn(&clean, cfg.snr_db, cfg.scene.seed, index)?;
    let frame = render_pseudo_image(&scene, &cfg.camera, &cfg.scene, index)?;
    let los = *paths.los().ok_or_else(|| Error::Geometry("scene produced no paths".into()))?;
    Ok(SampleRecord {
        id: index,
        csi,
        image: frame.pixels,
        ue: scene.ue,
        rsu: scene.rsu,
        num_paths: paths.len() as u32,
        los_theta: los.theta,
        los_phi: los.phi,
        los_tau: los.tau,
        target_missed: !frame.target_rendered,
        false_positive: frame.spurious_blobs > 0,
    })
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let records = (0..cfg.samples as u64).map(|i| generate_sample(cfg, i)).collect::<Result<Vec<_>>>()?;
    log::info!("generated {} samples", records.len());
    Ok(Dataset { header: DatasetHeader::for_config(cfg, records.len()), records })
}

fn check_record(h: &DatasetHeader, r: &SampleRecord) -> Result<()> {
    let (m, k) = (h.antennas as usize, h.subcarriers as usize);
    if r.csi.antennas() != m || r.csi.subcarriers() != k || r.image.len() != (h.width * h.height) as usize {
        return Err(Error::Data(format!(
            "record {} is {}x{} CSI with {} pixels, header expects {m}x{k} and {}x{}",
            r.id,
            r.csi.antennas(),
            r.csi.subcarriers(),
            r.image.len(),
            h.width,
            h.height
        )));
    }
    let d = distance(r.ue, r.rsu);
    if (r.los_tau * SPEED_OF_LIGHT - d).abs() > 1e-9 * d.max(1.0) {
        return Err(Error::Data(format!("record {}: LoS delay inconsistent with geometry", r.id)));
    }
    Ok(())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let h = &ds.header;
    if h.count as usize != ds.records.len() {
        return Err(Error::Data(format!("header count {} but {} records", h.count, ds.records.len())));
    }
    let mut out = Vec::with_capacity(128 + h.config_text.len() + h.stride() * ds.records.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.extend_from_slice(&h.count.to_le_bytes());
    for v in [h.antennas, h.subcarriers, h.width, h.height] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&h.digest);
    out.extend_from_slice(&h.seed.to_le_bytes());
    out.extend_from_slice(&(h.config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(h.config_text.as_bytes());
    let f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
    for r in &ds.records {
        check_record(h, r)?;
        out.extend_from_slice(&r.id.to_le_bytes());
        for a in 0..r.csi.antennas() {
            for k in 0..r.csi.subcarriers() {
                let z = r.csi.0[(a, k)];
                f(&mut out, z.re);
                f(&mut out, z.im);
            }
        }
        r.image.iter().for_each(|&p| f(&mut out, p));
        r.ue.iter().chain(&r.rsu).for_each(|&p| f(&mut out, p));
        out.extend_from_slice(&r.num_paths.to_le_bytes());
        for v in [r.los_theta, r.los_phi, r.los_tau] {
            f(&mut out, v);
        }
        out.push(r.target_missed as u8);
        out.push(r.false_positive as u8);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format("dataset truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.array::<1>()?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("invalid flag byte {b}"))),
        }
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != DATASET_MAGIC {
        return Err(Error::Format("not a .v2i dataset (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = c.u64()?;
    let (antennas, subcarriers, width, height) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    let digest = c.array::<32>()?;
    let seed = c.u64()?;
    let text_len = c.u32()? as usize;
    let config_text = String::from_utf8(c.take(text_len)?.to_vec()).map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    if <[u8; 32]>::from(Sha256::digest(config_text.as_bytes())) != digest {
        return Err(Error::Format("embedded configuration does not match header digest".into()));
    }
    let header = DatasetHeader { version, count, antennas, subcarriers, width, height, digest, seed, config_text };

    let expected = (count as usize).checked_mul(header.stride());
    if expected != Some(bytes.len() - c.pos) {
        return Err(Error::Format(format!(
            "record section is {} bytes, expected {count} records of {} bytes",
            bytes.len() - c.pos,
            header.stride()
        )));
    }
    let (m, k) = (antennas as usize, subcarriers as usize);
    let pixels = (width * height) as usize;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = c.u64()?;
        let mut h = DMatrix::<Complex64>::zeros(m, k);
        for a in 0..m {
            for s in 0..k {
                h[(a, s)] = Complex64::new(c.f64()?, c.f64()?);
            }
        }
        let image = (0..pixels).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let record = SampleRecord {
            id,
            csi: CsiMatrix(h),
            image,
            ue: c.vec3()?,
            rsu: c.vec3()?,
            num_paths: c.u32()?,
            los_theta: c.f64()?,
            los_phi: c.f64()?,
            los_tau: c.f64()?,
            target_missed: c.flag()?,
            false_positive: c.flag()?,
        };
        check_record(&header, &record)?;
        records.push(record);
    }
    Ok(Dataset { header, records })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read dataset {}: {e}", path.display())))?;
    decode_dataset(&bytes)
}

/// Positions (into the record list) of the train and test partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random partition; the train side gets `floor(n · fraction)` samples.
pub fn split(n: usize, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Precondition(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 0, Stream::Split));
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}
