//! Experiment configuration file.
//!
//! One `key = value` per line; `#` starts a comment. Vectors are written as
//! `x, y, z`. Unknown or repeated keys are rejected. Every key is optional and
//! falls back to the default shown by [`ExperimentConfig::canonical_text`].
//!
//! | key | meaning |
//! |-----|---------|
//! | `seed` | master seed for every random stream |
//! | `samples` | number of samples `generate` writes |
//! | `snr_db` | CSI noise level, `inf` for noiseless |
//! | `ue_region.min`, `ue_region.max` | box the target is drawn from (m) |
//! | `rsu.position` | array / camera location (m) |
//! | `scene.distractors` | other vehicles per frame |
//! | `scene.scatterers` | scattered paths, `L - 1` |
//! | `scene.static_scatterers` | draw scatterers once per seed |
//! | `scene.scatterer_decay` | per-path gain decay factor |
//! | `scatterer_region.min`, `scatterer_region.max` | scatterer box (m) |
//! | `camera.miss_prob`, `camera.false_positive_prob` | detection failure rates |
//! | `camera.width`, `camera.height`, `camera.focal_px` | pinhole intrinsics |
//! | `camera.blob_scale`, `camera.radius_min`, `camera.radius_max` | blob radius = scale / range, clamped |
//! | `array.mx`, `array.my` | UPA size (half-wavelength spacing) |
//! | `ofdm.carrier_hz`, `ofdm.subcarriers`, `ofdm.spacing_hz` | OFDM grid |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::camera::CameraConfig;
use crate::channel::{ArrayConfig, OfdmConfig};
use crate::error::{Error, Result};
use crate::scene::{SceneConfig, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub array: ArrayConfig,
    pub ofdm: OfdmConfig,
    pub samples: usize,
    pub snr_db: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        ExperimentConfig {
            camera: CameraConfig::for_scene(&scene),
            scene,
            array: ArrayConfig::default(),
            ofdm: OfdmConfig::default(),
            samples: 7012,
            snr_db: 20.0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
}

fn parse_vec3(key: &str, v: &str) -> Result<Vec3> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("key `{key}`: expected 3 comma-separated numbers, got `{v}`")));
    }
    Ok([parse_num(key, parts[0])?, parse_num(key, parts[1])?, parse_num(key, parts[2])?])
}

fn fmt_vec3(v: Vec3) -> String {
    format!("{}, {}, {}", v[0], v[1], v[2])
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.camera.position = cfg.scene.rsu_position;
        cfg.camera.look_at = cfg.scene.ue_region.center();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.scene;
        let c = &mut self.camera;
        match key {
            "seed" => s.seed = parse_num(key, v)?,
            "samples" => self.samples = parse_num(key, v)?,
            "snr_db" => self.snr_db = parse_num(key, v)?,
            "ue_region.min" => s.ue_region.min = parse_vec3(key, v)?,
            "ue_region.max" => s.ue_region.max = parse_vec3(key, v)?,
            "rsu.position" => s.rsu_position = parse_vec3(key, v)?,
            "scene.distractors" => s.num_distractors = parse_num(key, v)?,
            "scene.scatterers" => s.num_scatterers = parse_num(key, v)?,
            "scene.static_scatterers" => s.static_scatterers = parse_num(key, v)?,
            "scene.scatterer_decay" => s.scatterer_decay = parse_num(key, v)?,
            "scatterer_region.min" => s.scatterer_region.min = parse_vec3(key, v)?,
            "scatterer_region.max" => s.scatterer_region.max = parse_vec3(key, v)?,
            "camera.miss_prob" => s.miss_prob = parse_num(key, v)?,
            "camera.false_positive_prob" => s.false_positive_prob = parse_num(key, v)?,
            "camera.width" => c.width = parse_num(key, v)?,
            "camera.height" => c.height = parse_num(key, v)?,
            "camera.focal_px" => c.focal_px = parse_num(key, v)?,
            "camera.blob_scale" => c.blob_scale = parse_num(key, v)?,
            "camera.radius_min" => c.radius_min = parse_num(key, v)?,
            "camera.radius_max" => c.radius_max = parse_num(key, v)?,
            "array.mx" => self.array.mx = parse_num(key, v)?,
            "array.my" => self.array.my = parse_num(key, v)?,
            "ofdm.carrier_hz" => self.ofdm.carrier_hz = parse_num(key, v)?,
            "ofdm.subcarriers" => self.ofdm.subcarriers = parse_num(key, v)?,
            "ofdm.spacing_hz" => self.ofdm.spacing_hz = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        if key == "array.mx" || key == "array.my" || key == "ofdm.carrier_hz" {
            self.array = ArrayConfig::half_wavelength(self.array.mx, self.array.my, self.ofdm.carrier_hz);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.camera.validate()?;
        self.array.validate()?;
        self.ofdm.validate()?;
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("snr_db must be a number or inf, got {}", self.snr_db)));
        }
        Ok(())
    }

    /// Every key with its value in a fixed order. Parsing this text yields
    /// the same configuration, and its hash identifies a dataset's origin.
    pub fn canonical_text(&self) -> String {
        let s = &self.scene;
        let c = &self.camera;
        let entries: Vec<(&str, String)> = vec![
            ("seed", s.seed.to_string()),
            ("samples", self.samples.to_string()),
            ("snr_db", self.snr_db.to_string()),
            ("ue_region.min", fmt_vec3(s.ue_region.min)),
            ("ue_region.max", fmt_vec3(s.ue_region.max)),
            ("rsu.position", fmt_vec3(s.rsu_position)),
            ("scene.distractors", s.num_distractors.to_string()),
            ("scene.scatterers", s.num_scatterers.to_string()),
            ("scene.static_scatterers", s.static_scatterers.to_string()),
            ("scene.scatterer_decay", s.scatterer_decay.to_string()),
            ("scatterer_region.min", fmt_vec3(s.scatterer_region.min)),
            ("scatterer_region.max", fmt_vec3(s.scatterer_region.max)),
            ("camera.miss_prob", s.miss_prob.to_string()),
            ("camera.false_positive_prob", s.false_positive_prob.to_string()),
            ("camera.width", c.width.to_string()),
            ("camera.height", c.height.to_string()),
            ("camera.focal_px", c.focal_px.to_string()),
            ("camera.blob_scale", c.blob_scale.to_string()),
            ("camera.radius_min", c.radius_min.to_string()),
            ("camera.radius_max", c.radius_max.to_string()),
            ("array.mx", self.array.mx.to_string()),
            ("array.my", self.array.my.to_string()),
            ("ofdm.carrier_hz", self.ofdm.carrier_hz.to_string()),
            ("ofdm.subcarriers", self.ofdm.subcarriers.to_string()),
            ("ofdm.spacing_hz", self.ofdm.spacing_hz.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
