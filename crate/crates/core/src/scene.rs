//! Randomized urban scenes and their multipath geometry.
//!
//! Coordinates are expressed in the array frame: the planar array spans the
//! x–y plane at the RSU position and its boresight (array normal) is +z.
//! Elevation θ is measured from +z and azimuth φ from +x toward +y, so a unit
//! direction is `[sinθ cosφ, sinθ sinφ, cosθ]`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;

use crate::channel::SPEED_OF_LIGHT;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub type Vec3 = [f64; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Axis-aligned box, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub min: Vec3,
    pub max: Vec3,
}

impl Region {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Region { min, max }
    }

    pub fn center(&self) -> Vec3 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|i| self.max[i] - self.min[i]).product()
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn validate(&self, what: &str) -> Result<()> {
        let finite = self.min.iter().chain(self.max.iter()).all(|v| v.is_finite());
        if !finite || (0..3).any(|i| self.max[i] <= self.min[i]) {
            return Err(Error::Config(format!(
                "{what} region is degenerate: min {:?}, max {:?}",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        let mut p = [0.0; 3];
        for i in 0..3 {
            p[i] = rng.random_range(self.min[i]..self.max[i]);
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub ue_region: Region,
    pub rsu_position: Vec3,
    pub num_distractors: usize,
    /// Number of scattered paths, i.e. `L - 1`.
    pub num_scatterers: usize,
    pub scatterer_region: Region,
    /// Scatterer positions are drawn once per seed (fixed environment) when
    /// true, and per draw otherwise.
    pub static_scatterers: bool,
    pub scatterer_decay: f64,
    pub miss_prob: f64,
    pub false_positive_prob: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            // A road seen from a pole-mounted array looking along the street:
            // array-frame x points down to the road 10 m below, so vehicle
            // antennas occupy a 1 m slab in x, 24 m across (y) and 30 m
            // along the street (z).
            ue_region: Region::new([9.5, -12.0, 10.0], [10.5, 12.0, 40.0]),
            rsu_position: [0.0, 0.0, 0.0],
            num_distractors: 3,
            num_scatterers: 24,
            scatterer_region: Region::new([0.0, -25.0, 5.0], [35.0, 25.0, 40.0]),
            static_scatterers: true,
            scatterer_decay: 0.7,
            miss_prob: 0.05,
            false_positive_prob: 0.05,
            seed: 1,
        }
    }
}

impl SceneConfig {
    pub fn num_paths(&self) -> usize {
        self.num_scatterers + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.ue_region.validate("UE")?;
        if self.num_scatterers > 0 {
            self.scatterer_region.validate("scatterer")?;
        }
        if !self.rsu_position.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("RSU position must be finite".into()));
        }
        if self.ue_region.min[2] <= self.rsu_position[2] {
            return Err(Error::Config(format!(
                "UE region must lie in front of the array (z > {}), got min z {}",
                self.rsu_position[2], self.ue_region.min[2]
            )));
        }
        for (name, p) in [("miss", self.miss_prob), ("false-positive", self.false_positive_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability must be in [0, 1], got {p}")));
            }
        }
        if !(self.scatterer_decay >= 0.0 && self.scatterer_decay.is_finite()) {
            return Err(Error::Config(format!("scatterer decay must be nonnegative, got {}", self.scatterer_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub ue: Vec3,
    pub rsu: Vec3,
    pub distractors: Vec<Vec3>,
    pub scatterers: Vec<Vec3>,
    pub seed: u64,
    pub draw_index: u64,
}

pub fn sample_scene(cfg: &SceneConfig, draw_index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, draw_index, Stream::Scene);
    let ue = cfg.ue_region.sample(&mut rng);
    let distractors = (0..cfg.num_distractors).map(|_| cfg.ue_region.sample(&mut rng)).collect();

    let mut scatter_rng = if cfg.static_scatterers {
        stream_rng(cfg.seed, 0, Stream::Scatterers)
    } else {
        stream_rng(cfg.seed, draw_index, Stream::Scatterers)
    };
    let scatterers = (0..cfg.num_scatterers).map(|_| cfg.scatterer_region.sample(&mut scatter_rng)).collect();

    Ok(Scene { ue, rsu: cfg.rsu_position, distractors, scatterers, seed: cfg.seed, draw_index })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub alpha: Complex64,
    /// Delay, seconds.
    pub tau: f64,
    /// Elevation from boresight, radians in `[0, π]`.
    pub theta: f64,
    /// Azimuth in the array plane, radians in `(-π, π]`.
    pub phi: f64,
}

/// Paths of one link; entry 0 is line of sight.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet(Vec<Path>);

impl PathSet {
    pub fn new(paths: Vec<Path>) -> Self {
        PathSet(paths)
    }

    pub fn los(&self) -> Option<&Path> {
        self.0.first()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Path> {
        self.0.iter()
    }

    pub fn paths(&self) -> &[Path] {
        &self.0
    }

    /// Returns a copy keeping only the line-of-sight path.
    pub fn los_only(&self) -> PathSet {
        PathSet(self.0.iter().take(1).copied().collect())
    }
}

/// Elevation and azimuth of `direction` in the array frame.
pub fn direction_angles(direction: Vec3) -> (f64, f64) {
    let r = norm(direction);
    let theta = (direction[2] / r).clamp(-1.0, 1.0).acos();
    let mut phi = direction[1].atan2(direction[0]);
    if phi == -PI {
        phi = PI;
    }
    (theta, phi)
}

pub fn derive_paths(scene: &Scene, decay: f64) -> Result<PathSet> {
    let los_dir = sub(scene.ue, scene.rsu);
    let los_len = norm(los_dir);
    if los_len == 0.0 {
        return Err(Error::Geometry("UE coincides with the RSU".into()));
    }
    if los_dir[2] <= 0.0 {
        return Err(Error::Geometry(format!("UE at {:?} is not in front of the array", scene.ue)));
    }
    let mut rng = stream_rng(scene.seed, scene.draw_index, Stream::PathPhases);
    let mut random_phase = || Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI));

    let (theta, phi) = direction_angles(los_dir);
    let mut paths = Vec::with_capacity(1 + scene.scatterers.len());
    paths.push(Path { alpha: random_phase(), tau: los_len / SPEED_OF_LIGHT, theta, phi });

    let mut magnitude = 1.0;
    for s in &scene.scatterers {
        magnitude *= decay;
        let length = distance(scene.ue, *s) + distance(*s, scene.rsu);
        let (theta, phi) = direction_angles(sub(*s, scene.rsu));
        let gain = magnitude * los_len / length;
        paths.push(Path { alpha: gain * random_phase(), tau: length / SPEED_OF_LIGHT, theta, phi });
    }
    Ok(PathSet(paths))
}
