//! Pinhole pseudo-camera at the RSU.
//!
//! The renderer paints vehicles as anti-aliased discs on a dark background:
//! the target at full intensity, distractors at half intensity. Detector
//! failures are emulated with independent Bernoulli draws: the target may be
//! missed, and a spurious full-intensity blob may appear anywhere.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scene::{distance, norm, sub, Scene, SceneConfig, Vec3};

pub const TARGET_INTENSITY: f64 = 1.0;
pub const DISTRACTOR_INTENSITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub focal_px: f64,
    pub position: Vec3,
    pub look_at: Vec3,
    /// Blob radius in pixels is `blob_scale / range`, clamped to
    /// `[radius_min, radius_max]`.
    pub blob_scale: f64,
    pub radius_min: f64,
    pub radius_max: f64,
}

impl CameraConfig {
    /// Camera co-located with the RSU and aimed at the center of the UE region.
    pub fn for_scene(scene: &SceneConfig) -> Self {
        CameraConfig {
            width: 64,
            height: 64,
            channels: 1,
            focal_px: 28.0,
            position: scene.rsu_position,
            look_at: scene.ue_region.center(),
            blob_scale: 60.0,
            radius_min: 1.0,
            radius_max: 6.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!("image must be at least 16x16, got {}x{}", self.width, self.height)));
        }
        if self.channels != 1 {
            return Err(Error::Config(format!("pseudo-renderer is single-channel, got {}", self.channels)));
        }
        if !(self.focal_px > 0.0) || !(self.blob_scale > 0.0) || !(self.radius_min > 0.0) || self.radius_max < self.radius_min {
            return Err(Error::Config("camera focal length and blob radii must be positive and ordered".into()));
        }
        if norm(sub(self.look_at, self.position)) == 0.0 {
            return Err(Error::Config("camera look-at point coincides with its position".into()));
        }
        Ok(())
    }

    /// Orthonormal camera basis `(right, up, forward)`.
    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let f = normalize(sub(self.look_at, self.position));
        let hint = if f[1].abs() < 0.99 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
        let r = normalize(cross(f, hint));
        let u = cross(r, f);
        (r, u, f)
    }

    /// Pixel coordinates (x right, y down) of a world point, or `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let (r, u, f) = self.basis();
        let d = sub(p, self.position);
        let depth = dot(d, f);
        if depth <= 0.0 {
            return None;
        }
        let x = self.width as f64 / 2.0 + self.focal_px * dot(d, r) / depth;
        let y = self.height as f64 / 2.0 - self.focal_px * dot(d, u) / depth;
        Some((x, y))
    }

    pub fn blob_radius(&self, range: f64) -> f64 {
        (self.blob_scale / range).clamp(self.radius_min, self.radius_max)
    }
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub target_rendered: bool,
    pub spurious_blobs: usize,
    /// Projected target center when the target was drawn.
    pub target_px: Option<(f64, f64)>,
}

impl PseudoImage {
    pub fn blank(width: usize, height: usize) -> Self {
        PseudoImage {
            width,
            height,
            pixels: vec![0.0; width * height],
            target_rendered: false,
            spurious_blobs: 0,
            target_px: None,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    fn stamp_disc(&mut self, cx: f64, cy: f64, radius: f64, level: f64) {
        let x0 = ((cx - radius - 1.0).floor().max(0.0)) as usize;
        let y0 = ((cy - radius - 1.0).floor().max(0.0)) as usize;
        let x1 = ((cx + radius + 1.0).ceil().min(self.width as f64)).max(0.0) as usize;
        let y1 = ((cy + radius + 1.0).ceil().min(self.height as f64)).max(0.0) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let coverage = (radius + 0.5 - (dx * dx + dy * dy).sqrt()).clamp(0.0, 1.0);
                let px = &mut self.pixels[y * self.width + x];
                *px = px.max(level * coverage);
            }
        }
    }

    /// Bilinear resampling to `width × height`.
    pub fn resized(&self, width: usize, height: usize) -> PseudoImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let x1 = (x0 + 1).min(self.width - 1);
                let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
                let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
                pixels.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        let scale = (width as f64 / self.width as f64, height as f64 / self.height as f64);
        PseudoImage {
            width,
            height,
            pixels,
            target_rendered: self.target_rendered,
            spurious_blobs: self.spurious_blobs,
            target_px: self.target_px.map(|(x, y)| (x * scale.0, y * scale.1)),
        }
    }
}

pub fn render_pseudo_image(scene: &Scene, cam: &CameraConfig, cfg: &SceneConfig, draw_index: u64) -> Result<PseudoImage> {
    cam.validate()?;
    let mut rng = stream_rng(cfg.seed, draw_index, Stream::Render);
    let missed = rng.random_bool(cfg.miss_prob);
    let spurious = rng.random_bool(cfg.false_positive_prob);

    let mut img = PseudoImage::blank(cam.width, cam.height);
    for d in &scene.distractors {
        if let Some((x, y)) = cam.project(*d) {
            img.stamp_disc(x, y, cam.blob_radius(distance(*d, cam.position)), DISTRACTOR_INTENSITY);
        }
    }
    if !missed {
        img.target_rendered = true;
        if let Some((x, y)) = cam.project(scene.ue) {
            img.stamp_disc(x, y, cam.blob_radius(distance(scene.ue, cam.position)), TARGET_INTENSITY);
            img.target_px = Some((x, y));
        }
    }
    if spurious {
        let x = rng.random_range(0.0..cam.width as f64);
        let y = rng.random_range(0.0..cam.height as f64);
        let radius = rng.random_range(cam.radius_min..=cam.radius_max);
        img.stamp_disc(x, y, radius, TARGET_INTENSITY);
        img.spurious_blobs = 1;
    }
    Ok(img)
}
