//! Error statistics, model complexity and comparison reports.
//!
//! Report files written by [`emit_report`]:
//!
//! * `summary.csv` — `model,n,mean_m,median_m,p95_m,max_m,parameters,macs,flops`
//!   (complexity columns empty for models without a network)
//! * `cdf.csv` — `model,error_m,cdf`, one row per distinct error value
//! * `correlation.csv` — `model_a,model_b,pearson` for every model pair
//! * `cdf.svg` — empirical CDF curves of all models
//! * `scatter.svg` — per-sample errors of the two unimodal models against
//!   each other (or the first two models when those are absent)

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::{FusionModel, Prediction};
use crate::scene::{distance, Vec3};

/// Per-sample 3-D Euclidean errors in meters, keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorVector {
    pub ids: Vec<u64>,
    pub errors: Vec<f64>,
}

impl ErrorVector {
    pub fn new(ids: Vec<u64>, errors: Vec<f64>) -> Result<Self> {
        if ids.len() != errors.len() {
            return Err(Error::Data(format!("{} ids for {} errors", ids.len(), errors.len())));
        }
        if let Some(e) = errors.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return Err(Error::Data(format!("errors must be finite and nonnegative, got {e}")));
        }
        Ok(ErrorVector { ids, errors })
    }

    pub fn from_positions(ids: Vec<u64>, predicted: &[Vec3], truth: &[Vec3]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Data(format!("{} predictions for {} ground-truth points", predicted.len(), truth.len())));
        }
        Self::new(ids, predicted.iter().zip(truth).map(|(p, t)| distance(*p, *t)).collect())
    }

    pub fn from_predictions(preds: &[Prediction]) -> Result<Self> {
        let (p, t): (Vec<Vec3>, Vec<Vec3>) = preds.iter().map(|p| (p.predicted, p.truth)).unzip();
        Self::from_positions(preds.iter().map(|p| p.id).collect(), &p, &t)
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn mean(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Data("mean of empty error vector".into()));
        }
        Ok(self.errors.iter().sum::<f64>() / self.len() as f64)
    }

    /// Entries whose id is in `ids`, in the order of `ids`.
    pub fn restrict(&self, ids: &[u64]) -> Result<Self> {
        let lookup: BTreeMap<u64, f64> = self.ids.iter().copied().zip(self.errors.iter().copied()).collect();
        let errors = ids
            .iter()
            .map(|id| lookup.get(id).copied().ok_or_else(|| Error::Data(format!("no error recorded for sample {id}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids.to_vec(), errors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfPoint {
    pub error: f64,
    /// Fraction of samples with error `<=` this value.
    pub probability: f64,
}

/// Empirical CDF: one point per distinct error, heights in steps of `1/N`.
pub fn error_cdf(errors: &[f64]) -> Result<Vec<CdfPoint>> {
    if errors.is_empty() {
        return Err(Error::Data("CDF of an empty error vector".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut points: Vec<CdfPoint> = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        let probability = (i + 1) as f64 / n;
        match points.last_mut() {
            Some(last) if last.error == e => last.probability = probability,
            _ => points.push(CdfPoint { error: e, probability }),
        }
    }
    Ok(points)
}

/// Nearest-rank percentile: the smallest error whose CDF reaches `q`.
pub fn percentile(errors: &[f64], q: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Data("percentile of an empty error vector".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Precondition(format!("percentile must be in [0, 1], got {q}")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

/// Pearson correlation of two equally long vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Precondition(format!("pearson needs two vectors of equal length >= 2, got {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Numeric("correlation undefined: an input has zero variance".into()));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of two models' errors over the same samples.
pub fn error_correlation(a: &ErrorVector, b: &ErrorVector) -> Result<f64> {
    if a.ids != b.ids {
        return Err(Error::Data("error vectors are not aligned on the same sample ids".into()));
    }
    pearson(&a.errors, &b.errors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityReport {
    pub parameters: usize,
    /// Multiply-accumulates per single-sample inference.
    pub macs: u64,
}

impl ComplexityReport {
    /// Two floating-point operations per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

pub fn complexity(model: &FusionModel) -> Result<ComplexityReport> {
    Ok(ComplexityReport { parameters: model.parameter_count(), macs: model.macs()? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

pub fn summarize(errors: &ErrorVector) -> Result<Summary> {
    let e = &errors.errors;
    Ok(Summary {
        count: e.len(),
        mean: errors.mean()?,
        median: percentile(e, 0.5)?,
        p95: percentile(e, 0.95)?,
        max: percentile(e, 1.0)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub name: String,
    pub errors: ErrorVector,
    pub complexity: Option<ComplexityReport>,
}

pub const SUMMARY_HEADER: &str = "model,n,mean_m,median_m,p95_m,max_m,parameters,macs,flops";

pub fn summary_csv(models: &[ModelReport]) -> Result<String> {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for m in models {
        let s = summarize(&m.errors)?;
        let (p, macs, flops) = match m.complexity {
            Some(c) => (c.parameters.to_string(), c.macs.to_string(), c.flops().to_string()),
            None => Default::default(),
        };
        let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6},{:.6},{p},{macs},{flops}", m.name, s.count, s.mean, s.median, s.p95, s.max);
    }
    Ok(out)
}

fn cdf_csv(models: &[ModelReport]) -> Result<String> {
    let mut out = String::from("model,error_m,cdf\n");
    for m in models {
        for p in error_cdf(&m.errors.errors)? {
            let _ = writeln!(out, "{},{:.6},{:.6}", m.name, p.error, p.probability);
        }
    }
    Ok(out)
}

fn correlation_csv(models: &[ModelReport]) -> String {
    let mut out = String::from("model_a,model_b,pearson\n");
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            let rho = error_correlation(&a.errors, &b.errors).map_or_else(|_| "NaN".to_string(), |r| format!("{r:.6}"));
            let _ = writeln!(out, "{},{},{rho}", a.name, b.name);
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Frame {
    w: f64,
    h: f64,
    left: f64,
    bottom: f64,
    x_max: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.left + v / self.x_max * (self.w - self.left - 20.0)
    }

    fn y(&self, v: f64) -> f64 {
        self.h - self.bottom - v / self.y_max * (self.h - self.bottom - 30.0)
    }

    fn open(&self, title: &str, x_label: &str, y_label: &str) -> String {
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            self.w, self.h
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{title}</text>", self.w / 2.0);
        let (x0, y0, x1, y1) = (self.x(0.0), self.y(0.0), self.x(self.x_max), self.y(self.y_max));
        let _ = writeln!(s, "<path d=\"M{x0:.1},{y1:.1} V{y0:.1} H{x1:.1}\" stroke=\"black\" fill=\"none\"/>");
        for i in 0..=5 {
            let (vx, vy) = (self.x_max * i as f64 / 5.0, self.y_max * i as f64 / 5.0);
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", self.x(vx), y0 + 16.0, tick(vx));
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", x0 - 6.0, self.y(vy) + 4.0, tick(vy));
        }
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>", (x0 + x1) / 2.0, self.h - 8.0);
        let _ = writeln!(s, "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{y_label}</text>", (y0 + y1) / 2.0, (y0 + y1) / 2.0);
        s
    }
}

fn tick(v: f64) -> String {
    if v >= 10.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

fn nice_ceiling(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&c| c >= v).unwrap_or(10.0 * mag)
}

pub fn cdf_svg(models: &[ModelReport]) -> Result<String> {
    let x_max = nice_ceiling(models.iter().flat_map(|m| m.errors.errors.iter().copied()).fold(0.0, f64::max));
    let f = Frame { w: 640.0, h: 420.0, left: 60.0, bottom: 45.0, x_max, y_max: 1.0 };
    let mut s = f.open("Localization error CDF", "3-D error (m)", "CDF");
    for (i, m) in models.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = format!("M{:.2},{:.2}", f.x(0.0), f.y(0.0));
        let mut prev = 0.0;
        for p in error_cdf(&m.errors.errors)? {
            let _ = write!(d, " H{:.2} V{:.2}", f.x(p.error), f.y(p.probability));
            prev = p.probability;
        }
        let _ = write!(d, " H{:.2}", f.x(x_max));
        debug_assert_eq!(prev, 1.0);
        let _ = writeln!(s, "<path d=\"{d}\" stroke=\"{color}\" stroke-width=\"1.8\" fill=\"none\"/>");
        let ly = 40.0 + 18.0 * i as f64;
        let _ = writeln!(s, "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"3\"/>", f.w - 200.0, f.w - 180.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", f.w - 174.0, ly + 4.0, m.name);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn scatter_svg(a: &ModelReport, b: &ModelReport) -> Result<String> {
    let rho = error_correlation(&a.errors, &b.errors).map_or_else(|_| "undefined".to_string(), |r| format!("{r:.3}"));
    let max = a.errors.errors.iter().chain(&b.errors.errors).copied().fold(0.0, f64::max);
    let lim = nice_ceiling(max);
    let f = Frame { w: 460.0, h: 460.0, left: 60.0, bottom: 45.0, x_max: lim, y_max: lim };
    let mut s = f.open(&format!("Per-sample errors (pearson {rho})"), &format!("{} error (m)", a.name), &format!("{} error (m)", b.name));
    for (x, y) in a.errors.errors.iter().zip(&b.errors.errors) {
        let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.5\"/>", f.x(*x), f.y(*y), PALETTE[0]);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the comparison report for `models` into `out_dir`.
pub fn emit_report(models: &[ModelReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if models.is_empty() {
        return Err(Error::Data("no models to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut files = vec![
        ("summary.csv", summary_csv(models)?),
        ("cdf.csv", cdf_csv(models)?),
        ("correlation.csv", correlation_csv(models)),
        ("cdf.svg", cdf_svg(models)?),
    ];
    let find = |name: &str| models.iter().find(|m| m.name == name);
    let pair = match (find("csi-only"), find("vision-only")) {
        (Some(a), Some(b)) => Some((a, b)),
        _ if models.len() >= 2 => Some((&models[0], &models[1])),
        _ => None,
    };
    if let Some((a, b)) = pair {
        files.push(("scatter.svg", scatter_svg(a, b)?));
    }
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
