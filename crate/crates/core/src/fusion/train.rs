use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::model::{FusionModel, ModelConfig};
use crate::autodiff::{lr_schedule, AdamConfig, Graph};
use crate::dataset::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scene::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, batch_size: 32, learning_rate: 1e-3, seed: 0, adam: AdamConfig::default() }
    }
}

/// One epoch of the training log.
///
/// Losses are sample-weighted epoch means; the log-variances are read after
/// the epoch's last update and `total` is recomputed from the other four
/// fields. Unimodal variants report `total = localization` and zeros for the
/// alignment fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub epoch: usize,
    /// Squared meters.
    pub localization: f64,
    /// Nats.
    pub contrastive: f64,
    pub s_c: f64,
    pub s_l: f64,
    pub total: f64,
}

impl LossBundle {
    /// Scalar form of the uncertainty-weighted objective.
    pub fn combine(l_c: f64, l_l: f64, s_c: f64, s_l: f64, contrastive_weight: f64) -> f64 {
        0.5 * contrastive_weight * (-s_c).exp() * l_c + 0.5 * (-s_l).exp() * l_l + 0.5 * (s_c + s_l)
    }
}

pub const HISTORY_HEADER: &str = "epoch,L_L,L_C,s_C,s_L,L_Total";

pub fn history_csv(history: &[LossBundle]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for b in history {
        let _ = writeln!(out, "{},{},{},{},{},{}", b.epoch, b.localization, b.contrastive, b.s_c, b.s_l, b.total);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub history: Vec<LossBundle>,
}

/// Trains `config.variant` on the records at `indices`.
///
/// Deterministic for a given `cfg.seed`: initialization and the per-epoch
/// shuffles draw from seeded streams and every reduction has a fixed order.
pub fn train(config: ModelConfig, ds: &Dataset, indices: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if indices.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let records: Vec<&SampleRecord> = indices
        .iter()
        .map(|&i| ds.records.get(i).ok_or_else(|| Error::Data(format!("sample index {i} out of range"))))
        .collect::<Result<_>>()?;
    train_records(config, &records, cfg)
}

/// Initializes from `cfg.seed`, fits the target normalization to `records`
/// and trains.
pub fn train_records(config: ModelConfig, records: &[&SampleRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut model = FusionModel::new(config, cfg.seed)?;
    model.fit_target_normalization(&records.iter().map(|r| r.ue).collect::<Vec<_>>());
    train_model(model, records, cfg)
}

/// Trains an already initialized model, keeping its target normalization.
pub fn train_model(mut model: FusionModel, records: &[&SampleRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if records.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let variant = model.config.variant;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64, Stream::Shuffle));
        let lr = lr_schedule(epoch, cfg.learning_rate);
        let (mut sum_l, mut sum_c) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| records[i]).collect();
            let inputs = model.inputs(&batch)?;
            let truth = FusionModel::targets(&batch)?;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let loss = model.loss(&mut g, &p, &inputs, &truth)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::Numeric(format!("{variant}: non-finite loss {total} at epoch {epoch}, batch {b}")));
            }
            g.backward(loss.total)?;
            model.params.collect_grads(&g, &p);
            model.params.adam_step(lr, cfg.adam)?;
            sum_l += g.value(loss.localization).item() * batch.len() as f64;
            sum_c += loss.contrastive.map_or(0.0, |c| g.value(c).item()) * batch.len() as f64;
        }
        let n = records.len() as f64;
        let (l_l, l_c) = (sum_l / n, sum_c / n);
        let bundle = if variant.is_fused() {
            let s = |name| model.params.get(name).map_or(0.0, |p| p.value.item());
            let (s_c, s_l) = (s(super::model::S_CONTRASTIVE), s(super::model::S_LOCALIZATION));
            let total = LossBundle::combine(l_c, l_l, s_c, s_l, variant.contrastive_weight());
            LossBundle { epoch, localization: l_l, contrastive: l_c, s_c, s_l, total }
        } else {
            LossBundle { epoch, localization: l_l, contrastive: 0.0, s_c: 0.0, s_l: 0.0, total: l_l }
        };
        log::debug!("{variant} epoch {epoch}: L_L {:.4} L_C {:.4} total {:.4}", bundle.localization, bundle.contrastive, bundle.total);
        history.push(bundle);
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub id: u64,
    pub predicted: Vec3,
    pub truth: Vec3,
}

pub fn evaluate(model: &FusionModel, ds: &Dataset, indices: &[usize]) -> Result<Vec<Prediction>> {
    let records: Vec<&SampleRecord> = indices
        .iter()
        .map(|&i| ds.records.get(i).ok_or_else(|| Error::Data(format!("sample index {i} out of range"))))
        .collect::<Result<_>>()?;
    let predicted = model.predict(&records)?;
    if let Some(bad) = predicted.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite prediction for sample {}", records[bad].id)));
    }
    Ok(records.iter().zip(predicted).map(|(r, predicted)| Prediction { id: r.id, predicted, truth: r.ue }).collect())
}
