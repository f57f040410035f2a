use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use super::arch::{Layer, Sequential};
use crate::autodiff::checkpoint::Metadata;
use crate::autodiff::{Binding, Graph, ParameterStore, Tensor, Var};
use crate::channel::CsiMatrix;
use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scene::Vec3;

pub const S_CONTRASTIVE: &str = "uncertainty.s_c";
pub const S_LOCALIZATION: &str = "uncertainty.s_l";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    Fusion,
    /// Fusion architecture trained without the alignment term.
    FusionNoAlign,
    CsiOnly,
    VisionOnly,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [ModelVariant::Fusion, ModelVariant::FusionNoAlign, ModelVariant::CsiOnly, ModelVariant::VisionOnly];

    pub fn tag(self) -> &'static str {
        match self {
            ModelVariant::Fusion => "fusion",
            ModelVariant::FusionNoAlign => "fusion-no-align",
            ModelVariant::CsiOnly => "csi-only",
            ModelVariant::VisionOnly => "vision-only",
        }
    }

    /// Both modalities, embedding heads and learned loss weights.
    pub fn is_fused(self) -> bool {
        matches!(self, ModelVariant::Fusion | ModelVariant::FusionNoAlign)
    }

    pub fn uses_csi(self) -> bool {
        self != ModelVariant::VisionOnly
    }

    pub fn uses_vision(self) -> bool {
        self != ModelVariant::CsiOnly
    }

    /// Multiplier on the alignment term of the total loss.
    pub fn contrastive_weight(self) -> f64 {
        if self == ModelVariant::Fusion {
            1.0
        } else {
            0.0
        }
    }

    /// Input channels of the CSI branch: amplitude, plus phase for `csi-only`.
    pub fn csi_channels(self) -> usize {
        if self == ModelVariant::CsiOnly {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected fusion, fusion-no-align, csi-only or vision-only)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub antennas: usize,
    pub subcarriers: usize,
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// Similarity temperature.
    pub temperature: f64,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, antennas: usize, subcarriers: usize, width: usize, height: usize) -> Self {
        ModelConfig { variant, antennas, subcarriers, width, height, feature_dim: 64, embed_dim: 16, temperature: 0.07 }
    }

    pub fn csi_input_shape(&self) -> Vec<usize> {
        vec![self.variant.csi_channels(), self.antennas, self.subcarriers]
    }

    pub fn image_input_shape(&self) -> Vec<usize> {
        vec![1, self.height, self.width]
    }
}

/// Layer stacks of one variant; absent branches are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub csi: Option<Sequential>,
    pub vision: Option<Sequential>,
    pub csi_head: Option<Sequential>,
    pub vision_head: Option<Sequential>,
    pub predictor: Sequential,
}

/// Appends `Flatten → Linear(·, dout) → ReLU` sized by tracing `body`.
fn with_dense_tail(mut body: Vec<Layer>, input: &[usize], name: &str, dout: usize) -> Result<Sequential> {
    body.push(Layer::Flatten);
    let (flat, _) = Sequential::new(body.clone()).trace(input)?;
    body.push(Layer::linear(name, flat[0], dout));
    body.push(Layer::Relu);
    Ok(Sequential::new(body))
}

fn prediction_head(din: usize) -> Sequential {
    Sequential::new(vec![
        Layer::linear("predict.fc1", din, 32),
        Layer::Relu,
        Layer::linear("predict.fc2", 32, 8),
        Layer::Relu,
        Layer::linear("predict.fc3", 8, 3),
    ])
}

impl Network {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        let (m, k, f, e) = (cfg.antennas, cfg.subcarriers, cfg.feature_dim, cfg.embed_dim);
        if m < 4 || k < 4 {
            return Err(Error::Config(format!("CSI encoder needs at least 4x4 input, got {m}x{k}")));
        }
        if cfg.width < 4 || cfg.height < 4 {
            return Err(Error::Config(format!("vision encoder needs at least 4x4 frames, got {}x{}", cfg.width, cfg.height)));
        }
        if !(cfg.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", cfg.temperature)));
        }
        // Second pool collapses the map to 2×2, so the flattened size is
        // 64·2·2 = 256 for the default 16×8 input.
        let (h1, w1) = (m / 2, k / 2);
        let fused_csi = || {
            with_dense_tail(
                vec![
                    Layer::conv("csi.conv1", 1, 32),
                    Layer::Relu,
                    Layer::MaxPool { kh: 2, kw: 2 },
                    Layer::conv("csi.conv2", 32, 64),
                    Layer::Relu,
                    Layer::MaxPool { kh: h1 / 2, kw: w1 / 2 },
                ],
                &cfg.csi_input_shape(),
                "csi.fc",
                f,
            )
        };
        let vision = || {
            with_dense_tail(
                vec![
                    Layer::conv("vision.conv1", 1, 8),
                    Layer::Relu,
                    Layer::MaxPool { kh: 2, kw: 2 },
                    Layer::conv("vision.conv2", 8, 16),
                    Layer::Relu,
                    Layer::MaxPool { kh: 2, kw: 2 },
                ],
                &cfg.image_input_shape(),
                "vision.fc",
                f,
            )
        };
        let head = |name: &str| Sequential::new(vec![Layer::linear(name, f, e)]);
        Ok(match cfg.variant {
            ModelVariant::Fusion | ModelVariant::FusionNoAlign => Network {
                csi: Some(fused_csi()?),
                vision: Some(vision()?),
                csi_head: Some(head("csi.proj")),
                vision_head: Some(head("vision.proj")),
                predictor: prediction_head(2 * e),
            },
            ModelVariant::CsiOnly => Network {
                csi: Some(Sequential::new(vec![
                    Layer::conv("csi.conv1", 2, 16),
                    Layer::Relu,
                    Layer::residual("csi.res1", 16, 32, 2),
                    Layer::residual("csi.res2", 32, 64, 2),
                    Layer::residual("csi.res3", 64, 64, 1),
                    Layer::GlobalAvgPool,
                ])),
                vision: None,
                csi_head: None,
                vision_head: None,
                predictor: Sequential::new(vec![Layer::linear("predict.fc1", 64, 32), Layer::Relu, Layer::linear("predict.fc2", 32, 3)]),
            },
            ModelVariant::VisionOnly => Network {
                csi: None,
                vision: Some(vision()?),
                csi_head: None,
                vision_head: Some(head("vision.proj")),
                predictor: prediction_head(e),
            },
        })
    }

    fn stacks(&self) -> impl Iterator<Item = &Sequential> {
        [&self.csi, &self.vision, &self.csi_head, &self.vision_head].into_iter().flatten().chain(std::iter::once(&self.predictor))
    }

    pub fn parameter_shapes(&self, variant: ModelVariant) -> Vec<(String, Vec<usize>)> {
        let mut shapes: Vec<_> = self.stacks().flat_map(Sequential::parameter_shapes).collect();
        if variant.is_fused() {
            shapes.push((S_CONTRASTIVE.into(), vec![]));
            shapes.push((S_LOCALIZATION.into(), vec![]));
        }
        shapes
    }
}

/// Forward-pass inputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    pub batch: usize,
    /// `[B, C, M, K]`.
    pub csi: Option<Tensor>,
    /// `[B, 1, H, W]`.
    pub image: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[B, 3]` meters.
    pub prediction: Var,
    /// Unit-norm `[B, d_embed]` rows (fused variants only).
    pub csi_embedding: Option<Var>,
    pub vision_embedding: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub localization: Var,
    pub contrastive: Option<Var>,
    pub s_c: Option<Var>,
    pub s_l: Option<Var>,
    pub total: Var,
}

/// Unit-norm embeddings of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub csi: Tensor,
    pub vision: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub network: Network,
    pub params: ParameterStore,
    /// Per-coordinate affine map from network output to meters.
    pub target_mean: [f64; 3],
    pub target_scale: [f64; 3],
}

/// `S = x̄_CSI · x̄_Visionᵀ / alpha`.
pub fn similarity_matrix(g: &mut Graph, csi: Var, vision: Var, alpha: f64) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::Precondition(format!("temperature must be positive, got {alpha}")));
    }
    if g.shape(csi).first() != g.shape(vision).first() {
        return Err(Error::shape("similarity_matrix", format!("{:?} vs {:?}", g.shape(csi), g.shape(vision))));
    }
    let vt = g.transpose(vision)?;
    let s = g.matmul(csi, vt)?;
    g.scale(s, 1.0 / alpha)
}

/// Cross-entropy of each similarity row against its diagonal entry.
pub fn contrastive_loss(g: &mut Graph, s: Var) -> Result<Var> {
    g.row_softmax_cross_entropy_diagonal(s)
}

/// Batch mean of squared Euclidean position errors (m²).
pub fn localization_loss(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    g.mse(pred, truth)
}

/// `w·L_C / (2e^{s_C}) + L_L / (2e^{s_L}) + (s_C + s_L)/2`.
pub fn total_loss(g: &mut Graph, l_c: Var, l_l: Var, s_c: Var, s_l: Var, contrastive_weight: f64) -> Result<Var> {
    let inv_c = g.scale(s_c, -1.0)?;
    let inv_c = g.exp(inv_c)?;
    let weighted_c = g.mul(inv_c, l_c)?;
    let inv_l = g.scale(s_l, -1.0)?;
    let inv_l = g.exp(inv_l)?;
    let weighted_l = g.mul(inv_l, l_l)?;
    g.affine_combination(&[(0.5 * contrastive_weight, weighted_c), (0.5, weighted_l), (0.5, s_c), (0.5, s_l)])
}

fn fmt_triple(v: [f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn parse_triple(key: &str, s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| Error::Data(format!("checkpoint metadata `{key}` is malformed")))?;
    <[f64; 3]>::try_from(v).map_err(|_| Error::Data(format!("checkpoint metadata `{key}` needs 3 values")))
}

fn meta_get<'a>(meta: &'a Metadata, key: &str) -> Result<&'a str> {
    meta.get(key).map(String::as_str).ok_or_else(|| Error::Data(format!("checkpoint metadata lacks `{key}`")))
}

fn meta_parse<T: FromStr>(meta: &Metadata, key: &str) -> Result<T> {
    meta_get(meta, key)?.parse().map_err(|_| Error::Data(format!("checkpoint metadata `{key}` is malformed")))
}

impl FusionModel {
    /// Freshly initialized model with an identity output map.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let network = Network::build(&config)?;
        let mut params = ParameterStore::new();
        let mut rng: ChaCha8Rng = stream_rng(seed, 0, Stream::Init);
        for stack in network.stacks() {
            stack.init(&mut params, &mut rng)?;
        }
        if config.variant.is_fused() {
            params.insert(S_CONTRASTIVE, Tensor::scalar(0.0))?;
            params.insert(S_LOCALIZATION, Tensor::scalar(0.0))?;
        }
        Ok(FusionModel { config, network, params, target_mean: [0.0; 3], target_scale: [1.0; 3] })
    }

    /// Reassembles a model, checking every parameter against the architecture.
    pub fn from_parts(config: ModelConfig, params: ParameterStore, target_mean: [f64; 3], target_scale: [f64; 3]) -> Result<Self> {
        let network = Network::build(&config)?;
        let expected = network.parameter_shapes(config.variant);
        let actual: Vec<(String, Vec<usize>)> = params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        if expected != actual {
            return Err(Error::Data(format!("parameters do not match the `{}` architecture", config.variant)));
        }
        Ok(FusionModel { config, network, params, target_mean, target_scale })
    }

    /// Standardizes targets per coordinate (zero spread falls back to scale 1).
    pub fn fit_target_normalization(&mut self, targets: &[Vec3]) {
        if targets.is_empty() {
            return;
        }
        let n = targets.len() as f64;
        for j in 0..3 {
            let mean = targets.iter().map(|t| t[j]).sum::<f64>() / n;
            let var = targets.iter().map(|t| (t[j] - mean).powi(2)).sum::<f64>() / n;
            self.target_mean[j] = mean;
            self.target_scale[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_elements()
    }

    /// Multiply-accumulates for one inference: encoders, heads and predictor.
    pub fn macs(&self) -> Result<u64> {
        let net = &self.network;
        let mut total = 0;
        let mut csi_feat = None;
        let mut vis_feat = None;
        if let Some(s) = &net.csi {
            let (shape, m) = s.trace(&self.config.csi_input_shape())?;
            total += m;
            csi_feat = Some(shape);
        }
        if let Some(s) = &net.vision {
            let (shape, m) = s.trace(&self.config.image_input_shape())?;
            total += m;
            vis_feat = Some(shape);
        }
        let mut head_out = Vec::new();
        for (head, feat) in [(&net.csi_head, &csi_feat), (&net.vision_head, &vis_feat)] {
            if let (Some(h), Some(f)) = (head, feat) {
                let (shape, m) = h.trace(f)?;
                total += m;
                head_out.push(shape[0]);
            }
        }
        let pred_in = if head_out.is_empty() { csi_feat.or(vis_feat).map_or(0, |s| s[0]) } else { head_out.iter().sum() };
        total += net.predictor.trace(&[pred_in])?.1;
        Ok(total)
    }

    pub fn metadata(&self) -> Metadata {
        let c = &self.config;
        let mut m = Metadata::new();
        m.insert("variant".into(), c.variant.tag().into());
        m.insert("antennas".into(), c.antennas.to_string());
        m.insert("subcarriers".into(), c.subcarriers.to_string());
        m.insert("width".into(), c.width.to_string());
        m.insert("height".into(), c.height.to_string());
        m.insert("feature_dim".into(), c.feature_dim.to_string());
        m.insert("embed_dim".into(), c.embed_dim.to_string());
        m.insert("temperature".into(), c.temperature.to_string());
        m.insert("target_mean".into(), fmt_triple(self.target_mean));
        m.insert("target_scale".into(), fmt_triple(self.target_scale));
        m
    }

    pub fn from_checkpoint(params: ParameterStore, meta: &Metadata) -> Result<Self> {
        let variant: ModelVariant = meta_get(meta, "variant")?.parse().map_err(|_| Error::Data("checkpoint names an unknown variant".into()))?;
        let mut config = ModelConfig::new(
            variant,
            meta_parse(meta, "antennas")?,
            meta_parse(meta, "subcarriers")?,
            meta_parse(meta, "width")?,
            meta_parse(meta, "height")?,
        );
        config.feature_dim = meta_parse(meta, "feature_dim")?;
        config.embed_dim = meta_parse(meta, "embed_dim")?;
        config.temperature = meta_parse(meta, "temperature")?;
        let mean = parse_triple("target_mean", meta_get(meta, "target_mean")?)?;
        let scale = parse_triple("target_scale", meta_get(meta, "target_scale")?)?;
        Self::from_parts(config, params, mean, scale)
    }

    fn csi_input(&self, csi: &[&CsiMatrix]) -> Result<Tensor> {
        let (m, k) = (self.config.antennas, self.config.subcarriers);
        let mut data = Vec::with_capacity(csi.len() * self.config.variant.csi_channels() * m * k);
        for h in csi {
            if h.antennas() != m || h.subcarriers() != k {
                return Err(Error::shape("encode_csi", format!("model expects {m}x{k} CSI, got {}x{}", h.antennas(), h.subcarriers())));
            }
            data.extend(h.amplitudes());
            if self.config.variant.csi_channels() == 2 {
                data.extend(h.phases().iter().map(|p| p / std::f64::consts::PI));
            }
        }
        Tensor::new(vec![csi.len(), self.config.variant.csi_channels(), m, k], data)
    }

    fn image_input(&self, images: &[&[f64]]) -> Result<Tensor> {
        let (w, h) = (self.config.width, self.config.height);
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            if img.len() != w * h {
                return Err(Error::shape("encode_vision", format!("model expects {w}x{h} frames, got {} pixels", img.len())));
            }
            data.extend_from_slice(img);
        }
        Tensor::new(vec![images.len(), 1, h, w], data)
    }

    pub fn inputs(&self, records: &[&SampleRecord]) -> Result<ModelInputs> {
        let v = self.config.variant;
        let csi = if v.uses_csi() { Some(self.csi_input(&records.iter().map(|r| &r.csi).collect::<Vec<_>>())?) } else { None };
        let image = if v.uses_vision() { Some(self.image_input(&records.iter().map(|r| r.image.as_slice()).collect::<Vec<_>>())?) } else { None };
        Ok(ModelInputs { batch: records.len(), csi, image })
    }

    /// `[B, 3]` ground-truth positions.
    pub fn targets(records: &[&SampleRecord]) -> Result<Tensor> {
        Tensor::new(vec![records.len(), 3], records.iter().flat_map(|r| r.ue).collect())
    }

    fn branch(&self, g: &mut Graph, p: &Binding, stack: &Option<Sequential>, input: &Option<Tensor>, what: &str) -> Result<Var> {
        let (Some(stack), Some(input)) = (stack, input) else {
            return Err(Error::Precondition(format!("variant `{}` needs {what} input", self.config.variant)));
        };
        let x = g.constant(input.clone());
        stack.forward(g, p, x)
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, inputs: &ModelInputs) -> Result<ForwardVars> {
        let net = &self.network;
        let (out, csi_embedding, vision_embedding) = match self.config.variant {
            ModelVariant::Fusion | ModelVariant::FusionNoAlign => {
                let zc = self.branch(g, p, &net.csi, &inputs.csi, "CSI")?;
                let zv = self.branch(g, p, &net.vision, &inputs.image, "image")?;
                let xc = self.project_and_normalize(g, p, net.csi_head.as_ref(), zc)?;
                let xv = self.project_and_normalize(g, p, net.vision_head.as_ref(), zv)?;
                // CSI embedding first.
                let joint = g.concat(&[xc, xv])?;
                (net.predictor.forward(g, p, joint)?, Some(xc), Some(xv))
            }
            ModelVariant::CsiOnly => {
                let z = self.branch(g, p, &net.csi, &inputs.csi, "CSI")?;
                (net.predictor.forward(g, p, z)?, None, None)
            }
            ModelVariant::VisionOnly => {
                let z = self.branch(g, p, &net.vision, &inputs.image, "image")?;
                let head = net.vision_head.as_ref().ok_or_else(|| Error::Precondition("vision head missing".into()))?;
                let z = head.forward(g, p, z)?;
                (net.predictor.forward(g, p, z)?, None, None)
            }
        };
        let prediction = g.column_affine(out, &self.target_scale, &self.target_mean)?;
        Ok(ForwardVars { prediction, csi_embedding, vision_embedding })
    }

    fn project_and_normalize(&self, g: &mut Graph, p: &Binding, head: Option<&Sequential>, z: Var) -> Result<Var> {
        let head = head.ok_or_else(|| Error::Precondition("projection head missing".into()))?;
        let x = head.forward(g, p, z)?;
        g.l2_normalize_rows(x)
    }

    /// Builds the variant's training objective on a batch.
    pub fn loss(&self, g: &mut Graph, p: &Binding, inputs: &ModelInputs, truth: &Tensor) -> Result<LossVars> {
        let fwd = self.forward(g, p, inputs)?;
        let t = g.constant(truth.clone());
        let localization = localization_loss(g, fwd.prediction, t)?;
        let (Some(xc), Some(xv)) = (fwd.csi_embedding, fwd.vision_embedding) else {
            return Ok(LossVars { localization, contrastive: None, s_c: None, s_l: None, total: localization });
        };
        let s = similarity_matrix(g, xc, xv, self.config.temperature)?;
        let contrastive = contrastive_loss(g, s)?;
        let (s_c, s_l) = (p.get(S_CONTRASTIVE)?, p.get(S_LOCALIZATION)?);
        let total = total_loss(g, contrastive, localization, s_c, s_l, self.config.variant.contrastive_weight())?;
        Ok(LossVars { localization, contrastive: Some(contrastive), s_c: Some(s_c), s_l: Some(s_l), total })
    }

    /// Positions in meters, evaluated in chunks.
    pub fn predict(&self, records: &[&SampleRecord]) -> Result<Vec<Vec3>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(64) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let fwd = self.forward(&mut g, &p, &self.inputs(chunk)?)?;
            out.extend(g.value(fwd.prediction).data().chunks(3).map(|r| [r[0], r[1], r[2]]));
        }
        Ok(out)
    }

    /// Unit-norm embeddings of a batch (fused variants).
    pub fn embed(&self, records: &[&SampleRecord]) -> Result<EmbeddingBatch> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let fwd = self.forward(&mut g, &p, &self.inputs(records)?)?;
        match (fwd.csi_embedding, fwd.vision_embedding) {
            (Some(c), Some(v)) => Ok(EmbeddingBatch { csi: g.value(c).clone(), vision: g.value(v).clone() }),
            _ => Err(Error::Precondition(format!("variant `{}` has no joint embedding", self.config.variant))),
        }
    }

    /// CSI feature vector of one sample.
    pub fn encode_csi(&self, csi: &CsiMatrix) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = Some(self.csi_input(&[csi])?);
        let z = self.branch(&mut g, &p, &self.network.csi, &x, "CSI")?;
        Ok(g.value(z).data().to_vec())
    }

    /// Vision feature vector of one row-major frame.
    pub fn encode_vision(&self, image: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = Some(self.image_input(&[image])?);
        let z = self.branch(&mut g, &p, &self.network.vision, &x, "image")?;
        Ok(g.value(z).data().to_vec())
    }
}
