//! The end-to-end dual-stream model: convolutional backbone stubs, 1x1
//! channel reduction, spatial flattening, the stacked fusion layers, the
//! co-attention aggregation, the prediction head, and the BCE loss.

use crate::attention::{
    ffn, mca_block, msa_block, sinusoidal_positions, FfnIds, FfnWeights, McaIds, McaParams,
    MhaConfig, MhaIds, MhaWeights, MsaIds, MsaParams,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One backbone convolution stage; padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Small trainable convolutional stub standing in for a pretrained backbone:
/// stride-2 stages, then a 1x1 reduction to the transformer width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_hw: (usize, usize),
    pub stages: Vec<ConvStage>,
    pub reduce_dim: usize,
}

impl BackboneConfig {
    /// Feature-map size after all stages.
    pub fn feature_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = self.input_hw;
        for s in &self.stages {
            let p = s.kernel / 2;
            h = (h + 2 * p - s.kernel) / s.stride + 1;
            w = (w + 2 * p - s.kernel) / s.stride + 1;
        }
        (h, w)
    }

    /// Flattened sequence length `S = H' * W'`.
    pub fn seq_len(&self) -> usize {
        let (h, w) = self.feature_hw();
        h * w
    }
}

#[derive(Debug, Clone)]
pub struct BackboneWeights {
    pub stages: Vec<(Tensor, Tensor)>,
    pub reduce_w: Tensor,
    pub reduce_b: Tensor,
}

impl BackboneWeights {
    pub fn init<R: rand::Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let mut c_in = cfg.in_channels;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for s in &cfg.stages {
            let fan_in = c_in * s.kernel * s.kernel;
            let fan_out = s.out_channels * s.kernel * s.kernel;
            stages.push((
                Tensor::glorot(
                    &[s.out_channels, c_in, s.kernel, s.kernel],
                    fan_in,
                    fan_out,
                    rng,
                ),
                Tensor::zeros(&[s.out_channels]),
            ));
            c_in = s.out_channels;
        }
        BackboneWeights {
            stages,
            reduce_w: Tensor::glorot(&[cfg.reduce_dim, c_in, 1, 1], c_in, cfg.reduce_dim, rng),
            reduce_b: Tensor::zeros(&[cfg.reduce_dim]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneIds {
    pub stages: Vec<(TensorId, TensorId)>,
    pub reduce_w: TensorId,
    pub reduce_b: TensorId,
}

/// Which architecture the forward pass realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchVariant {
    /// Full fusion stack plus co-attention.
    FullFusion,
    /// Only the final co-attention over the concatenated streams is kept.
    CoAttentionOnly,
    /// Direct feature-level fusion: concatenate, pool, classify.
    ConcatFusion,
}

/// Zeroing of one input stream for the unimodal baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityMask {
    None,
    /// Zero the visual input (tactile-only model).
    Visual,
    /// Zero the tactile input (visual-only model).
    Tactile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub attn: MhaConfig,
    pub d_ff: usize,
    pub n_fusion_layers: usize,
    pub head_hidden: usize,
    pub variant: ArchVariant,
    pub mask: ModalityMask,
    pub backbone: BackboneConfig,
    /// Raw dataset image size, before resize/crop.
    pub source_hw: (usize, usize),
    /// Bilinear resize target; the crop to `backbone.input_hw` follows.
    pub resize_hw: (usize, usize),
}

impl ModelConfig {
    /// Desk-scale defaults: d = 32, 4 heads, 4 fusion layers, 16x16 crops
    /// from 24x24 sources.
    pub fn toy() -> Self {
        ModelConfig {
            attn: MhaConfig::toy(),
            d_ff: 128,
            n_fusion_layers: 4,
            head_hidden: 32,
            variant: ArchVariant::FullFusion,
            mask: ModalityMask::None,
            backbone: BackboneConfig {
                in_channels: 3,
                input_hw: (16, 16),
                stages: vec![
                    ConvStage { out_channels: 8, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 16, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 32, kernel: 3, stride: 2 },
                ],
                reduce_dim: 32,
            },
            source_hw: (24, 24),
            resize_hw: (16, 16),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.backbone.reduce_dim != self.attn.d_model {
            return Err(Error::Config(format!(
                "backbone reduce_dim {} must equal d_model {}",
                self.backbone.reduce_dim, self.attn.d_model
            )));
        }
        if self.backbone.seq_len() == 0 {
            return Err(Error::Config("backbone output has no spatial cells".into()));
        }
        Ok(())
    }
}

/// One fusion layer: a self-attention block per stream, then the symmetric
/// cross-attention pair.
#[derive(Debug, Clone)]
pub struct FusionLayerParams {
    pub msa_v: MsaParams,
    pub msa_h: MsaParams,
    pub mca: McaParams,
}

#[derive(Debug, Clone)]
pub struct FusionLayerIds {
    pub msa_v: MsaIds,
    pub msa_h: MsaIds,
    pub mca: McaIds,
}

/// Full parameter set of the dual-stream fusion classifier.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: ModelConfig,
    pub backbone_v: BackboneWeights,
    pub backbone_h: BackboneWeights,
    pub layers: Vec<FusionLayerParams>,
    pub co_attn: Option<MsaParams>,
    pub head: FfnWeights,
}

pub struct FusionModelIds {
    pub backbone_v: BackboneIds,
    pub backbone_h: BackboneIds,
    pub layers: Vec<FusionLayerIds>,
    pub co_attn: Option<MsaIds>,
    pub head: FfnIds,
    /// All parameter leaves in canonical (named) order.
    pub flat: Vec<TensorId>,
}

impl FusionModel {
    /// Deterministic init from a seed; same seed and config give bit-identical
    /// parameters.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone_v = BackboneWeights::init(&cfg.backbone, &mut rng);
        let backbone_h = BackboneWeights::init(&cfg.backbone, &mut rng);
        let n_layers = match cfg.variant {
            ArchVariant::FullFusion => cfg.n_fusion_layers,
            _ => 0,
        };
        let layers = (0..n_layers)
            .map(|_| FusionLayerParams {
                msa_v: MsaParams::init(&cfg.attn, cfg.d_ff, &mut rng),
                msa_h: MsaParams::init(&cfg.attn, cfg.d_ff, &mut rng),
                mca: McaParams::init(&cfg.attn, cfg.d_ff, &mut rng),
            })
            .collect();
        let co_attn = match cfg.variant {
            ArchVariant::ConcatFusion => None,
            _ => Some(MsaParams::init(&cfg.attn, cfg.d_ff, &mut rng)),
        };
        let head = FfnWeights::init(cfg.attn.d_model, cfg.head_hidden, 1, &mut rng);
        Ok(FusionModel {
            cfg,
            backbone_v,
            backbone_h,
            layers,
            co_attn,
            head,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, b) in [("backbone_v", &self.backbone_v), ("backbone_h", &self.backbone_h)] {
            for (i, (w, bias)) in b.stages.iter().enumerate() {
                out.push((format!("{prefix}.stage{i}.w"), w));
                out.push((format!("{prefix}.stage{i}.b"), bias));
            }
            out.push((format!("{prefix}.reduce.w"), &b.reduce_w));
            out.push((format!("{prefix}.reduce.b"), &b.reduce_b));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (tag, msa) in [("msa_v", &layer.msa_v), ("msa_h", &layer.msa_h)] {
                push_mha(&mut out, &format!("fusion{l}.{tag}"), &msa.mha);
                push_ffn(&mut out, &format!("fusion{l}.{tag}.ffn"), &msa.ffn);
            }
            push_mha(&mut out, &format!("fusion{l}.mca.v"), &layer.mca.mha_v);
            push_ffn(&mut out, &format!("fusion{l}.mca.v.ffn"), &layer.mca.ffn_v);
            push_mha(&mut out, &format!("fusion{l}.mca.h"), &layer.mca.mha_h);
            push_ffn(&mut out, &format!("fusion{l}.mca.h.ffn"), &layer.mca.ffn_h);
        }
        if let Some(co) = &self.co_attn {
            push_mha(&mut out, "co_attn", &co.mha);
            push_ffn(&mut out, "co_attn.ffn", &co.ffn);
        }
        push_ffn(&mut out, "head", &self.head);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (prefix, b) in [
            ("backbone_v", &mut self.backbone_v),
            ("backbone_h", &mut self.backbone_h),
        ] {
            for (i, (w, bias)) in b.stages.iter_mut().enumerate() {
                out.push((format!("{prefix}.stage{i}.w"), w));
                out.push((format!("{prefix}.stage{i}.b"), bias));
            }
            out.push((format!("{prefix}.reduce.w"), &mut b.reduce_w));
            out.push((format!("{prefix}.reduce.b"), &mut b.reduce_b));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (tag, msa) in [("msa_v", &mut layer.msa_v), ("msa_h", &mut layer.msa_h)] {
                push_mha_mut(&mut out, &format!("fusion{l}.{tag}"), &mut msa.mha);
                push_ffn_mut(&mut out, &format!("fusion{l}.{tag}.ffn"), &mut msa.ffn);
            }
            push_mha_mut(&mut out, &format!("fusion{l}.mca.v"), &mut layer.mca.mha_v);
            push_ffn_mut(&mut out, &format!("fusion{l}.mca.v.ffn"), &mut layer.mca.ffn_v);
            push_mha_mut(&mut out, &format!("fusion{l}.mca.h"), &mut layer.mca.mha_h);
            push_ffn_mut(&mut out, &format!("fusion{l}.mca.h.ffn"), &mut layer.mca.ffn_h);
        }
        if let Some(co) = &mut self.co_attn {
            push_mha_mut(&mut out, "co_attn", &mut co.mha);
            push_ffn_mut(&mut out, "co_attn.ffn", &mut co.ffn);
        }
        push_ffn_mut(&mut out, "head", &mut self.head);
        out
    }

    /// Insert every parameter as a tape leaf, in `named_params` order.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> FusionModelIds {
        let mut flat = Vec::new();
        let stage_backbone = |tape: &mut Tape, b: &BackboneWeights, flat: &mut Vec<TensorId>| {
            let stages = b
                .stages
                .iter()
                .map(|(w, bias)| {
                    let wi = stage_leaf(tape, w, trainable, flat);
                    let bi = stage_leaf(tape, bias, trainable, flat);
                    (wi, bi)
                })
                .collect();
            let reduce_w = stage_leaf(tape, &b.reduce_w, trainable, flat);
            let reduce_b = stage_leaf(tape, &b.reduce_b, trainable, flat);
            BackboneIds {
                stages,
                reduce_w,
                reduce_b,
            }
        };
        let backbone_v = stage_backbone(tape, &self.backbone_v, &mut flat);
        let backbone_h = stage_backbone(tape, &self.backbone_h, &mut flat);
        let layers = self
            .layers
            .iter()
            .map(|layer| FusionLayerIds {
                msa_v: stage_msa(tape, &layer.msa_v, trainable, &mut flat),
                msa_h: stage_msa(tape, &layer.msa_h, trainable, &mut flat),
                mca: stage_mca(tape, &layer.mca, trainable, &mut flat),
            })
            .collect();
        let co_attn = self
            .co_attn
            .as_ref()
            .map(|co| stage_msa(tape, co, trainable, &mut flat));
        let head = stage_ffn(tape, &self.head, trainable, &mut flat);
        FusionModelIds {
            backbone_v,
            backbone_h,
            layers,
            co_attn,
            head,
            flat,
        }
    }

    /// Forward pass on pre-cropped images (shape `[C, crop_h, crop_w]`),
    /// returning the grasp success probability as a `[1]` tensor.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ids: &FusionModelIds,
        visual: TensorId,
        tactile: TensorId,
    ) -> Result<TensorId> {
        let (visual, tactile) = match self.cfg.mask {
            ModalityMask::None => (visual, tactile),
            ModalityMask::Visual => {
                let z = tape.constant(Tensor::zeros(&image_shape(&self.cfg)));
                (z, tactile)
            }
            ModalityMask::Tactile => {
                let z = tape.constant(Tensor::zeros(&image_shape(&self.cfg)));
                (visual, z)
            }
        };
        let xv = extract_features(tape, visual, &ids.backbone_v, &self.cfg.backbone)?;
        let xh = extract_features(tape, tactile, &ids.backbone_h, &self.cfg.backbone)?;
        let feat = fusion_forward(tape, xv, xh, ids, &self.cfg)?;
        predict(tape, feat, &ids.head)
    }
}

fn image_shape(cfg: &ModelConfig) -> Vec<usize> {
    vec![
        cfg.backbone.in_channels,
        cfg.backbone.input_hw.0,
        cfg.backbone.input_hw.1,
    ]
}

fn push_mha<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, w: &'a MhaWeights) {
    out.push((format!("{prefix}.wq"), &w.wq));
    out.push((format!("{prefix}.wk"), &w.wk));
    out.push((format!("{prefix}.wv"), &w.wv));
    out.push((format!("{prefix}.wo"), &w.wo));
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, w: &'a FfnWeights) {
    out.push((format!("{prefix}.w1"), &w.w1));
    out.push((format!("{prefix}.b1"), &w.b1));
    out.push((format!("{prefix}.w2"), &w.w2));
    out.push((format!("{prefix}.b2"), &w.b2));
}

fn push_mha_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, w: &'a mut MhaWeights) {
    out.push((format!("{prefix}.wq"), &mut w.wq));
    out.push((format!("{prefix}.wk"), &mut w.wk));
    out.push((format!("{prefix}.wv"), &mut w.wv));
    out.push((format!("{prefix}.wo"), &mut w.wo));
}

fn push_ffn_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, w: &'a mut FfnWeights) {
    out.push((format!("{prefix}.w1"), &mut w.w1));
    out.push((format!("{prefix}.b1"), &mut w.b1));
    out.push((format!("{prefix}.w2"), &mut w.w2));
    out.push((format!("{prefix}.b2"), &mut w.b2));
}

fn stage_leaf(tape: &mut Tape, t: &Tensor, trainable: bool, flat: &mut Vec<TensorId>) -> TensorId {
    let mut t = t.clone();
    t.requires_grad = trainable;
    t.grad = None;
    let id = tape.leaf(t);
    flat.push(id);
    id
}

fn stage_msa(tape: &mut Tape, p: &MsaParams, trainable: bool, flat: &mut Vec<TensorId>) -> MsaIds {
    MsaIds {
        mha: stage_mha(tape, &p.mha, trainable, flat),
        ffn: stage_ffn(tape, &p.ffn, trainable, flat),
    }
}

fn stage_mca(tape: &mut Tape, p: &McaParams, trainable: bool, flat: &mut Vec<TensorId>) -> McaIds {
    McaIds {
        mha_v: stage_mha(tape, &p.mha_v, trainable, flat),
        ffn_v: stage_ffn(tape, &p.ffn_v, trainable, flat),
        mha_h: stage_mha(tape, &p.mha_h, trainable, flat),
        ffn_h: stage_ffn(tape, &p.ffn_h, trainable, flat),
    }
}

fn stage_mha(tape: &mut Tape, w: &MhaWeights, trainable: bool, flat: &mut Vec<TensorId>) -> MhaIds {
    MhaIds {
        wq: stage_leaf(tape, &w.wq, trainable, flat),
        wk: stage_leaf(tape, &w.wk, trainable, flat),
        wv: stage_leaf(tape, &w.wv, trainable, flat),
        wo: stage_leaf(tape, &w.wo, trainable, flat),
    }
}

fn stage_ffn(tape: &mut Tape, w: &FfnWeights, trainable: bool, flat: &mut Vec<TensorId>) -> FfnIds {
    FfnIds {
        w1: stage_leaf(tape, &w.w1, trainable, flat),
        b1: stage_leaf(tape, &w.b1, trainable, flat),
        w2: stage_leaf(tape, &w.w2, trainable, flat),
        b2: stage_leaf(tape, &w.b2, trainable, flat),
    }
}

/// Backbone stub: conv stages with ReLU, a 1x1 reduction to width `d`, then
/// spatial flattening into a `[S, d]` sequence.
pub fn extract_features(
    tape: &mut Tape,
    image: TensorId,
    ids: &BackboneIds,
    cfg: &BackboneConfig,
) -> Result<TensorId> {
    let s = tape.shape(image);
    if s.len() != 3 || s[0] != cfg.in_channels || (s[1], s[2]) != cfg.input_hw {
        return Err(Error::ShapeMismatch {
            op: "extract_features",
            lhs: s.to_vec(),
            rhs: vec![cfg.in_channels, cfg.input_hw.0, cfg.input_hw.1],
        });
    }
    let mut x = image;
    for (stage_cfg, (w, b)) in cfg.stages.iter().zip(&ids.stages) {
        x = tape.conv2d(x, *w, stage_cfg.stride, stage_cfg.kernel / 2)?;
        x = tape.add_channel_bias(x, *b)?;
        x = tape.relu(x)?;
    }
    x = tape.conv2d(x, ids.reduce_w, 1, 0)?;
    x = tape.add_channel_bias(x, ids.reduce_b)?;
    // [d, h', w'] -> [S, d]
    let (h, w) = cfg.feature_hw();
    let flat = tape.reshape(x, &[cfg.reduce_dim, h * w])?;
    tape.transpose2d(flat)
}

/// Fusion stack over the two feature sequences, ending in one pooled
/// `[d]` vector: L fusion layers, sequence-axis concatenation, optional
/// co-attention, mean pooling.
pub fn fusion_forward(
    tape: &mut Tape,
    x_v: TensorId,
    x_h: TensorId,
    ids: &FusionModelIds,
    cfg: &ModelConfig,
) -> Result<TensorId> {
    let d = cfg.attn.d_model;
    let (sv, sh) = (tape.shape(x_v).to_vec(), tape.shape(x_h).to_vec());
    if sv.len() != 2 || sh.len() != 2 || sv[1] != d || sh[1] != d {
        return Err(Error::ShapeMismatch {
            op: "fusion_forward",
            lhs: sv,
            rhs: sh,
        });
    }
    let pos_v = tape.constant(sinusoidal_positions(sv[0], d)?);
    let pos_h = tape.constant(sinusoidal_positions(sh[0], d)?);

    let (mut xv, mut xh) = (x_v, x_h);
    for layer in &ids.layers {
        xv = msa_block(tape, xv, pos_v, &layer.msa_v, &cfg.attn)?;
        xh = msa_block(tape, xh, pos_h, &layer.msa_h, &cfg.attn)?;
        let (nv, nh) = mca_block(tape, xv, xh, pos_v, pos_h, &layer.mca, &cfg.attn)?;
        xv = nv;
        xh = nh;
    }
    let mut z = tape.concat(&[xv, xh], 0)?;
    if let Some(co) = &ids.co_attn {
        let pos_z = tape.constant(sinusoidal_positions(sv[0] + sh[0], d)?);
        z = msa_block(tape, z, pos_z, co, &cfg.attn)?;
    }
    tape.mean_axis0(z)
}

/// Prediction head: FFN(d -> hidden -> 1) with ReLU between, then sigmoid.
pub fn predict(tape: &mut Tape, features: TensorId, head: &FfnIds) -> Result<TensorId> {
    let d = tape.shape(features)[0];
    let row = tape.reshape(features, &[1, d])?;
    let logit = ffn(tape, row, head)?;
    let logit = tape.reshape(logit, &[1])?;
    tape.sigmoid(logit)
}

/// Loss reduction over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

/// Probability clamp for the BCE terms.
pub const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy, `-sum_i [y_i log p_i + (1-y_i) log(1-p_i)]`, with
/// probabilities clamped to `[eps, 1-eps]`. `Mean` divides by the batch size.
pub fn bce_loss(
    tape: &mut Tape,
    probs: TensorId,
    labels: &[f64],
    reduction: Reduction,
) -> Result<TensorId> {
    let n = tape.data(probs).len();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract("bce_loss labels must be 0 or 1".into()));
    }
    let shape = tape.shape(probs).to_vec();
    let p = tape.clamp(probs, BCE_EPS, 1.0 - BCE_EPS)?;
    let y = tape.constant(Tensor::from_vec(shape.clone(), labels.to_vec())?);
    let ym1: Vec<f64> = labels.iter().map(|v| 1.0 - v).collect();
    let y1 = tape.constant(Tensor::from_vec(shape, ym1)?);

    let log_p = tape.log(p)?;
    let neg_p = tape.mul_scalar(p, -1.0)?;
    let one_minus_p = tape.add_scalar(neg_p, 1.0)?;
    let log_1mp = tape.log(one_minus_p)?;

    let t1 = tape.mul(y, log_p)?;
    let t2 = tape.mul(y1, log_1mp)?;
    let s = tape.add(t1, t2)?;
    let total = tape.sum(s)?;
    match reduction {
        Reduction::Sum => tape.mul_scalar(total, -1.0),
        Reduction::Mean => tape.mul_scalar(total, -1.0 / n as f64),
    }
}
