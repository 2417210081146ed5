//! "XMF1" model checkpoints: a self-describing binary container holding a
//! model-kind tag, a kind-specific config block, and named float32 parameter
//! records. Everything is little-endian.

use crate::attention::MhaConfig;
use crate::error::{Error, Result};
use crate::fusion::{ArchVariant, BackboneConfig, ConvStage, FusionModel, ModalityMask, ModelConfig};
use crate::io_util::*;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"XMF1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Fusion = 0,
    GanGenerator = 1,
    GanDiscriminator = 2,
}

impl ModelKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(ModelKind::Fusion),
            1 => Ok(ModelKind::GanGenerator),
            2 => Ok(ModelKind::GanDiscriminator),
            other => Err(Error::Format(format!("unknown model kind {other}"))),
        }
    }
}

/// Write a checkpoint: magic, version, kind, config block, named parameters.
pub fn write_checkpoint(
    path: &Path,
    kind: ModelKind,
    config_block: &[u8],
    params: &[(String, &Tensor)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, kind as u32)?;
    write_u32(&mut w, config_block.len() as u32)?;
    w.write_all(config_block)?;
    write_u32(&mut w, params.len() as u32)?;
    for (name, t) in params {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape().len() as u32)?;
        for &e in t.shape() {
            write_u32(&mut w, e as u32)?;
        }
        write_f32_slice(&mut w, t.data())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back: kind, config block, named parameters.
pub fn read_checkpoint(path: &Path) -> Result<(ModelKind, Vec<u8>, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, &MAGIC, "checkpoint")?;
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let kind = ModelKind::from_u32(read_u32(&mut r)?)?;
    let cfg_len = read_u32(&mut r)? as usize;
    let mut config_block = vec![0u8; cfg_len];
    r.read_exact(&mut config_block)?;
    let n_params = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format("parameter name too long".into()));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = read_f32_vec(&mut r, numel)?;
        params.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok((kind, config_block, params))
}

fn encode_variant(v: ArchVariant) -> u32 {
    match v {
        ArchVariant::FullFusion => 0,
        ArchVariant::CoAttentionOnly => 1,
        ArchVariant::ConcatFusion => 2,
    }
}

fn decode_variant(v: u32) -> Result<ArchVariant> {
    match v {
        0 => Ok(ArchVariant::FullFusion),
        1 => Ok(ArchVariant::CoAttentionOnly),
        2 => Ok(ArchVariant::ConcatFusion),
        other => Err(Error::Format(format!("unknown arch variant {other}"))),
    }
}

fn encode_mask(m: ModalityMask) -> u32 {
    match m {
        ModalityMask::None => 0,
        ModalityMask::Visual => 1,
        ModalityMask::Tactile => 2,
    }
}

fn decode_mask(v: u32) -> Result<ModalityMask> {
    match v {
        0 => Ok(ModalityMask::None),
        1 => Ok(ModalityMask::Visual),
        2 => Ok(ModalityMask::Tactile),
        other => Err(Error::Format(format!("unknown modality mask {other}"))),
    }
}

pub fn encode_model_config(cfg: &ModelConfig) -> Vec<u8> {
    let mut b = Vec::new();
    let mut push = |v: u32| b.extend_from_slice(&v.to_le_bytes());
    push(cfg.attn.d_model as u32);
    push(cfg.attn.n_heads as u32);
    push(cfg.d_ff as u32);
    push(cfg.n_fusion_layers as u32);
    push(cfg.head_hidden as u32);
    push(encode_variant(cfg.variant));
    push(encode_mask(cfg.mask));
    push(cfg.backbone.in_channels as u32);
    push(cfg.backbone.input_hw.0 as u32);
    push(cfg.backbone.input_hw.1 as u32);
    push(cfg.backbone.stages.len() as u32);
    for s in &cfg.backbone.stages {
        push(s.out_channels as u32);
        push(s.kernel as u32);
        push(s.stride as u32);
    }
    push(cfg.backbone.reduce_dim as u32);
    push(cfg.source_hw.0 as u32);
    push(cfg.source_hw.1 as u32);
    push(cfg.resize_hw.0 as u32);
    push(cfg.resize_hw.1 as u32);
    b
}

pub fn decode_model_config(block: &[u8]) -> Result<ModelConfig> {
    let mut off = 0usize;
    let mut next = || -> Result<u32> {
        if off + 4 > block.len() {
            return Err(Error::Format("truncated model config block".into()));
        }
        let v = u32::from_le_bytes([block[off], block[off + 1], block[off + 2], block[off + 3]]);
        off += 4;
        Ok(v)
    };
    let d_model = next()? as usize;
    let n_heads = next()? as usize;
    let d_ff = next()? as usize;
    let n_fusion_layers = next()? as usize;
    let head_hidden = next()? as usize;
    let variant = decode_variant(next()?)?;
    let mask = decode_mask(next()?)?;
    let in_channels = next()? as usize;
    let input_hw = (next()? as usize, next()? as usize);
    let n_stages = next()? as usize;
    if n_stages > 64 {
        return Err(Error::Format("implausible backbone stage count".into()));
    }
    let mut stages = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stages.push(ConvStage {
            out_channels: next()? as usize,
            kernel: next()? as usize,
            stride: next()? as usize,
        });
    }
    let reduce_dim = next()? as usize;
    let source_hw = (next()? as usize, next()? as usize);
    let resize_hw = (next()? as usize, next()? as usize);
    Ok(ModelConfig {
        attn: MhaConfig::new(d_model, n_heads)
            .map_err(|e| Error::Format(format!("bad attention config: {e}")))?,
        d_ff,
        n_fusion_layers,
        head_hidden,
        variant,
        mask,
        backbone: BackboneConfig {
            in_channels,
            input_hw,
            stages,
            reduce_dim,
        },
        source_hw,
        resize_hw,
    })
}

impl FusionModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = encode_model_config(&self.cfg);
        write_checkpoint(path, ModelKind::Fusion, &cfg, &self.named_params())
    }

    pub fn load(path: &Path) -> Result<FusionModel> {
        let (kind, cfg_block, params) = read_checkpoint(path)?;
        if kind != ModelKind::Fusion {
            return Err(Error::Format(format!(
                "expected a fusion checkpoint, found {kind:?}"
            )));
        }
        let cfg = decode_model_config(&cfg_block)?;
        let mut model = FusionModel::init(cfg, 0)?;
        fill_params(model.named_params_mut(), params, "fusion checkpoint")?;
        Ok(model)
    }
}

/// Replace every model parameter from the named records, rejecting missing,
/// unknown, or mis-shaped entries.
pub(crate) fn fill_params(
    targets: Vec<(String, &mut Tensor)>,
    mut records: Vec<(String, Tensor)>,
    what: &str,
) -> Result<()> {
    let n_expected = targets.len();
    if records.len() != n_expected {
        return Err(Error::Format(format!(
            "{what}: expected {n_expected} parameters, found {}",
            records.len()
        )));
    }
    let mut by_name: std::collections::HashMap<String, Tensor> = records.drain(..).collect();
    for (name, slot) in targets {
        let t = by_name
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("{what}: missing parameter {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "{what}: parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}
