//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian): magic `FPC1`, then the model
//! section (dims, per-layer role/activation tags, shapes, row-major `f64`
//! weights and biases), then optional LoRA-block and mask sections flagged
//! by a bitfield. Floats are stored as raw bits, so a round-trip is
//! bit-exact.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Activation, DenseLayer, LayerRole, ModelParams};
use crate::peft::{LayerMask, LoraBlock, SparseMask};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FPC1";
const FLAG_BLOCKS: u8 = 0b01;
const FLAG_MASK: u8 = 0b10;

/// Model weights plus optional PEFT state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub blocks: Option<Vec<LoraBlock>>,
    pub mask: Option<SparseMask>,
}

impl Checkpoint {
    pub fn model_only(model: ModelParams) -> Checkpoint {
        Checkpoint {
            model,
            blocks: None,
            mask: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut flags = 0u8;
        if self.blocks.is_some() {
            flags |= FLAG_BLOCKS;
        }
        if self.mask.is_some() {
            flags |= FLAG_MASK;
        }
        out.push(flags);
        write_model(&mut out, &self.model);
        if let Some(blocks) = &self.blocks {
            write_u32(&mut out, blocks.len() as u32);
            for b in blocks {
                write_u32(&mut out, b.target_layer as u32);
                write_u32(&mut out, b.rank as u32);
                out.extend_from_slice(&b.alpha.to_bits().to_le_bytes());
                write_matrix(&mut out, &b.a);
                write_matrix(&mut out, &b.b);
            }
        }
        if let Some(mask) = &self.mask {
            out.extend_from_slice(&mask.density.to_bits().to_le_bytes());
            out.extend_from_slice(&mask.seed.to_le_bytes());
            write_u32(&mut out, mask.layers.len() as u32);
            for layer in &mask.layers {
                write_bits(&mut out, &layer.weight);
                write_bits(&mut out, &layer.bias);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic (expected FPC1)".to_string()));
        }
        let flags = r.u8()?;
        let model = read_model(&mut r)?;
        let blocks = if flags & FLAG_BLOCKS != 0 {
            let count = r.u32()? as usize;
            let mut blocks = Vec::with_capacity(count);
            for _ in 0..count {
                let target_layer = r.u32()? as usize;
                let rank = r.u32()? as usize;
                let alpha = f64::from_bits(r.u64()?);
                let a = read_matrix(&mut r)?;
                let b = read_matrix(&mut r)?;
                blocks.push(LoraBlock {
                    a,
                    b,
                    rank,
                    alpha,
                    target_layer,
                });
            }
            Some(blocks)
        } else {
            None
        };
        let mask = if flags & FLAG_MASK != 0 {
            let density = f64::from_bits(r.u64()?);
            let seed = r.u64()?;
            let count = r.u32()? as usize;
            let mut layers = Vec::with_capacity(count);
            for _ in 0..count {
                let weight = read_bits(&mut r)?;
                let bias = read_bits(&mut r)?;
                layers.push(LayerMask { weight, bias });
            }
            Some(SparseMask {
                layers,
                density,
                seed,
            })
        } else {
            None
        };
        if !r.at_end() {
            return Err(Error::Checkpoint("trailing bytes".to_string()));
        }
        Ok(Checkpoint {
            model,
            blocks,
            mask,
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn role_tag(role: LayerRole) -> u8 {
    match role {
        LayerRole::Embedding => 0,
        LayerRole::Hidden => 1,
        LayerRole::PreClassification => 2,
        LayerRole::Classification => 3,
    }
}

fn role_from_tag(tag: u8) -> Result<LayerRole> {
    Ok(match tag {
        0 => LayerRole::Embedding,
        1 => LayerRole::Hidden,
        2 => LayerRole::PreClassification,
        3 => LayerRole::Classification,
        _ => return Err(Error::Checkpoint(format!("unknown role tag {tag}"))),
    })
}

fn write_model(out: &mut Vec<u8>, model: &ModelParams) {
    write_u32(out, model.input_dim() as u32);
    write_u32(out, model.num_classes() as u32);
    write_u32(out, model.num_layers() as u32);
    for layer in model.layers() {
        out.push(role_tag(layer.role));
        out.push(match layer.activation {
            Activation::Relu => 1,
            Activation::None => 0,
        });
        write_matrix(out, &layer.weight);
        write_u32(out, layer.bias.len() as u32);
        for &b in &layer.bias {
            out.extend_from_slice(&b.to_bits().to_le_bytes());
        }
    }
}

fn read_model(r: &mut Reader) -> Result<ModelParams> {
    let input_dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let num_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let role = role_from_tag(r.u8()?)?;
        let activation = match r.u8()? {
            1 => Activation::Relu,
            0 => Activation::None,
            t => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        };
        let weight = read_matrix(r)?;
        let bias_len = r.u32()? as usize;
        let mut bias = Vec::with_capacity(bias_len);
        for _ in 0..bias_len {
            bias.push(f64::from_bits(r.u64()?));
        }
        layers.push(DenseLayer {
            weight,
            bias,
            role,
            activation,
        });
    }
    ModelParams::new(layers, input_dim, num_classes)
        .map_err(|e| Error::Checkpoint(format!("invalid model in checkpoint: {e}")))
}

fn write_matrix(out: &mut Vec<u8>, m: &Matrix) {
    write_u32(out, m.rows() as u32);
    write_u32(out, m.cols() as u32);
    for &v in m.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

fn read_matrix(r: &mut Reader) -> Result<Matrix> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(f64::from_bits(r.u64()?));
    }
    if data.len() != rows * cols {
        return Err(Error::Checkpoint("truncated matrix".to_string()));
    }
    // Bypass the finite check: checkpoints must round-trip whatever was
    // stored, and stored models were validated when built.
    Ok(Matrix::from_bits(rows, cols, data))
}

fn write_bits(out: &mut Vec<u8>, bits: &[bool]) {
    write_u32(out, bits.len() as u32);
    let mut byte = 0u8;
    for (i, &b) in bits.iter().enumerate() {
        if b {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if bits.len() % 8 != 0 {
        out.push(byte);
    }
}

fn read_bits(r: &mut Reader) -> Result<Vec<bool>> {
    let len = r.u32()? as usize;
    let bytes = r.take(len.div_ceil(8))?;
    Ok((0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".to_string()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::{pretrain, ModelConfig};
    use crate::peft::{lora_init_random, mask_generate, RankPlan};

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            input_dim: 5,
            embedding_dim: 5,
            hidden_dims: vec![6],
            pre_classification_dim: 6,
            num_classes: 3,
        };
        let ds = synth_generate(3, 5, 30, 2).unwrap();
        let model = pretrain(&cfg, &ds, 1, 0.1, 4).unwrap();
        let plan = RankPlan::by_role(&model, &RankPlan::default_roles(), 2, 3);
        let blocks = plan
            .entries
            .iter()
            .map(|&(idx, r)| lora_init_random(model.layer(idx), idx, r, r as f64, 6).unwrap())
            .collect();
        let mask = mask_generate(&model, 0.25, 8).unwrap();
        Checkpoint {
            model,
            blocks: Some(blocks),
            mask: Some(mask),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        // Byte-stable writer too.
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn model_only_round_trip() {
        let ckpt = Checkpoint::model_only(sample_checkpoint().model);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        assert!(back.blocks.is_none());
        assert!(back.mask.is_none());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let ckpt = sample_checkpoint();
        let mut bytes = ckpt.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }
}
