//! Model checkpoint file.
//!
//! ```text
//! "ICUB1"
//! config:  layers, hidden, heads, ffn_dim, max_seq_len: u32 | dropout: f64
//!          window_minutes, pre_dim: u32 | embed_dropout: f64
//!          head kind: u8 (0 pre-train, 1 task)
//!          pre-train: n_features, n_values: u32
//!          task:      out_dim: u32 | final_dropout: f64
//! count: u32
//! count × ( name_len: u32 | name: utf-8 | rank: u32 | rank × dim: u32 | f32 values )
//! ```
//!
//! Little-endian throughout; values in row-major order.

use std::path::Path;

use ndarray::Array2;

use crate::encoder::{EncoderConfig, HeadConfig, Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ICUB1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::FormatError(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_config(out: &mut Vec<u8>, c: &ModelConfig) -> Result<()> {
    let e = &c.encoder;
    for v in [e.layers, e.hidden, e.heads, e.ffn_dim, e.max_seq_len] {
        put_u32(out, v)?;
    }
    out.extend_from_slice(&e.dropout.to_le_bytes());
    put_u32(out, c.window_minutes as usize)?;
    put_u32(out, c.pre_dim)?;
    out.extend_from_slice(&c.embed_dropout.to_le_bytes());
    match c.head {
        HeadConfig::Pretrain { n_features, n_values } => {
            out.push(0);
            put_u32(out, n_features)?;
            put_u32(out, n_values)?;
        }
        HeadConfig::Finetune { out_dim, final_dropout } => {
            out.push(1);
            put_u32(out, out_dim)?;
            out.extend_from_slice(&final_dropout.to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode_checkpoint(config: &ModelConfig, params: &Params<f32>) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_config(&mut out, config)?;
    put_u32(&mut out, params.names.len())?;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 2)?;
        put_u32(&mut out, t.nrows())?;
        put_u32(&mut out, t.ncols())?;
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::FormatError(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let dropout = r.f64()?;
    let window_minutes = r.u32()? as u32;
    let pre_dim = r.u32()?;
    let embed_dropout = r.f64()?;
    let head = match r.u8()? {
        0 => HeadConfig::Pretrain {
            n_features: r.u32()?,
            n_values: r.u32()?,
        },
        1 => HeadConfig::Finetune {
            out_dim: r.u32()?,
            final_dropout: r.f64()?,
        },
        k => return Err(Error::FormatError(format!("unknown head kind {k}"))),
    };
    let config = ModelConfig {
        encoder: EncoderConfig {
            layers: dims[0],
            hidden: dims[1],
            heads: dims[2],
            ffn_dim: dims[3],
            max_seq_len: dims[4],
            dropout,
        },
        window_minutes,
        pre_dim,
        embed_dropout,
        head,
    };
    config
        .validate()
        .map_err(|e| Error::FormatError(format!("stored config is invalid: {e}")))?;
    Ok(config)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Params<f32>)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::FormatError("missing ICUB1 header".into()));
    }
    let config = read_config(&mut r)?;
    let count = r.u32()?;
    let mut params = Params {
        names: Vec::new(),
        tensors: Vec::new(),
    };
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::FormatError("parameter name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if !(1..=2).contains(&rank) {
            return Err(Error::FormatError(format!("{name}: unsupported rank {rank}")));
        }
        let mut dims = [1usize; 2];
        for d in dims.iter_mut().skip(2 - rank) {
            *d = r.u32()?;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::FormatError(format!("{name}: shape overflows")))?;
        let data: Vec<f32> = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Array2::from_shape_vec((dims[0], dims[1]), data).expect("length checked");
        params.names.push(name);
        params.tensors.push(t);
    }
    if r.at != bytes.len() {
        return Err(Error::FormatError(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok((config, params))
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(&model.config, &model.params)?;
    write_atomic(path, |w| std::io::Write::write_all(w, &bytes))
}

/// Loads a checkpoint into the model its stored config describes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, params) = decode_checkpoint(&bytes)?;
    Model::from_params(config, params)
        .map_err(|e| Error::FormatError(format!("parameters do not match the stored config: {e}")))
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model<f32>> {
    let model = load_checkpoint(path)?;
    if model.config != *expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {:?}, expected {:?}",
            model.config, expected
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        let enc = EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            max_seq_len: 6,
            dropout: 0.1,
        };
        Model::init(ModelConfig::pretrain(enc, 4, 12, 7), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = tiny();
        let bytes = encode_checkpoint(&m.config, &m.params).unwrap();
        let (config, params) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(config, m.config);
        assert_eq!(params.names, m.params.names);
        for (a, b) in params.tensors.iter().zip(&m.params.tensors) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode_checkpoint(&config, &params).unwrap(), bytes);
    }

    #[test]
    fn task_head_round_trip() {
        let m = tiny().with_task_head(3, 0.2, 1).unwrap();
        let bytes = encode_checkpoint(&m.config, &m.params).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap().0, m.config);
    }

    #[test]
    fn wrong_config_rejected() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let mut other = m.config;
        other.encoder.hidden = 16;
        assert!(matches!(load_checkpoint_as(&p, &other), Err(Error::ConfigMismatch(_))));
        assert!(load_checkpoint_as(&p, &m.config).is_ok());
    }

    #[test]
    fn corruption_rejected() {
        let m = tiny();
        let bytes = encode_checkpoint(&m.config, &m.params).unwrap();
        for cut in [0, 3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::FormatError(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::FormatError(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::FormatError(_))));
    }
}
