//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LSWR"  u32 version
//! u32 in_channels, embed_dim, num_blocks, layers_per_block, window_side,
//!     num_heads; f64 mlp_ratio; u32 upscale, attention_kind (0 kernel,
//!     1 softmax)
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u32 ndim, u32 dims[ndim],
//!             f64 payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AttentionKind, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LSWR";
pub const VERSION: u32 = 1;

pub fn encode(weights: &ModelWeights, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let u32_of =
        |v: usize| u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.in_channels,
        cfg.embed_dim,
        cfg.num_blocks,
        cfg.layers_per_block,
        cfg.window_side,
        cfg.num_heads,
    ] {
        out.extend_from_slice(&u32_of(v)?.to_le_bytes());
    }
    out.extend_from_slice(&cfg.mlp_ratio.to_le_bytes());
    out.extend_from_slice(&u32_of(cfg.upscale)?.to_le_bytes());
    let kind: u32 = match cfg.attention_kind {
        AttentionKind::Kernel => 0,
        AttentionKind::Softmax => 1,
    };
    out.extend_from_slice(&kind.to_le_bytes());
    let named = weights.named();
    out.extend_from_slice(&u32_of(named.len())?.to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.ndim())?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(format!(
                    "truncated checkpoint: wanted {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelWeights, ModelConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)
        .map_err(|_| Error::format("not a checkpoint: file too short"))?
        != MAGIC
    {
        return Err(Error::format("not a checkpoint: bad magic"));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}, this build reads version {VERSION}"
        )));
    }
    let mut ints = [0usize; 6];
    for v in &mut ints {
        *v = r.u32()?;
    }
    let mlp_ratio = r.f64()?;
    let upscale = r.u32()?;
    let attention_kind = match r.u32()? {
        0 => AttentionKind::Kernel,
        1 => AttentionKind::Softmax,
        k => return Err(Error::format(format!("unknown attention kind tag {k}"))),
    };
    let cfg = ModelConfig {
        in_channels: ints[0],
        embed_dim: ints[1],
        num_blocks: ints[2],
        layers_per_block: ints[3],
        window_side: ints[4],
        num_heads: ints[5],
        mlp_ratio,
        upscale,
        attention_kind,
    };
    cfg.validate()
        .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    let layout = ModelWeights::layout(&cfg)?;

    let count = r.u32()?;
    let expected = layout.named();
    if count != expected.len() {
        return Err(Error::format(format!(
            "checkpoint holds {count} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, spec) in &expected {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?;
        if name != want_name {
            return Err(Error::format(format!(
                "expected tensor {want_name}, found {name}"
            )));
        }
        let ndim = r.u32()?;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u32()?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::format(format!("dimensions of {name} overflow: {dims:?}")))?;
        if dims != spec.shape {
            return Err(Error::format(format!(
                "tensor {name} has shape {dims:?}, config implies {:?}",
                spec.shape
            )));
        }
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    let mut it = tensors.into_iter();
    let weights = layout.map(&mut |_, _| it.next().expect("tensor count checked above"));
    Ok((weights, cfg))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<()> {
    std::fs::write(path, encode(weights, cfg)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelWeights, ModelConfig)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            num_blocks: 1,
            layers_per_block: 2,
            window_side: 4,
            num_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for kind in [AttentionKind::Kernel, AttentionKind::Softmax] {
            let cfg = tiny().with_kind(kind);
            let w = init_weights(&cfg, 3).unwrap();
            let bytes = encode(&w, &cfg).unwrap();
            let (back, cfg2) = decode(&bytes).unwrap();
            assert_eq!(cfg2, cfg);
            for ((_, a), (_, b)) in w.named().iter().zip(back.named()) {
                assert_eq!(a.shape(), b.shape());
                assert!(a
                    .data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            assert_eq!(encode(&back, &cfg2).unwrap(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let cfg = tiny();
        let b = encode(&init_weights(&cfg, 0).unwrap(), &cfg).unwrap();
        assert_eq!(&b[..4], b"LSWR");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[3, 0, 0, 0]);
        assert_eq!(&b[12..16], &[8, 0, 0, 0]);
        assert_eq!(&b[32..40], &2.0f64.to_le_bytes());
        let name_len = u32::from_le_bytes(b[52..56].try_into().unwrap()) as usize;
        assert_eq!(&b[56..56 + name_len], b"shallow.weight");
    }

    #[test]
    fn rejects_corruption() {
        let cfg = tiny();
        let good = encode(&init_weights(&cfg, 0).unwrap(), &cfg).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("magic"));
        let mut v2 = good.clone();
        v2[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(decode(&v2).unwrap_err().to_string().contains("version 2"));
        assert!(decode(&good[..good.len() - 3])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(decode(&good[..2]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn rejects_overflowing_dims() {
        let cfg = tiny();
        let mut b = encode(&init_weights(&cfg, 0).unwrap(), &cfg).unwrap();
        // First tensor: name at 56, then ndim, then four dims.
        let dims_at = 56 + "shallow.weight".len() + 4;
        for k in 0..4 {
            b[dims_at + 4 * k..dims_at + 4 * k + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode(&b).unwrap_err().to_string().contains("overflow"));
    }
}
