//! Checkpoint file format, all integers and reals little-endian:
//!
//! ```text
//! "MCGU" | version: u32 | body_len: u64 | body | crc32(everything before): u32
//! body  = config: 7 × u64 | count: u64 | count × record
//! record = name_len: u32 | name (UTF-8) | rank: u32 | rank × u64 extents | f64 data
//! ```
//!
//! Config fields are base_filters, dense_blocks, reduction_ratio,
//! input_channels, height, width, classes. Records cover every store entry,
//! batch-norm running statistics included, in creation order.

use std::fs;
use std::path::Path;

use crate::blocks::{Mcgu, ModelConfig};
use crate::error::{Error, PersistError, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"MCGU";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;

fn config_fields(c: &ModelConfig) -> [usize; 7] {
    [
        c.base_filters,
        c.dense_blocks,
        c.reduction_ratio,
        c.input_channels,
        c.height,
        c.width,
        c.classes,
    ]
}

pub fn encode_checkpoint(model: &Mcgu) -> Vec<u8> {
    let mut body = Vec::new();
    for v in config_fields(&model.config) {
        body.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let store = &model.store;
    body.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let value = store.get(id);
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name);
        body.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in value.data() {
            body.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(PREFIX + body.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PersistError::Malformed(format!("record runs past the body at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, PersistError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| PersistError::Malformed(format!("value {v} does not fit in memory")))
    }
}

/// Verifies framing and CRC, rebuilds the model from its config and
/// overwrites every entry with the stored values.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Mcgu> {
    if bytes.len() < 4 {
        return Err(PersistError::Truncated.into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(PersistError::BadMagic(magic).into());
    }
    if bytes.len() < PREFIX {
        return Err(PersistError::Truncated.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(PersistError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(body_len)
        .ok()
        .and_then(|n| n.checked_add(PREFIX))
        .ok_or(PersistError::Truncated)?;
    if bytes.len() < end + 4 {
        return Err(PersistError::Truncated.into());
    }
    if bytes.len() > end + 4 {
        return Err(PersistError::Malformed(format!("{} trailing bytes", bytes.len() - end - 4)).into());
    }
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..end]);
    if stored != computed {
        return Err(PersistError::Crc { stored, computed }.into());
    }

    let mut r = Reader {
        bytes: &bytes[PREFIX..end],
        pos: 0,
    };
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = r.usize()?;
    }
    let config = ModelConfig {
        base_filters: f[0],
        dense_blocks: f[1],
        reduction_ratio: f[2],
        input_channels: f[3],
        height: f[4],
        width: f[5],
        classes: f[6],
    };
    let mut model = Mcgu::new(config, 0)?;
    let count = r.usize()?;
    if count != model.store.len() {
        return Err(PersistError::Malformed(format!(
            "{count} records for a model with {} entries",
            model.store.len()
        ))
        .into());
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| PersistError::Malformed("record name is not UTF-8".into()))?;
        if name != model.store.name(id) {
            return Err(PersistError::Malformed(format!(
                "record {name:?} where {:?} was expected",
                model.store.name(id)
            ))
            .into());
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        if shape != model.store.get(id).shape() {
            return Err(PersistError::Malformed(format!(
                "record {name:?} has shape {shape:?}, model expects {:?}",
                model.store.get(id).shape()
            ))
            .into());
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.store.set(id, Tensor::new(&shape, data)?)?;
    }
    if r.pos != r.bytes.len() {
        return Err(PersistError::Malformed(format!("{} unread body bytes", r.bytes.len() - r.pos)).into());
    }
    Ok(model)
}

pub fn save(model: &Mcgu, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Mcgu> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn tiny() -> Mcgu {
        let cfg = ModelConfig {
            base_filters: 2,
            dense_blocks: 1,
            reduction_ratio: 2,
            input_channels: 1,
            height: 8,
            width: 8,
            classes: 2,
        };
        let mut m = Mcgu::new(cfg, 4).unwrap();
        // Make the BN buffers non-trivial so they are seen by the round trip.
        let x = Tensor::uniform(&[2, 1, 8, 8], 1.0, &mut Rng::new(1))
            .unwrap()
            .map(|v| v + 1.0);
        let mut tape = crate::numerics::Tape::new();
        let xv = tape.constant(x);
        m.forward(&mut tape, xv, crate::layers::Mode::Train).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = tiny();
        let back = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        assert_eq!(back.config, m.config);
        assert!(back.store.bitwise_eq(&m.store));
    }

    #[test]
    fn payload_corruption_is_crc_error() {
        let mut bytes = encode_checkpoint(&tiny());
        let i = bytes.len() - 20;
        bytes[i] ^= 0x01;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Persist(PersistError::Crc { .. }))
        ));
    }

    #[test]
    fn framing_errors_are_distinct() {
        let bytes = encode_checkpoint(&tiny());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Persist(PersistError::BadMagic(_)))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Persist(PersistError::Version { found: 9, .. }))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Persist(PersistError::Truncated))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..2]),
            Err(Error::Persist(PersistError::Truncated))
        ));
    }
}
