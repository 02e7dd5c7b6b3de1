//! Binary weight snapshots: magic, version, config, then parameters, all
//! little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Encoder, ModelError, TransformerConfig};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"ELMW";
pub const SNAPSHOT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Snapshot(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_snapshot(enc: &Encoder) -> Result<Vec<u8>, ModelError> {
    let c = enc.config();
    let mut out = Vec::with_capacity(4 + 4 * 10 + 8 * enc.num_params());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    for v in [c.layers, c.hidden_size, c.ffn_size, c.heads, c.vocab_size, c.max_seq_len] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&((c.seed & 0xffff_ffff) as u32).to_le_bytes());
    out.extend_from_slice(&((c.seed >> 32) as u32).to_le_bytes());
    for p in enc.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Encoder, ModelError> {
    let bad = |m: &str| ModelError::Snapshot(m.to_string());
    if bytes.len() < 8 + 8 * 4 || &bytes[..4] != SNAPSHOT_MAGIC {
        return Err(bad("not a weight snapshot"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != SNAPSHOT_VERSION {
        return Err(ModelError::Snapshot(format!("unsupported version {version}")));
    }
    let config = TransformerConfig {
        layers: word(1) as usize,
        hidden_size: word(2) as usize,
        ffn_size: word(3) as usize,
        heads: word(4) as usize,
        vocab_size: word(5) as usize,
        max_seq_len: word(6) as usize,
        seed: word(7) as u64 | (word(8) as u64) << 32,
    };
    config.validate()?;
    let body = &bytes[4 + 4 * 9..];
    if body.len() % 8 != 0 {
        return Err(bad("truncated parameter block"));
    }
    let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Encoder::from_params(config, params)
}

pub fn write_snapshot(enc: &Encoder, path: &Path) -> Result<(), ModelError> {
    let bytes = encode_snapshot(enc)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Encoder, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_snapshot(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let c = TransformerConfig { layers: 2, hidden_size: 8, ffn_size: 16, heads: 2, vocab_size: 9, max_seq_len: 5, seed: u64::MAX - 3 };
        let enc = Encoder::new(c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        write_snapshot(&enc, &path).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back.config(), enc.config());
        assert!(back.params().iter().zip(enc.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_corruption() {
        let c = TransformerConfig { layers: 1, hidden_size: 4, ffn_size: 4, heads: 1, vocab_size: 5, max_seq_len: 3, seed: 0 };
        let bytes = encode_snapshot(&Encoder::new(c).unwrap()).unwrap();
        assert!(decode_snapshot(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode_snapshot(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_snapshot(&wrong).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(decode_snapshot(&version).is_err());
    }
}
