//! Model checkpoint container: a small header (format version plus a
//! config echo string) followed by named records of little-endian f32
//! values. Round trips are bit-exact.

use crate::error::{IonError, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"IONCKPT1";

/// One named tensor-or-buffer record.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StateRecord {
    pub fn from_values(name: String, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        StateRecord { name, shape, data }
    }
}

pub fn save_checkpoint(path: &Path, config_echo: &str, records: &[StateRecord]) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let echo = config_echo.as_bytes();
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        let name = rec.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(rec.shape.len() as u8);
        for &d in &rec.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &rec.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<StateRecord>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(IonError::Format(format!(
                "checkpoint truncated at offset {} (need {n} bytes)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(IonError::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32_at(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(IonError::Format(format!("unsupported checkpoint version {version}")));
    }
    let echo_len = u32_at(&mut pos)? as usize;
    let echo = String::from_utf8_lossy(take(&mut pos, echo_len)?).into_owned();
    let n_records = u32_at(&mut pos)? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let name_len = u32_at(&mut pos)? as usize;
        let name = String::from_utf8_lossy(take(&mut pos, name_len)?).into_owned();
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32_at(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(StateRecord { name, shape, data });
    }
    Ok((echo, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ionckpt");
        let records = vec![
            StateRecord::from_values("a.w".into(), vec![2, 3], vec![1.0, -2.5, 3.25e-8, 0.0, f32::MIN_POSITIVE, 7.0]),
            StateRecord::from_values("a.b".into(), vec![1], vec![0.5]),
        ];
        save_checkpoint(&path, "{\"n\":2}", &records).unwrap();
        let (echo, back) = load_checkpoint(&path).unwrap();
        assert_eq!(echo, "{\"n\":2}");
        assert_eq!(back, records);
        for (a, b) in back[0].data.iter().zip(&records[0].data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ionckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(&path, b"IONCKPT1\x01\x00\x00").unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("truncated"));
    }
}
