//! On-disk formats: the binary checkpoint container, architecture JSON and
//! the CSV metric logs.
//!
//! Checkpoint byte layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "ATNSCKPT"
//! version   u32
//! counters  u32 count, then per entry: name, u64 value
//! texts     u32 count, then per entry: name, u64 length, UTF-8 bytes
//! tensors   u32 count, then per entry: name, u32 rank, rank × u64 dims,
//!           product(dims) × f64
//! name      u32 length, UTF-8 bytes
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::Architecture;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATNSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named blobs in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub counters: Vec<(String, u64)>,
    pub texts: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks counter `{name}`")))
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        self.texts
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks text `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let name = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (n, v) in &self.counters {
            name(&mut out, n);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.texts.len() as u32).to_le_bytes());
        for (n, t) in &self.texts {
            name(&mut out, n);
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (n, t) in &self.tensors {
            name(&mut out, n);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let n = r.name()?;
            ck.counters.push((n, r.u64()?));
        }
        for _ in 0..r.u32()? {
            let n = r.name()?;
            let len = r.u64()? as usize;
            let s = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Corrupt(format!("text `{n}` is not UTF-8")))?;
            ck.texts.push((n, s));
        }
        for _ in 0..r.u32()? {
            let n = r.name()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.tensors.push((n, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint truncated: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("name is not UTF-8".into()))
    }
}

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &ck.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn arch_to_json(arch: &Architecture) -> Result<String> {
    serde_json::to_string_pretty(arch).map_err(|e| Error::Parse(e.to_string()))
}

pub fn arch_from_json(text: &str) -> Result<Architecture> {
    let arch: Architecture = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    arch.validate()?;
    Ok(arch)
}

pub fn save_arch(arch: &Architecture, path: impl AsRef<Path>) -> Result<()> {
    let mut s = arch_to_json(arch)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn load_arch(path: impl AsRef<Path>) -> Result<Architecture> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    arch_from_json(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// One row of a search history: `phase,epoch,split,loss,acc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub phase: String,
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub acc: Option<f64>,
}

/// One row of a training log: `epoch,train_loss,test_top1,test_top5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub test_top1: f64,
    pub test_top5: Option<f64>,
}

pub fn write_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, csv_string(rows)?.as_bytes())
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::CandidateOp;
    use crate::space::MacroConfig;

    #[test]
    fn checkpoint_bytes_round_trip() {
        let ck = Checkpoint {
            counters: vec![("epoch".into(), 3)],
            texts: vec![("note".into(), "héllo".into())],
            tensors: vec![("w".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2))],
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn version_mismatch_is_refused() {
        let mut bytes = Checkpoint::default().to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Incompatible { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn unknown_op_names_the_token() {
        let arch = Architecture::new(MacroConfig::desk(), vec![CandidateOp::NonLocalSa; 4], 1, "h".into()).unwrap();
        let json = arch_to_json(&arch).unwrap().replacen("NonLocalSA", "GlobalConv", 1);
        let err = arch_from_json(&json).unwrap_err().to_string();
        assert!(err.contains("GlobalConv"), "{err}");
        let err = arch_from_json("{\"macro\": ").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn arch_field_order_is_fixed() {
        let arch = Architecture::new(MacroConfig::desk(), vec![CandidateOp::NonLocalSa; 4], 1, "h".into()).unwrap();
        let json = arch_to_json(&arch).unwrap();
        let pos = |k: &str| json.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("macro") < pos("choices"));
        assert!(pos("choices") < pos("seed"));
        assert!(pos("seed") < pos("version"));
    }

    #[test]
    fn history_csv_round_trip() {
        let rows = vec![
            HistoryRow { phase: "car_search".into(), epoch: 1, split: "train".into(), loss: 0.1 + 0.2, acc: None },
            HistoryRow { phase: "finetune".into(), epoch: 1, split: "val".into(), loss: 1.0 / 3.0, acc: Some(0.5) },
        ];
        let s = csv_string(&rows).unwrap();
        assert!(s.starts_with("phase,epoch,split,loss,acc\n"));
        assert_eq!(parse_csv::<HistoryRow>(&s).unwrap(), rows);
    }
}
