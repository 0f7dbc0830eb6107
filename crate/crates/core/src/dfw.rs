//! `.dfw` checkpoint files.
//!
//! All integers are little-endian `u64`, all reals little-endian `f64`.
//!
//! ```text
//! "DFW1" hidden_size horizon param_count  param[param_count]
//! ["META" stage:u8 method:u8 mean[4] std[4]]
//! ["IMPV" kind:u8 tasks_seen weight[param_count] anchor[param_count]]
//! ```
//!
//! The header and parameter block are mandatory; the tagged sections are
//! optional and may appear in either order.

use std::fs;
use std::path::Path;

use crate::clreg::{ImportanceKind, ImportanceVector};
use crate::error::{Error, Result};
use crate::nn::{ParamVector, INPUTS};
use crate::train::{Checkpoint, Method, Normalizer};

pub const MAGIC: &[u8; 4] = b"DFW1";
const META: &[u8; 4] = b"META";
const IMPORTANCE: &[u8; 4] = b"IMPV";

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Header plus parameter block.
pub fn encode_params(params: &ParamVector, horizon: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 8 * params.len());
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, params.hidden_size() as u64);
    put_u64(&mut out, horizon as u64);
    put_u64(&mut out, params.len() as u64);
    put_f64s(&mut out, params.values());
    out
}

pub fn encode_importance(out: &mut Vec<u8>, imp: &ImportanceVector) {
    out.extend_from_slice(IMPORTANCE);
    out.push(imp.kind().tag());
    put_u64(out, imp.tasks_seen());
    put_f64s(out, imp.weights());
    put_f64s(out, imp.anchor());
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = encode_params(&c.params, c.horizon);
    out.extend_from_slice(META);
    out.push(c.stage);
    out.push(c.method.tag());
    put_f64s(&mut out, &c.normalizer.mean);
    put_f64s(&mut out, &c.normalizer.std);
    if let Some(imp) = &c.importance {
        encode_importance(&mut out, imp);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::InvalidInput(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::InvalidInput("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Everything a `.dfw` file may hold.
#[derive(Debug, Clone)]
pub struct DecodedFile {
    pub params: ParamVector,
    pub horizon: usize,
    pub meta: Option<(u8, Method, Normalizer)>,
    pub importance: Option<ImportanceVector>,
}

pub fn decode(buf: &[u8]) -> Result<DecodedFile> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::InvalidInput("not a DFW1 checkpoint (bad magic)".into()));
    }
    let hidden = r.u64()? as usize;
    let horizon = r.u64()? as usize;
    let count = r.u64()? as usize;
    if count > buf.len() / 8 {
        return Err(Error::InvalidInput(format!("parameter count {count} exceeds file size")));
    }
    let params = ParamVector::from_values(hidden, r.f64s(count)?)?;
    let mut meta = None;
    let mut importance = None;
    while !r.done() {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        match &tag {
            META => {
                let stage = r.u8()?;
                let method = Method::from_tag(r.u8()?)
                    .ok_or_else(|| Error::InvalidInput("unknown method tag".into()))?;
                let mean: [f64; INPUTS] = r.f64s(INPUTS)?.try_into().expect("4 values");
                let std: [f64; INPUTS] = r.f64s(INPUTS)?.try_into().expect("4 values");
                meta = Some((stage, method, Normalizer { mean, std }));
            }
            IMPORTANCE => {
                let kind = ImportanceKind::from_tag(r.u8()?)
                    .ok_or_else(|| Error::InvalidInput("unknown importance kind".into()))?;
                let tasks_seen = r.u64()?;
                let weights = r.f64s(count)?;
                let anchor = r.f64s(count)?;
                importance = Some(ImportanceVector::new(kind, weights, anchor, tasks_seen)?);
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown checkpoint section {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }
    Ok(DecodedFile {
        params,
        horizon,
        meta,
        importance,
    })
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let file = decode(buf)?;
    let (stage, method, normalizer) = file
        .meta
        .ok_or_else(|| Error::InvalidInput("checkpoint lacks its META section".into()))?;
    Ok(Checkpoint {
        method,
        stage,
        horizon: file.horizon,
        params: file.params,
        normalizer,
        importance: file.importance,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(c)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf).map_err(|e| match e {
        Error::InvalidInput(message) | Error::InvalidArgument(message) => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            event_id: None,
            message,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use proptest::prelude::*;

    fn checkpoint(hidden: usize, seed: u64, with_imp: bool) -> Checkpoint {
        let params = init_params(hidden, seed).unwrap();
        let n = params.len();
        let importance = with_imp.then(|| {
            ImportanceVector::new(
                ImportanceKind::Mas,
                (0..n).map(|i| i as f64 * 0.5).collect(),
                params.values().to_vec(),
                2,
            )
            .unwrap()
        });
        Checkpoint {
            method: Method::Mas,
            stage: 2,
            horizon: 10,
            params,
            normalizer: Normalizer {
                mean: [1.0, 2.0, 3.0, 4.0],
                std: [0.5, 0.25, 2.0, 8.0],
            },
            importance,
        }
    }

    #[test]
    fn header_layout() {
        let p = init_params(1, 0).unwrap();
        let bytes = encode_params(&p, 10);
        assert_eq!(&bytes[..4], b"DFW1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 10);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 26);
        assert_eq!(bytes.len(), 28 + 26 * 8);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.params, p);
        assert!(back.meta.is_none() && back.importance.is_none());
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"DFW2").is_err());
        let mut bytes = encode_checkpoint(&checkpoint(2, 1, true));
        bytes.truncate(bytes.len() - 3);
        assert!(decode(&bytes).is_err());
        let mut bytes = encode_params(&init_params(2, 1).unwrap(), 10);
        bytes.extend_from_slice(b"ZZZZ");
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip(hidden in 1usize..6, seed in 0u64..100, with_imp in any::<bool>()) {
            let c = checkpoint(hidden, seed, with_imp);
            let back = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
