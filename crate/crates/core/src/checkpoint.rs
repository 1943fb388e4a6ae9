//! Tensor archive: a text manifest followed by a little-endian payload.
//!
//! ```text
//! movelab-checkpoint 1
//! meta <key> <json string>
//! tensor <name> <f32|f64> <d0,d1,..|scalar> <offset> <nbytes>
//! end
//! <payload>
//! ```
//! Offsets are relative to the first payload byte; tensors are stored in
//! manifest order with no padding.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const MAGIC: &str = "movelab-checkpoint 1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageDtype {
    F32,
    #[default]
    F64,
}

impl StorageDtype {
    fn name(self) -> &'static str {
        match self {
            StorageDtype::F32 => "f32",
            StorageDtype::F64 => "f64",
        }
    }

    fn bytes(self) -> usize {
        match self {
            StorageDtype::F32 => 4,
            StorageDtype::F64 => 8,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(StorageDtype::F32),
            "f64" => Ok(StorageDtype::F64),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint<S> {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<S>)>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn next_line<R: BufRead>(r: &mut R, line: &mut String) -> Result<()> {
    line.clear();
    if r.read_line(line)? == 0 {
        return Err(fmt_err("truncated manifest"));
    }
    if line.ends_with('\n') {
        line.pop();
    }
    Ok(())
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl<S: Scalar> Checkpoint<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| fmt_err(format!("checkpoint lacks {key:?}")))
    }

    pub fn write_to<W: Write>(&self, mut w: W, dtype: StorageDtype) -> Result<()> {
        let mut head = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            if !valid_token(k) {
                return Err(fmt_err(format!("meta key {k:?} must be a nonempty word")));
            }
            head += &format!("meta {k} {}\n", serde_json::to_string(v).expect("strings serialize"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if !valid_token(name) {
                return Err(fmt_err(format!("tensor name {name:?} must be a nonempty word")));
            }
            let dims = if t.rank() == 0 {
                "scalar".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            let nbytes = t.numel() * dtype.bytes();
            head += &format!("tensor {name} {} {dims} {offset} {nbytes}\n", dtype.name());
            offset += nbytes;
        }
        head += "end\n";
        w.write_all(head.as_bytes())?;
        let mut buf = Vec::with_capacity(offset);
        for (_, t) in &self.tensors {
            match dtype {
                StorageDtype::F64 => t.data().iter().for_each(|x| buf.extend_from_slice(&x.as_f64().to_le_bytes())),
                StorageDtype::F32 => {
                    t.data().iter().for_each(|x| buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()))
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Parses and validates the whole manifest before decoding any tensor.
    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        next_line(&mut r, &mut line)?;
        if line != MAGIC {
            return Err(fmt_err("not a movelab checkpoint"));
        }
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        let mut expected_offset = 0usize;
        loop {
            next_line(&mut r, &mut line)?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), Some(v)) => {
                    let v: String = serde_json::from_str(v).map_err(|e| fmt_err(format!("meta {k}: {e}")))?;
                    meta.insert(k.to_string(), v);
                }
                (Some("tensor"), Some(name), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [dtype, dims, offset, nbytes] = f[..] else {
                        return Err(fmt_err(format!("bad tensor line {line:?}")));
                    };
                    let dtype = StorageDtype::parse(dtype)?;
                    let shape: Vec<usize> = if dims == "scalar" {
                        vec![]
                    } else {
                        dims.split(',')
                            .map(|d| d.parse().map_err(|_| fmt_err(format!("bad dims {dims:?}"))))
                            .collect::<Result<_>>()?
                    };
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(format!("bad number {s:?}")));
                    let (offset, nbytes) = (parse(offset)?, parse(nbytes)?);
                    let numel: usize = shape.iter().product();
                    if offset != expected_offset || nbytes != numel * dtype.bytes() {
                        return Err(fmt_err(format!("tensor {name}: inconsistent offset or size")));
                    }
                    expected_offset += nbytes;
                    entries.push((name.to_string(), dtype, shape, nbytes));
                }
                _ => return Err(fmt_err(format!("bad manifest line {line:?}"))),
            }
        }
        let mut payload = Vec::with_capacity(expected_offset);
        r.read_to_end(&mut payload)?;
        if payload.len() != expected_offset {
            return Err(fmt_err(format!("payload has {} bytes, manifest lists {expected_offset}", payload.len())));
        }
        let mut tensors = Vec::with_capacity(entries.len());
        let mut at = 0;
        for (name, dtype, shape, nbytes) in entries {
            let bytes = &payload[at..at + nbytes];
            at += nbytes;
            let data: Vec<S> = match dtype {
                StorageDtype::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect(),
                StorageDtype::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| S::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
                    .collect(),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: StorageDtype) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes, dtype)?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let mut c = Checkpoint::default();
        c.meta.insert("config".into(), "{\"a\": 1}\nsecond line".into());
        c.tensors.push(("w".into(), Tensor::new(vec![2, 2], vec![0.1, -2.5, 1e-300, f64::MAX]).unwrap()));
        c.tensors.push(("s".into(), Tensor::scalar(std::f64::consts::PI)));
        c
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let c = sample();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes, StorageDtype::F64).unwrap();
        let back = Checkpoint::<f64>::read_from(&bytes[..]).unwrap();
        assert_eq!(back, c);
        let mut again = Vec::new();
        back.write_to(&mut again, StorageDtype::F64).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn f32_storage_rounds() {
        let c = sample();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes, StorageDtype::F32).unwrap();
        let back = Checkpoint::<f64>::read_from(&bytes[..]).unwrap();
        assert_eq!(back.get("w").unwrap().data()[0], f64::from(0.1f32));
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes, StorageDtype::F64).unwrap();
        for cut in [bytes.len() - 1, 30, 5] {
            assert!(matches!(Checkpoint::<f64>::read_from(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        assert!(Checkpoint::<f64>::read_from(&b"hello\n"[..]).is_err());
    }
}
