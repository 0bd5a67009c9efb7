//! Binary checkpoints: 8-byte magic, a JSON config echo with sorted keys,
//! parameters in path order (f32, little endian, with shapes) and an
//! optional optimizer section used for exact resumption.

use std::collections::BTreeMap;
use std::path::Path;

use s3im_tensor::{AdamState, ParameterSet, Tensor};
use serde_json::Value;

use crate::error::{Error, Result};

pub const PSRL_MAGIC: &[u8; 8] = b"PSRL0001";
pub const NSD_MAGIC: &[u8; 8] = b"NSDM0001";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub echo: BTreeMap<String, Value>,
    pub params: ParameterSet<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut buf = magic.to_vec();
        let echo = serde_json::to_string(&self.echo).expect("json values serialize");
        buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        buf.extend_from_slice(echo.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, t) in self.params.iter() {
            put_str(&mut buf, path);
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => buf.push(0),
            Some(s) => {
                buf.push(1);
                for v in [s.lr, s.beta1, s.beta2, s.eps] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.extend_from_slice(&s.step.to_le_bytes());
                buf.extend_from_slice(&(s.first.len() as u32).to_le_bytes());
                for (path, m) in &s.first {
                    put_str(&mut buf, path);
                    buf.extend_from_slice(&s.counts.get(path).copied().unwrap_or(0).to_le_bytes());
                    put_f32s(&mut buf, m);
                    put_f32s(&mut buf, s.second.get(path).map_or(&[][..], |v| v.as_slice()));
                }
            }
        }
        buf
    }

    pub fn decode(buf: &[u8], magic: &[u8; 8]) -> Result<Self> {
        if buf.len() < 8 {
            return Err(Error::MalformedHeader("checkpoint shorter than its magic".into()));
        }
        if &buf[..8] != magic {
            if buf[..4] == magic[..4] {
                return Err(Error::VersionMismatch {
                    expected: String::from_utf8_lossy(magic).into_owned(),
                    found: String::from_utf8_lossy(&buf[..8]).into_owned(),
                });
            }
            return Err(Error::MalformedHeader(format!("bad checkpoint magic {:?}", String::from_utf8_lossy(&buf[..8]))));
        }
        let mut r = Cursor { buf, pos: 8 };
        let echo_len = r.u32("echo length")? as usize;
        let echo_bytes = r.take(echo_len, "config echo")?;
        let echo: BTreeMap<String, Value> = serde_json::from_slice(echo_bytes)
            .map_err(|e| Error::MalformedHeader(format!("config echo is not a JSON object: {e}")))?;
        let n = r.u32("parameter count")?;
        let mut params = ParameterSet::new();
        for _ in 0..n {
            let path = r.string("parameter path")?;
            let ndim = r.take(1, "rank")?[0] as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = shape.iter().product::<usize>();
            let data = r.f32s(numel, &path)?;
            params.insert(path, Tensor::new(&shape, data)?)?;
        }
        let optimizer = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let mut hp = [0.0f64; 4];
                for v in hp.iter_mut() {
                    *v = f64::from_le_bytes(r.take(8, "optimizer hyper-parameters")?.try_into().expect("8 bytes"));
                }
                let mut s = AdamState::new(hp[0]);
                s.beta1 = hp[1];
                s.beta2 = hp[2];
                s.eps = hp[3];
                s.step = u64::from_le_bytes(r.take(8, "optimizer step")?.try_into().expect("8 bytes"));
                let m = r.u32("moment count")?;
                for _ in 0..m {
                    let path = r.string("moment path")?;
                    let count = u64::from_le_bytes(r.take(8, "update count")?.try_into().expect("8 bytes"));
                    let len = r.u32("moment length")? as usize;
                    let first = r.f32s(len, &path)?;
                    let len2 = r.u32("moment length")? as usize;
                    let second = r.f32s(len2, &path)?;
                    s.counts.insert(path.clone(), count);
                    s.first.insert(path.clone(), first);
                    s.second.insert(path, second);
                }
                Some(s)
            }
            f => return Err(Error::MalformedHeader(format!("unknown optimizer flag {f}"))),
        };
        Ok(Self { echo, params, optimizer })
    }

    pub fn write(&self, path: &Path, magic: &[u8; 8]) -> Result<()> {
        std::fs::write(path, self.encode(magic)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, magic)
    }

    pub fn echo_u64(&self, key: &str) -> Result<u64> {
        self.echo
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::MalformedHeader(format!("config echo lacks integer `{key}`")))
    }

    pub fn echo_str(&self, key: &str) -> Result<&str> {
        self.echo
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::MalformedHeader(format!("config echo lacks string `{key}`")))
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedPayload(format!("checkpoint ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::MalformedHeader(format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
