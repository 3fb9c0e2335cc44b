//! Byte layout of checkpoints.
//!
//! ```text
//! magic "CSPDETCK" | version u32 | fingerprint [u8; 32] | step u64 | count u32
//! count × { kind u8 | name_len u32 | name | ndim u32 | ndim × u64 | numel × f32 }
//! crc32 u32 over everything before it
//! ```
//! All integers and floats are little-endian. `kind` is 0 for parameters,
//! 1 for buffers and 2 for optimizer momentum.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::store::ParamStore;
use crate::tensor::{numel, Tensor};
use crate::train::Sgd;

pub const MAGIC: &[u8; 8] = b"CSPDETCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Param = 0,
    Buffer = 1,
    Velocity = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub kind: EntryKind,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: [u8; 32],
    pub step: u64,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Snapshot of parameters, buffers and, if given, momentum.
    pub fn capture(store: &ParamStore<f32>, sgd: Option<&Sgd<f32>>, step: u64, fingerprint: [u8; 32]) -> Self {
        let mut entries = Vec::new();
        let mut push = |kind, name: &str, t: &Tensor<f32>| {
            entries.push(Entry { kind, name: name.into(), shape: t.shape().to_vec(), data: t.data().to_vec() })
        };
        for p in store.params() {
            push(EntryKind::Param, &p.name, &p.tensor);
        }
        for b in store.buffers() {
            push(EntryKind::Buffer, &b.name, &b.tensor);
        }
        if let Some(s) = sgd {
            for (p, v) in store.params().iter().zip(&s.velocity) {
                push(EntryKind::Velocity, &p.name, v);
            }
        }
        Self { version: VERSION, fingerprint, step, entries }
    }

    pub fn has_optimizer(&self) -> bool {
        self.entries.iter().any(|e| e.kind == EntryKind::Velocity)
    }

    /// Copies the snapshot into `store` (and returns the momentum when
    /// present). Everything is validated first; on error `store` is untouched.
    pub fn restore(&self, store: &mut ParamStore<f32>, fingerprint: &[u8; 32]) -> Result<Option<Sgd<f32>>> {
        if &self.fingerprint != fingerprint {
            return Err(Error::Fingerprint);
        }
        let of = |k: EntryKind| self.entries.iter().filter(move |e| e.kind == k);
        let params: Vec<&Entry> = of(EntryKind::Param).collect();
        let buffers: Vec<&Entry> = of(EntryKind::Buffer).collect();
        let velocity: Vec<&Entry> = of(EntryKind::Velocity).collect();
        let check = |have: &[&Entry], want: &[crate::nn::store::Parameter<f32>], what: &str| -> Result<()> {
            if have.len() != want.len() {
                return Err(Error::Format(alloc::format!("{} {what} entries, model has {}", have.len(), want.len())));
            }
            for (e, p) in have.iter().zip(want) {
                if e.name != p.name || e.shape != p.tensor.shape() {
                    return Err(Error::Format(alloc::format!("entry {} {:?} does not fit {} {:?}", e.name, e.shape, p.name, p.tensor.shape())));
                }
            }
            Ok(())
        };
        check(&params, store.params(), "parameter")?;
        check(&buffers, store.buffers(), "buffer")?;
        if !velocity.is_empty() {
            check(&velocity, store.params(), "momentum")?;
        }
        for (p, e) in store.entries_mut().zip(params.iter().chain(&buffers)) {
            p.tensor.data_mut().copy_from_slice(&e.data);
        }
        if velocity.is_empty() {
            return Ok(None);
        }
        let velocity = velocity.iter().map(|e| Tensor::from_vec(&e.shape, e.data.clone())).collect::<Result<_>>()?;
        Ok(Some(Sgd { velocity }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.push(e.kind as u8);
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and verifies a checkpoint. The checksum is checked before any
    /// field is interpreted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Format("checkpoint shorter than its checksum".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(alloc::format!("unsupported checkpoint version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let kind = match r.take(1)?[0] {
                0 => EntryKind::Param,
                1 => EntryKind::Buffer,
                2 => EntryKind::Velocity,
                k => return Err(Error::Format(alloc::format!("unknown entry kind {k}"))),
            };
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            entries.push(Entry { kind, name, shape, data });
        }
        if r.at != body.len() {
            return Err(Error::Format(alloc::format!("{} trailing bytes", body.len() - r.at)));
        }
        Ok(Self { version, fingerprint, step, entries })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format("checkpoint ends early".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Builder;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut b = Builder::new(&mut s, 9);
        b.normal("a.weight", &[2, 3], 1.0).unwrap();
        b.constant("a.bias", &[2], 0.5).unwrap();
        b.buffer("a.running_var", Tensor::ones(&[2])).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = store();
        let mut sgd = Sgd::new(&s);
        sgd.velocity[0].data_mut()[1] = -2.5;
        let c = Checkpoint::capture(&s, Some(&sgd), 17, [7; 32]);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let mut fresh = ParamStore::new();
        let mut b = Builder::new(&mut fresh, 1);
        b.normal("a.weight", &[2, 3], 1.0).unwrap();
        b.constant("a.bias", &[2], 0.0).unwrap();
        b.buffer("a.running_var", Tensor::zeros(&[2])).unwrap();
        let got = back.restore(&mut fresh, &[7; 32]).unwrap().unwrap();
        assert_eq!(got, sgd);
        assert_eq!(fresh.params(), s.params());
        assert_eq!(fresh.buffers(), s.buffers());
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = Checkpoint::capture(&store(), None, 0, [0; 32]).to_bytes();
        for cut in [1, 5, bytes.len() / 2] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - cut]), Err(Error::Checksum { .. })));
        }
    }

    #[test]
    fn wrong_fingerprint_leaves_store_untouched() {
        let s = store();
        let c = Checkpoint::capture(&s, None, 0, [1; 32]);
        let mut other = s.clone();
        other.param_mut(crate::nn::store::ParamId(0)).data_mut()[0] = 42.0;
        assert_eq!(c.restore(&mut other, &[2; 32]), Err(Error::Fingerprint));
        assert_eq!(other.params()[0].tensor.data()[0], 42.0);
    }
}
