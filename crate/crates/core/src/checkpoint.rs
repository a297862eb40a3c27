//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "MCPACKPT"
//! version   u32
//! dtype     u8       4 = f32, 8 = f64
//! hash      u32 length + UTF-8 (resolved config SHA-256)
//! epoch     u64      epochs completed
//! step      u64      optimizer steps taken
//! params    u32 count, then per parameter:
//!             u32 length + UTF-8 name, u32 ndim, u64 dims, values
//! optimizer u8 kind (0 sgd, 1 adam), u64 t, u32 slots, then per slot and
//!           parameter: u8 present, values (parameter shape)
//! rng       32-byte seed, u64 stream, u128 word position
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::OptimizerKind;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::OptimizerState;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MCPACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_hash: String,
    pub epoch: u64,
    pub step: u64,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: OptimizerState<T>,
    pub rng: RngState,
}

fn dtype_tag<T: Scalar>() -> u8 {
    if T::NAME == "f32" {
        4
    } else {
        8
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values<T: Scalar>(&mut self, t: &Tensor<T>) {
        for &v in t.data() {
            if dtype_tag::<T>() == 4 {
                self.0.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            } else {
                self.0.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
    fn values<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if dtype_tag::<T>() == 4 {
                f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"))
            };
            out.push(T::of(v));
        }
        Tensor::new(shape, out)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(config_hash: &str, epoch: u64, step: u64, store: &ParamStore<T>, optimizer: &OptimizerState<T>, rng: &ChaCha8Rng) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            epoch,
            step,
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.clone(),
            rng: RngState::capture(rng),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(VERSION);
        w.u8(dtype_tag::<T>());
        w.str(&self.config_hash);
        w.u64(self.epoch);
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.str(name);
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.values(t);
        }
        w.u8(match self.optimizer.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
        });
        w.u64(self.optimizer.t);
        w.u32(self.optimizer.slots.len() as u32);
        for slot in &self.optimizer.slots {
            for s in slot {
                match s {
                    Some(t) => {
                        w.u8(1);
                        w.values(t);
                    }
                    None => w.u8(0),
                }
            }
        }
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = r.u8()?;
        if dtype != dtype_tag::<T>() {
            return Err(Error::Checkpoint(format!("stored as {}-byte floats, loading as {}", dtype, T::NAME)));
        }
        let config_hash = r.str()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            params.push((name, r.values(&shape)?));
        }
        let kind = match r.u8()? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            k => return Err(Error::Checkpoint(format!("unknown optimizer kind {k}"))),
        };
        let t = r.u64()?;
        let nslots = r.u32()? as usize;
        let mut slots = Vec::with_capacity(nslots);
        for _ in 0..nslots {
            let mut slot = Vec::with_capacity(count);
            for (_, p) in &params {
                slot.push(if r.u8()? == 1 { Some(r.values(p.shape())?) } else { None });
            }
            slots.push(slot);
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { config_hash, epoch, step, params, optimizer: OptimizerState { kind, t, slots }, rng: RngState { seed, stream, word_pos } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies stored values into `store`, which must hold the same names
    /// and shapes in the same order.
    pub fn apply(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.iter().enumerate() {
            let expect = store.name(*id).to_string();
            match self.params.get(i) {
                Some((name, t)) if *name == expect && t.shape() == store.get(*id).shape() => {}
                Some((name, t)) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter mismatch at {expect} {:?}: checkpoint has {name} {:?}",
                        store.get(*id).shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("parameter mismatch at {expect}: missing from checkpoint"))),
            }
        }
        if let Some((name, _)) = self.params.get(ids.len()) {
            return Err(Error::Checkpoint(format!("parameter mismatch at {name}: not in the model")));
        }
        for (id, (_, t)) in ids.into_iter().zip(&self.params) {
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> (ParamStore<f32>, OptimizerState<f32>, ChaCha8Rng) {
        let mut s = ParamStore::new();
        s.add("a/w", Tensor::new(&[2, 2], vec![1.5, -0.25, f32::MIN_POSITIVE, 3.0e7]).unwrap()).unwrap();
        s.add("a/b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let mut o = OptimizerState::new(OptimizerKind::Adam, 2);
        o.t = 7;
        o.slots[0][0] = Some(Tensor::full(&[2, 2], 0.5));
        o.slots[1][0] = Some(Tensor::full(&[2, 2], 0.25));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        (s, o, rng)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (s, o, rng) = sample();
        let c = Checkpoint::capture("abc", 3, 40, &s, &o, &rng);
        let bytes = c.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let mut r1 = rng.clone();
        let mut r2 = back.rng.restore();
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn rejects_corruption_and_dtype() {
        let (s, o, rng) = sample();
        let bytes = Checkpoint::capture("abc", 3, 40, &s, &o, &rng).to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
    }

    #[test]
    fn mismatch_names_first_parameter() {
        let (s, o, rng) = sample();
        let c = Checkpoint::capture("abc", 0, 0, &s, &o, &rng);
        let mut other = ParamStore::<f32>::new();
        other.add("a/w", Tensor::zeros(&[2, 2])).unwrap();
        other.add("a/bias", Tensor::zeros(&[3])).unwrap();
        let e = c.apply(&mut other).unwrap_err().to_string();
        assert!(e.contains("a/bias"), "{e}");
        let mut same = ParamStore::<f32>::new();
        same.add("a/w", Tensor::zeros(&[2, 2])).unwrap();
        same.add("a/b", Tensor::zeros(&[3])).unwrap();
        c.apply(&mut same).unwrap();
        assert_eq!(same.iter().next().unwrap().1, &s.iter().next().unwrap().1.clone());
    }
}
