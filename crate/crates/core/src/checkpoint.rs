//! Binary checkpoints of a [`TrainState`].
//!
//! Layout: a text header line, a fingerprint line, then a sequence of named
//! little-endian arrays:
//!
//! ```text
//! wdm-ckpt v1\n
//! <hex sha256 of the shape configuration>\n
//! repeated: u32 name_len, name, u8 dtype, u32 ndim, u64 dims.., raw bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tape::Matrix;
use crate::trainer::TrainState;

const MAGIC: &str = "wdm-ckpt v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F64 = 1,
    U64 = 2,
    U8 = 3,
}

/// Hash of everything that determines parameter shapes.
pub fn fingerprint(config: &EncoderConfig) -> String {
    let text = format!(
        "items={} dim={} layers={} heads={} max_len={} ffn={} agg={:?}",
        config.item_count,
        config.dim,
        config.layers,
        config.heads,
        config.max_len,
        config.ffn_dim,
        config.variance_aggregation
    );
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn array(&mut self, name: &str, dtype: Dtype, shape: &[usize], bytes: &[u8]) {
        self.buf.extend((name.len() as u32).to_le_bytes());
        self.buf.extend(name.as_bytes());
        self.buf.push(dtype as u8);
        self.buf.extend((shape.len() as u32).to_le_bytes());
        for &d in shape {
            self.buf.extend((d as u64).to_le_bytes());
        }
        self.buf.extend(bytes);
    }

    fn matrix(&mut self, name: &str, m: &Matrix) {
        let bytes: Vec<u8> = m.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.array(name, Dtype::F64, &[m.rows, m.cols], &bytes);
    }

    fn u64s(&mut self, name: &str, values: &[u64]) {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.array(name, Dtype::U64, &[values.len()], &bytes);
    }

    fn f64s(&mut self, name: &str, values: &[f64]) {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.array(name, Dtype::F64, &[values.len()], &bytes);
    }
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Entry {
    fn f64s(&self) -> Result<Vec<f64>> {
        self.expect(Dtype::F64)?;
        Ok(self
            .bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u64s(&self) -> Result<Vec<u64>> {
        self.expect(Dtype::U64)?;
        Ok(self
            .bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(Error::Checkpoint(format!("`{}` is not a matrix", self.name)));
        }
        Ok(Matrix::from_vec(self.shape[0], self.shape[1], self.f64s()?))
    }

    fn expect(&self, dtype: Dtype) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::Checkpoint(format!("`{}` has dtype {:?}", self.name, self.dtype)));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint("dimension overflow".into()))
    }

    fn line(&mut self) -> Result<String> {
        let end = self
            .bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let line = String::from_utf8_lossy(&self.bytes[..end]).into_owned();
        self.bytes = &self.bytes[end + 1..];
        Ok(line)
    }

    fn entry(&mut self) -> Result<Entry> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?;
        let dtype = match self.take(1)?[0] {
            1 => Dtype::F64,
            2 => Dtype::U64,
            3 => Dtype::U8,
            other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        };
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        let width = if dtype == Dtype::U8 { 1 } else { 8 };
        let count = shape
            .iter()
            .try_fold(width, |acc: usize, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("array size overflow".into()))?;
        let bytes = self.take(count)?.to_vec();
        Ok(Entry { name, dtype, shape, bytes })
    }
}

/// Serialize a training state.
pub fn to_bytes(state: &TrainState, config: &EncoderConfig) -> Vec<u8> {
    let mut w = Writer {
        buf: format!("{MAGIC}\n{}\n", fingerprint(config)).into_bytes(),
    };
    for (name, m) in state.params.iter() {
        w.matrix(&format!("param/{name}"), m);
    }
    for (name, m) in state.params.names().iter().zip(&state.adam_m) {
        w.matrix(&format!("adam_m/{name}"), m);
    }
    for (name, m) in state.params.names().iter().zip(&state.adam_v) {
        w.matrix(&format!("adam_v/{name}"), m);
    }
    w.u64s(
        "counters",
        &[state.step, state.epoch as u64, state.epochs_since_improvement as u64],
    );
    w.f64s("best_valid_mrr", &[state.best_valid_mrr]);
    let seed = state.rng.get_seed();
    w.array("rng/seed", Dtype::U8, &[seed.len()], &seed);
    let pos = state.rng.get_word_pos();
    w.u64s(
        "rng/stream_pos",
        &[state.rng.get_stream(), pos as u64, (pos >> 64) as u64],
    );
    w.buf
}

/// Deserialize a training state, checking it matches `config`.
pub fn from_bytes(bytes: &[u8], config: &EncoderConfig) -> Result<TrainState> {
    let mut r = Reader { bytes };
    if r.line()? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let found = r.line()?;
    let expected = fingerprint(config);
    if found != expected {
        return Err(Error::Checkpoint(format!(
            "configuration fingerprint mismatch: checkpoint {found}, current {expected}"
        )));
    }
    let mut entries = Vec::new();
    while !r.bytes.is_empty() {
        entries.push(r.entry()?);
    }
    let find = |name: &str| {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    };

    let mut params = ModelParams::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for e in entries.iter().filter(|e| e.name.starts_with("param/")) {
        let name = &e.name["param/".len()..];
        params.insert(name, e.matrix()?);
        adam_m.push(find(&format!("adam_m/{name}"))?.matrix()?);
        adam_v.push(find(&format!("adam_v/{name}"))?.matrix()?);
    }
    let reference = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    if reference.names() != params.names()
        || reference
            .values()
            .iter()
            .zip(params.values())
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::Checkpoint("parameter set does not match the configuration".into()));
    }

    let counters = find("counters")?.u64s()?;
    let best = find("best_valid_mrr")?.f64s()?;
    let seed_entry = find("rng/seed")?;
    seed_entry.expect(Dtype::U8)?;
    let seed: [u8; 32] = seed_entry
        .bytes
        .as_slice()
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
    let sp = find("rng/stream_pos")?.u64s()?;
    if counters.len() != 3 || best.len() != 1 || sp.len() != 3 {
        return Err(Error::Checkpoint("malformed counters".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(sp[0]);
    rng.set_word_pos(sp[1] as u128 | ((sp[2] as u128) << 64));

    Ok(TrainState {
        params,
        adam_m,
        adam_v,
        step: counters[0],
        epoch: counters[1] as usize,
        best_valid_mrr: best[0],
        epochs_since_improvement: counters[2] as usize,
        rng,
    })
}

pub fn save(path: &Path, state: &TrainState, config: &EncoderConfig) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(state, config)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, config: &EncoderConfig) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::VarianceAggregation;
    use rand::Rng;

    fn config() -> EncoderConfig {
        EncoderConfig {
            item_count: 7,
            dim: 4,
            layers: 1,
            heads: 2,
            max_len: 5,
            ffn_dim: 4,
            dropout: 0.1,
            variance_aggregation: VarianceAggregation::Squared,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let cfg = config();
        let mut state = TrainState::new(&cfg, 9).unwrap();
        state.step = 17;
        state.best_valid_mrr = 0.25;
        let _: u64 = state.rng.random();
        let bytes = to_bytes(&state, &cfg);
        let mut back = from_bytes(&bytes, &cfg).unwrap();
        assert_eq!(back, state);
        assert_eq!(to_bytes(&back, &cfg), bytes);
        assert_eq!(back.rng.random::<u64>(), state.rng.random::<u64>());
    }

    #[test]
    fn rejects_other_shape() {
        let cfg = config();
        let state = TrainState::new(&cfg, 1).unwrap();
        let bytes = to_bytes(&state, &cfg);
        let other = EncoderConfig { dim: 8, ffn_dim: 8, ..cfg.clone() };
        assert!(matches!(from_bytes(&bytes, &other), Err(Error::Checkpoint(_))));
        assert!(from_bytes(&bytes[..bytes.len() - 3], &cfg).is_err());
    }
}
