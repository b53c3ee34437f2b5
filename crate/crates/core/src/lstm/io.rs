//! Binary model file.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "LDCSTNN\0"
//! version          u32
//! payload length   u64
//! payload
//!   feature order  string
//!   topology       5 × u32 (input, hidden1, hidden2, horizon, timesteps)
//!   train config   u64 epochs, u64 batch, f64 lr, beta1, beta2, eps,
//!                  4 × f64 dropout, u64 seed
//!   train hours    u64
//!   train meters   u32 count, then strings
//!   stats          aggregate, temperature, humidity as (f64 mu, f64 sigma),
//!                  u32 count, then (string id, f64 mu, f64 sigma)
//!   weights        8 × (u64 length, f64 values) in the order
//!                  layer1 W_in, layer1 W_rec, layer1 b,
//!                  layer2 W_in, layer2 W_rec, layer2 b,
//!                  head W, head b   (matrices row-major)
//! crc32            u32 over every preceding byte
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8.

use super::{DropoutRates, LstmModel, Network, Topology, TrainConfig, TrainingMeta};
use crate::features::{MeanStd, NormStats, FEATURE_ORDER};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"LDCSTNN\0";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checksum mismatch or truncated model file")]
    Checksum,
    #[error("model was built for feature order {found:?}, this build uses {expected:?}")]
    FeatureOrderMismatch { found: String, expected: String },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ModelFileError>;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn stats(&mut self, s: &MeanStd) {
        self.f64(s.mu);
        self.f64(s.sigma);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| ModelFileError::Malformed(format!("payload ends early at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| ModelFileError::Malformed("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelFileError::Malformed("invalid UTF-8 string".into()))
    }
    fn stats(&mut self) -> Result<MeanStd> {
        Ok(MeanStd {
            mu: self.f64()?,
            sigma: self.f64()?,
        })
    }
}

/// Serializes a model to bytes.
pub fn write_model(model: &LstmModel) -> Vec<u8> {
    let mut p = Writer(Vec::new());
    p.str(&model.feature_order);
    let t = &model.topology;
    for v in [t.input, t.hidden1, t.hidden2, t.horizon, t.timesteps] {
        p.u32(v as u32);
    }
    let c = &model.meta.config;
    p.u64(c.epochs as u64);
    p.u64(c.batch_size as u64);
    for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
        p.f64(v);
    }
    for v in c.dropout.as_array() {
        p.f64(v);
    }
    p.u64(c.seed);
    p.u64(model.meta.train_hours as u64);
    p.u32(model.meta.train_meter_ids.len() as u32);
    for id in &model.meta.train_meter_ids {
        p.str(id);
    }
    let s = &model.norm_stats;
    p.stats(&s.aggregate);
    p.stats(&s.temperature);
    p.stats(&s.humidity);
    p.u32(s.meters.len() as u32);
    for (id, st) in &s.meters {
        p.str(id);
        p.stats(st);
    }
    for tensor in model.network.tensors() {
        p.u64(tensor.len() as u64);
        for v in tensor {
            p.f64(*v);
        }
    }

    let mut out = Writer(Vec::with_capacity(HEADER_LEN + p.0.len() + 4));
    out.0.extend_from_slice(&MAGIC);
    out.u32(FORMAT_VERSION);
    out.u64(p.0.len() as u64);
    out.0.extend_from_slice(&p.0);
    let crc = crc32fast::hash(&out.0);
    out.u32(crc);
    out.0
}

/// Parses bytes produced by [`write_model`].
pub fn read_model(bytes: &[u8]) -> Result<LstmModel> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(ModelFileError::Checksum);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ModelFileError::UnsupportedVersion { found: version });
    }
    let payload_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = usize::try_from(payload_len)
        .ok()
        .and_then(|n| n.checked_add(HEADER_LEN + 4))
        .ok_or(ModelFileError::Checksum)?;
    if bytes.len() != expected {
        return Err(ModelFileError::Checksum);
    }
    let (body, tail) = bytes.split_at(expected - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(ModelFileError::Checksum);
    }

    let mut r = Reader {
        buf: &body[HEADER_LEN..],
        pos: 0,
    };
    let feature_order = r.str()?;
    if feature_order != FEATURE_ORDER {
        return Err(ModelFileError::FeatureOrderMismatch {
            found: feature_order,
            expected: FEATURE_ORDER.to_owned(),
        });
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let topology = Topology {
        input: dims[0],
        hidden1: dims[1],
        hidden2: dims[2],
        horizon: dims[3],
        timesteps: dims[4],
    };
    let epochs = r.usize()?;
    let batch_size = r.usize()?;
    let (learning_rate, beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let dropout = DropoutRates {
        layer1_input: r.f64()?,
        layer1_recurrent: r.f64()?,
        layer2_input: r.f64()?,
        layer2_recurrent: r.f64()?,
    };
    let config = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        beta1,
        beta2,
        epsilon,
        dropout,
        seed: r.u64()?,
    };
    let train_hours = r.usize()?;
    let n_ids = r.u32()?;
    let train_meter_ids = (0..n_ids).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let aggregate = r.stats()?;
    let temperature = r.stats()?;
    let humidity = r.stats()?;
    let n_meters = r.u32()?;
    let mut meters = BTreeMap::new();
    for _ in 0..n_meters {
        let id = r.str()?;
        meters.insert(id, r.stats()?);
    }

    let mut network = Network::zeros(&topology);
    for (k, tensor) in network.tensors_mut().into_iter().enumerate() {
        let n = r.usize()?;
        if n != tensor.len() {
            return Err(ModelFileError::Malformed(format!(
                "weight array {k} has {n} values, topology needs {}",
                tensor.len()
            )));
        }
        for v in tensor.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != r.buf.len() {
        return Err(ModelFileError::Malformed(format!(
            "{} trailing payload bytes",
            r.buf.len() - r.pos
        )));
    }

    Ok(LstmModel {
        topology,
        network,
        norm_stats: NormStats {
            meters,
            aggregate,
            temperature,
            humidity,
        },
        feature_order,
        meta: TrainingMeta {
            config,
            train_hours,
            train_meter_ids,
        },
    })
}

pub fn save_model(model: &LstmModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LstmModel> {
    read_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_model() -> LstmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let network = Network::init(&Topology::default(), &mut rng);
        let mut meters = BTreeMap::new();
        meters.insert("MAC000002".to_string(), MeanStd { mu: 0.21, sigma: 0.13 });
        meters.insert("MAC000017".to_string(), MeanStd { mu: 0.1 / 3.0, sigma: 0.7 });
        LstmModel::new(
            network,
            NormStats {
                meters,
                aggregate: MeanStd { mu: 3.1, sigma: 0.4 },
                temperature: MeanStd { mu: 9.7, sigma: 5.5 },
                humidity: MeanStd { mu: 0.8, sigma: 0.1 },
            },
            TrainingMeta {
                config: TrainConfig { seed: 7, ..TrainConfig::default() },
                train_hours: 5040,
                train_meter_ids: vec!["MAC000002".into(), "MAC000017".into()],
            },
        )
    }

    #[test]
    fn round_trip_is_lossless_and_predicts_identically() {
        let model = sample_model();
        let back = read_model(&write_model(&model)).unwrap();
        assert_eq!(back, model);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Array2::from_shape_simple_fn((24, 33), || rng.random_range(-2.0..2.0));
        let a = model.network.predict(w.view()).unwrap();
        let b = back.network.predict(w.view()).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let model = sample_model();
        save_model(&model, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
    }

    #[test]
    fn truncation_fails_checksum() {
        let bytes = write_model(&sample_model());
        for cut in [bytes.len() - 1, bytes.len() / 2, 25, 20, 12] {
            assert!(matches!(read_model(&bytes[..cut]), Err(ModelFileError::Checksum)), "cut {cut}");
        }
    }

    #[test]
    fn flipped_bit_fails_checksum() {
        let mut bytes = write_model(&sample_model());
        let i = bytes.len() / 3;
        bytes[i] ^= 0x10;
        assert!(matches!(read_model(&bytes), Err(ModelFileError::Checksum)));
    }

    #[test]
    fn wrong_magic_and_version_are_refused() {
        let mut bytes = write_model(&sample_model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&bad), Err(ModelFileError::BadMagic)));
        bytes[8] = 2;
        assert!(matches!(read_model(&bytes), Err(ModelFileError::UnsupportedVersion { found: 2 })));
    }

    #[test]
    fn other_feature_order_is_refused() {
        let mut model = sample_model();
        model.feature_order = "v0:consumption,temperature".into();
        assert!(matches!(
            read_model(&write_model(&model)),
            Err(ModelFileError::FeatureOrderMismatch { .. })
        ));
    }
}
