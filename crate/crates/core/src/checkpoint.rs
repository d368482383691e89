//! Binary checkpoints of a trained GMR model.
//!
//! Layout (little-endian): `b"GMRC"`, version byte, `u32 K`, `u32 d`, then
//! `K` logits, `K×d` centroids and `K×d` standard deviations as `f64`; a flag
//! byte for the classifier block, `u32 C`, `C×K` weights and `C` biases; and
//! the loss statistics (`mean`, `var`, `ema_alpha` as `f64`, `warmup` and
//! `samples_seen` as `u64`).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::classifier::ClassifierParams;
use crate::error::{GmrError, Result};
use crate::gmm::{ComponentGrid, GmmParams, LossStats, ResponsibilityMode};
use crate::replay::GmrModel;

const MAGIC: &[u8; 4] = b"GMRC";
const VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s<'a>(out: &mut Vec<u8>, vs: impl IntoIterator<Item = &'a f64>) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &GmrModel) -> Vec<u8> {
    let (k, d) = (model.gmm.components(), model.gmm.dim());
    let mut out = Vec::with_capacity(16 + 8 * (k + 2 * k * d));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, k);
    put_u32(&mut out, d);
    put_f64s(&mut out, &model.gmm.weight_logits);
    put_f64s(&mut out, &model.gmm.centroids);
    put_f64s(&mut out, &model.gmm.std_devs);
    out.push(u8::from(model.mode == ResponsibilityMode::Weighted) + 1);
    put_u32(&mut out, model.classifier.classes());
    put_f64s(&mut out, &model.classifier.weights);
    put_f64s(&mut out, &model.classifier.bias);
    let s = &model.stats;
    put_f64s(&mut out, &[s.mean, s.var, s.ema_alpha]);
    out.extend_from_slice(&(s.warmup as u64).to_le_bytes());
    out.extend_from_slice(&(s.samples_seen as u64).to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            GmrError::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| GmrError::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<GmrModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(GmrError::Checkpoint("not a GMR checkpoint".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(GmrError::Checkpoint(format!("unsupported version {version}")));
    }
    let (k, d) = (r.u32()?, r.u32()?);
    let logits = Array1::from(r.f64s(k)?);
    let shape_err = |e: ndarray::ShapeError| GmrError::Checkpoint(e.to_string());
    let centroids = Array2::from_shape_vec((k, d), r.f64s(k * d)?).map_err(shape_err)?;
    let std_devs = Array2::from_shape_vec((k, d), r.f64s(k * d)?).map_err(shape_err)?;
    let gmm = GmmParams::new(logits, centroids, std_devs)?;
    let mode = match r.u8()? {
        1 => ResponsibilityMode::Unweighted,
        2 => ResponsibilityMode::Weighted,
        f => return Err(GmrError::Checkpoint(format!("bad classifier flag {f}"))),
    };
    let c = r.u32()?;
    let weights = Array2::from_shape_vec((c, k), r.f64s(c * k)?).map_err(shape_err)?;
    let classifier = ClassifierParams::new(weights, Array1::from(r.f64s(c)?))?;
    let s = r.f64s(3)?;
    let stats = LossStats { mean: s[0], var: s[1], ema_alpha: s[2], warmup: r.u64()?, samples_seen: r.u64()? };
    if r.pos != bytes.len() {
        return Err(GmrError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(GmrModel { grid: ComponentGrid::new(k), gmm, classifier, stats, mode, steps: 0 })
}

pub fn save(model: &GmrModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<GmrModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::GmrSettings;
    use proptest::prelude::*;

    fn model(seed: u64) -> GmrModel {
        let settings = GmrSettings { components: 3, ..GmrSettings::default() };
        let mut m = GmrModel::new(5, 4, &settings, seed);
        m.classifier.weights[[1, 2]] = -0.25;
        m.classifier.bias[3] = 1.5;
        m.stats.update([1.0, 2.0, 4.0]);
        m
    }

    proptest! {
        #[test]
        fn roundtrip(seed in any::<u64>()) {
            let m = model(seed);
            let back = decode(&encode(&m)).unwrap();
            prop_assert_eq!(back.gmm, m.gmm);
            prop_assert_eq!(back.classifier, m.classifier);
            prop_assert_eq!(back.stats, m.stats);
            prop_assert_eq!(back.mode, m.mode);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&model(1));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gmrc");
        let m = model(2);
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap().gmm, m.gmm);
    }
}
