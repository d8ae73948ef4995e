//! Binary container: `"SGCN"`, `u32` version, `u64`-prefixed config JSON,
//! named typed sections, trailing CRC32. All integers little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Result, SgcnError};
use crate::network::{ModelConfig, ParamStore, SgcnModel};
use crate::numcore::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SGCN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub sections: Vec<Section>,
}

/// Hex CRC32 of a checkpoint file's bytes.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

fn corrupt(msg: impl Into<String>) -> SgcnError {
    SgcnError::CorruptCheckpoint(msg.into())
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
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflows"))
    }
}

impl Checkpoint {
    pub fn new(config_json: impl Into<String>) -> Self {
        Checkpoint {
            config_json: config_json.into(),
            sections: Vec::new(),
        }
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut payload = Vec::new();
        T::write_le(t.data(), &mut payload);
        self.sections.push(Section {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        });
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.sections.push(Section {
            name: name.into(),
            dtype: DType::U8,
            shape: vec![bytes.len()],
            payload: bytes,
        });
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.section(name).is_some()
    }

    /// Reads a float section as `T`, widening or narrowing as needed.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let s = self
            .section(name)
            .ok_or_else(|| corrupt(format!("missing section {name}")))?;
        let data: Vec<T> = match s.dtype {
            d if d == T::DTYPE => T::read_le(&s.payload),
            DType::F32 => f32::read_le(&s.payload).into_iter().map(|v| T::from_f64_lossy(v as f64)).collect(),
            DType::F64 => f64::read_le(&s.payload).into_iter().map(T::from_f64_lossy).collect(),
            d => return Err(corrupt(format!("section {name} has non-float type {d:?}"))),
        };
        Tensor::new(&s.shape, data).map_err(|e| corrupt(format!("section {name}: {e}")))
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.section(name) {
            Some(s) if s.dtype == DType::U8 => Ok(&s.payload),
            Some(_) => Err(corrupt(format!("section {name} is not a byte section"))),
            None => Err(corrupt(format!("missing section {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.dtype as u8);
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&s.payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(buf) && !buf.is_empty() {
                corrupt("truncated header")
            } else {
                SgcnError::NotACheckpoint
            });
        }
        if &buf[..4] != MAGIC {
            return Err(SgcnError::NotACheckpoint);
        }
        if buf.len() < 8 {
            return Err(corrupt("truncated header"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(SgcnError::UnsupportedVersion(version));
        }
        if buf.len() < 8 + 8 + 4 {
            return Err(corrupt("truncated header"));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let n = r.len()?;
        let config_json = std::str::from_utf8(r.take(n)?)
            .map_err(|_| corrupt("config is not UTF-8"))?
            .to_string();
        let mut sections = Vec::new();
        while r.pos < body.len() {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| corrupt("section name is not UTF-8"))?
                .to_string();
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag).ok_or_else(|| corrupt(format!("section {name}: dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let bytes = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt(format!("section {name}: size overflows")))?;
            let payload = r.take(bytes)?.to_vec();
            sections.push(Section {
                name,
                dtype,
                shape,
                payload,
            });
        }
        Ok(Checkpoint { config_json, sections })
    }

    /// Writes through a temporary sibling so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let c: ModelConfig =
            serde_json::from_str(&self.config_json).map_err(|e| corrupt(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

pub(crate) fn push_store<T: Real>(ck: &mut Checkpoint, prefix: &str, store: &ParamStore<T>) {
    for (n, t) in store.iter() {
        ck.push_tensor(format!("{prefix}/{n}"), t);
    }
}

/// Fills every entry of `template` from `prefix/<name>` sections.
pub(crate) fn read_store<T: Real>(ck: &Checkpoint, prefix: &str, template: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (n, t) in template.iter() {
        let v = ck.tensor::<T>(&format!("{prefix}/{n}"))?;
        if v.shape() != t.shape() {
            return Err(corrupt(format!(
                "{prefix}/{n}: shape {:?}, config expects {:?}",
                v.shape(),
                t.shape()
            )));
        }
        out.insert(n, v)?;
    }
    Ok(out)
}

/// Container holding only the model weights and running statistics.
pub fn model_checkpoint<T: Real>(model: &SgcnModel<T>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(serde_json::to_string(&model.config)?);
    push_store(&mut ck, "param", &model.params);
    push_store(&mut ck, "buffer", &model.buffers);
    Ok(ck)
}

pub fn save_model<T: Real>(model: &SgcnModel<T>, path: &Path) -> Result<()> {
    model_checkpoint(model)?.save(path)
}

/// The inference model of a checkpoint: the best-accuracy weights when the
/// file carries them, the latest weights otherwise.
pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<SgcnModel<T>> {
    let config = ck.model_config()?;
    let shell = SgcnModel::<T>::new(config.clone(), 0)?;
    let prefix = if ck.sections.iter().any(|s| s.name.starts_with("best/")) {
        "best/"
    } else {
        ""
    };
    Ok(SgcnModel {
        params: read_store(ck, &format!("{prefix}param"), &shell.params)?,
        buffers: read_store(ck, &format!("{prefix}buffer"), &shell.buffers)?,
        config,
    })
}

pub fn load_model<T: Real>(path: &Path) -> Result<SgcnModel<T>> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chargraph::batch_graphs;
    use crate::ink::{synth_dataset, SynthSpec};
    use crate::network::prepare_graph;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("{\"a\":1}");
        ck.push_tensor("w", &Tensor::<f32>::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap());
        ck.push_tensor("s", &Tensor::<f64>::scalar(std::f64::consts::PI));
        ck.push_bytes("meta", b"hello".to_vec());
        ck
    }

    #[test]
    fn layout_is_exact() {
        let mut ck = Checkpoint::new("{}");
        ck.push_tensor("x", &Tensor::<f32>::from_f64(&[1], &[1.0]).unwrap());
        let b = ck.to_bytes();
        let mut want = b"SGCN".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(b"{}");
        want.extend(1u32.to_le_bytes());
        want.push(b'x');
        want.push(0);
        want.extend(1u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend(crc.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.bytes("meta").unwrap(), b"hello");
        let w64: Tensor<f64> = back.tensor("w").unwrap();
        assert_eq!(w64.data()[1], -2.0);
    }

    #[test]
    fn error_contract() {
        let good = sample().to_bytes();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bad_magic).unwrap_err().to_string(), "not a checkpoint");
        assert!(Checkpoint::from_bytes(b"").unwrap_err().to_string().contains("not a checkpoint"));

        let mut v2 = good.clone();
        v2[4] = 2;
        let e = Checkpoint::from_bytes(&v2).unwrap_err().to_string();
        assert!(e.contains("unsupported version"), "{e}");

        for cut in [5, 12, good.len() / 2, good.len() - 1] {
            let e = Checkpoint::from_bytes(&good[..cut]).unwrap_err().to_string();
            assert!(e.contains("corrupt checkpoint"), "cut {cut}: {e}");
        }
        let mut flipped = good.clone();
        flipped[30] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("corrupt checkpoint"));
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sgcn");
        let config = ModelConfig::small(3);
        let mut model = SgcnModel::<f32>::new(config.clone(), 4).unwrap();
        // non-trivial running stats
        for t in model.buffers.tensors_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += i as f32 * 0.01);
        }
        save_model(&model, &path).unwrap();
        let back: SgcnModel<f32> = load_model(&path).unwrap();
        assert_eq!(back, model);

        let ds = synth_dataset(&SynthSpec { num_classes: 3, samples_per_class: 2, ..SynthSpec::default() }, 1).unwrap();
        let graphs: Vec<_> = ds.samples.iter().map(|s| prepare_graph(&s.trajectory, &config).unwrap()).collect();
        let batch = batch_graphs(&graphs).unwrap();
        let a = model.predict(&batch).unwrap();
        let b = back.predict(&batch).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn id_is_crc_hex() {
        assert_eq!(checkpoint_id(b"123456789"), "cbf43926");
    }
}
