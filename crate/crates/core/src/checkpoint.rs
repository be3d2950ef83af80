//! Binary model checkpoints: a JSON header followed by little-endian `f64`
//! tensors in name order. No timestamps, so equal runs give equal bytes.

use std::path::Path;

use crann_autodiff::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{NormalizationParams, SensorInfo, WindowConfig};
use crate::error::{CoreError, Result};
use crate::models::{build_model, Forecaster, ModelConfig};

const MAGIC: &[u8; 8] = b"CRANNCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub window: WindowConfig,
    pub sensors: Vec<SensorInfo>,
    pub normalization: NormalizationParams,
    pub fold: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

fn bad(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflows"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("tensor size overflows"))?;
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| bad("tensor size overflows"))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(meta.len() + 8 * self.params.num_params() + 64);
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(&meta);
        let params: Vec<_> = self.params.params().collect();
        let buffers: Vec<_> = self.params.buffers().collect();
        out.extend((params.len() as u32).to_le_bytes());
        for (name, t) in params {
            put_tensor(&mut out, name, t);
        }
        out.extend((buffers.len() as u32).to_le_bytes());
        for (name, t) in buffers {
            put_tensor(&mut out, name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = r.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?)?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor()?;
            params.insert_param(name, t);
        }
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor()?;
            params.insert_buffer(name, t);
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds the model and checks that every stored tensor matches it.
    pub fn build(&self) -> Result<Box<dyn Forecaster>> {
        let model = build_model(&self.meta.model, &self.meta.window, &self.meta.sensors)?;
        let template = model.init_params(0)?;
        let names = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
            s.params()
                .chain(s.buffers())
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect()
        };
        if names(&template) != names(&self.params) {
            return Err(bad(format!("tensors do not match a {} model", model.kind())));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::dataset::Scale;
    use crate::models::test_util::{sensors, tiny_window};
    use crate::models::ModelKind;

    fn checkpoint(kind: ModelKind) -> Checkpoint {
        let window = tiny_window();
        let mut model = ModelConfig::for_kind(kind);
        model.hidden = Some(3);
        model.conv_widths = Some(vec![2]);
        let sensors = sensors(3);
        let params = build_model(&model, &window, &sensors).unwrap().init_params(4).unwrap();
        let normalization = NormalizationParams {
            traffic: sensors.iter().map(|s| (s.id.clone(), Scale { min: 1.0, max: 9.0 })).collect(),
            weather: BTreeMap::new(),
        };
        Checkpoint {
            meta: CheckpointMeta {
                model,
                window,
                sensors,
                normalization,
                fold: Some(2),
                seed: 4,
            },
            params,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in [ModelKind::Crann, ModelKind::Cnn, ModelKind::Persistence] {
            let c = checkpoint(kind);
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            assert_eq!(back.build().unwrap().kind(), kind);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = checkpoint(ModelKind::Crann);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(CoreError::Io { .. })));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = checkpoint(ModelKind::Crann).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(CoreError::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CoreError::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(CoreError::Checkpoint(_))));
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(CoreError::Checkpoint(_))));
    }

    #[test]
    fn mismatched_tensors_fail_to_build() {
        let mut c = checkpoint(ModelKind::Crann);
        c.meta.model.hidden = Some(4);
        assert!(matches!(c.build(), Err(CoreError::Checkpoint(_))));
    }
}
