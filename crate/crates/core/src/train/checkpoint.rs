//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PLAB" | version u32 | field count u32
//! per field: name_len u32 | name utf-8 | dtype u8 | ndim u32 | dims u64×ndim | byte_len u64 | data
//! config digest, 32 bytes (SHA-256 of the run configuration)
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u64, 3 = raw bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::nn::{ModelParams, TransformerConfig};
use crate::rng::RngState;
use crate::train::adam::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 4] = b"PLAB";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    F32 = 0,
    F64 = 1,
    U64 = 2,
    Bytes = 3,
}

impl Dtype {
    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U64),
            3 => Some(Dtype::Bytes),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::U64 => 8,
            Dtype::Bytes => 1,
        }
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub rng: RngState,
    /// Number of log records written before this state.
    pub log_offset: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config_digest: [u8; 32],
}

struct Field {
    name: String,
    dtype: Dtype,
    dims: Vec<u64>,
    data: Vec<u8>,
}

fn f32_field(name: &str, v: &[f32]) -> Field {
    Field {
        name: name.into(),
        dtype: Dtype::F32,
        dims: vec![v.len() as u64],
        data: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn u64_field(name: &str, v: &[u64]) -> Field {
    Field {
        name: name.into(),
        dtype: Dtype::U64,
        dims: vec![v.len() as u64],
        data: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn f64_field(name: &str, v: &[f64]) -> Field {
    Field {
        name: name.into(),
        dtype: Dtype::F64,
        dims: vec![v.len() as u64],
        data: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let s = &ck.state;
    if s.adam.groups.len() != 1 || s.adam.groups[0].lr_mult != 1.0 {
        return Err(LabError::usage("transformer checkpoints expect a single Adam group"));
    }
    let model_json = serde_json::to_vec(&s.params.config)?;
    let a = &s.adam.config;
    let fields = vec![
        u64_field("step", &[s.step]),
        u64_field("rng", &[s.rng.seed, s.rng.stream]),
        u64_field("log_offset", &[s.log_offset]),
        Field { name: "model_config".into(), dtype: Dtype::Bytes, dims: vec![model_json.len() as u64], data: model_json },
        f32_field("params", &s.params.data),
        f32_field("adam.m", &s.adam.m),
        f32_field("adam.v", &s.adam.v),
        u64_field("adam.step", &[s.adam.step]),
        f64_field("adam.hyper", &[a.lr, a.beta1, a.beta2, a.eps]),
    ];
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for f in &fields {
        out.extend_from_slice(&(f.name.len() as u32).to_le_bytes());
        out.extend_from_slice(f.name.as_bytes());
        out.push(f.dtype as u8);
        out.extend_from_slice(&(f.dims.len() as u32).to_le_bytes());
        for d in &f.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(f.data.len() as u64).to_le_bytes());
        out.extend_from_slice(&f.data);
    }
    out.extend_from_slice(&ck.config_digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LabError::checkpoint(field, "file truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

fn expect_dtype(f: &Field, want: Dtype) -> Result<()> {
    if f.dtype != want {
        return Err(LabError::checkpoint(&f.name, format!("expected dtype {want:?}, found {:?}", f.dtype)));
    }
    Ok(())
}

fn as_f32(f: &Field) -> Result<Vec<f32>> {
    expect_dtype(f, Dtype::F32)?;
    Ok(f.data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

fn as_f64(f: &Field) -> Result<Vec<f64>> {
    expect_dtype(f, Dtype::F64)?;
    Ok(f.data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn as_u64(f: &Field) -> Result<Vec<u64>> {
    expect_dtype(f, Dtype::U64)?;
    Ok(f.data.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn scalar_u64(f: &Field, count: usize) -> Result<Vec<u64>> {
    let v = as_u64(f)?;
    if v.len() != count {
        return Err(LabError::checkpoint(&f.name, format!("expected {count} values, found {}", v.len())));
    }
    Ok(v)
}

/// Parses a checkpoint. When `expected_digest` is given, a different stored digest is rejected.
pub fn decode_checkpoint(buf: &[u8], expected_digest: Option<&[u8; 32]>) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(LabError::checkpoint("magic", "not a PLAB checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LabError::checkpoint("version", format!("found {version}, this build reads {VERSION}")));
    }
    let count = r.u32("field_count")? as usize;
    let mut fields = Vec::with_capacity(count);
    for i in 0..count {
        let slot = format!("field #{i}");
        let name_len = r.u32(&slot)? as usize;
        let name = String::from_utf8(r.take(name_len, &slot)?.to_vec())
            .map_err(|_| LabError::checkpoint(&slot, "name is not utf-8"))?;
        let code = r.take(1, &name)?[0];
        let dtype =
            Dtype::from_code(code).ok_or_else(|| LabError::checkpoint(&name, format!("unknown dtype {code}")))?;
        let ndim = r.u32(&name)? as usize;
        let dims = (0..ndim).map(|_| r.u64(&name)).collect::<Result<Vec<u64>>>()?;
        let byte_len = r.u64(&name)? as usize;
        let elems: u64 = dims.iter().product();
        if elems as usize * dtype.width() != byte_len {
            return Err(LabError::checkpoint(&name, "shape and byte length disagree"));
        }
        let data = r.take(byte_len, &name)?.to_vec();
        fields.push(Field { name, dtype, dims, data });
    }
    let digest: [u8; 32] = r.take(32, "config_digest")?.try_into().expect("32 bytes");
    if let Some(want) = expected_digest {
        if &digest != want {
            return Err(LabError::checkpoint("config_digest", "checkpoint was written by a different configuration"));
        }
    }

    let get = |name: &str| {
        fields.iter().find(|f| f.name == name).ok_or_else(|| LabError::checkpoint(name, "field missing"))
    };
    let step = scalar_u64(get("step")?, 1)?[0];
    let rng = scalar_u64(get("rng")?, 2)?;
    let log_offset = scalar_u64(get("log_offset")?, 1)?[0];
    let mf = get("model_config")?;
    expect_dtype(mf, Dtype::Bytes)?;
    let model: TransformerConfig = serde_json::from_slice(&mf.data)
        .map_err(|e| LabError::checkpoint("model_config", e.to_string()))?;
    let params = ModelParams::from_flat(&model, as_f32(get("params")?)?)
        .map_err(|e| LabError::checkpoint("params", e.to_string()))?;
    let m = as_f32(get("adam.m")?)?;
    let v = as_f32(get("adam.v")?)?;
    if m.len() != params.len() || v.len() != params.len() {
        return Err(LabError::checkpoint("adam.m", "moment length differs from params"));
    }
    let adam_step = scalar_u64(get("adam.step")?, 1)?[0];
    let hyper = as_f64(get("adam.hyper")?)?;
    if hyper.len() != 4 {
        return Err(LabError::checkpoint("adam.hyper", "expected 4 values"));
    }
    let mut adam = AdamState::new(AdamConfig { lr: hyper[0], beta1: hyper[1], beta2: hyper[2], eps: hyper[3] }, m.len());
    adam.m = m;
    adam.v = v;
    adam.step = adam_step;
    Ok(Checkpoint {
        state: TrainState { step, params, adam, rng: RngState::new(rng[0], rng[1]), log_offset },
        config_digest: digest,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected_digest: Option<&[u8; 32]>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?, expected_digest)
}
