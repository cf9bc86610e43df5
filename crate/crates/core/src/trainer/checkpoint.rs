//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "VMCR"  u16 version  [u8; 32] config digest
//! u32 len + UTF-8 TOML of the training config
//! u64 completed iterations   u64 optimizer step
//! u8 has-selection  [u64 iteration  f64 score]
//! u32 tensor count, then per tensor:
//!     u16 len + UTF-8 name   u8 rank   u32 dims[rank]   f32 data[prod(dims)]
//! ```
//!
//! Tensor names are prefixed with their group: `student/`, `teacher/`,
//! `adam.m/`, `adam.v/` and, when a selection exists, `best/`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{Selection, TrainConfig, Trainer};
use crate::autodiff::{AdamState, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelPair};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VMCR";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend((d as u32).to_le_bytes());
    }
    for v in data {
        out.extend(v.to_le_bytes());
    }
}

/// Serializes the full trainer state.
pub fn write_checkpoint(path: &Path, tr: &Trainer) -> Result<()> {
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(tr.config.digest());
    let text = toml::to_string(&tr.config).map_err(|e| Error::Config(e.to_string()))?;
    out.extend((text.len() as u32).to_le_bytes());
    out.extend(text.as_bytes());
    out.extend(tr.iteration.to_le_bytes());
    out.extend(tr.adam.step.to_le_bytes());
    match &tr.best {
        Some(b) => {
            out.push(1);
            out.extend(b.iteration.to_le_bytes());
            out.extend(b.score.to_le_bytes());
        }
        None => out.push(0),
    }
    let mut groups: Vec<(&str, &ParamSet<f32>)> = vec![("student", &tr.models.student), ("teacher", &tr.models.teacher)];
    if let Some(b) = &tr.best {
        groups.push(("best", &b.teacher));
    }
    let count = groups.len() * tr.models.student.len() + 2 * tr.adam.m.len();
    out.extend((count as u32).to_le_bytes());
    for (prefix, set) in &groups {
        for (name, t) in set.iter() {
            put_tensor(&mut out, &format!("{prefix}/{name}"), t.shape(), t.data());
        }
    }
    for (prefix, moments) in [("adam.m", &tr.adam.m), ("adam.v", &tr.adam.v)] {
        for ((name, t), buf) in tr.models.student.iter().zip(moments.iter()) {
            put_tensor(&mut out, &format!("{prefix}/{name}"), t.shape(), buf);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    f.sync_all()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let mut b = vec![0u8; len];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        String::from_utf8(b).map_err(|_| Error::Data("checkpoint: invalid UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u16()? as usize;
        let name = self.string(len)?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        self.inner.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Data("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Reads a checkpoint written by [`write_checkpoint`], checking the digest
/// and every tensor name and shape against the embedded config.
pub fn read_checkpoint(path: &Path) -> Result<Trainer> {
    let mut r = Reader {
        inner: io::BufReader::new(fs::File::open(path)?),
    };
    if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let digest = r.bytes::<32>()?;
    let len = r.u32()? as usize;
    let config: TrainConfig = toml::from_str(&r.string(len)?).map_err(|e| Error::Config(e.to_string()))?;
    if config.digest() != digest {
        return Err(Error::Data("checkpoint config digest mismatch".into()));
    }
    let iteration = r.u64()?;
    let step = r.u64()?;
    let selection = match r.u8()? {
        0 => None,
        _ => Some((r.u64()?, r.f64()?)),
    };

    let template = init_params(&config.model, 0)?;
    let fill = |prefix: &str, r: &mut Reader<_>| -> Result<ParamSet<f32>> {
        let mut set = ParamSet::new();
        for (name, t) in template.iter() {
            let (got, value) = r.tensor()?;
            let want = format!("{prefix}/{name}");
            if got != want || value.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {got} {:?} where {want} {:?} was expected",
                    value.shape(),
                    t.shape()
                )));
            }
            set.push(name, value);
        }
        Ok(set)
    };
    let count = r.u32()? as usize;
    let groups = if selection.is_some() { 5 } else { 4 };
    if count != groups * template.len() {
        return Err(Error::Data(format!("checkpoint holds {count} tensors, expected {}", groups * template.len())));
    }
    let student = fill("student", &mut r)?;
    let teacher = fill("teacher", &mut r)?;
    let best = match selection {
        Some((it, score)) => Some(Selection {
            iteration: it,
            score,
            teacher: fill("best", &mut r)?,
        }),
        None => None,
    };
    let m = fill("adam.m", &mut r)?;
    let v = fill("adam.v", &mut r)?;
    let mut adam = AdamState::new(config.adam, &student);
    adam.step = step;
    adam.m = m.tensors().iter().map(|t| t.data().to_vec()).collect();
    adam.v = v.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Data(format!("{} trailing bytes after checkpoint", rest.len())));
    }
    Ok(Trainer {
        models: ModelPair {
            config: config.model,
            student,
            teacher,
        },
        config,
        adam,
        iteration,
        best,
    })
}
