use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use incom_core::io::{self, FormatError};
use incom_core::nn::{ParamId, Params};
use incom_core::opt::Adam;
use incom_core::tensor::Tensor;

use crate::RunError;

pub const MAGIC: &[u8; 8] = b"INCOM-CK";
pub const VERSION: u16 = 1;

const MAX_NAME: usize = 4096;
const MAX_CONFIG: usize = 1 << 20;

/// Everything a checkpoint carries: a config snapshot (opaque text, compared
/// on resume), the optimizer step counter, named parameter tensors, and the
/// Adam moments when training state is included.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub opt: Option<OptState>,
}

#[derive(Debug)]
pub struct OptState {
    pub t: u64,
    /// (m, v) per parameter, in the same order as `params`
    pub moments: Vec<(Tensor<f32>, Tensor<f32>)>,
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<(), FormatError> {
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    io::write_f32s(w, t.data())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>, FormatError> {
    let rank = r.read_u32::<LittleEndian>()? as usize;
    if rank > 8 {
        return Err(FormatError::Corrupt(format!("tensor rank {rank} exceeds cap 8")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut n = 1usize;
    for _ in 0..rank {
        let d = r.read_u32::<LittleEndian>()? as usize;
        n = n.checked_mul(d).ok_or_else(|| FormatError::Corrupt("tensor size overflow".into()))?;
        shape.push(d);
    }
    if n > (1 << 28) {
        return Err(FormatError::Corrupt(format!("tensor of {n} scalars exceeds cap")));
    }
    let data = io::read_f32s(r, n)?;
    Ok(Tensor::new(shape, data))
}

/// Atomic save: the file appears under `path` only once fully written.
pub fn save(
    path: &Path,
    config: &str,
    step: u64,
    params: &Params<f32>,
    adam: Option<&Adam<f32>>,
) -> Result<(), RunError> {
    let tmp = path.with_extension("ck.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        io::write_header(&mut w, MAGIC, VERSION)?;
        io::write_str(&mut w, config)?;
        w.write_u64::<LittleEndian>(step)?;
        w.write_u32::<LittleEndian>(params.len() as u32)?;
        for (name, t) in params.iter() {
            io::write_str(&mut w, name)?;
            write_tensor(&mut w, t)?;
        }
        match adam {
            None => w.write_u8(0)?,
            Some(a) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(a.step_count())?;
                for i in 0..params.len() {
                    let pid = ParamId(i);
                    write_tensor(&mut w, a.moment_m(pid))?;
                    write_tensor(&mut w, a.moment_v(pid))?;
                }
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, RunError> {
    if !path.exists() {
        return Err(RunError::MissingArtifact(format!("checkpoint {}", path.display())));
    }
    let mut r = BufReader::new(File::open(path)?);
    io::read_header(&mut r, MAGIC, VERSION)?;
    let config = io::read_str(&mut r, MAX_CONFIG)?;
    let step = r.read_u64::<LittleEndian>().map_err(FormatError::from)?;
    let n = r.read_u32::<LittleEndian>().map_err(FormatError::from)? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name = io::read_str(&mut r, MAX_NAME)?;
        let t = read_tensor(&mut r)?;
        params.push((name, t));
    }
    let opt = match r.read_u8().map_err(FormatError::from)? {
        0 => None,
        1 => {
            let t = r.read_u64::<LittleEndian>().map_err(FormatError::from)?;
            let mut moments = Vec::with_capacity(n);
            for _ in 0..n {
                let m = read_tensor(&mut r)?;
                let v = read_tensor(&mut r)?;
                moments.push((m, v));
            }
            Some(OptState { t, moments })
        }
        k => return Err(FormatError::Corrupt(format!("bad optimizer flag {k}")).into()),
    };
    Ok(Checkpoint { config, step, params, opt })
}

impl Checkpoint {
    /// Seed a parameter store with the stored tensors; model construction via
    /// `get_or_init` then adopts them instead of re-initializing.
    pub fn seed_params(&self) -> Params<f32> {
        let mut p = Params::new();
        for (name, t) in &self.params {
            p.insert_raw(name, t.clone());
        }
        p
    }

    /// Restore Adam moments onto a freshly built optimizer. The parameter
    /// store must contain exactly the checkpointed names.
    pub fn restore_adam(&self, params: &Params<f32>, adam: &mut Adam<f32>) -> Result<(), RunError> {
        let Some(opt) = &self.opt else {
            return Err(RunError::MissingArtifact("checkpoint has no optimizer state".into()));
        };
        for ((name, _), (m, v)) in self.params.iter().zip(&opt.moments) {
            let pid = params.id(name).ok_or_else(|| {
                RunError::Shape(format!("checkpoint param {name} absent from the model"))
            })?;
            adam.restore(pid, m.clone(), v.clone(), opt.t);
        }
        Ok(())
    }
}
