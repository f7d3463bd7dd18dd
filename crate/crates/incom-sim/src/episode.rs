//! Episode container and its binary file format.
//!
//! Layout (all little-endian): magic "INCOM-EP", u16 version, u32 header
//! fields (L, K_pts, V, H_img, W_img, proprio, d_base, d_arm), u64 seed,
//! u8 success, then f32 arrays in order: points (L×K_pts×5), images
//! (L×V×3×H×W), proprio (L×P), actions (L×(d_base+d_arm)), phases (L).
//! The per-point width (5) and channel count (3) are fixed by this version.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use incom_core::io::{self, FormatError};

use crate::obs::Observation;
use crate::world::{Phase, D_ARM, D_BASE, IMG_CHANNELS, POINT_DIM, PROPRIO_DIM};

pub const EPISODE_MAGIC: &[u8; 8] = b"INCOM-EP";
pub const EPISODE_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeDims {
    pub k_pts: usize,
    pub views: usize,
    pub h_img: usize,
    pub w_img: usize,
    pub proprio: usize,
    pub d_base: usize,
    pub d_arm: usize,
}

impl EpisodeDims {
    pub fn image_len(&self) -> usize {
        self.views * IMG_CHANNELS * self.h_img * self.w_img
    }

    pub fn action_dim(&self) -> usize {
        self.d_base + self.d_arm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub dims: EpisodeDims,
    pub seed: u64,
    pub success: bool,
    pub observations: Vec<Observation>,
    /// per step, base channels then arm channels
    pub actions: Vec<Vec<f32>>,
    pub phases: Vec<Phase>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    fn validate(&self) -> Result<(), FormatError> {
        let l = self.observations.len();
        if self.actions.len() != l || self.phases.len() != l {
            return Err(FormatError::Corrupt(format!(
                "length mismatch: {} obs, {} actions, {} phases",
                l,
                self.actions.len(),
                self.phases.len()
            )));
        }
        let d = &self.dims;
        for (i, o) in self.observations.iter().enumerate() {
            if o.points.len() != d.k_pts * POINT_DIM
                || o.images.len() != d.image_len()
                || o.proprio.len() != d.proprio
            {
                return Err(FormatError::Corrupt(format!("observation {i} shape mismatch")));
            }
        }
        if self.actions.iter().any(|a| a.len() != d.action_dim()) {
            return Err(FormatError::Corrupt("action width mismatch".into()));
        }
        Ok(())
    }
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<(), FormatError> {
    ep.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    io::write_header(&mut w, EPISODE_MAGIC, EPISODE_VERSION)?;
    let d = &ep.dims;
    for v in [
        ep.len(),
        d.k_pts,
        d.views,
        d.h_img,
        d.w_img,
        d.proprio,
        d.d_base,
        d.d_arm,
    ] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    w.write_u64::<LittleEndian>(ep.seed)?;
    w.write_u8(ep.success as u8)?;
    for o in &ep.observations {
        io::write_f32s(&mut w, &o.points)?;
    }
    for o in &ep.observations {
        io::write_f32s(&mut w, &o.images)?;
    }
    for o in &ep.observations {
        io::write_f32s(&mut w, &o.proprio)?;
    }
    for a in &ep.actions {
        io::write_f32s(&mut w, a)?;
    }
    let phases: Vec<f32> = ep.phases.iter().map(|p| p.index() as f32).collect();
    io::write_f32s(&mut w, &phases)?;
    w.flush()?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    io::read_header(&mut r, EPISODE_MAGIC, EPISODE_VERSION)?;
    let mut hdr = [0u32; 8];
    for h in hdr.iter_mut() {
        *h = r.read_u32::<LittleEndian>()?;
    }
    let l = hdr[0] as usize;
    let dims = EpisodeDims {
        k_pts: hdr[1] as usize,
        views: hdr[2] as usize,
        h_img: hdr[3] as usize,
        w_img: hdr[4] as usize,
        proprio: hdr[5] as usize,
        d_base: hdr[6] as usize,
        d_arm: hdr[7] as usize,
    };
    // sanity caps keep corrupt headers from driving huge allocations
    if l > 100_000 || dims.k_pts > 1 << 16 || dims.h_img > 1 << 12 || dims.w_img > 1 << 12 {
        return Err(FormatError::Corrupt(format!("implausible header {hdr:?}")));
    }
    let seed = r.read_u64::<LittleEndian>()?;
    let success = match r.read_u8()? {
        0 => false,
        1 => true,
        b => return Err(FormatError::Corrupt(format!("bad success byte {b}"))),
    };
    let points = io::read_f32s(&mut r, l * dims.k_pts * POINT_DIM)?;
    let images = io::read_f32s(&mut r, l * dims.image_len())?;
    let proprio = io::read_f32s(&mut r, l * dims.proprio)?;
    let actions_flat = io::read_f32s(&mut r, l * dims.action_dim())?;
    let phases_f = io::read_f32s(&mut r, l)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(FormatError::Corrupt("trailing bytes after payload".into()));
    }

    let mut observations = Vec::with_capacity(l);
    let (pl, il) = (dims.k_pts * POINT_DIM, dims.image_len());
    for i in 0..l {
        observations.push(Observation {
            points: points[i * pl..(i + 1) * pl].to_vec(),
            images: images[i * il..(i + 1) * il].to_vec(),
            proprio: proprio[i * dims.proprio..(i + 1) * dims.proprio].to_vec(),
        });
    }
    let actions = (0..l)
        .map(|i| actions_flat[i * dims.action_dim()..(i + 1) * dims.action_dim()].to_vec())
        .collect();
    let phases = phases_f
        .iter()
        .map(|&f| {
            if f.fract() != 0.0 {
                return Err(FormatError::Corrupt(format!("non-integral phase {f}")));
            }
            Phase::from_index(f as usize)
                .ok_or_else(|| FormatError::Corrupt(format!("phase index {f} out of range")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Episode { dims, seed, success, observations, actions, phases })
}

pub fn default_dims(k_pts: usize, h_img: usize, w_img: usize) -> EpisodeDims {
    EpisodeDims {
        k_pts,
        views: crate::world::N_VIEWS,
        h_img,
        w_img,
        proprio: PROPRIO_DIM,
        d_base: D_BASE,
        d_arm: D_ARM,
    }
}
