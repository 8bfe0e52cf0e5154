//! Dataset files: a little-endian binary bundle plus a JSON sidecar holding
//! the configuration that produced it. See the README for the layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelConfig, CsiMatrix, CsiTensor};
use crate::geometry::WorldCoord2D;
use crate::scenario::{DatasetBundle, DatasetSizes, LabeledSample, Snapshot, TruthLink, Vehicle, WorldConfig};

pub const MAGIC: &[u8; 4] = b"MMVP";
pub const FORMAT_VERSION: u32 = 1;
pub const DATA_FILE: &str = "dataset.bin";
pub const SIDECAR_FILE: &str = "dataset.json";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("sidecar: {0}")]
    Sidecar(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub seed: u64,
    pub sizes: DatasetSizes,
    pub world: WorldConfig,
    pub channel: ChannelConfig,
}

fn write_len<W: Write>(w: &mut W, n: usize) -> std::io::Result<()> {
    w.write_u64::<LE>(n as u64)
}

fn read_len<R: Read>(r: &mut R, limit: usize) -> Result<usize, PersistError> {
    let n = r.read_u64::<LE>()?;
    if n > limit as u64 {
        return Err(PersistError::Corrupt(format!("length {n} exceeds limit {limit}")));
    }
    Ok(n as usize)
}

fn write_point<W: Write>(w: &mut W, p: WorldCoord2D) -> std::io::Result<()> {
    w.write_f64::<LE>(p.x)?;
    w.write_f64::<LE>(p.y)
}

fn read_point<R: Read>(r: &mut R) -> std::io::Result<WorldCoord2D> {
    Ok(WorldCoord2D::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?))
}

const LIMIT: usize = 1 << 28;

fn write_samples<W: Write>(w: &mut W, split: &[Vec<LabeledSample>]) -> std::io::Result<()> {
    for list in split {
        write_len(w, list.len())?;
        for s in list {
            write_point(w, s.position)?;
            for v in &s.csi.data {
                w.write_f64::<LE>(*v)?;
            }
        }
    }
    Ok(())
}

fn read_samples<R: Read>(r: &mut R, n_bs: usize, shape: (usize, usize)) -> Result<Vec<Vec<LabeledSample>>, PersistError> {
    (0..n_bs)
        .map(|_| {
            let n = read_len(r, LIMIT)?;
            (0..n)
                .map(|_| {
                    let position = read_point(r)?;
                    let mut data = vec![0.0; 2 * shape.0 * shape.1];
                    r.read_f64_into::<LE>(&mut data)?;
                    Ok(LabeledSample { csi: CsiTensor { n_antennas: shape.0, n_subcarriers: shape.1, data }, position })
                })
                .collect()
        })
        .collect()
}

fn write_snapshot<W: Write>(w: &mut W, s: &Snapshot) -> std::io::Result<()> {
    write_len(w, s.vehicles.len())?;
    for (v, &b) in s.vehicles.iter().zip(&s.association) {
        w.write_u32::<LE>(v.id)?;
        write_point(w, v.position)?;
        w.write_i8(v.heading)?;
        w.write_u32::<LE>(b as u32)?;
    }
    for (list, owners) in s.csi.iter().zip(&s.csi_owner) {
        write_len(w, list.len())?;
        for (h, &o) in list.iter().zip(owners) {
            w.write_u32::<LE>(o as u32)?;
            // column-major: subcarrier-major, antennas contiguous
            for z in h.entries.iter() {
                w.write_f64::<LE>(z.re)?;
                w.write_f64::<LE>(z.im)?;
            }
        }
    }
    write_len(w, s.detections.len())?;
    for d in &s.detections {
        write_point(w, *d)?;
    }
    for l in &s.truth_links {
        w.write_u32::<LE>(l.bs as u32)?;
        w.write_u32::<LE>(l.csi_index as u32)?;
        w.write_i64::<LE>(l.detection.map_or(-1, |d| d as i64))?;
    }
    Ok(())
}

fn read_snapshot<R: Read>(r: &mut R, n_bs: usize, shape: (usize, usize)) -> Result<Snapshot, PersistError> {
    let nv = read_len(r, LIMIT)?;
    let mut vehicles = Vec::with_capacity(nv);
    let mut association = Vec::with_capacity(nv);
    for _ in 0..nv {
        let id = r.read_u32::<LE>()?;
        let position = read_point(r)?;
        let heading = r.read_i8()?;
        vehicles.push(Vehicle { id, position, heading });
        association.push(r.read_u32::<LE>()? as usize);
    }
    let mut csi = Vec::with_capacity(n_bs);
    let mut csi_owner = Vec::with_capacity(n_bs);
    for _ in 0..n_bs {
        let n = read_len(r, LIMIT)?;
        let mut list = Vec::with_capacity(n);
        let mut owners = Vec::with_capacity(n);
        for _ in 0..n {
            owners.push(r.read_u32::<LE>()? as usize);
            let mut buf = vec![0.0; 2 * shape.0 * shape.1];
            r.read_f64_into::<LE>(&mut buf)?;
            let entries = DMatrix::from_iterator(
                shape.0,
                shape.1,
                buf.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])),
            );
            list.push(CsiMatrix { entries });
        }
        csi.push(list);
        csi_owner.push(owners);
    }
    let nd = read_len(r, LIMIT)?;
    let detections = (0..nd).map(|_| read_point(r)).collect::<Result<_, _>>()?;
    let mut truth_links = Vec::with_capacity(nv);
    for _ in 0..nv {
        let bs = r.read_u32::<LE>()? as usize;
        let csi_index = r.read_u32::<LE>()? as usize;
        let d = r.read_i64::<LE>()?;
        truth_links.push(TruthLink { bs, csi_index, detection: (d >= 0).then_some(d as usize) });
    }
    let bad_owner = csi_owner.iter().flatten().any(|&o| o >= nv) || association.iter().any(|&b| b >= n_bs);
    if bad_owner {
        return Err(PersistError::Corrupt("snapshot references are out of range".into()));
    }
    Ok(Snapshot { vehicles, association, csi, csi_owner, detections, truth_links })
}

pub fn write_bundle<W: Write>(w: &mut W, bundle: &DatasetBundle, shape: (usize, usize)) -> Result<(), PersistError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(bundle.labeled.len() as u32)?;
    w.write_u32::<LE>(shape.0 as u32)?;
    w.write_u32::<LE>(shape.1 as u32)?;
    write_samples(w, &bundle.labeled)?;
    write_samples(w, &bundle.validation)?;
    for split in [&bundle.multimodal, &bundle.test] {
        write_len(w, split.len())?;
        for s in split.iter() {
            write_snapshot(w, s)?;
        }
    }
    Ok(())
}

pub fn read_bundle<R: Read>(r: &mut R) -> Result<DatasetBundle, PersistError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PersistError::BadMagic);
    }
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(PersistError::Version(version));
    }
    let n_bs = r.read_u32::<LE>()? as usize;
    let shape = (r.read_u32::<LE>()? as usize, r.read_u32::<LE>()? as usize);
    if n_bs == 0 || n_bs > 1024 || shape.0 * shape.1 == 0 || shape.0 * shape.1 > 1 << 20 {
        return Err(PersistError::Corrupt(format!("implausible header: {n_bs} stations, shape {shape:?}")));
    }
    let labeled = read_samples(r, n_bs, shape)?;
    let validation = read_samples(r, n_bs, shape)?;
    let mut splits = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = read_len(r, LIMIT)?;
        splits.push((0..n).map(|_| read_snapshot(r, n_bs, shape)).collect::<Result<Vec<_>, _>>()?);
    }
    let test = splits.pop().expect("two splits");
    let multimodal = splits.pop().expect("two splits");
    Ok(DatasetBundle { labeled, validation, multimodal, test })
}

/// Writes `dataset.bin` and `dataset.json` into `dir`.
pub fn save_dataset(dir: &Path, bundle: &DatasetBundle, sidecar: &Sidecar) -> Result<(), PersistError> {
    std::fs::create_dir_all(dir)?;
    let shape = (sidecar.channel.n_antennas, sidecar.channel.n_subcarriers);
    let mut w = BufWriter::new(File::create(dir.join(DATA_FILE))?);
    write_bundle(&mut w, bundle, shape)?;
    w.flush()?;
    let json = serde_json::to_string_pretty(sidecar).map_err(|e| PersistError::Sidecar(e.to_string()))?;
    std::fs::write(dir.join(SIDECAR_FILE), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetBundle, Sidecar), PersistError> {
    let text = std::fs::read_to_string(dir.join(SIDECAR_FILE))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| PersistError::Sidecar(e.to_string()))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(PersistError::Version(sidecar.format_version));
    }
    let mut r = BufReader::new(File::open(dir.join(DATA_FILE))?);
    Ok((read_bundle(&mut r)?, sidecar))
}
