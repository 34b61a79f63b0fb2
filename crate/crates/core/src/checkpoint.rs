//! Sectioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DFCK" | version u32 | role (len u64 + utf8) | config (len u64 + utf8)
//! | section count u64
//! | per section: name (len u64 + utf8), ndim u64, extents u64 * ndim
//! | payload byte length u64 | payload: f64 * numel per section, in order
//! | fnv1a-64 checksum of the payload bytes
//! ```
//!
//! Sections appear in parameter registration order, which is fixed by the
//! config, so save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::backbone::Teacher;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::rng::Rng;
use crate::vit::HybridViT;

const MAGIC: &[u8; 4] = b"DFCK";
const VERSION: u32 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

/// A checkpoint as read from disk, before binding to a model.
#[derive(Debug)]
pub struct CheckpointData {
    pub role: String,
    pub config_text: String,
    pub sections: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn save(path: &Path, role: &str, config_text: &str, params: &ParamSet) -> Result<()> {
    let mut payload = Vec::new();
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    write_str(&mut header, role);
    write_str(&mut header, config_text);
    header.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params.iter() {
        write_str(&mut header, name);
        header.extend_from_slice(&(tensor.shape.len() as u64).to_le_bytes());
        for &d in &tensor.shape {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    let checksum = fnv1a64(&payload);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&header)?;
    f.write_all(&payload)?;
    f.write_all(&checksum.to_le_bytes())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;

    let magic = take(&bytes, &mut at, 4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let role = read_str(&bytes, &mut at)?;
    let config_text = read_str(&bytes, &mut at)?;
    let count = read_u64(&bytes, &mut at)? as usize;

    let mut shapes = Vec::with_capacity(count);
    let mut total = 0usize;
    for _ in 0..count {
        let name = read_str(&bytes, &mut at)?;
        let ndim = read_u64(&bytes, &mut at)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&bytes, &mut at)? as usize);
        }
        let numel: usize = shape.iter().product();
        total += numel;
        shapes.push((name, shape, numel));
    }
    let payload_len = read_u64(&bytes, &mut at)? as usize;
    if payload_len != total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload length {payload_len} does not match section shapes totalling {} floats",
            total
        )));
    }
    let payload = take(&bytes, &mut at, payload_len)?;
    let checksum = read_u64(&bytes, &mut at)?;
    if at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checksum".into()));
    }
    if checksum != fnv1a64(payload) {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }

    let mut sections = Vec::with_capacity(count);
    let mut off = 0usize;
    for (name, shape, numel) in shapes {
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let b: [u8; 8] = payload[off + i * 8..off + i * 8 + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(b));
        }
        off += numel * 8;
        sections.push((name, shape, data));
    }
    Ok(CheckpointData { role, config_text, sections })
}

/// Copy checkpoint sections into a parameter set, matching by name and
/// verifying shapes. Both directions must match exactly.
pub fn load_into(data: &CheckpointData, params: &mut ParamSet) -> Result<()> {
    if data.sections.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} sections, model has {} parameters",
            data.sections.len(),
            params.len()
        )));
    }
    for (name, shape, values) in &data.sections {
        let mut found = false;
        for (pname, tensor) in params.iter_mut() {
            if pname == name {
                if &tensor.shape != shape {
                    return Err(Error::Checkpoint(format!(
                        "section '{name}': checkpoint shape {shape:?} does not match model shape {:?}",
                        tensor.shape
                    )));
                }
                tensor.data.copy_from_slice(values);
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Checkpoint(format!("section '{name}' has no matching model parameter")));
        }
    }
    Ok(())
}

pub fn save_teacher(path: &Path, cfg: &ExperimentConfig, teacher: &Teacher) -> Result<()> {
    save(path, "teacher", &cfg.to_canonical_string(), &teacher.params)
}

pub fn save_student(path: &Path, cfg: &ExperimentConfig, model: &HybridViT) -> Result<()> {
    save(path, "student", &cfg.to_canonical_string(), &model.params)
}

pub fn load_teacher(path: &Path) -> Result<(Teacher, ExperimentConfig)> {
    let data = load(path)?;
    if data.role != "teacher" {
        return Err(Error::Checkpoint(format!("expected a teacher checkpoint, found role '{}'", data.role)));
    }
    let cfg = ExperimentConfig::parse(&data.config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config does not parse: {e}")))?;
    let mut teacher = Teacher::new(&cfg.model.backbone, cfg.model.patch.channels, &mut Rng::from_seed(0))?;
    load_into(&data, &mut teacher.params)?;
    Ok((teacher, cfg))
}

pub fn load_student(path: &Path) -> Result<(HybridViT, ExperimentConfig)> {
    let data = load(path)?;
    if data.role != "student" {
        return Err(Error::Checkpoint(format!("expected a student checkpoint, found role '{}'", data.role)));
    }
    let cfg = ExperimentConfig::parse(&data.config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config does not parse: {e}")))?;
    let mut model = HybridViT::new(&cfg.model, &mut Rng::from_seed(0))?;
    load_into(&data, &mut model.params)?;
    Ok((model, cfg))
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *at + n > bytes.len() {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

fn read_u64(bytes: &[u8], at: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, at, 8)?.try_into().unwrap()))
}

fn read_str(bytes: &[u8], at: &mut usize) -> Result<String> {
    let len = read_u64(bytes, at)? as usize;
    if len > bytes.len() {
        return Err(Error::Checkpoint("string length exceeds file size".into()));
    }
    String::from_utf8(take(bytes, at, len)?.to_vec())
        .map_err(|_| Error::Checkpoint("non-utf8 string".into()))
}
