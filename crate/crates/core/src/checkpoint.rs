//! Versioned binary checkpoints for policy and classifier parameters.
//!
//! Layout (all integers little-endian):
//! `magic "RIFFCKPT"`, `u32 version`, `u8 kind`, kind-specific header,
//! `u32 segment count`, then per segment `u32 name length`, name bytes,
//! `u64 value count`, values as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::classifier::{ClassifierConfig, ClassifierParams, TuningMode};
use crate::diffmath::{ParamVector, Segment};
use crate::error::{Result, RiffError};
use crate::seqpolicy::{PolicyConfig, PolicyParams};

pub const MAGIC: &[u8; 8] = b"RIFFCKPT";
pub const VERSION: u32 = 1;
const KIND_POLICY: u8 = 1;
const KIND_CLASSIFIER: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpointed {
    Policy(PolicyParams),
    Classifier(ClassifierParams),
}

fn fmt_err(msg: impl Into<String>) -> RiffError {
    RiffError::Format(msg.into())
}

fn write_params<W: Write>(w: &mut W, params: &ParamVector) -> Result<()> {
    w.write_u32::<LittleEndian>(params.layout().len() as u32)?;
    for seg in params.layout() {
        w.write_u32::<LittleEndian>(seg.name.len() as u32)?;
        w.write_all(seg.name.as_bytes())?;
        w.write_u64::<LittleEndian>(seg.len as u64)?;
        for &v in &params.values()[seg.offset..seg.offset + seg.len] {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R) -> Result<ParamVector> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut values = Vec::new();
    let mut layout = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        if name_len > 256 {
            return Err(fmt_err(format!("segment name length {name_len} is implausible")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| fmt_err("segment name is not UTF-8"))?;
        let len = r.read_u64::<LittleEndian>()? as usize;
        let offset = values.len();
        for _ in 0..len {
            values.push(r.read_f64::<LittleEndian>()?);
        }
        layout.push(Segment { name, offset, len });
    }
    ParamVector::from_parts(values, layout)
}

fn u<R: Read>(r: &mut R) -> Result<usize> {
    Ok(r.read_u64::<LittleEndian>()? as usize)
}

fn write_u64s<W: Write>(w: &mut W, xs: &[u64]) -> Result<()> {
    for &x in xs {
        w.write_u64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, item: &Checkpointed) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    match item {
        Checkpointed::Policy(p) => {
            w.write_u8(KIND_POLICY)?;
            let c = p.config;
            write_u64s(w, &[c.vocab as u64, c.embed_dim as u64, c.hidden as u64, c.max_len as u64])?;
            write_params(w, &p.params)
        }
        Checkpointed::Classifier(p) => {
            w.write_u8(KIND_CLASSIFIER)?;
            w.write_u8(p.mode.code())?;
            let c = p.config;
            write_u64s(
                w,
                &[
                    c.vocab as u64,
                    c.embed_dim as u64,
                    c.num_labels as u64,
                    c.mask_id as u64,
                    c.max_len as u64,
                    c.prompt_len as u64,
                    c.lora_rank as u64,
                    c.cls_hidden as u64,
                ],
            )?;
            w.write_f64::<LittleEndian>(c.lora_alpha)?;
            write_params(w, &p.params)
        }
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpointed> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt_err("not a checkpoint file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    match r.read_u8()? {
        KIND_POLICY => {
            let config = PolicyConfig { vocab: u(r)?, embed_dim: u(r)?, hidden: u(r)?, max_len: u(r)? };
            let params = read_params(r)?;
            Ok(Checkpointed::Policy(PolicyParams::from_parts(config, params)?))
        }
        KIND_CLASSIFIER => {
            let code = r.read_u8()?;
            let mode = TuningMode::from_code(code).ok_or_else(|| fmt_err(format!("unknown tuning mode code {code}")))?;
            let (vocab, embed_dim, num_labels) = (u(r)?, u(r)?, u(r)?);
            let mask_id = u32::try_from(u(r)?).map_err(|_| fmt_err("mask id overflows"))?;
            let (max_len, prompt_len, lora_rank, cls_hidden) = (u(r)?, u(r)?, u(r)?, u(r)?);
            let lora_alpha = r.read_f64::<LittleEndian>()?;
            let config =
                ClassifierConfig { vocab, embed_dim, num_labels, mask_id, max_len, prompt_len, lora_rank, lora_alpha, cls_hidden };
            let params = read_params(r)?;
            Ok(Checkpointed::Classifier(ClassifierParams::from_parts(config, mode, params)?))
        }
        other => Err(fmt_err(format!("unknown checkpoint kind {other}"))),
    }
}

pub fn save(path: &Path, item: &Checkpointed) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, item)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpointed> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

pub fn save_policy(path: &Path, p: &PolicyParams) -> Result<()> {
    save(path, &Checkpointed::Policy(p.clone()))
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    match load(path)? {
        Checkpointed::Policy(p) => Ok(p),
        Checkpointed::Classifier(_) => Err(fmt_err(format!("{} holds a classifier, expected a policy", path.display()))),
    }
}

pub fn save_classifier(path: &Path, c: &ClassifierParams) -> Result<()> {
    save(path, &Checkpointed::Classifier(c.clone()))
}

pub fn load_classifier(path: &Path) -> Result<ClassifierParams> {
    match load(path)? {
        Checkpointed::Classifier(c) => Ok(c),
        Checkpointed::Policy(_) => Err(fmt_err(format!("{} holds a policy, expected a classifier", path.display()))),
    }
}

/// Hex SHA-256 of the serialized checkpoint bytes.
pub fn content_hash(item: &Checkpointed) -> String {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, item).expect("writing to memory cannot fail");
    hex::encode(Sha256::digest(&buf))
}

pub fn policy_hash(p: &PolicyParams) -> String {
    content_hash(&Checkpointed::Policy(p.clone()))
}

/// Hex SHA-256 of a file on disk.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_round_trip_bitwise() {
        let p = PolicyParams::init(PolicyConfig::new(7, 5), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_policy(&path, &p).unwrap();
        assert_eq!(load_policy(&path).unwrap(), p);
        assert!(load_classifier(&path).is_err());
    }

    #[test]
    fn classifier_round_trip_every_mode() {
        for mode in TuningMode::ALL {
            let c = ClassifierParams::init(ClassifierConfig::new(9, 4, 3, 8), mode, 5).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &Checkpointed::Classifier(c.clone())).unwrap();
            assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), Checkpointed::Classifier(c));
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_checkpoint(&mut &b"NOTACKPT\x01\x00\x00\x00"[..]).is_err());
        let p = PolicyParams::init(PolicyConfig::new(4, 3), 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &Checkpointed::Policy(p)).unwrap();
        buf[8] = 9;
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
        buf[8] = 1;
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let p = PolicyParams::init(PolicyConfig::new(4, 3), 0).unwrap();
        let mut q = p.clone();
        assert_eq!(policy_hash(&p), policy_hash(&q));
        q.params.values_mut()[0] += 1e-12;
        assert_ne!(policy_hash(&p), policy_hash(&q));
    }
}
