//! Binary checkpoint container.
//!
//! Layout: magic, version, a JSON header (config, counters, schedule and
//! prototype bank), four little-endian f64 arrays (student, teacher, Adam m,
//! Adam v) and a trailing FNV-1a checksum over everything before it.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Adam, PlateauSchedule, TrainState};
use crate::distill::TeacherState;
use crate::error::{Error, Result};
use crate::gpa::PrototypeBank;
use crate::types::Config;

const MAGIC: &[u8; 8] = b"OMNICKPT";
const VERSION: u32 = 1;

/// Config keys that may change between saving and resuming.
const RESUMABLE_KEYS: [&str; 5] = ["steps", "eval_interval", "score_thresh", "nms_iou", "max_dets"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    step: u64,
    lr: f64,
    adam_t: u64,
    teacher_decay: f64,
    schedule: PlateauSchedule,
    bank: PrototypeBank,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let header = Header {
            config: self.config.clone(),
            step: s.step,
            lr: s.adam.lr,
            adam_t: s.adam.t,
            teacher_decay: s.teacher.decay,
            schedule: s.schedule.clone(),
            bank: s.bank.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 32 * s.params.len() + 64);
        out.extend_from_slice(MAGIC);
        let w = |out: &mut Vec<u8>, v: u64| out.write_u64::<LittleEndian>(v).expect("vec write");
        out.write_u32::<LittleEndian>(VERSION).expect("vec write");
        w(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
        for arr in [&s.params, &s.teacher.params, &s.adam.m, &s.adam.v] {
            w(&mut out, arr.len() as u64);
            for &x in arr.iter() {
                out.write_f64::<LittleEndian>(x).expect("vec write");
            }
        }
        let sum = fnv1a(&out);
        w(&mut out, sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 8 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint file (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = Cursor::new(tail).read_u64::<LittleEndian>().map_err(|e| corrupt(path, e.to_string()))?;
        if stored != fnv1a(body) {
            return Err(corrupt(path, "checksum mismatch"));
        }
        let mut r = Cursor::new(&body[8..]);
        let bad = |e: std::io::Error| corrupt(path, format!("truncated: {e}"));
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        let hlen = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        let mut json = vec![0u8; hlen.min(body.len())];
        r.read_exact(&mut json).map_err(bad)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        let mut arrays = Vec::with_capacity(4);
        for _ in 0..4 {
            let n = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
            if n > body.len() / 8 {
                return Err(corrupt(path, "array length exceeds file size"));
            }
            let mut v = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(bad)?;
            arrays.push(v);
        }
        let n = arrays[0].len();
        if arrays.iter().any(|a| a.len() != n) {
            return Err(corrupt(path, "parameter arrays differ in length"));
        }
        let v = arrays.pop().expect("4 arrays");
        let m = arrays.pop().expect("4 arrays");
        let teacher = arrays.pop().expect("4 arrays");
        let params = arrays.pop().expect("4 arrays");
        let c = &header.config;
        Ok(Checkpoint {
            state: TrainState {
                params,
                teacher: TeacherState {
                    params: teacher,
                    decay: header.teacher_decay,
                },
                bank: header.bank,
                adam: Adam {
                    lr: header.lr,
                    beta1: c.adam_beta1,
                    beta2: c.adam_beta2,
                    eps: c.adam_eps,
                    m,
                    v,
                    t: header.adam_t,
                },
                schedule: header.schedule,
                step: header.step,
            },
            config: header.config,
        })
    }

    /// Fails with the first config key that differs from `expected`, ignoring
    /// keys that only affect run length or inference.
    pub fn ensure_compatible(&self, expected: &Config) -> Result<()> {
        let a = serde_json::to_value(&self.config)?;
        let b = serde_json::to_value(expected)?;
        let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
            return Err(Error::Invalid("config did not serialize to an object".into()));
        };
        for (k, found) in a {
            if RESUMABLE_KEYS.contains(&k.as_str()) {
                continue;
            }
            let want = &b[k];
            if found != want {
                return Err(Error::ConfigMismatch {
                    field: k.clone(),
                    found: found.to_string(),
                    expected: want.to_string(),
                });
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes, path)
}
