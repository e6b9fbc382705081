//! Binary population checkpoints.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic      8 bytes  "SCPOPCK\0"
//! version    u32
//! hash       32 bytes  SHA-256 of the training config JSON
//! arch_len   u32, followed by the architecture as JSON
//! members    u32
//! params     u64       parameters per member
//! data       members * params f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::network::{Architecture, Network};

pub const MAGIC: &[u8; 8] = b"SCPOPCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub architecture: Architecture,
    pub members: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let arch = serde_json::to_vec(&self.architecture).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let params = self.members.first().map_or(0, Vec::len);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        w.write_all(&(arch.len() as u32).to_le_bytes())?;
        w.write_all(&arch)?;
        w.write_all(&(self.members.len() as u32).to_le_bytes())?;
        w.write_all(&(params as u64).to_le_bytes())?;
        for m in &self.members {
            assert_eq!(m.len(), params, "members share one architecture");
            for v in m {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let arch_len = read_u32(&mut r)? as usize;
        let mut arch = vec![0u8; arch_len];
        r.read_exact(&mut arch)?;
        let architecture: Architecture =
            serde_json::from_slice(&arch).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let count = read_u32(&mut r)? as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let params = u64::from_le_bytes(b8) as usize;
        let expected = Network::new(architecture.clone()).num_params();
        if params != expected {
            return Err(CheckpointError::Corrupt(format!("{params} parameters per member, architecture needs {expected}")));
        }
        let mut members = Vec::with_capacity(count);
        for _ in 0..count {
            let mut m = Vec::with_capacity(params);
            for _ in 0..params {
                r.read_exact(&mut b8)?;
                m.push(f64::from_le_bytes(b8));
            }
            members.push(m);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { config_hash, architecture, members })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
