//! Versioned container file of named f64 arrays.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic  b"JNCK"
//! u32    format version (currently 1)
//! u32    entry count
//! entry* name_len: u32, name: utf8, rows: u32, cols: u32, values: f64 * rows*cols
//! ```
//!
//! Entries are written sorted by name, so equal models produce byte-identical
//! files and identical files load identical models.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::{ParamError, ParamSet};

const MAGIC: &[u8; 4] = b"JNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported format version {found} (supported: {FORMAT_VERSION})")]
    BadVersion { path: String, found: u32 },
    #[error("{path}: duplicate array `{name}`")]
    Duplicate { path: String, name: String },
    #[error("{path}: malformed entry `{name}`: {msg}")]
    Malformed { path: String, name: String, msg: String },
    #[error("missing array `{0}`")]
    MissingArray(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// In-memory checkpoint: name -> (rows, cols, values).
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    arrays: BTreeMap<String, (usize, usize, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) {
        self.arrays.insert(name.into(), (rows, cols, values));
    }

    pub fn get(&self, name: &str) -> Option<&(usize, usize, Vec<f64>)> {
        self.arrays.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&(usize, usize, Vec<f64>), CheckpointError> {
        self.arrays.get(name).ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Add every array of a parameter set under `prefix/name`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet) {
        for e in params.iter() {
            self.insert(format!("{prefix}/{}", e.name), e.rows, e.cols, e.values.clone());
        }
    }

    /// Restore a parameter set whose entries were stored under `prefix/`.
    /// The set must already have its layout (names and shapes) built.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<(), CheckpointError> {
        for idx in 0..params.len() {
            let e = params.entry(idx);
            let key = format!("{prefix}/{}", e.name);
            let (rows, cols, values) = self.require(&key)?;
            if (*rows, *cols) != (e.rows, e.cols) {
                return Err(CheckpointError::Malformed {
                    path: String::new(),
                    name: key,
                    msg: format!("shape {}x{} in file, {}x{} expected", rows, cols, e.rows, e.cols),
                });
            }
            params.entry_mut(idx).values = values.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(io_err)?;
            }
        }
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes()).map_err(io_err)?;
        for (name, (rows, cols, values)) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            w.write_all(&(*rows as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(&(*cols as u32).to_le_bytes()).map_err(io_err)?;
            for v in values {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let pstr = path.display().to_string();
        let io_err = |source| CheckpointError::Io { path: pstr.clone(), source };
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic { path: pstr });
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion { path: pstr, found: version });
        }
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let count = u32::from_le_bytes(u32buf);

        let mut out = Checkpoint::new();
        for _ in 0..count {
            r.read_exact(&mut u32buf).map_err(io_err)?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(io_err)?;
            let name = String::from_utf8(name_bytes).map_err(|e| CheckpointError::Malformed {
                path: pstr.clone(),
                name: String::new(),
                msg: format!("non-utf8 name: {e}"),
            })?;
            r.read_exact(&mut u32buf).map_err(io_err)?;
            let rows = u32::from_le_bytes(u32buf) as usize;
            r.read_exact(&mut u32buf).map_err(io_err)?;
            let cols = u32::from_le_bytes(u32buf) as usize;
            let mut values = vec![0.0f64; rows * cols];
            let mut f64buf = [0u8; 8];
            for v in &mut values {
                r.read_exact(&mut f64buf).map_err(io_err)?;
                *v = f64::from_le_bytes(f64buf);
            }
            if out.arrays.contains_key(&name) {
                return Err(CheckpointError::Duplicate { path: pstr, name });
            }
            out.insert(name, rows, cols, values);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_preserves_bits_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut ck = Checkpoint::new();
        ck.insert("z/w", 2, 3, vec![1.5, -0.25, 1e-300, f64::MIN_POSITIVE, 3.0, -0.0]);
        ck.insert("a/b", 1, 1, vec![std::f64::consts::PI]);
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded.get("z/w").unwrap().2[5].to_bits(), (-0.0f64).to_bits());
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::BadMagic { .. })));
        let mut bytes = b"JNCK".to_vec();
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::BadVersion { found: 9, .. })));
    }

    #[test]
    fn param_set_round_trip() {
        let mut params = ParamSet::new();
        params.push("fc.w", 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        params.push("fc.b", 1, 2, vec![-1.0, -2.0]).unwrap();
        let mut ck = Checkpoint::new();
        ck.insert_params("net", &params);

        let mut restored = ParamSet::new();
        restored.push("fc.w", 2, 2, vec![0.0; 4]).unwrap();
        restored.push("fc.b", 1, 2, vec![0.0; 2]).unwrap();
        ck.load_params("net", &mut restored).unwrap();
        assert_eq!(restored.entry(0).values, vec![1.0, 2.0, 3.0, 4.0]);

        let mut wrong = ParamSet::new();
        wrong.push("fc.w", 4, 1, vec![0.0; 4]).unwrap();
        assert!(ck.load_params("net", &mut wrong).is_err());
        let mut missing = ParamSet::new();
        missing.push("other", 1, 1, vec![0.0]).unwrap();
        assert!(matches!(ck.load_params("net", &mut missing), Err(CheckpointError::MissingArray(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn save_load_save_is_byte_identical(
            vals in proptest::collection::vec(-1e12f64..1e12, 1..64),
            rows in 1usize..8,
        ) {
            let cols = vals.len();
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("p1");
            let p2 = dir.path().join("p2");
            let mut ck = Checkpoint::new();
            let mut grid = Vec::new();
            for _ in 0..rows { grid.extend_from_slice(&vals); }
            ck.insert("arr", rows, cols, grid);
            ck.save(&p1).unwrap();
            Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
            prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }
}
