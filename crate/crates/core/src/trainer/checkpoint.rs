//! Checkpoint binary format: magic `"OPDCKPT1"`, tensor count `u32`,
//! then per tensor a length-prefixed name (`u16`), rows `u32`, cols
//! `u32`, and row-major little-endian f32 data; the rest of the file is
//! a JSON config blob. Parameters live on the f32 grid in memory, so a
//! save/load/save round trip is byte-identical and probe scores are
//! preserved exactly.

use super::TrainError;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"OPDCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, DMatrix<f64>)>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            tensors: Vec::new(),
            config,
        }
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &DMatrix<f64>) {
        self.tensors.push((name.into(), m.clone()));
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &DVector<f64>) {
        self.tensors
            .push((name.into(), DMatrix::from_column_slice(v.len(), 1, v.as_slice())));
    }

    pub fn matrix(&self, name: &str) -> Result<&DMatrix<f64>, TrainError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| TrainError::CheckpointFormat(format!("missing tensor {name:?}")))
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>, TrainError> {
        let m = self.matrix(name)?;
        if m.ncols() != 1 {
            return Err(TrainError::CheckpointFormat(format!(
                "tensor {name:?} is {}x{}, expected a column vector",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(DVector::from_column_slice(m.as_slice()))
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> Result<(), TrainError> {
        writer.write_all(MAGIC)?;
        writer.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, tensor) in &self.tensors {
            if name.len() > u16::MAX as usize {
                return Err(TrainError::CheckpointFormat(format!(
                    "tensor name {name:?} too long"
                )));
            }
            writer.write_u16::<LittleEndian>(name.len() as u16)?;
            writer.write_all(name.as_bytes())?;
            writer.write_u32::<LittleEndian>(tensor.nrows() as u32)?;
            writer.write_u32::<LittleEndian>(tensor.ncols() as u32)?;
            for r in 0..tensor.nrows() {
                for c in 0..tensor.ncols() {
                    writer.write_f32::<LittleEndian>(tensor[(r, c)] as f32)?;
                }
            }
        }
        let blob = serde_json::to_vec(&self.config)
            .map_err(|e| TrainError::CheckpointFormat(e.to_string()))?;
        writer.write_all(&blob)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut reader: R) -> Result<Self, TrainError> {
        let mut magic = [0u8; 8];
        reader
            .read_exact(&mut magic)
            .map_err(|_| TrainError::CheckpointFormat("file too short for magic".into()))?;
        if &magic != MAGIC {
            return Err(TrainError::CheckpointFormat(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let count = reader
            .read_u32::<LittleEndian>()
            .map_err(|_| TrainError::CheckpointFormat("truncated tensor count".into()))?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = reader
                .read_u16::<LittleEndian>()
                .map_err(|_| TrainError::CheckpointFormat("truncated tensor name".into()))?;
            let mut name = vec![0u8; name_len as usize];
            reader
                .read_exact(&mut name)
                .map_err(|_| TrainError::CheckpointFormat("truncated tensor name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| TrainError::CheckpointFormat("tensor name not UTF-8".into()))?;
            let rows = reader
                .read_u32::<LittleEndian>()
                .map_err(|_| TrainError::CheckpointFormat("truncated tensor shape".into()))?
                as usize;
            let cols = reader
                .read_u32::<LittleEndian>()
                .map_err(|_| TrainError::CheckpointFormat("truncated tensor shape".into()))?
                as usize;
            let mut tensor = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    tensor[(r, c)] = f64::from(
                        reader.read_f32::<LittleEndian>().map_err(|_| {
                            TrainError::CheckpointFormat(format!(
                                "tensor {name:?} truncated at ({r}, {c})"
                            ))
                        })?,
                    );
                }
            }
            tensors.push((name, tensor));
        }
        let mut blob = Vec::new();
        reader.read_to_end(&mut blob)?;
        let config = serde_json::from_slice(&blob)
            .map_err(|e| TrainError::CheckpointFormat(format!("config blob: {e}")))?;
        Ok(Self { tensors, config })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut writer = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut writer)?;
        writer.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut ckpt = Checkpoint::new(json!({"kind": "test", "seed": 7}));
        // values already on the f32 grid, as all persisted parameters are
        let m = DMatrix::from_fn(3, 4, |r, c| ((r * 4 + c) as f32 * 0.37 - 1.0) as f64);
        ckpt.push_matrix("w", &m);
        ckpt.push_vector("b", &DVector::from_vec(vec![0.25, -0.5, 1.0]));

        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.matrix("w").unwrap(), &m);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(back.config["seed"], 7);
    }

    #[test]
    fn missing_tensor_reports_name() {
        let ckpt = Checkpoint::new(json!({}));
        let err = ckpt.matrix("nope").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = Checkpoint::read_from(&b"WRONGMAG\x00\x00\x00\x00{}"[..]).unwrap_err();
        assert!(matches!(err, TrainError::CheckpointFormat(_)));
    }
}
