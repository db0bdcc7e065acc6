//! Binary feature store: id-indexed dense vectors for one view.
//!
//! On-disk layout (all integers little-endian):
//! magic `"OPDFEATS"`, version `u32`, dimension `u32`, count `u64`, then
//! per row: id length `u16`, UTF-8 id bytes, `dimension` 32-bit floats.
//! Row order is preserved, so a parse/serialize round trip of a valid
//! store is byte-identical.

use super::DataError;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use nalgebra::DVector;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"OPDFEATS";
const VERSION: u32 = 1;

/// Dense vectors for one view (regions or phrases), keyed by feature id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dimension: usize,
    rows: IndexMap<String, Vec<f32>>,
}

impl FeatureStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            rows: IndexMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Insert a row. The vector must match the store dimension, be finite,
    /// and carry a fresh id.
    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<(), DataError> {
        let id = id.into();
        if values.len() != self.dimension {
            return Err(DataError::BadRow {
                index: self.rows.len(),
                id,
                reason: format!(
                    "vector length {} does not match dimension {}",
                    values.len(),
                    self.dimension
                ),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::BadRow {
                index: self.rows.len(),
                id,
                reason: format!("non-finite value at component {pos}"),
            });
        }
        if self.rows.contains_key(&id) {
            return Err(DataError::DuplicateId(id));
        }
        self.rows.insert(id, values);
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    /// Row as an `f64` vector for numeric work.
    pub fn vector(&self, id: &str) -> Option<DVector<f64>> {
        self.rows
            .get(id)
            .map(|v| DVector::from_iterator(v.len(), v.iter().map(|&x| f64::from(x))))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn read_from<R: Read>(mut reader: R) -> Result<Self, DataError> {
        let mut magic = [0u8; 8];
        reader
            .read_exact(&mut magic)
            .map_err(|_| DataError::MalformedHeader("file too short for magic".into()))?;
        if &magic != MAGIC {
            return Err(DataError::MalformedHeader(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = reader
            .read_u32::<LittleEndian>()
            .map_err(|_| DataError::MalformedHeader("truncated version".into()))?;
        if version != VERSION {
            return Err(DataError::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        let dimension = reader
            .read_u32::<LittleEndian>()
            .map_err(|_| DataError::MalformedHeader("truncated dimension".into()))?
            as usize;
        let count = reader
            .read_u64::<LittleEndian>()
            .map_err(|_| DataError::MalformedHeader("truncated count".into()))?;

        let mut store = Self::new(dimension);
        for index in 0..count {
            let row_err = |reason: String| DataError::BadRow {
                index: index as usize,
                id: String::new(),
                reason,
            };
            let id_len = reader
                .read_u16::<LittleEndian>()
                .map_err(|_| row_err("truncated id length".into()))?;
            let mut id_bytes = vec![0u8; id_len as usize];
            reader
                .read_exact(&mut id_bytes)
                .map_err(|_| row_err("truncated id".into()))?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| row_err("id is not valid UTF-8".into()))?;
            let mut values = vec![0f32; dimension];
            for (pos, slot) in values.iter_mut().enumerate() {
                *slot = reader.read_f32::<LittleEndian>().map_err(|_| {
                    DataError::BadRow {
                        index: index as usize,
                        id: id.clone(),
                        reason: format!(
                            "row truncated at component {pos} of {dimension}"
                        ),
                    }
                })?;
            }
            store.insert(id, values)?;
        }
        Ok(store)
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> Result<(), DataError> {
        writer.write_all(MAGIC)?;
        writer.write_u32::<LittleEndian>(VERSION)?;
        writer.write_u32::<LittleEndian>(self.dimension as u32)?;
        writer.write_u64::<LittleEndian>(self.rows.len() as u64)?;
        for (index, (id, values)) in self.rows.iter().enumerate() {
            if id.len() > u16::MAX as usize {
                return Err(DataError::BadRow {
                    index,
                    id: id.clone(),
                    reason: "id longer than 65535 bytes".into(),
                });
            }
            writer.write_u16::<LittleEndian>(id.len() as u16)?;
            writer.write_all(id.as_bytes())?;
            for &v in values {
                writer.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut writer = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut writer)?;
        writer.flush()?;
        Ok(())
    }
}

/// Load a feature store from the binary format.
pub fn ingest_features(path: impl AsRef<Path>) -> Result<FeatureStore, DataError> {
    FeatureStore::read(path)
}

/// Persist a feature store in the binary format.
pub fn write_features(store: &FeatureStore, path: impl AsRef<Path>) -> Result<(), DataError> {
    store.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> FeatureStore {
        let mut store = FeatureStore::new(4);
        store.insert("a", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        store.insert("im1#0", vec![-0.5, 0.25, 0.0, 9.75]).unwrap();
        store
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let store = sample_store();
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let reread = FeatureStore::read_from(bytes.as_slice()).unwrap();
        assert_eq!(reread.len(), 2);
        assert_eq!(reread.dimension(), 4);
        let mut again = Vec::new();
        reread.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn header_dim_and_rows() {
        let store = sample_store();
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let reread = FeatureStore::read_from(bytes.as_slice()).unwrap();
        assert_eq!(reread.get("a").unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn short_row_reports_offending_row() {
        let store = sample_store();
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 6);
        let err = FeatureStore::read_from(bytes.as_slice()).unwrap_err();
        match err {
            DataError::BadRow { index, id, reason } => {
                assert_eq!(index, 1);
                assert_eq!(id, "im1#0");
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn wrong_length_insert_is_rejected() {
        let mut store = FeatureStore::new(4);
        let err = store.insert("x", vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, DataError::BadRow { .. }));
    }

    #[test]
    fn non_finite_insert_is_rejected() {
        let mut store = FeatureStore::new(2);
        let err = store.insert("x", vec![1.0, f32::NAN]).unwrap_err();
        match err {
            DataError::BadRow { reason, .. } => assert!(reason.contains("non-finite")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_malformed_header() {
        let err = FeatureStore::read_from(&b"NOTFEATS\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, DataError::MalformedHeader(_)));
    }
}
