//! GridField files: a JSON header next to a flat sample file.
//!
//! The header `<stem>.json` records the grid, the shape, the layout and the
//! encoding; the samples live in `<stem>.csv` (one value per line, shortest
//! round-trip decimal) or `<stem>.bin` (little-endian f64). Both encodings
//! reload bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GridField, Shape, SpaceTimeGrid};
use crate::error::{LabError, Result};

pub const LAYOUT: &str =
    "column-major: one block per component; within a block time slowest, spatial axis 0 fastest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Csv,
    F64Le,
}

impl Encoding {
    fn extension(self) -> &'static str {
        match self {
            Encoding::Csv => "csv",
            Encoding::F64Le => "bin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub format: String,
    pub version: u32,
    pub grid: SpaceTimeGrid,
    pub shape: Shape,
    pub layout: String,
    pub encoding: Encoding,
    pub count: usize,
    pub data_file: String,
}

/// Writes `<stem>.json` and the sample file; returns the header path.
pub fn write_field(field: &GridField, stem: &Path, encoding: Encoding) -> Result<PathBuf> {
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let data_path = stem.with_extension(encoding.extension());
    let header = FieldHeader {
        format: "gridfield".into(),
        version: 1,
        grid: field.grid().clone(),
        shape: field.shape(),
        layout: LAYOUT.into(),
        encoding,
        count: field.samples().len(),
        data_file: data_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut out = BufWriter::new(fs::File::create(&data_path)?);
    match encoding {
        Encoding::Csv => {
            for v in field.samples() {
                writeln!(out, "{v:?}")?;
            }
        }
        Encoding::F64Le => {
            for v in field.samples() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    let header_path = stem.with_extension("json");
    fs::write(&header_path, serde_json::to_string_pretty(&header)?)?;
    Ok(header_path)
}

pub fn read_field(header_path: &Path) -> Result<GridField> {
    let header: FieldHeader = serde_json::from_str(&fs::read_to_string(header_path)?)?;
    if header.format != "gridfield" {
        return Err(LabError::Parse(format!(
            "{}: not a gridfield header",
            header_path.display()
        )));
    }
    let data_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.data_file);
    let samples = match header.encoding {
        Encoding::Csv => {
            let reader = BufReader::new(fs::File::open(&data_path)?);
            let mut v = Vec::with_capacity(header.count);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                v.push(line.parse::<f64>().map_err(|e| {
                    LabError::Parse(format!("{}:{}: {e}", data_path.display(), i + 1))
                })?);
            }
            v
        }
        Encoding::F64Le => {
            let bytes = fs::read(&data_path)?;
            if bytes.len() % 8 != 0 {
                return Err(LabError::Parse(format!(
                    "{}: length {} is not a multiple of 8",
                    data_path.display(),
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect()
        }
    };
    if samples.len() != header.count {
        return Err(LabError::Parse(format!(
            "{}: header announces {} samples, found {}",
            data_path.display(),
            header.count,
            samples.len()
        )));
    }
    GridField::new(header.grid, header.shape, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn both_encodings_round_trip_bit_exactly(
            values in proptest::collection::vec(-1e300f64..1e300, 3 * 5 * 2),
            tiny in -1e-300f64..1e-300,
        ) {
            let g = SpaceTimeGrid::new(0.3, 2, 1, 1.7, 5).unwrap();
            let mut values = values;
            values[0] = tiny;
            values[1] = -0.0;
            let f = GridField::new(g, Shape::vector(2), values).unwrap();
            let dir = tempfile::tempdir().unwrap();
            for enc in [Encoding::Csv, Encoding::F64Le] {
                let header = write_field(&f, &dir.path().join("f"), enc).unwrap();
                let back = read_field(&header).unwrap();
                prop_assert_eq!(back.grid(), f.grid());
                prop_assert_eq!(back.shape(), f.shape());
                let same = back.samples().iter().zip(f.samples()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }
    }

    #[test]
    fn truncated_data_is_rejected() {
        let g = SpaceTimeGrid::new(1.0, 1, 1, 1.0, 3).unwrap();
        let f = GridField::zeros(&g, Shape::Scalar);
        let dir = tempfile::tempdir().unwrap();
        let header = write_field(&f, &dir.path().join("z"), Encoding::F64Le).unwrap();
        fs::write(dir.path().join("z.bin"), [0u8; 12]).unwrap();
        assert!(read_field(&header).is_err());
    }
}
