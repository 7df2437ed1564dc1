//! Historian CSV files, schema sidecars and the binary tensor container.
//!
//! CSV layout: a header row whose first column is `timestamp_min`, followed by
//! one column per schema variable. Empty cells are missing observations and
//! categorical columns carry string labels.
//!
//! Container layout (`CCSS1`): the 5-byte magic, a little-endian `u64`
//! manifest length, the JSON manifest, then each tensor's payload in manifest
//! order as little-endian `f32` or `f64`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{Schema, TypedSeries, VariableKind};

pub const TIMESTAMP_COLUMN: &str = "timestamp_min";
pub const CONTAINER_MAGIC: &[u8; 5] = b"CCSS1";
pub const CONTAINER_VERSION: u32 = 1;

pub fn read_schema(path: impl AsRef<Path>) -> Result<Schema> {
    let text = fs::read_to_string(path)?;
    let schema: Schema = serde_json::from_str(&text)?;
    schema.validate()?;
    Ok(schema)
}

pub fn write_schema(schema: &Schema, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(schema)?)?;
    Ok(())
}

/// Default sidecar location for a CSV: `plant.csv` → `plant.schema.json`.
pub fn sidecar_path(csv: &Path) -> std::path::PathBuf {
    csv.with_extension("schema.json")
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<TypedSeries> {
    let file = fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<TypedSeries> {
    let mut schema = schema.clone();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| csv_err(1, "<header>", e.to_string()))?
        .clone();
    if header.get(0) != Some(TIMESTAMP_COLUMN) {
        return Err(csv_err(
            1,
            header.get(0).unwrap_or(""),
            format!("first column must be `{TIMESTAMP_COLUMN}`"),
        ));
    }
    // column position in file → schema index
    let mut columns = Vec::with_capacity(header.len() - 1);
    for name in header.iter().skip(1) {
        match schema.index_of(name) {
            Some(j) if !columns.contains(&j) => columns.push(j),
            Some(_) => return Err(csv_err(1, name, "duplicate column".into())),
            None => return Err(csv_err(1, name, "unknown column".into())),
        }
    }
    if columns.len() != schema.len() {
        let missing: Vec<&str> = schema
            .variables
            .iter()
            .enumerate()
            .filter(|(j, _)| !columns.contains(j))
            .map(|(_, v)| v.name.as_str())
            .collect();
        return Err(csv_err(1, &missing.join(","), "column missing from header".into()));
    }

    let v = schema.len();
    let mut codes: Vec<HashMap<String, usize>> = schema
        .variables
        .iter()
        .map(|s| {
            s.levels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.clone(), i))
                .collect()
        })
        .collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| csv_err(line, "<row>", e.to_string()))?;
        if record.len() != header.len() {
            return Err(csv_err(
                line,
                "<row>",
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let t: f64 = record[0]
            .trim()
            .parse()
            .map_err(|_| csv_err(line, TIMESTAMP_COLUMN, format!("bad timestamp `{}`", &record[0])))?;
        if let Some(&prev) = timestamps.last() {
            if !(t > prev) {
                return Err(csv_err(
                    line,
                    TIMESTAMP_COLUMN,
                    format!("timestamp {t} does not increase (previous {prev})"),
                ));
            }
        }
        timestamps.push(t);
        let base = values.len();
        values.resize(base + v, 0.0);
        mask.resize(base + v, false);
        for (pos, &j) in columns.iter().enumerate() {
            let cell = record[pos + 1].trim();
            if cell.is_empty() {
                continue;
            }
            let spec = &mut schema.variables[j];
            let value = if spec.kind == VariableKind::Categorical {
                let next = codes[j].len();
                let code = *codes[j].entry(cell.to_string()).or_insert(next);
                if code == next {
                    if next >= spec.cardinality.unwrap_or(0) {
                        return Err(csv_err(
                            line,
                            &spec.name,
                            format!("label `{cell}` exceeds cardinality {:?}", spec.cardinality),
                        ));
                    }
                    spec.levels.push(cell.to_string());
                }
                code as f64
            } else {
                let x: f64 = cell
                    .parse()
                    .map_err(|_| csv_err(line, &spec.name, format!("unparseable cell `{cell}`")))?;
                if !x.is_finite() {
                    return Err(csv_err(line, &spec.name, format!("non-finite cell `{cell}`")));
                }
                x
            };
            values[base + j] = value;
            mask[base + j] = true;
        }
    }
    TypedSeries::new(timestamps, values, mask, schema)
}

pub fn write_csv(series: &TypedSeries, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    write_csv_to(series, file)
}

pub fn write_csv_to<W: std::io::Write>(series: &TypedSeries, writer: W) -> Result<()> {
    let schema = series.schema();
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![TIMESTAMP_COLUMN.to_string()];
    header.extend(schema.variables.iter().map(|v| v.name.clone()));
    wtr.write_record(&header).map_err(io_from_csv)?;
    let mut row = Vec::with_capacity(header.len());
    for r in 0..series.len() {
        row.clear();
        row.push(format!("{}", series.timestamps()[r]));
        for (j, spec) in schema.variables.iter().enumerate() {
            row.push(match series.get(r, j) {
                None => String::new(),
                Some(x) if spec.kind == VariableKind::Categorical => spec
                    .levels
                    .get(x as usize)
                    .cloned()
                    .unwrap_or_else(|| format!("{}", x as usize)),
                Some(x) => format!("{x}"),
            });
        }
        wtr.write_record(&row).map_err(io_from_csv)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(row: usize, column: &str, message: String) -> Error {
    Error::Csv {
        row,
        column: column.to_string(),
        message,
    }
}

fn io_from_csv(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    metadata: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Versioned container of named numeric arrays plus a JSON metadata document.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` shape {:?} does not match {} elements",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
        }
        let manifest = Manifest {
            version: CONTAINER_VERSION,
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: match t.data {
                        TensorData::F32(_) => "f32".into(),
                        TensorData::F64(_) => "f64".into(),
                    },
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != CONTAINER_MAGIC {
            return Err(Error::Checkpoint("missing CCSS1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let body = bytes
            .get(13..13 + len)
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.version != CONTAINER_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {}",
                manifest.version
            )));
        }
        let mut cursor = 13 + len;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let width = match entry.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
            };
            let raw = bytes
                .get(cursor..cursor + n * width)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload for `{}`", entry.name)))?;
            cursor += n * width;
            let data = if width == 4 {
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            } else {
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            };
            tensors.push(NamedTensor {
                name: entry.name,
                shape: entry.shape,
                data,
            });
        }
        if cursor != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Container {
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::VariableSpec;

    fn schema() -> Schema {
        Schema::new(vec![
            VariableSpec::state("nh4", "mg/L"),
            VariableSpec::control("sp", "mg/L"),
            VariableSpec {
                levels: vec![],
                ..VariableSpec::categorical("phase", &["x", "y", "z"])
            },
        ])
        .unwrap()
    }

    #[test]
    fn empty_cell_is_missing() {
        let text = "timestamp_min,nh4,sp,phase\n0,1.5,2,aer\n1.5,,2,anox\n3,2.0,,aer\n";
        let s = read_csv(text.as_bytes(), &schema()).unwrap();
        assert_eq!(s.len(), 3);
        assert!(!s.is_observed(1, 0));
        assert!(!s.is_observed(2, 1));
        assert_eq!(s.get(1, 2), Some(1.0));
        assert_eq!(s.schema().variables[2].levels, vec!["aer", "anox"]);
    }

    #[test]
    fn columns_may_be_reordered() {
        let text = "timestamp_min,sp,phase,nh4\n0,2,aer,1.5\n";
        let s = read_csv(text.as_bytes(), &schema()).unwrap();
        assert_eq!(s.get(0, 0), Some(1.5));
    }

    #[test]
    fn diagnostics() {
        let bad_order = "timestamp_min,nh4,sp,phase\n0,1,2,a\n5,1,2,a\n4,1,2,a\n";
        match read_csv(bad_order.as_bytes(), &schema()) {
            Err(Error::Csv { row, column, .. }) => {
                assert_eq!(row, 4);
                assert_eq!(column, TIMESTAMP_COLUMN);
            }
            other => panic!("{other:?}"),
        }
        let unknown = "timestamp_min,nh4,sp,phase,foo\n";
        assert!(matches!(
            read_csv(unknown.as_bytes(), &schema()),
            Err(Error::Csv { column, .. }) if column == "foo"
        ));
        let bad_cell = "timestamp_min,nh4,sp,phase\n0,abc,2,a\n";
        assert!(matches!(
            read_csv(bad_cell.as_bytes(), &schema()),
            Err(Error::Csv { row: 2, column, .. }) if column == "nh4"
        ));
        let too_many_labels = "timestamp_min,nh4,sp,phase\n0,1,2,a\n1,1,2,b\n2,1,2,c\n3,1,2,d\n";
        assert!(read_csv(too_many_labels.as_bytes(), &schema()).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let text = "timestamp_min,nh4,sp,phase\n0,1.5,2,aer\n1.25,,0.1,anox\n3,0.30000000000000004,,\n";
        let s = read_csv(text.as_bytes(), &schema()).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&s, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), s.schema()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn container_roundtrip_and_corruption() {
        let c = Container {
            metadata: serde_json::json!({"kind": "test"}),
            tensors: vec![
                NamedTensor {
                    name: "a".into(),
                    shape: vec![2, 2],
                    data: TensorData::F32(vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]),
                },
                NamedTensor {
                    name: "b".into(),
                    shape: vec![3],
                    data: TensorData::F64(vec![0.1, 0.2, 0.3]),
                },
            ],
        };
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"CCSS1");
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Container::from_bytes(&wrong).is_err());
    }
}
