//! On-disk dataset directory.
//!
//! ```text
//! meta.json       version, R, D_feat, A, tau, C, sample_count, dtype, endianness, checksum
//! features.bin    little-endian floats, sample-major, then patch, then feature
//! attributes.csv  header of A attribute names, then C rows of A values
//! semantics.csv   A rows of tau values, no header
//! splits.csv      header sample_index,class_index,split; one row per sample
//! ```
//!
//! `checksum` is the hex SHA-256 of the header line produced by
//! [`DatasetMeta::canonical_header`] followed by the bytes of
//! `features.bin`. It is optional when loading.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use hrt_core::dataset::{Sample, Split, ZslDataset};
use hrt_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HrtError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "D_feat")]
    pub d_feat: usize,
    #[serde(rename = "A")]
    pub a: usize,
    pub tau: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub sample_count: usize,
    pub dtype: Dtype,
    pub endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

impl DatasetMeta {
    pub fn canonical_header(&self) -> String {
        format!(
            "hrt-dataset v{} R={} D_feat={} A={} tau={} C={} sample_count={} dtype={} endianness={}\n",
            self.version,
            self.r,
            self.d_feat,
            self.a,
            self.tau,
            self.c,
            self.sample_count,
            self.dtype.as_str(),
            self.endianness
        )
    }

    fn checksum_of(&self, features: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_header().as_bytes());
        h.update(features);
        hex::encode(h.finalize())
    }

    pub fn feature_bytes(&self) -> usize {
        self.sample_count * self.r * self.d_feat * self.dtype.width()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HrtError::io(path, e))
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Writes `dataset` into `dir` (created if missing).
pub fn write_dataset(dir: &Path, dataset: &ZslDataset, dtype: Dtype) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HrtError::io(dir, e))?;
    let (r, d_feat) = dataset
        .feature_shape()
        .ok_or_else(|| HrtError::format(dir, "refusing to write a dataset without samples"))?;
    let mut features = Vec::with_capacity(dataset.samples().len() * r * d_feat * dtype.width());
    for s in dataset.samples() {
        for &x in s.features.data() {
            match dtype {
                Dtype::F64 => features.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => features.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    let mut meta = DatasetMeta {
        version: FORMAT_VERSION,
        r,
        d_feat,
        a: dataset.num_attributes(),
        tau: dataset.semantic_dim(),
        c: dataset.num_classes(),
        sample_count: dataset.samples().len(),
        dtype,
        endianness: "little".into(),
        checksum: None,
    };
    meta.checksum = Some(meta.checksum_of(&features));
    let mut json = serde_json::to_string_pretty(&meta).expect("meta serialises");
    json.push('\n');
    write_file(&dir.join("meta.json"), json.as_bytes())?;
    write_file(&dir.join("features.bin"), &features)?;

    let mut attrs = String::new();
    let header: Vec<String> = (0..dataset.num_attributes()).map(|a| format!("a{a}")).collect();
    attrs.push_str(&header.join(","));
    attrs.push('\n');
    push_rows(&mut attrs, dataset.class_attr());
    write_file(&dir.join("attributes.csv"), attrs.as_bytes())?;

    let mut sem = String::new();
    push_rows(&mut sem, dataset.attr_vectors());
    write_file(&dir.join("semantics.csv"), sem.as_bytes())?;

    let mut splits = String::from("sample_index,class_index,split\n");
    for (i, s) in dataset.samples().iter().enumerate() {
        splits.push_str(&format!("{i},{},{}\n", s.label, s.split.as_str()));
    }
    write_file(&dir.join("splits.csv"), splits.as_bytes())
}

fn push_rows(out: &mut String, t: &Tensor) {
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|&x| fmt_f64(x)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
}

fn read_matrix(path: &Path, has_header: bool, rows: usize, cols: usize) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| HrtError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(has_header).from_reader(file);
    if has_header {
        let h = rdr.headers().map_err(|e| HrtError::format(path, e.to_string()))?;
        if h.len() != cols {
            return Err(HrtError::format(path, format!("header has {} columns, expected {cols}", h.len())));
        }
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HrtError::format(path, e.to_string()))?;
        if rec.len() != cols {
            return Err(HrtError::format(path, format!("record {i} has {} fields, expected {cols}", rec.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| HrtError::format(path, format!("record {i} field {j}: {field:?} is not a number")))?;
            if !x.is_finite() {
                return Err(HrtError::format(path, format!("record {i} field {j} is not finite")));
            }
            data.push(x);
        }
        n += 1;
    }
    if n != rows {
        return Err(HrtError::format(path, format!("{n} records, expected {rows}")));
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<ZslDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| HrtError::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| HrtError::Json { path: meta_path.clone(), source: e })?;
    if meta.version != FORMAT_VERSION {
        return Err(HrtError::format(&meta_path, format!("unsupported version {}", meta.version)));
    }
    if meta.endianness != "little" {
        return Err(HrtError::format(&meta_path, format!("unsupported endianness {:?}", meta.endianness)));
    }
    for (name, v) in [("R", meta.r), ("D_feat", meta.d_feat), ("A", meta.a), ("tau", meta.tau), ("C", meta.c), ("sample_count", meta.sample_count)] {
        if v == 0 {
            return Err(HrtError::format(&meta_path, format!("{name} must be positive")));
        }
    }

    let feat_path = dir.join("features.bin");
    let bytes = fs::read(&feat_path).map_err(|e| HrtError::io(&feat_path, e))?;
    let expected = meta.sample_count.checked_mul(meta.r * meta.d_feat * meta.dtype.width());
    if expected != Some(bytes.len()) {
        return Err(HrtError::format(
            &feat_path,
            format!("expected {} bytes from meta.json, found {}", meta.feature_bytes(), bytes.len()),
        ));
    }
    if let Some(sum) = &meta.checksum {
        if *sum != meta.checksum_of(&bytes) {
            return Err(HrtError::format(&meta_path, "checksum does not match header fields and features.bin"));
        }
    }

    let class_attr = read_matrix(&dir.join("attributes.csv"), true, meta.c, meta.a)?;
    let attr_vectors = read_matrix(&dir.join("semantics.csv"), false, meta.a, meta.tau)?;

    let splits_path = dir.join("splits.csv");
    let file = fs::File::open(&splits_path).map_err(|e| HrtError::io(&splits_path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| HrtError::format(&splits_path, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["sample_index", "class_index", "split"] {
        return Err(HrtError::format(&splits_path, "header must be sample_index,class_index,split"));
    }
    let per_sample = meta.r * meta.d_feat;
    let mut samples = Vec::with_capacity(meta.sample_count);
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HrtError::format(&splits_path, e.to_string()))?;
        let bad = |m: String| HrtError::format(&splits_path, format!("record {row}: {m}"));
        if rec.len() != 3 {
            return Err(bad(format!("{} fields, expected 3", rec.len())));
        }
        let index: usize = rec[0].trim().parse().map_err(|_| bad(format!("bad sample_index {:?}", &rec[0])))?;
        if index != row {
            return Err(bad(format!("sample_index {index}, expected {row}")));
        }
        if index >= meta.sample_count {
            return Err(bad(format!("sample_index {index} exceeds sample_count {}", meta.sample_count)));
        }
        let label: usize = rec[1].trim().parse().map_err(|_| bad(format!("bad class_index {:?}", &rec[1])))?;
        if label >= meta.c {
            return Err(bad(format!("class_index {label} out of range for C={}", meta.c)));
        }
        let split = Split::parse(rec[2].trim()).ok_or_else(|| bad(format!("unknown split {:?}", &rec[2])))?;
        let raw = &bytes[index * per_sample * meta.dtype.width()..(index + 1) * per_sample * meta.dtype.width()];
        let data: Vec<f64> = match meta.dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
        };
        if let Some(j) = data.iter().position(|x| !x.is_finite()) {
            return Err(HrtError::format(&feat_path, format!("sample {index}: value {j} is not finite")));
        }
        let features = Tensor::matrix(meta.r, meta.d_feat, data)?;
        samples.push(Sample { features, label, split });
    }
    if samples.len() != meta.sample_count {
        return Err(HrtError::format(&splits_path, format!("{} records, meta.json declares {}", samples.len(), meta.sample_count)));
    }

    let unseen: BTreeSet<usize> = samples.iter().filter(|s| s.split == Split::TestUnseen).map(|s| s.label).collect();
    if let Some((i, s)) = samples
        .iter()
        .enumerate()
        .find(|(_, s)| s.split != Split::TestUnseen && unseen.contains(&s.label))
    {
        return Err(HrtError::format(
            &splits_path,
            format!("record {i}: class {} appears in {} and in test_unseen", s.label, s.split.as_str()),
        ));
    }
    let seen: Vec<usize> = (0..meta.c).filter(|c| !unseen.contains(c)).collect();
    ZslDataset::new(samples, attr_vectors, class_attr, seen, unseen.into_iter().collect())
        .map_err(|e| HrtError::format(dir, e.to_string()))
}
