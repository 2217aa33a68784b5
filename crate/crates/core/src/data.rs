//! Datasets: synthetic Gaussian blobs, CSV files and IDX (MNIST-style) files.
//!
//! Labels are stored 0-based. The CSV format carries 1-based labels; IDX labels are
//! byte values and already 0-based.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::RngState;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    /// Feature dimension `m`.
    pub dim: usize,
    /// Row-major `N x m`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// `(rows, cols)` of image data read without flattening.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        classes: usize,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            classes,
            dim,
            features,
            labels,
            image_shape: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Domain(format!("dataset {:?} is empty", self.name)));
        }
        if self.classes < 2 || self.dim == 0 {
            return Err(Error::Domain(format!(
                "dataset {:?} has {} classes and {} features",
                self.name, self.classes, self.dim
            )));
        }
        if self.features.len() != self.labels.len() * self.dim {
            return Err(Error::Domain(format!(
                "dataset {:?}: {} feature values for {} samples of dimension {}",
                self.name,
                self.features.len(),
                self.labels.len(),
                self.dim
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "dataset {:?}: non-finite feature in sample {}",
                self.name,
                i / self.dim
            )));
        }
        if let Some(i) = self.labels.iter().position(|&y| y >= self.classes) {
            return Err(Error::Domain(format!(
                "dataset {:?}: label {} of sample {i} outside 1..={}",
                self.name,
                self.labels[i] + 1,
                self.classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            name: self.name.clone(),
            classes: self.classes,
            dim: self.dim,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            image_shape: self.image_shape,
        }
    }
}

/// Per-dimension standardization fitted on one split and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let n = ds.len() as f64;
        let mut mean = vec![0.0; ds.dim];
        for i in 0..ds.len() {
            for (m, x) in mean.iter_mut().zip(ds.row(i)) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; ds.dim];
        for i in 0..ds.len() {
            for ((v, x), m) in var.iter_mut().zip(ds.row(i)).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        for row in ds.features.chunks_exact_mut(ds.dim) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }
}

/// Parameters of a Gaussian-blob classification problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Radius of the sphere the class centers sit on.
    pub separation: f64,
    /// Isotropic within-class standard deviation.
    pub std: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class == 0 || self.dim == 0 {
            return Err(Error::Config(format!(
                "blobs need classes >= 2, per_class >= 1, dim >= 1 (got {}, {}, {})",
                self.classes, self.per_class, self.dim
            )));
        }
        if !(self.separation > 0.0 && self.std > 0.0) {
            return Err(Error::Config(format!(
                "blob separation and std must be positive (got {}, {})",
                self.separation, self.std
            )));
        }
        Ok(())
    }

    /// Class centers evenly spaced on a sphere of radius `separation`: the scaled
    /// unit vectors when `c <= m`, a circle in the first two coordinates otherwise,
    /// and evenly spaced points on `[-r, r]` when `m = 1`.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let (c, m, r) = (self.classes, self.dim, self.separation);
        (0..c)
            .map(|k| {
                let mut center = vec![0.0; m];
                if c <= m {
                    center[k] = r;
                } else if m >= 2 {
                    let angle = 2.0 * PI * k as f64 / c as f64;
                    center[0] = r * angle.cos();
                    center[1] = r * angle.sin();
                } else {
                    center[0] = -r + 2.0 * r * k as f64 / (c - 1) as f64;
                }
                center
            })
            .collect()
    }
}

/// Samples `per_class` points around each center, then shuffles the sample order.
pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RngState::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.std).map_err(|e| Error::Config(e.to_string()))?;
    let centers = spec.centers();
    let n = spec.classes * spec.per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut features = vec![0.0; n * spec.dim];
    let mut labels = vec![0; n];
    for (k, center) in centers.iter().enumerate() {
        for j in 0..spec.per_class {
            let slot = order[k * spec.per_class + j];
            labels[slot] = k;
            for (x, c) in features[slot * spec.dim..(slot + 1) * spec.dim]
                .iter_mut()
                .zip(center)
            {
                *x = c + noise.sample(&mut rng);
            }
        }
    }
    Dataset::new(
        format!("blobs-c{}-m{}-seed{}", spec.classes, spec.dim, spec.seed),
        spec.classes,
        spec.dim,
        features,
        labels,
    )
}

/// A CSV dataset, optionally with the hidden clean labels written by noise injection.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub dataset: Dataset,
    pub clean_labels: Option<Vec<usize>>,
}

/// Reads the `f1,...,fm,label` schema. `classes` bounds the labels; when `None` it is
/// the largest label present (at least 2).
pub fn read_csv_dataset(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    Ok(read_csv_table(path, classes)?.dataset)
}

/// Like [`read_csv_dataset`], also accepting a trailing `clean_label` column.
pub fn read_csv_table(path: &Path, classes: Option<usize>) -> Result<CsvTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let has_clean = names.last() == Some(&"clean_label");
    let label_col = if has_clean {
        names.len().wrapping_sub(2)
    } else {
        names.len().wrapping_sub(1)
    };
    if names.len() < 2 + has_clean as usize || names[label_col] != "label" {
        return Err(Error::parse(
            path,
            1,
            "header must be f1,...,fm,label with an optional trailing clean_label",
        ));
    }
    for (j, name) in names[..label_col].iter().enumerate() {
        if *name != format!("f{}", j + 1) {
            return Err(Error::parse(
                path,
                1,
                format!(
                    "feature column {} is named {name:?}, expected \"f{}\"",
                    j + 1,
                    j + 1
                ),
            ));
        }
    }
    let dim = label_col;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut clean = Vec::new();
    let mut label_lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(path, line, format!("malformed row: {e}"))
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != names.len() {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "row has {} fields, header has {}",
                    record.len(),
                    names.len()
                ),
            ));
        }
        for (j, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(path, line, format!("f{}: {field:?} is not a number", j + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    path,
                    line,
                    format!("f{}: non-finite value {field}", j + 1),
                ));
            }
            features.push(v);
        }
        labels.push(parse_label(path, line, &record[label_col])?);
        if has_clean {
            clean.push(parse_label(path, line, &record[label_col + 1])?);
        }
        label_lines.push(line);
    }
    if labels.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    let max_label = labels.iter().chain(&clean).copied().max().unwrap_or(0);
    let classes = classes.unwrap_or((max_label + 1).max(2));
    for (i, (&y, &line)) in labels.iter().zip(&label_lines).enumerate() {
        let c = if has_clean { clean[i].max(y) } else { y };
        if c >= classes {
            return Err(Error::parse(
                path,
                line,
                format!("label {} outside 1..={classes}", c + 1),
            ));
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Ok(CsvTable {
        dataset: Dataset::new(name, classes, dim, features, labels)?,
        clean_labels: has_clean.then_some(clean),
    })
}

fn parse_label(path: &Path, line: usize, field: &str) -> Result<usize> {
    match field.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v - 1),
        _ => Err(Error::parse(
            path,
            line,
            format!("label {field:?} is not a 1-based class index"),
        )),
    }
}

/// Writes the CSV schema; features use 17 significant digits so reading back is exact.
pub fn write_csv_dataset(path: &Path, ds: &Dataset, clean_labels: Option<&[usize]>) -> Result<()> {
    let mut out = String::new();
    for j in 1..=ds.dim {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label");
    if clean_labels.is_some() {
        out.push_str(",clean_label");
    }
    out.push('\n');
    for i in 0..ds.len() {
        for x in ds.row(i) {
            out.push_str(&format!("{x:.16e},"));
        }
        out.push_str(&(ds.labels[i] + 1).to_string());
        if let Some(clean) = clean_labels {
            out.push_str(&format!(",{}", clean[i] + 1));
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

struct IdxFile {
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn read_idx(path: &Path, magic: u32) -> Result<IdxFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let word = |k: usize| -> Result<usize> {
        bytes
            .get(4 * k..4 * k + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| Error::parse(path, 0, "truncated IDX header"))
    };
    let found = word(0)? as u32;
    if found != magic {
        return Err(Error::parse(
            path,
            0,
            format!("bad IDX magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (1..=ndims).map(word).collect::<Result<Vec<_>>>()?;
    let header = 4 * (ndims + 1);
    let expected: usize = dims.iter().product();
    let data = &bytes[header.min(bytes.len())..];
    if data.len() != expected {
        return Err(Error::parse(
            path,
            0,
            format!(
                "length mismatch: header {dims:?} implies {expected} data bytes, file has {}",
                data.len()
            ),
        ));
    }
    Ok(IdxFile {
        dims,
        data: data.to_vec(),
    })
}

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801). Pixels are
/// scaled to `[0, 1]`. Features are always stored row-major; without `flatten` the
/// image shape is kept in [`Dataset::image_shape`].
pub fn read_idx_pair(images_path: &Path, labels_path: &Path, flatten: bool) -> Result<Dataset> {
    let images = read_idx(images_path, IDX_IMAGES_MAGIC)?;
    let labels = read_idx(labels_path, IDX_LABELS_MAGIC)?;
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::parse(
            labels_path,
            0,
            format!("length mismatch: {n} images but {} labels", labels.dims[0]),
        ));
    }
    let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let classes = (labels.iter().copied().max().unwrap_or(0) + 1).max(2);
    let features = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    let mut ds = Dataset::new(name, classes, rows * cols, features, labels)?;
    if !flatten {
        ds.image_shape = Some((rows, cols));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn idx_bytes(magic: u32, dims: &[u32], data: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend(d.to_be_bytes());
        }
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn blobs_shape_and_determinism() {
        let spec = BlobSpec {
            classes: 3,
            per_class: 1000,
            dim: 2,
            separation: 4.0,
            std: 1.0,
            seed: 1,
        };
        let a = make_blobs(&spec).unwrap();
        assert_eq!(a.len(), 3000);
        assert_eq!(a.dim, 2);
        assert_eq!(a, make_blobs(&spec).unwrap());
        for k in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&y| y == k).count(), 1000);
        }
        let other = make_blobs(&BlobSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.features, other.features);
    }

    #[test]
    fn blob_centers_lie_on_sphere() {
        for (c, m) in [(3, 2), (3, 5), (6, 3), (4, 1)] {
            let spec = BlobSpec {
                classes: c,
                per_class: 1,
                dim: m,
                separation: 2.5,
                std: 1.0,
                seed: 0,
            };
            let centers = spec.centers();
            assert_eq!(centers.len(), c);
            if m > 1 {
                for ctr in centers {
                    let r: f64 = ctr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((r - 2.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn blobs_reject_bad_spec() {
        let spec = BlobSpec {
            classes: 3,
            per_class: 10,
            dim: 2,
            separation: 0.0,
            std: 1.0,
            seed: 0,
        };
        assert!(matches!(make_blobs(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn csv_small_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("small.csv");
        fs::write(&path, "f1,f2,label\n0.5,1,1\n-2,3.25,2\n1e-3,0,3\n").unwrap();
        let ds = read_csv_dataset(&path, None).unwrap();
        assert_eq!((ds.len(), ds.dim, ds.classes), (3, 2, 3));
        assert_eq!(ds.labels, vec![0, 1, 2]);
        assert_eq!(ds.row(1), &[-2.0, 3.25]);
    }

    #[test]
    fn csv_label_out_of_range_names_row() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "f1,label\n0.5,1\n0.1,2\n0.7,4\n").unwrap();
        let err = read_csv_dataset(&path, Some(3)).unwrap_err();
        match &err {
            Error::Parse { line, message, .. } => {
                assert_eq!(*line, 4);
                assert!(message.contains("label 4"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("bad.csv:4"));
    }

    #[test]
    fn csv_schema_errors() {
        let dir = tempdir().unwrap();
        let ragged = dir.path().join("ragged.csv");
        fs::write(&ragged, "f1,f2,label\n1,2,1\n1,1\n").unwrap();
        assert!(matches!(
            read_csv_dataset(&ragged, None),
            Err(Error::Parse { line: 3, .. })
        ));

        let nan = dir.path().join("nan.csv");
        fs::write(&nan, "f1,label\nNaN,1\n").unwrap();
        assert!(matches!(
            read_csv_dataset(&nan, None),
            Err(Error::Parse { line: 2, .. })
        ));

        let inf = dir.path().join("inf.csv");
        fs::write(&inf, "f1,label\n1,1\ninf,2\n").unwrap();
        assert!(matches!(
            read_csv_dataset(&inf, None),
            Err(Error::Parse { line: 3, .. })
        ));

        let header = dir.path().join("header.csv");
        fs::write(&header, "x,y,label\n1,2,1\n").unwrap();
        assert!(matches!(
            read_csv_dataset(&header, None),
            Err(Error::Parse { line: 1, .. })
        ));

        let zero = dir.path().join("zero.csv");
        fs::write(&zero, "f1,label\n1,0\n").unwrap();
        assert!(matches!(
            read_csv_dataset(&zero, None),
            Err(Error::Parse { line: 2, .. })
        ));

        let missing = dir.path().join("missing.csv");
        assert!(matches!(
            read_csv_dataset(&missing, None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let spec = BlobSpec {
            classes: 4,
            per_class: 25,
            dim: 3,
            separation: 3.0,
            std: 0.7,
            seed: 5,
        };
        let ds = make_blobs(&spec).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("blobs.csv");
        let clean: Vec<usize> = ds.labels.iter().map(|y| (y + 1) % 4).collect();
        write_csv_dataset(&path, &ds, Some(&clean)).unwrap();
        let table = read_csv_table(&path, Some(4)).unwrap();
        assert_eq!(table.dataset.features, ds.features);
        assert_eq!(table.dataset.labels, ds.labels);
        assert_eq!(table.clean_labels.as_deref(), Some(clean.as_slice()));

        write_csv_dataset(&path, &ds, None).unwrap();
        let back = read_csv_dataset(&path, Some(4)).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn idx_pair_reading() {
        let dir = tempdir().unwrap();
        let images = dir.path().join("img.idx");
        let labels = dir.path().join("lbl.idx");
        let mut pixels = vec![0u8; 10 * 28 * 28];
        pixels[0] = 255;
        pixels[1] = 51;
        fs::write(&images, idx_bytes(IDX_IMAGES_MAGIC, &[10, 28, 28], &pixels)).unwrap();
        let lbl: Vec<u8> = (0..10).collect();
        fs::write(&labels, idx_bytes(IDX_LABELS_MAGIC, &[10], &lbl)).unwrap();

        let ds = read_idx_pair(&images, &labels, true).unwrap();
        assert_eq!((ds.len(), ds.dim, ds.classes), (10, 784, 10));
        assert_eq!(ds.features[0], 1.0);
        assert!((ds.features[1] - 0.2).abs() < 1e-15);
        assert_eq!(ds.labels[7], 7);
        assert_eq!(ds.image_shape, None);
        let shaped = read_idx_pair(&images, &labels, false).unwrap();
        assert_eq!(shaped.image_shape, Some((28, 28)));
    }

    #[test]
    fn idx_errors() {
        let dir = tempdir().unwrap();
        let images = dir.path().join("img.idx");
        let labels = dir.path().join("lbl.idx");
        let pixels = vec![7u8; 4 * 2 * 2];
        let mut truncated = idx_bytes(IDX_IMAGES_MAGIC, &[4, 2, 2], &pixels);
        truncated.truncate(truncated.len() - 3);
        fs::write(&images, &truncated).unwrap();
        fs::write(&labels, idx_bytes(IDX_LABELS_MAGIC, &[4], &[0, 1, 0, 1])).unwrap();
        let err = read_idx_pair(&images, &labels, true).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");

        fs::write(&images, idx_bytes(IDX_IMAGES_MAGIC, &[4, 2, 2], &pixels)).unwrap();
        fs::write(&labels, idx_bytes(IDX_LABELS_MAGIC, &[3], &[0, 1, 0])).unwrap();
        let err = read_idx_pair(&images, &labels, true).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");

        fs::write(&labels, idx_bytes(IDX_IMAGES_MAGIC, &[3], &[0, 1, 0])).unwrap();
        let err = read_idx_pair(&images, &labels, true).unwrap_err();
        assert!(err.to_string().contains("bad IDX magic"), "{err}");
    }

    #[test]
    fn standardizer_centers_training_split() {
        let spec = BlobSpec {
            classes: 3,
            per_class: 200,
            dim: 2,
            separation: 5.0,
            std: 2.0,
            seed: 9,
        };
        let mut ds = make_blobs(&spec).unwrap();
        let st = Standardizer::fit(&ds);
        st.apply(&mut ds);
        let refit = Standardizer::fit(&ds);
        for (m, s) in refit.mean.iter().zip(&refit.std) {
            assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        }
    }
}
