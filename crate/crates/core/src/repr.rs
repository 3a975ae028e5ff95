//! Linear centered kernel alignment between per-layer activation matrices,
//! with matched-depth (diagonal) and all-pairs aggregates.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("activation set `{model_id}`: {message}")]
    Invalid { model_id: String, message: String },
    #[error("matrix shape {rows}x{cols}: {message}")]
    Shape {
        rows: usize,
        cols: usize,
        message: String,
    },
    #[error("row counts differ: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("prompt order differs between `{0}` and `{1}`")]
    PromptMismatch(String, String),
    #[error("layer counts differ: {0} vs {1}; use the all-pairs score across depths")]
    LayerCountMismatch(usize, usize),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

/// Activations of one model over an ordered prompt list, one matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub model_id: String,
    pub prompt_ids: Vec<String>,
    pub layers: Vec<DMatrix<f64>>,
}

impl ActivationSet {
    pub fn new(
        model_id: impl Into<String>,
        prompt_ids: Vec<String>,
        layers: Vec<DMatrix<f64>>,
    ) -> Result<Self, ReprError> {
        let set = Self {
            model_id: model_id.into(),
            prompt_ids,
            layers,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), ReprError> {
        let fail = |message: String| ReprError::Invalid {
            model_id: self.model_id.clone(),
            message,
        };
        let n = self.prompt_ids.len();
        if n < 2 {
            return Err(fail(format!("needs at least 2 samples, has {n}")));
        }
        if self.layers.is_empty() {
            return Err(fail("no layers".into()));
        }
        for (i, m) in self.layers.iter().enumerate() {
            if m.nrows() != n {
                return Err(fail(format!(
                    "layer {i} has {} rows, expected {n}",
                    m.nrows()
                )));
            }
            if m.ncols() == 0 {
                return Err(fail(format!("layer {i} has no features")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("layer {i} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.prompt_ids.len()
    }
}

/// `H K H` with `H = I - 11'/n`.
pub fn center_gram(k: &DMatrix<f64>) -> Result<DMatrix<f64>, ReprError> {
    let n = k.nrows();
    if n != k.ncols() || n < 2 {
        return Err(ReprError::Shape {
            rows: n,
            cols: k.ncols(),
            message: "Gram matrix must be square with n >= 2".into(),
        });
    }
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| k.column(j).sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        k[(i, j)] - row_means[i] - col_means[j] + grand
    }))
}

/// Subtracts each column's mean.
pub fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    let n = x.nrows() as f64;
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

fn check_rows(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(), ReprError> {
    if x.nrows() != y.nrows() {
        return Err(ReprError::RowMismatch(x.nrows(), y.nrows()));
    }
    if x.nrows() < 2 {
        return Err(ReprError::Shape {
            rows: x.nrows(),
            cols: x.ncols(),
            message: "need at least 2 samples".into(),
        });
    }
    Ok(())
}

/// A centered matrix carries no signal when its norm vanishes relative to
/// the raw input.
fn is_degenerate(raw: &DMatrix<f64>, centered: &DMatrix<f64>) -> bool {
    let c = centered.norm();
    c == 0.0 || c <= 1e-12 * raw.norm()
}

fn cka_from_centered(xc: &DMatrix<f64>, yc: &DMatrix<f64>) -> f64 {
    let cross = (yc.transpose() * xc).norm_squared();
    let xx = (xc.transpose() * xc).norm();
    let yy = (yc.transpose() * yc).norm();
    (cross / (xx * yy)).clamp(0.0, 1.0)
}

/// Feature-space form `|Y'X|_F^2 / (|X'X|_F |Y'Y|_F)` on column-centered
/// inputs. `None` for a degenerate input.
pub fn linear_cka_feature(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Option<f64>, ReprError> {
    check_rows(x, y)?;
    let xc = center_columns(x);
    let yc = center_columns(y);
    if is_degenerate(x, &xc) || is_degenerate(y, &yc) {
        return Ok(None);
    }
    Ok(Some(cka_from_centered(&xc, &yc)))
}

fn hsic(k: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
    k.component_mul(l).sum()
}

/// Sample-space form: biased HSIC on centered linear Gram matrices.
pub fn linear_cka_gram(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Option<f64>, ReprError> {
    check_rows(x, y)?;
    if is_degenerate(x, &center_columns(x)) || is_degenerate(y, &center_columns(y)) {
        return Ok(None);
    }
    let k = center_gram(&(x * x.transpose()))?;
    let l = center_gram(&(y * y.transpose()))?;
    let kl = hsic(&k, &l);
    let kk = hsic(&k, &k);
    let ll = hsic(&l, &l);
    if kk <= 0.0 || ll <= 0.0 {
        return Ok(None);
    }
    Ok(Some((kl / (kk * ll).sqrt()).clamp(0.0, 1.0)))
}

/// Linear CKA choosing the cheaper formulation: feature space when
/// `p * q < n^2`, sample space otherwise.
pub fn linear_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Option<f64>, ReprError> {
    let n = x.nrows();
    if x.ncols() * y.ncols() < n * n {
        linear_cka_feature(x, y)
    } else {
        linear_cka_gram(x, y)
    }
}

fn check_alignment(a: &ActivationSet, b: &ActivationSet) -> Result<(), ReprError> {
    if a.prompt_ids != b.prompt_ids {
        return Err(ReprError::PromptMismatch(
            a.model_id.clone(),
            b.model_id.clone(),
        ));
    }
    Ok(())
}

/// Mean of the entries, absent if any entry is absent.
fn mean_all<I: IntoIterator<Item = Option<f64>>>(values: I) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// CKA of each matched layer pair.
pub fn diag_profile(a: &ActivationSet, b: &ActivationSet) -> Result<Vec<Option<f64>>, ReprError> {
    check_alignment(a, b)?;
    if a.layers.len() != b.layers.len() {
        return Err(ReprError::LayerCountMismatch(
            a.layers.len(),
            b.layers.len(),
        ));
    }
    a.layers
        .par_iter()
        .zip(b.layers.par_iter())
        .map(|(x, y)| linear_cka(x, y))
        .collect()
}

/// Mean CKA over matched layers; requires equal depth.
pub fn diag_cka(a: &ActivationSet, b: &ActivationSet) -> Result<Option<f64>, ReprError> {
    Ok(mean_all(diag_profile(a, b)?))
}

/// CKA for every (layer of `a`, layer of `b`) pair, row-major by `a`'s layer.
pub fn layer_matrix(
    a: &ActivationSet,
    b: &ActivationSet,
) -> Result<Vec<Vec<Option<f64>>>, ReprError> {
    check_alignment(a, b)?;
    let pairs: Vec<(usize, usize)> = (0..a.layers.len())
        .flat_map(|i| (0..b.layers.len()).map(move |j| (i, j)))
        .collect();
    let flat: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| linear_cka(&a.layers[i], &b.layers[j]))
        .collect::<Result<_, _>>()?;
    Ok(flat.chunks(b.layers.len()).map(<[_]>::to_vec).collect())
}

/// Mean CKA over the full cross product of layers; depths may differ.
pub fn full_cka(a: &ActivationSet, b: &ActivationSet) -> Result<Option<f64>, ReprError> {
    Ok(mean_all(layer_matrix(a, b)?.into_iter().flatten()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
    pub file: String,
}

/// `manifest.json` of an activation directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationManifest {
    pub model_id: String,
    pub prompt_ids: Vec<String>,
    pub layers: Vec<LayerEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn file_err(path: &Path, message: impl ToString) -> ReprError {
    ReprError::File {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Reads an activation directory: a manifest plus one little-endian,
/// row-major binary matrix per layer. Layers are ordered by `index`.
pub fn read_activation_dir(dir: &Path) -> Result<ActivationSet, ReprError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| file_err(&mpath, e))?;
    let mut manifest: ActivationManifest =
        serde_json::from_str(&text).map_err(|e| file_err(&mpath, e))?;
    manifest.layers.sort_by_key(|l| l.index);
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| file_err(&path, e))?;
        let expected = entry.rows * entry.cols * entry.dtype.width();
        if bytes.len() != expected {
            return Err(file_err(
                &path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let values: Vec<f64> = match entry.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        layers.push(DMatrix::from_row_slice(entry.rows, entry.cols, &values));
    }
    ActivationSet::new(manifest.model_id, manifest.prompt_ids, layers)
}

/// Writes `set` in the directory layout read by [`read_activation_dir`].
pub fn write_activation_dir(dir: &Path, set: &ActivationSet, dtype: Dtype) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(set.layers.len());
    for (index, m) in set.layers.iter().enumerate() {
        let file = format!("layer_{index:03}.bin");
        let mut bytes = Vec::with_capacity(m.len() * dtype.width());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                match dtype {
                    Dtype::F32 => bytes.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes()),
                    Dtype::F64 => bytes.extend_from_slice(&m[(r, c)].to_le_bytes()),
                }
            }
        }
        fs::write(dir.join(&file), bytes)?;
        entries.push(LayerEntry {
            index,
            rows: m.nrows(),
            cols: m.ncols(),
            dtype,
            file,
        });
    }
    let manifest = ActivationManifest {
        model_id: set.model_id.clone(),
        prompt_ids: set.prompt_ids.clone(),
        layers: entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)
}

/// Layer-by-layer CKA grid as CSV, header `layer,0,1,...`.
pub fn write_layer_matrix_csv<W: Write>(w: W, matrix: &[Vec<Option<f64>>]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let cols = matrix.first().map_or(0, Vec::len);
    let mut header = vec!["layer".to_string()];
    header.extend((0..cols).map(|j| j.to_string()));
    out.write_record(&header)?;
    for (i, row) in matrix.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| crate::scalar::fmt_float(*v)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
