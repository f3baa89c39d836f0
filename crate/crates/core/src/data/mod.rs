//! Datasets of frozen embeddings, text proxies, their on-disk formats, a
//! synthetic generator and the few-shot / long-tail / split protocols.

pub mod format;
mod sampling;
mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ndcore::{Matrix, NdError};
use crate::Scalar;

pub use format::{
    read_class_names, read_feature_matrix, read_labels, write_class_names, write_feature_matrix, write_labels,
};
pub use sampling::{few_shot_counts, few_shot_subsample, long_tail_counts, long_tail_subsample, split};
pub use synth::{noisy_text_proxies, orthonormal_proxies, synth_generate, SynthSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: format error at byte {offset}: {message}")]
    Format { path: String, offset: usize, message: String },
    #[error("label {label} at index {index} is out of range for {classes} classes")]
    Label { index: usize, label: usize, classes: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Nd(#[from] NdError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

pub type DataResult<T> = Result<T, DataError>;

/// Frozen embeddings with labels and class names.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: String,
}

/// File locations of one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub features: PathBuf,
    pub labels: PathBuf,
    pub class_names: PathBuf,
}

impl DatasetPaths {
    /// `features.tesf`, `labels.tesl` and `classes.txt` under `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            features: dir.join("features.tesf"),
            labels: dir.join("labels.tesl"),
            class_names: dir.join("classes.txt"),
        }
    }
}

impl<T: Scalar> FeatureDataset<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, class_names: Vec<String>, split: &str) -> DataResult<Self> {
        if labels.len() != features.rows() {
            return Err(DataError::Invalid(format!("{} labels for {} feature rows", labels.len(), features.rows())));
        }
        let classes = class_names.len();
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::Label { index, label, classes });
        }
        Ok(Self { features, labels, class_names, split: split.to_owned() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Row indices of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Rows at `indices` in the given order.
    pub fn subset(&self, indices: &[usize], split: &str) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            split: split.to_owned(),
        }
    }

    pub fn save(&self, paths: &DatasetPaths) -> DataResult<()> {
        write_feature_matrix(&paths.features, &self.features)?;
        write_labels(&paths.labels, &self.labels, self.num_classes())?;
        write_class_names(&paths.class_names, &self.class_names)
    }

    pub fn load(paths: &DatasetPaths, split: &str) -> DataResult<Self> {
        let features = read_feature_matrix(&paths.features)?;
        let (labels, classes) = read_labels(&paths.labels)?;
        let class_names = read_class_names(&paths.class_names)?;
        if class_names.len() != classes {
            return Err(DataError::Invalid(format!(
                "{}: {} class names for {classes} classes",
                paths.class_names.display(),
                class_names.len()
            )));
        }
        Self::new(features, labels, class_names, split)
    }
}

/// Text-encoder proxies, one column of `z` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextProxySet<T> {
    /// d_z × C.
    pub z: Matrix<T>,
    pub class_names: Vec<String>,
    pub prompt_template: String,
    pub encoder: String,
}

impl<T: Scalar> TextProxySet<T> {
    pub fn new(z: Matrix<T>, class_names: Vec<String>) -> DataResult<Self> {
        if z.cols() != class_names.len() {
            return Err(DataError::Invalid(format!(
                "{} proxy columns for {} class names",
                z.cols(),
                class_names.len()
            )));
        }
        for k in 0..z.cols() {
            let n = crate::ndcore::norm(&z.col(k)).as_f64();
            if !(n > crate::ndcore::DEGENERATE_NORM) {
                return Err(DataError::Nd(NdError::DegenerateRow { index: k, norm: n }));
            }
        }
        Ok(Self { z, class_names, prompt_template: String::new(), encoder: String::new() })
    }

    pub fn with_tags(mut self, prompt_template: &str, encoder: &str) -> Self {
        self.prompt_template = prompt_template.to_owned();
        self.encoder = encoder.to_owned();
        self
    }

    pub fn num_classes(&self) -> usize {
        self.z.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.z.rows()
    }

    /// Proxy file rows are classes; stored transposed on disk.
    pub fn save(&self, proxies: &Path, class_names: &Path) -> DataResult<()> {
        write_feature_matrix(proxies, &self.z.transpose())?;
        write_class_names(class_names, &self.class_names)
    }

    pub fn load(proxies: &Path, class_names: &Path) -> DataResult<Self> {
        let rows: Matrix<T> = read_feature_matrix(proxies)?;
        Self::new(rows.transpose(), read_class_names(class_names)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|k| format!("c{k}")).collect()
    }

    #[test]
    fn dataset_round_trip_is_exact_at_32_bits() {
        let dir = tempfile::tempdir().unwrap();
        let features = Matrix::from_fn(5, 3, |r, c| (r as f64 + 0.1) / (c as f64 + 3.0));
        let ds = FeatureDataset::new(features, vec![0, 2, 1, 1, 0], names(3), "train").unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        ds.save(&paths).unwrap();
        let back = FeatureDataset::<f64>::load(&paths, "train").unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.class_names, ds.class_names);
        for (a, b) in back.features.as_slice().iter().zip(ds.features.as_slice()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*a, (*b as f32) as f64);
        }
        let first = std::fs::read(&paths.features).unwrap();
        back.save(&paths).unwrap();
        assert_eq!(std::fs::read(&paths.features).unwrap(), first);
    }

    #[test]
    fn class_name_count_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        FeatureDataset::new(Matrix::<f64>::zeros(1, 2), vec![0], names(2), "x").unwrap().save(&paths).unwrap();
        write_class_names(&paths.class_names, &names(3)).unwrap();
        assert!(matches!(FeatureDataset::<f64>::load(&paths, "x"), Err(DataError::Invalid(_))));
    }

    #[test]
    fn proxies_are_stored_one_row_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let z = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let set = TextProxySet::new(z.clone(), names(3)).unwrap();
        let (pf, nf) = (dir.path().join("p.tesf"), dir.path().join("n.txt"));
        set.save(&pf, &nf).unwrap();
        let rows: Matrix<f64> = read_feature_matrix(&pf).unwrap();
        assert_eq!(rows.shape(), (3, 2));
        assert_eq!(rows.row(1), &[2.0, 5.0]);
        assert_eq!(TextProxySet::<f64>::load(&pf, &nf).unwrap().z, z);
    }

    #[test]
    fn degenerate_proxy_rejected() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(TextProxySet::new(z, names(2)).is_err());
    }
}
