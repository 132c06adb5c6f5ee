use std::path::PathBuf;

use ctnet_core::bilinear::{bilinear_pool as pool, BilinearPooling};
use ctnet_core::data::{make_synthetic, read_image, write_synthetic, SplitSpec, SynthConfig};
use ctnet_core::eval::{kfold_pair_eval as kfold, roc_auc as auc};
use ctnet_core::tensor::Tensor;
use ctnet_core::trainer::{argmax_rows, predict, TrainState};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().get(1).copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Sum (or average) of per-location outer products of two `Y×N` and `Y×M`
/// feature matrices, returned as an `N×M` matrix.
#[pyfunction]
#[pyo3(signature = (a, b, average = false))]
fn bilinear_pool(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, average: bool) -> PyResult<Vec<Vec<f64>>> {
    let mode = if average {
        BilinearPooling::Average
    } else {
        BilinearPooling::Sum
    };
    let out = pool(&to_tensor(a)?, &to_tensor(b)?, mode).map_err(err)?;
    Ok(to_rows(&out))
}

/// Area under the ROC curve of `scores` against boolean `labels`.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(auc(&scores, &labels).map_err(err)?.auc)
}

/// k-fold threshold selection over pair distances; returns
/// `(mean_accuracy, thresholds)`.
#[pyfunction]
#[pyo3(signature = (distances, same_class, folds = 10))]
fn kfold_pair_eval(
    distances: Vec<f64>,
    same_class: Vec<bool>,
    folds: usize,
) -> PyResult<(f64, Vec<f64>)> {
    let r = kfold(&distances, &same_class, folds).map_err(err)?;
    Ok((r.mean_accuracy, r.thresholds()))
}

/// Writes a synthetic dataset (images plus `manifest.csv`) under `out`.
#[pyfunction]
#[pyo3(signature = (out, classes = 4, per_class = 200, size = 32, seed = 0))]
fn synth(
    out: PathBuf,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> PyResult<usize> {
    let ds = make_synthetic(
        classes,
        per_class,
        size,
        size,
        seed,
        &SynthConfig::default(),
    )
    .map_err(err)?;
    let rows = write_synthetic(&ds, &out, &SplitSpec::with_seed(seed)).map_err(err)?;
    Ok(rows.len())
}

/// A trained network loaded from a checkpoint.
#[pyclass(frozen)]
struct Model {
    state: TrainState,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let state = ctnet_core::checkpoint::load(&path).map_err(err)?;
        Ok(Self { state })
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.state.class_names.clone()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        self.state.config.image_size
    }

    /// Class probabilities and embeddings for image files resized to the
    /// model's input size.
    fn predict_files(&self, paths: Vec<PathBuf>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (h, w) = self.state.config.image_size;
        let images = paths
            .iter()
            .map(|p| {
                let img = read_image(p)?;
                Ok(ctnet_core::data::resize_bilinear(&img, h, w)?)
            })
            .collect::<ctnet_core::Result<Vec<_>>>()
            .map_err(err)?;
        let (probs, emb) = predict(&self.state.network, &images).map_err(err)?;
        Ok((to_rows(&probs), to_rows(&emb)))
    }

    /// Predicted class index per image file.
    fn classify_files(&self, paths: Vec<PathBuf>) -> PyResult<Vec<usize>> {
        let (probs, _) = self.predict_files(paths)?;
        Ok(argmax_rows(&to_tensor(probs)?))
    }
}

#[pymodule]
fn ctnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bilinear_pool, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_pair_eval, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
