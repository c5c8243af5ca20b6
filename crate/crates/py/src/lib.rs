//! Python bindings: architecture accounting, golden tables, weight files and DSC.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use stunet::accounting::{count_flops, reproduce as reproduce_table};
use stunet::arch::{build, scale as scale_config, ArchConfig, ScalePlan};
use stunet::harness::{dsc as dsc_of, LabelMap};
use stunet::weights::{self, WeightStore};
use stunet::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format { .. } | Error::Checksum { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Preset name or inline JSON.
fn resolve(config: &str) -> Result<ArchConfig, Error> {
    match ArchConfig::preset(config) {
        Some(c) => Ok(c),
        None => ArchConfig::from_json(config),
    }
}

pub const PRESETS: [&str; 6] = ["stu-net-s", "stu-net-b", "stu-net-l", "stu-net-h", "nnunet", "nnunet-star"];

#[pyfunction]
fn presets() -> Vec<&'static str> {
    PRESETS.to_vec()
}

/// Returns `{"params", "params_m", "flops", "flops_t", "digest"}` for a preset or JSON config.
#[pyfunction]
#[pyo3(signature = (config, patch = (128, 128, 128)))]
fn describe(py: Python<'_>, config: &str, patch: (usize, usize, usize)) -> PyResult<PyObject> {
    let cfg = resolve(config).map_err(py_err)?;
    let g = build(&cfg).map_err(py_err)?;
    let r = count_flops(&g, [patch.0, patch.1, patch.2]).map_err(py_err)?;
    let d = pyo3::types::PyDict::new_bound(py);
    d.set_item("params", r.params)?;
    d.set_item("params_m", r.params_m)?;
    d.set_item("flops", r.flops)?;
    d.set_item("flops_t", r.flops_t)?;
    d.set_item("digest", cfg.digest())?;
    Ok(d.into())
}

/// Scales a preset or JSON config and returns the result as JSON.
#[pyfunction]
fn scale(config: &str, depth: f64, width: f64) -> PyResult<String> {
    let cfg = resolve(config).map_err(py_err)?;
    Ok(scale_config(&cfg, ScalePlan::new(depth, width)).map_err(py_err)?.to_json())
}

/// Golden-table cells as `(row, column, expected, computed, within_tolerance)`.
#[pyfunction]
#[pyo3(signature = (which, patch = (128, 128, 128)))]
fn reproduce(which: &str, patch: (usize, usize, usize)) -> PyResult<Vec<(String, String, f64, f64, bool)>> {
    let cells = reproduce_table(which, [patch.0, patch.1, patch.2])
        .map_err(py_err)?
        .ok_or_else(|| PyValueError::new_err(format!("unknown table {which:?}")))?;
    Ok(cells.into_iter().map(|c| (c.row, c.column.to_string(), c.expected, c.computed, c.within_tolerance)).collect())
}

/// Reads a weight file into `{name: (shape, values)}` in file order.
#[pyfunction]
fn load_weights(path: &str) -> PyResult<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let store = weights::load(path).map_err(py_err)?;
    Ok(store.into_map().into_iter().map(|(n, t)| (n, t.shape().to_vec(), t.into_data())).collect())
}

/// Writes `(name, shape, values)` triples to a weight file.
#[pyfunction]
fn save_weights(path: &str, tensors: Vec<(String, Vec<usize>, Vec<f32>)>) -> PyResult<()> {
    let mut store = WeightStore::new();
    for (name, shape, values) in tensors {
        store.insert(name, Tensor::new(shape, values).map_err(py_err)?).map_err(py_err)?;
    }
    weights::save(&store, path).map_err(py_err)
}

/// Per-class DSC of two flat label arrays sharing `shape`.
#[pyfunction]
fn dsc(pred: Vec<u16>, gt: Vec<u16>, shape: (usize, usize, usize), classes: Vec<u16>) -> PyResult<BTreeMap<u16, f64>> {
    let s = [shape.0, shape.1, shape.2];
    let p = LabelMap::new(s, pred).map_err(py_err)?;
    let g = LabelMap::new(s, gt).map_err(py_err)?;
    classes.into_iter().map(|c| Ok((c, dsc_of(&p, &g, c).map_err(py_err)?))).collect()
}

#[pymodule]
fn stunet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(describe, m)?)?;
    m.add_function(wrap_pyfunction!(scale, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce, m)?)?;
    m.add_function(wrap_pyfunction!(load_weights, m)?)?;
    m.add_function(wrap_pyfunction!(save_weights, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    Ok(())
}
