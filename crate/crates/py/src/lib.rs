//! Python bindings for `cryomap`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cryomap::embed_pool::{self, EmbeddingSet, PoolOptions};
use cryomap::map_io::{self, GridGeometry};
use cryomap::map_sim;
use cryomap::metrics::{self, CcOptions};
use cryomap::nn::{self, ModelConfig, ModelWeights};
use cryomap::pipeline;
use cryomap::structure_io;
use cryomap::volume_prep;

create_exception!(cryomap, CryomapError, PyException);

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    CryomapError::new_err(e.to_string())
}

/// A density map on a regular grid. `data` is flat with X fastest.
#[pyclass(name = "DensityMap", module = "cryomap", from_py_object)]
#[derive(Clone)]
struct PyDensityMap {
    inner: map_io::DensityMap,
}

#[pymethods]
impl PyDensityMap {
    #[new]
    #[pyo3(signature = (data, dims, voxel_size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)))]
    fn new(data: Vec<f32>, dims: (usize, usize, usize), voxel_size: (f64, f64, f64), origin: (f64, f64, f64)) -> PyResult<Self> {
        let inner = map_io::DensityMap::new(
            data,
            [dims.0, dims.1, dims.2],
            [voxel_size.0, voxel_size.1, voxel_size.2],
            [origin.0, origin.1, origin.2],
        )
        .map_err(err)?;
        Ok(PyDensityMap { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyDensityMap { inner: map_io::read_mrc(path).map_err(err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        map_io::write_mrc(&self.inner, path).map_err(err)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims;
        (d[0], d[1], d[2])
    }

    #[getter]
    fn voxel_size(&self) -> (f64, f64, f64) {
        let v = self.inner.voxel_size;
        (v[0], v[1], v[2])
    }

    #[getter]
    fn origin(&self) -> (f64, f64, f64) {
        let o = self.inner.origin;
        (o[0], o[1], o[2])
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<f32> {
        let d = self.inner.dims;
        if x >= d[0] || y >= d[1] || z >= d[2] {
            return Err(PyIndexError::new_err(format!("({x}, {y}, {z}) outside {d:?}")));
        }
        Ok(self.inner.get(x, y, z))
    }

    /// (min, max, mean, rms)
    fn stats(&self) -> (f32, f32, f32, f32) {
        self.inner.stats()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("DensityMap(dims={:?}, voxel_size={:?})", self.inner.dims, self.inner.voxel_size)
    }
}

#[pyclass(name = "Structure", module = "cryomap", from_py_object)]
#[derive(Clone)]
struct PyStructure {
    inner: structure_io::ProteinStructure,
}

#[pymethods]
impl PyStructure {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyStructure { inner: structure_io::read_pdb(path).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (text, source_id="string"))]
    fn parse(text: &str, source_id: &str) -> PyResult<Self> {
        Ok(PyStructure { inner: structure_io::parse_pdb(text, source_id).map_err(err)? })
    }

    #[getter]
    fn atom_count(&self) -> usize {
        self.inner.atom_count()
    }

    #[getter]
    fn residue_count(&self) -> usize {
        self.inner.residue_count()
    }

    #[getter]
    fn chains(&self) -> Vec<char> {
        self.inner.chains.iter().map(|c| c.id).collect()
    }

    /// Heavy atoms as (atom name, residue name, chain, seq, x, y, z).
    fn atoms(&self) -> Vec<(String, String, char, i32, f64, f64, f64)> {
        let mut out = Vec::new();
        for c in &self.inner.chains {
            for r in &c.residues {
                for a in &r.atoms {
                    let p = a.position;
                    out.push((a.name.clone(), r.name.clone(), c.id, r.seq_id, p[0], p[1], p[2]));
                }
            }
        }
        out
    }

    fn __repr__(&self) -> String {
        format!("Structure(chains={}, residues={}, atoms={})", self.inner.chains.len(), self.inner.residue_count(), self.inner.atom_count())
    }
}

/// Simulated density of `structure`. With `like`, the map reuses its grid.
#[pyfunction]
#[pyo3(signature = (structure, resolution=2.0, grid_interval=1.0, like=None))]
fn simulate(structure: &PyStructure, resolution: f64, grid_interval: f64, like: Option<&PyDensityMap>) -> PyResult<PyDensityMap> {
    let p = map_sim::derive_params(resolution).and_then(|p| p.with_grid_interval(grid_interval)).map_err(err)?;
    let grid: Option<GridGeometry> = like.map(|m| m.inner.geometry());
    let sim = map_sim::simulate_map(&structure.inner, &p, grid.as_ref()).map_err(err)?;
    Ok(PyDensityMap { inner: sim.map })
}

/// Pools a flat `chains × residues × d` embedding into `target_len × d`.
/// Returns (chain weights, flat pooled rows, selection map).
#[pyfunction]
#[pyo3(signature = (data, chains, residues, d, target_len=embed_pool::DEFAULT_EMBED_LEN))]
fn pool_embeddings(
    data: Vec<f64>,
    chains: usize,
    residues: usize,
    d: usize,
    target_len: usize,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    let set = EmbeddingSet::from_dense(data, chains, residues, d).map_err(err)?;
    let opts = PoolOptions { target_len, ..PoolOptions::default() };
    let (cw, pooled) = embed_pool::pool(&set, &opts).map_err(err)?;
    Ok((cw.weights, pooled.final_embedding.data, pooled.selection_map))
}

#[pyclass(name = "TilePlan", module = "cryomap", from_py_object)]
#[derive(Clone)]
struct PyTilePlan {
    inner: volume_prep::TilePlan,
}

#[pymethods]
impl PyTilePlan {
    #[new]
    fn new(dims: (usize, usize, usize)) -> Self {
        PyTilePlan { inner: volume_prep::make_plan([dims.0, dims.1, dims.2]) }
    }

    #[getter]
    fn cube_size(&self) -> usize {
        self.inner.cube_size
    }

    #[getter]
    fn core_size(&self) -> usize {
        self.inner.core_size
    }

    #[getter]
    fn cube_origins(&self) -> Vec<(usize, usize, usize)> {
        self.inner.cube_origins.iter().map(|o| (o[0], o[1], o[2])).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Cubes of `map` in plan order, each flat with X fastest.
    fn partition(&self, map: &PyDensityMap) -> PyResult<Vec<Vec<f32>>> {
        Ok(volume_prep::partition(&map.inner, &self.inner).map_err(err)?.cubes)
    }

    /// Reassembles cubes onto the grid of `template`.
    fn stitch(&self, cubes: Vec<Vec<f32>>, template: &PyDensityMap) -> PyResult<PyDensityMap> {
        let n = cubes.len();
        let batch = volume_prep::CubeBatch { cubes, cube_size: self.inner.cube_size, indices: (0..n).collect() };
        let inner = volume_prep::stitch(&batch, &self.inner, &template.inner.geometry()).map_err(err)?;
        Ok(PyDensityMap { inner })
    }
}

/// Percentile normalization; returns (normalized map, scale).
#[pyfunction]
fn normalize(map: &PyDensityMap) -> PyResult<(PyDensityMap, f64)> {
    let (inner, s) = volume_prep::normalize(&map.inner).map_err(err)?;
    Ok((PyDensityMap { inner }, s))
}

#[pyfunction]
fn resample(map: &PyDensityMap, voxel_size: f64) -> PyResult<PyDensityMap> {
    Ok(PyDensityMap { inner: volume_prep::resample(&map.inner, voxel_size).map_err(err)? })
}

#[pyfunction]
fn cc_box(a: &PyDensityMap, b: &PyDensityMap) -> PyResult<f64> {
    metrics::cc_box(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, fraction=0.1))]
fn cc_peaks(a: &PyDensityMap, b: &PyDensityMap, fraction: f64) -> PyResult<f64> {
    Ok(metrics::cc_peaks(&a.inner, &b.inner, fraction).map_err(err)?.0)
}

/// All real-space correlations as a dict. `cc_volume` needs a structure.
#[pyfunction]
#[pyo3(signature = (map, reference, structure=None))]
fn cc_report<'py>(
    py: Python<'py>,
    map: &PyDensityMap,
    reference: &PyDensityMap,
    structure: Option<&PyStructure>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::cc_report(&map.inner, &reference.inner, structure.map(|s| &s.inner), &CcOptions::default()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("cc_box", r.cc_box)?;
    d.set_item("cc_volume", r.cc_volume)?;
    d.set_item("cc_peaks", r.cc_peaks)?;
    d.set_item("n_box", r.n_box)?;
    d.set_item("n_volume", r.n_volume)?;
    d.set_item("n_peaks", r.n_peaks)?;
    Ok(d)
}

#[pyfunction]
fn fsc<'py>(py: Python<'py>, a: &PyDensityMap, b: &PyDensityMap) -> PyResult<Bound<'py, PyDict>> {
    let c = metrics::fsc(&a.inner, &b.inner).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("shell_centers", c.shell_centers)?;
    d.set_item("fsc", c.fsc)?;
    d.set_item("fsc05", c.fsc05)?;
    d.set_item("at_nyquist", c.at_nyquist)?;
    Ok(d)
}

/// Per-residue scores as (chain, seq, name, rscc or None).
#[pyfunction]
#[pyo3(signature = (map, structure, resolution=2.0))]
fn rscc(map: &PyDensityMap, structure: &PyStructure, resolution: f64) -> PyResult<Vec<(char, i32, String, Option<f64>)>> {
    let p = map_sim::derive_params(resolution)
        .and_then(|p| p.with_grid_interval(map.inner.voxel_size[0]))
        .map_err(err)?;
    let r = metrics::rscc(&map.inner, &structure.inner, &p).map_err(err)?;
    Ok(r.residues.into_iter().map(|s| (s.chain, s.seq, s.name, s.rscc)).collect())
}

/// The enhancement network together with its weights.
#[pyclass(name = "Model", module = "cryomap")]
struct PyModel {
    net: nn::Unet,
    weights: ModelWeights,
}

#[pymethods]
impl PyModel {
    /// Randomly initialized network. `toy` selects the small 16³ variant.
    #[new]
    #[pyo3(signature = (seed=0, base_channels=None, toy=false))]
    fn new(seed: u64, base_channels: Option<usize>, toy: bool) -> PyResult<Self> {
        let mut cfg = if toy { ModelConfig::toy() } else { ModelConfig::default() };
        if let Some(b) = base_channels {
            cfg.base_channels = b;
        }
        let net = nn::Unet::new(cfg).map_err(err)?;
        let weights = net.init_weights(seed);
        Ok(PyModel { net, weights })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let weights = nn::load_weights(&dir).map_err(err)?;
        let net = nn::Unet::new(weights.config.clone()).map_err(err)?;
        Ok(PyModel { net, weights })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        nn::save_weights(&self.weights, &dir).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.weights.num_parameters()
    }

    #[getter]
    fn cube_size(&self) -> usize {
        self.net.config().cube_size
    }

    /// Eval-mode forward pass on one flat `S³` cube.
    fn predict(&self, cube: Vec<f32>) -> PyResult<Vec<f32>> {
        let s = self.net.config().cube_size;
        let x = nn::Tensor::new(vec![1, 1, s, s, s], cube);
        Ok(self.net.predict(&self.weights, &x).map_err(err)?.data)
    }

    /// Full enhancement of a map; returns (map on the input grid, scale).
    fn enhance(&self, py: Python<'_>, map: &PyDensityMap) -> PyResult<(PyDensityMap, f64)> {
        let m = map.inner.clone();
        let e = py.detach(|| pipeline::enhance(&m, &self.net, &self.weights)).map_err(err)?;
        Ok((PyDensityMap { inner: e.map }, e.scale))
    }
}

/// Overfits the toy network on its synthetic pair; returns the loss curve.
#[pyfunction]
#[pyo3(signature = (steps=200, seed=0))]
fn train_toy(py: Python<'_>, steps: u64, seed: u64) -> PyResult<Vec<f32>> {
    let tc = pipeline::ToyTrainConfig { steps, ..Default::default() };
    let run = py.detach(|| pipeline::train_toy(&ModelConfig::toy(), &tc, seed)).map_err(err)?;
    Ok(run.losses)
}

#[pyfunction]
fn smooth_l1(pred: Vec<f32>, target: Vec<f32>) -> PyResult<f64> {
    if pred.len() != target.len() {
        return Err(err(format!("length mismatch {} vs {}", pred.len(), target.len())));
    }
    Ok(nn::smooth_l1(&pred, &target))
}

#[pymodule]
fn cryomap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CryomapError", m.py().get_type::<CryomapError>())?;
    m.add_class::<PyDensityMap>()?;
    m.add_class::<PyStructure>()?;
    m.add_class::<PyTilePlan>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(pool_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(cc_box, m)?)?;
    m.add_function(wrap_pyfunction!(cc_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(cc_report, m)?)?;
    m.add_function(wrap_pyfunction!(fsc, m)?)?;
    m.add_function(wrap_pyfunction!(rscc, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    Ok(())
}
