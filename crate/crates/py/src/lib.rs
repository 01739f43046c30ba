//! Python bindings for the tensornet crate: atomic systems, models with
//! energy/force/tensor-property prediction, extxyz dataset io, training,
//! and checkpointing.
//!
//! Build with `cargo build -p tensornet-py --release`; the resulting
//! `libtensornet_py.so` imports as the `tensornet_py` module (see
//! `python/smoke_test.py` for a loader that needs no install step).

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::Path;

use tensornet::geometry::{self, AtomicSystem, Labels};
use tensornet::io::{
    build_checkpoint, load_checkpoint, parse_extxyz, restore_model, save_checkpoint,
    write_extxyz, Dataset,
};
use tensornet::model::{EquivarianceGroup, Head, Model as CoreModel, ModelConfig};
use tensornet::train::{train_loop, LossWeights, TrainConfig, TrainState};
use tensornet::verify;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn parse_head(name: &str) -> PyResult<Head> {
    match name {
        "energy" | "energy_forces" => Ok(Head::EnergyForces),
        "dipole" => Ok(Head::Dipole),
        "polarizability" => Ok(Head::Polarizability),
        "shielding" => Ok(Head::Shielding),
        other => Err(PyValueError::new_err(format!(
            "unknown head {other:?}; expected energy_forces, dipole, polarizability, or shielding"
        ))),
    }
}

/// A molecule: atomic numbers, Cartesian positions in Angstrom, and optional
/// reference labels.
#[pyclass(frozen)]
struct System {
    inner: AtomicSystem,
}

#[pymethods]
impl System {
    #[new]
    #[pyo3(signature = (atomic_numbers, positions, energy=None, forces=None, dipole=None, polarizability=None))]
    fn new(
        atomic_numbers: Vec<u32>,
        positions: Vec<[f64; 3]>,
        energy: Option<f64>,
        forces: Option<Vec<[f64; 3]>>,
        dipole: Option<[f64; 3]>,
        polarizability: Option<[f64; 9]>,
    ) -> PyResult<Self> {
        let labels = Labels { energy, forces, dipole, polarizability, shieldings: None };
        let inner = AtomicSystem::new(atomic_numbers, positions, labels).map_err(value_err)?;
        Ok(System { inner })
    }

    #[getter]
    fn atomic_numbers(&self) -> Vec<u32> {
        self.inner.atomic_numbers().to_vec()
    }

    #[getter]
    fn positions(&self) -> Vec<[f64; 3]> {
        self.inner.positions().to_vec()
    }

    #[getter]
    fn energy_label(&self) -> Option<f64> {
        self.inner.labels.energy
    }

    #[getter]
    fn forces_label(&self) -> Option<Vec<[f64; 3]>> {
        self.inner.labels.forces.clone()
    }

    /// The same atoms at new positions; labels are dropped since they no
    /// longer describe the geometry.
    fn with_positions(&self, positions: Vec<[f64; 3]>) -> PyResult<System> {
        let moved = self.inner.with_positions(positions).map_err(value_err)?;
        Ok(System { inner: moved })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let symbols: Vec<&str> = self
            .inner
            .atomic_numbers()
            .iter()
            .map(|&z| geometry::element_symbol(z).unwrap_or("?"))
            .collect();
        format!("System([{}])", symbols.join(", "))
    }
}

/// An equivariant network over stacks of 3x3 tensor channels, predicting
/// energies (always), forces, and any enabled tensor heads.
#[pyclass]
struct Model {
    inner: CoreModel,
}

impl Model {
    fn heads_for(&self, names: &[String]) -> PyResult<Vec<Head>> {
        let mut heads = Vec::new();
        for name in names {
            let head = parse_head(name)?;
            if head != Head::EnergyForces && !heads.contains(&head) {
                heads.push(head);
            }
        }
        Ok(heads)
    }
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (
        seed = 0,
        n_channels = 128,
        n_rbf = 32,
        cutoff = 4.5,
        n_interaction_layers = 2,
        group = "O3",
        max_atomic_number = 118,
        heads = vec!["energy_forces".to_string()],
        energy_scale = 1.0,
        energy_shift = 0.0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        n_channels: usize,
        n_rbf: usize,
        cutoff: f64,
        n_interaction_layers: usize,
        group: &str,
        max_atomic_number: u32,
        heads: Vec<String>,
        energy_scale: f64,
        energy_shift: f64,
    ) -> PyResult<Self> {
        let equivariance_group = match group {
            "O3" => EquivarianceGroup::O3,
            "SO3" => EquivarianceGroup::SO3,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown group {other:?}; expected \"O3\" or \"SO3\""
                )))
            }
        };
        let mut enabled_heads = vec![Head::EnergyForces];
        for name in &heads {
            let head = parse_head(name)?;
            if !enabled_heads.contains(&head) {
                enabled_heads.push(head);
            }
        }
        let config = ModelConfig {
            n_channels,
            n_rbf,
            cutoff,
            n_interaction_layers,
            equivariance_group,
            max_atomic_number,
            enabled_heads,
            energy_scale,
            energy_shift,
            ..ModelConfig::default()
        };
        let inner = CoreModel::new(config, seed).map_err(value_err)?;
        Ok(Model { inner })
    }

    /// Architecture summary as a dict.
    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let cfg = &self.inner.config;
        let d = PyDict::new_bound(py);
        d.set_item("n_channels", cfg.n_channels)?;
        d.set_item("n_rbf", cfg.n_rbf)?;
        d.set_item("cutoff", cfg.cutoff)?;
        d.set_item("n_interaction_layers", cfg.n_interaction_layers)?;
        d.set_item("group", cfg.equivariance_group.name())?;
        d.set_item("max_atomic_number", cfg.max_atomic_number)?;
        let heads: Vec<&str> = cfg.enabled_heads.iter().map(|h| h.name()).collect();
        d.set_item("heads", heads)?;
        d.set_item("energy_scale", cfg.energy_scale)?;
        d.set_item("energy_shift", cfg.energy_shift)?;
        Ok(d)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.entries().iter().map(|e| e.values.len()).sum()
    }

    /// Total energy and per-atom contributions.
    fn energy(&self, system: &System) -> PyResult<(f64, Vec<f64>)> {
        self.inner.energy(&system.inner).map_err(value_err)
    }

    /// Total energy and per-atom forces (-dU/dr).
    fn forces(&self, system: &System) -> PyResult<(f64, Vec<[f64; 3]>)> {
        self.inner.forces(&system.inner).map_err(value_err)
    }

    /// Evaluate one system. `heads` selects extra outputs beyond energy
    /// ("dipole", "polarizability", "shielding"); each must be enabled on
    /// the model. Returns a dict with one key per produced quantity.
    #[pyo3(signature = (system, heads = Vec::new(), forces = false))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        system: &System,
        heads: Vec<String>,
        forces: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let extra = self.heads_for(&heads)?;
        let prediction =
            self.inner.predict(&system.inner, &extra, forces).map_err(value_err)?;
        let d = PyDict::new_bound(py);
        d.set_item("energy", prediction.energy)?;
        d.set_item("atomic_energies", prediction.atomic_energies)?;
        if let Some(f) = prediction.forces {
            d.set_item("forces", f)?;
        }
        if let Some(mu) = prediction.dipole {
            d.set_item("dipole", mu)?;
        }
        if let Some(alpha) = prediction.polarizability {
            d.set_item("polarizability", alpha.to_vec())?;
        }
        if let Some(sigma) = prediction.shieldings {
            let rows: Vec<Vec<f64>> = sigma.iter().map(|m| m.to_vec()).collect();
            d.set_item("shieldings", rows)?;
        }
        if let Some(shifts) = prediction.chemical_shifts {
            d.set_item("chemical_shifts", shifts)?;
        }
        Ok(d)
    }

    /// Fit the model on labeled systems. Returns a dict with per-epoch
    /// record lines and the best-validation summary; the model is left
    /// holding the best-validation parameters.
    #[pyo3(signature = (
        systems,
        max_epochs = 50,
        batch_size = 8,
        lr = 1e-3,
        val_fraction = 0.1,
        seed = 0,
        energy_weight = 0.5,
        force_weight = 0.5,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        systems: Vec<PyRef<'py, System>>,
        max_epochs: usize,
        batch_size: usize,
        lr: f64,
        val_fraction: f64,
        seed: u64,
        energy_weight: f64,
        force_weight: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let dataset: Vec<AtomicSystem> = systems.iter().map(|s| s.inner.clone()).collect();
        let cfg = TrainConfig {
            batch_size,
            lr_init: lr,
            max_epochs,
            val_fraction,
            seed,
            loss_weights: LossWeights {
                energy: energy_weight,
                forces: force_weight,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&self.inner.params);
        let outcome =
            train_loop(&mut self.inner, &mut state, &dataset, &cfg).map_err(value_err)?;
        self.inner.params = outcome.best_params;
        let d = PyDict::new_bound(py);
        let lines: Vec<String> = outcome.records.iter().map(|r| r.line()).collect();
        d.set_item("records", lines)?;
        d.set_item("best_val_loss", outcome.best_val_loss)?;
        d.set_item("best_epoch", outcome.best_epoch)?;
        d.set_item("stop_reason", outcome.stop_reason)?;
        Ok(d)
    }

    /// Write the model (architecture + parameters) to a checkpoint file.
    fn save(&self, path: &str) -> PyResult<()> {
        let ckpt = build_checkpoint(&self.inner, &TrainConfig::default(), None, Vec::new());
        save_checkpoint(Path::new(path), &ckpt).map_err(io_err)
    }

    /// Load a model from a checkpoint file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let ckpt = load_checkpoint(Path::new(path)).map_err(io_err)?;
        let restored = restore_model(&ckpt).map_err(value_err)?;
        Ok(Model { inner: restored.model })
    }

    fn __repr__(&self) -> String {
        let cfg = &self.inner.config;
        format!(
            "Model(C={}, rbf={}, cutoff={}, layers={}, group={})",
            cfg.n_channels,
            cfg.n_rbf,
            cfg.cutoff,
            cfg.n_interaction_layers,
            cfg.equivariance_group.name()
        )
    }
}

/// Read an extxyz file. Returns a dict with "systems" (list of System) plus
/// the "energy_unit" and "length_unit" strings found in the file.
#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let dataset = parse_extxyz(Path::new(path)).map_err(io_err)?;
    let d = PyDict::new_bound(py);
    let systems: Vec<System> = dataset.systems.into_iter().map(|s| System { inner: s }).collect();
    d.set_item(
        "systems",
        systems.into_iter().map(|s| Py::new(py, s)).collect::<PyResult<Vec<_>>>()?,
    )?;
    d.set_item("energy_unit", dataset.energy_unit)?;
    d.set_item("length_unit", dataset.length_unit)?;
    Ok(d)
}

/// Write systems to an extxyz file, preserving whatever labels they carry.
#[pyfunction]
#[pyo3(signature = (path, systems, energy_unit = "", length_unit = ""))]
fn save_dataset(
    path: &str,
    systems: Vec<PyRef<System>>,
    energy_unit: &str,
    length_unit: &str,
) -> PyResult<()> {
    let dataset = Dataset {
        systems: systems.iter().map(|s| s.inner.clone()).collect(),
        energy_unit: energy_unit.to_string(),
        length_unit: length_unit.to_string(),
        source: path.to_string(),
    };
    write_extxyz(Path::new(path), &dataset).map_err(io_err)
}

/// A Haar-uniform random rotation matrix (row-major nested lists),
/// deterministic in the seed.
#[pyfunction]
fn random_rotation(seed: u64) -> [[f64; 3]; 3] {
    let m = *verify::random_rotation(seed).matrix();
    [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]]
}

/// Atomic number for an element symbol, or None.
#[pyfunction]
fn element_number(symbol: &str) -> Option<u32> {
    geometry::element_number(symbol)
}

/// Element symbol for an atomic number, or None.
#[pyfunction]
fn element_symbol(z: u32) -> Option<&'static str> {
    geometry::element_symbol(z)
}

#[pymodule]
fn tensornet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<System>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(random_rotation, m)?)?;
    m.add_function(wrap_pyfunction!(element_number, m)?)?;
    m.add_function(wrap_pyfunction!(element_symbol, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
