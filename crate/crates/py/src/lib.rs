//! Python bindings. Arrays cross the boundary as nested lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use eqcollide::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use eqcollide::config::RunConfig;
use eqcollide::dataset::generate_split;
use eqcollide::evaluation::{parse_group_spec, rollout, rollout_mse, verify_equivariance, DEFAULT_SCHEDULE};
use eqcollide::geometry::{self, Vec2};
use eqcollide::mpm::generate_trajectory;
use eqcollide::trajectory::{read_trajectory, write_trajectory, MassPointCloud};

fn py_err(e: eqcollide::Error) -> PyErr {
    match e {
        eqcollide::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        eqcollide::Error::Numerical { .. } => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn run_config(json: Option<&str>) -> PyResult<RunConfig> {
    RunConfig::from_json(json.unwrap_or("{}"), &[]).map_err(py_err)
}

/// A planar rigid motion: rotation about the origin, then translation.
#[pyclass(name = "GroupElement", from_py_object)]
#[derive(Clone, Copy)]
struct PyGroupElement {
    inner: geometry::GroupElement,
}

#[pymethods]
impl PyGroupElement {
    #[new]
    #[pyo3(signature = (angle = 0.0, tx = 0.0, ty = 0.0))]
    fn new(angle: f64, tx: f64, ty: f64) -> Self {
        Self {
            inner: geometry::GroupElement::new(angle, [tx, ty]),
        }
    }

    /// Parse `identity` or `angle=..,tx=..,ty=..,cx=..,cy=..` terms separated by `;`.
    #[staticmethod]
    fn parse(spec: &str) -> PyResult<Vec<Self>> {
        Ok(parse_group_spec(spec)
            .map_err(py_err)?
            .into_iter()
            .map(|inner| Self { inner })
            .collect())
    }

    #[getter]
    fn angle(&self) -> f64 {
        self.inner.rotation_angle
    }

    #[getter]
    fn translation(&self) -> Vec2 {
        self.inner.translation
    }

    fn act_point(&self, p: Vec2) -> Vec2 {
        self.inner.act_point(p)
    }

    fn act_vector(&self, v: Vec2) -> Vec2 {
        self.inner.act_vector(v)
    }

    /// `self ∘ other`: apply `other` first.
    fn compose(&self, other: &Self) -> Self {
        Self {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Self {
        Self {
            inner: self.inner.inverse(),
        }
    }

    fn __repr__(&self) -> String {
        let g = &self.inner;
        format!(
            "GroupElement(angle={}, tx={}, ty={})",
            g.rotation_angle, g.translation[0], g.translation[1]
        )
    }
}

/// A sequence of mass-point frames with a fixed point count.
#[pyclass(name = "Trajectory", from_py_object)]
#[derive(Clone)]
struct PyTrajectory {
    inner: eqcollide::trajectory::Trajectory,
}

impl PyTrajectory {
    fn frame(&self, k: usize) -> PyResult<&MassPointCloud> {
        self.inner
            .frames
            .get(k)
            .ok_or_else(|| PyValueError::new_err(format!("frame {k} out of range 0..{}", self.inner.n_frames())))
    }
}

#[pymethods]
impl PyTrajectory {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_trajectory(&path).map_err(py_err)?,
        })
    }

    /// Write the trajectory directory and return its content hash.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        write_trajectory(&self.inner, &path).map_err(py_err)
    }

    /// Simulate a falling-objects scene. `config` is a run-configuration JSON
    /// string whose `mpm` and `scene` sections apply.
    #[staticmethod]
    #[pyo3(signature = (seed, n_objects = 2, points_per_object = 500, n_frames = 60, config = None))]
    fn generate(
        py: Python<'_>,
        seed: u64,
        n_objects: usize,
        points_per_object: usize,
        n_frames: usize,
        config: Option<&str>,
    ) -> PyResult<Self> {
        let cfg = run_config(config)?;
        let inner = py
            .detach(|| generate_trajectory(seed, n_objects, points_per_object, n_frames, &cfg.mpm, &cfg.scene))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn n_points(&self) -> usize {
        self.inner.n_points()
    }

    #[getter]
    fn n_objects(&self) -> usize {
        self.inner.n_objects()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[getter]
    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn positions(&self, frame: usize) -> PyResult<Vec<Vec2>> {
        Ok(self.frame(frame)?.positions.clone())
    }

    fn velocities(&self, frame: usize) -> PyResult<Vec<Vec2>> {
        Ok(self.frame(frame)?.velocities.clone())
    }

    fn object_ids(&self) -> PyResult<Vec<u32>> {
        Ok(self.frame(0)?.object_ids.clone())
    }

    fn transformed(&self, g: &PyGroupElement) -> Self {
        Self {
            inner: self.inner.transformed(&g.inner),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.n_frames()
    }
}

/// Encoder, processor and decoder with their parameters.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    state: TrainState,
}

impl PyModel {
    fn model(&self) -> &eqcollide::model::Model {
        &self.state.model
    }
}

#[pymethods]
impl PyModel {
    /// A freshly initialized model; `config` is a run-configuration JSON string.
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg = run_config(config)?.effective_model().map_err(py_err)?;
        let model = eqcollide::model::Model::new(&cfg).map_err(py_err)?;
        Ok(Self {
            state: TrainState::fresh(model),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.state, &path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        format!("{:?}", self.model().config.variant).to_lowercase()
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        let store = &self.model().store;
        store
            .ids()
            .filter(|&id| store.is_trainable(id))
            .map(|id| store.value(id).len())
            .sum()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.model().config.hash()
    }

    /// Latent control points of one cloud as a dict of lists.
    fn encode(
        &self,
        py: Python<'_>,
        positions: Vec<Vec2>,
        velocities: Vec<Vec2>,
        object_ids: Vec<u32>,
    ) -> PyResult<Py<pyo3::types::PyDict>> {
        let cloud = MassPointCloud::new(positions, velocities, object_ids).map_err(py_err)?;
        let z = self.model().encode(&cloud).map_err(py_err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("positions", z.poses.iter().map(|p| p.position).collect::<Vec<_>>())?;
        d.set_item(
            "orientations",
            z.poses.iter().map(|p| p.orientation).collect::<Vec<_>>(),
        )?;
        d.set_item(
            "contexts",
            z.contexts.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        )?;
        d.set_item("source_indices", z.source_indices.clone())?;
        d.set_item("object_ids", z.object_ids.clone())?;
        Ok(d.unbind())
    }

    /// Roll the model out from frame `frame` of `trajectory`.
    #[pyo3(signature = (trajectory, steps, frame = 0))]
    fn rollout(&self, trajectory: &PyTrajectory, steps: usize, frame: usize) -> PyResult<PyTrajectory> {
        let start = trajectory.frame(frame)?;
        let inner = rollout(self.model(), start, steps, trajectory.inner.dt).map_err(py_err)?;
        Ok(PyTrajectory { inner })
    }

    /// Relative deviation between transformed rollouts and rollouts of
    /// transformed inputs, one value per element.
    #[pyo3(signature = (trajectory, elements, steps = 5, frame = 1))]
    fn verify_equivariance(
        &self,
        trajectory: &PyTrajectory,
        elements: Vec<PyGroupElement>,
        steps: usize,
        frame: usize,
    ) -> PyResult<Vec<f64>> {
        let start = trajectory.frame(frame)?;
        let gs: Vec<_> = elements.iter().map(|g| g.inner).collect();
        verify_equivariance(self.model(), start, &gs, steps, trajectory.inner.dt).map_err(py_err)
    }
}

/// Mean over points of the squared position error at each step.
#[pyfunction]
#[pyo3(signature = (pred, gt, schedule = None))]
fn position_mse(pred: &PyTrajectory, gt: &PyTrajectory, schedule: Option<Vec<usize>>) -> PyResult<Vec<f64>> {
    let schedule = schedule.unwrap_or_else(|| DEFAULT_SCHEDULE.to_vec());
    rollout_mse(&pred.inner, &gt.inner, &schedule).map_err(py_err)
}

/// Generate a dataset split under `root`; returns the sample ids.
#[pyfunction]
#[pyo3(signature = (root, split, count, config = None, workers = 1))]
fn generate_dataset(
    py: Python<'_>,
    root: PathBuf,
    split: &str,
    count: usize,
    config: Option<&str>,
    workers: usize,
) -> PyResult<Vec<String>> {
    let cfg = run_config(config)?;
    let manifest = py
        .detach(|| generate_split(&cfg, &root, split, count, workers))
        .map_err(py_err)?;
    Ok(manifest.entries.into_iter().map(|e| e.id).collect())
}

#[pyfunction]
fn farthest_point_sample(points: Vec<Vec2>, n_samples: usize) -> PyResult<Vec<usize>> {
    geometry::farthest_point_sample(&points, n_samples).map_err(py_err)
}

/// Neighbour lists, one per center, padded with the center index.
#[pyfunction]
fn ball_query(centers: Vec<usize>, points: Vec<Vec2>, radius: f64, max_k: usize) -> PyResult<Vec<Vec<usize>>> {
    let nl = geometry::ball_query(&centers, &points, radius, max_k).map_err(py_err)?;
    Ok((0..nl.n_centers()).map(|c| nl.neighbors(c).to_vec()).collect())
}

#[pyfunction]
fn rotation_invariants(f: Vec2, v_f: Vec2, q: Vec2, v_q: Vec2) -> [f64; 5] {
    geometry::rotation_invariants(f, v_f, q, v_q)
}

#[pyfunction]
fn se2_bi_invariant(pose_i: (Vec2, f64), pose_j: (Vec2, f64)) -> [f64; 3] {
    geometry::se2_bi_invariant(
        &geometry::Pose2::new(pose_i.0, pose_i.1),
        &geometry::Pose2::new(pose_j.0, pose_j.1),
    )
}

#[pymodule]
fn pyeqcollide(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGroupElement>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(position_mse, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(farthest_point_sample, m)?)?;
    m.add_function(wrap_pyfunction!(ball_query, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_invariants, m)?)?;
    m.add_function(wrap_pyfunction!(se2_bi_invariant, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_surface() {
        assert!(run_config(None).is_ok());
        assert!(run_config(Some(r#"{"train": {"epochz": 1}}"#)).is_err());
        let g = PyGroupElement::new(0.5, 0.1, 0.0);
        let back = g.inverse().act_point(g.act_point([0.2, 0.3]));
        assert!((back[0] - 0.2).abs() < 1e-12 && (back[1] - 0.3).abs() < 1e-12);
    }
}
