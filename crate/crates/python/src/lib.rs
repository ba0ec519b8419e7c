//! Python bindings: transforms, labeled scans, the matching network and the
//! registration pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;

use semreg::geom::{self, IcpConfig, Point3, PointCloud, RigidTransform};
use semreg::instances::{self, CategoryConfig, SemanticPointCloud};
use semreg::matching::{self, SinkhornConfig};
use semreg::nets::{self, ModelConfig};
use semreg::pipeline::{self, RegistrationConfig};
use semreg::tensor::Tensor;
use semreg::{io, training};

fn err(e: semreg::Error) -> PyErr {
    if e.is_io() {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn points(v: Vec<[f64; 3]>) -> PyResult<Vec<Point3>> {
    v.into_iter()
        .map(|[x, y, z]| Point3::try_new(x, y, z).map_err(err))
        .collect()
}

fn arrays(v: &[Point3]) -> Vec<[f64; 3]> {
    v.iter().map(|p| p.to_array()).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Rigid motion `p ↦ R·p + t`.
#[pyclass(name = "Transform", module = "semreg_py", from_py_object)]
#[derive(Clone)]
struct PyTransform(RigidTransform);

#[pymethods]
impl PyTransform {
    #[new]
    fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> PyResult<Self> {
        let mut v = [0.0; 12];
        for i in 0..3 {
            v[4 * i..4 * i + 3].copy_from_slice(&rotation[i]);
            v[4 * i + 3] = translation[i];
        }
        RigidTransform::from_row_major_3x4(&v).map(Self).map_err(err)
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(RigidTransform::identity())
    }

    /// From the 12 numbers of a KITTI pose line.
    #[staticmethod]
    fn from_row_major(values: [f64; 12]) -> PyResult<Self> {
        RigidTransform::from_row_major_3x4(&values).map(Self).map_err(err)
    }

    /// Rotation about `axis` by `angle` radians, then `translation`.
    #[staticmethod]
    fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        Self(RigidTransform::from_axis_angle(axis.into(), angle, translation.into()))
    }

    fn to_row_major(&self) -> [f64; 12] {
        self.0.to_row_major_3x4()
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        let r = self.0.rotation();
        [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[(i, j)]))
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.0.translation();
        [t.x, t.y, t.z]
    }

    fn apply(&self, pts: Vec<[f64; 3]>) -> PyResult<Vec<[f64; 3]>> {
        Ok(points(pts)?.iter().map(|p| self.0.apply_point(p).to_array()).collect())
    }

    /// `self ∘ first`: apply `first`, then `self`.
    fn compose(&self, first: &PyTransform) -> Self {
        Self(self.0.compose(&first.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// `(rre_deg, rte_m)` of this estimate against `truth`.
    fn error_to(&self, truth: &PyTransform) -> PyResult<(f64, f64)> {
        let e = semreg::eval::PoseError::between(&self.0, &truth.0).map_err(err)?;
        Ok((e.rre_deg, e.rte_m))
    }

    fn __repr__(&self) -> String {
        format!("Transform({:?})", self.0.to_row_major_3x4())
    }
}

/// Points with one raw semantic label each.
#[pyclass(name = "LabeledScan", module = "semreg_py", from_py_object)]
#[derive(Clone)]
struct PyScan(SemanticPointCloud);

#[pymethods]
impl PyScan {
    #[new]
    fn new(pts: Vec<[f64; 3]>, labels: Vec<u32>) -> PyResult<Self> {
        SemanticPointCloud::new(PointCloud::new(points(pts)?), labels)
            .map(Self)
            .map_err(err)
    }

    /// Reads a `.bin` scan and its `.label` file.
    #[staticmethod]
    fn read(scan: PathBuf, labels: PathBuf) -> PyResult<Self> {
        io::read_labeled_scan(&scan, &labels).map(Self).map_err(err)
    }

    fn write(&self, scan: PathBuf, labels: PathBuf) -> PyResult<()> {
        io::write_scan(&scan, self.0.cloud()).map_err(err)?;
        io::write_labels(&labels, self.0.labels()).map_err(err)
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 3]> {
        arrays(self.0.points())
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.0.labels().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Instance", module = "semreg_py", get_all)]
struct PyInstance {
    id: usize,
    category: usize,
    centroid: [f64; 3],
    point_count: usize,
}

/// Clusters a scan into semantic instances (default SemanticKITTI classes).
#[pyfunction]
#[pyo3(signature = (scan, shape_points = 128))]
fn extract_instances(scan: &PyScan, shape_points: usize) -> PyResult<Vec<PyInstance>> {
    let inst = instances::extract_instances(&scan.0, &CategoryConfig::default(), shape_points).map_err(err)?;
    Ok(inst
        .into_iter()
        .map(|i| PyInstance {
            id: i.id,
            category: i.category_index,
            centroid: i.centroid.to_array(),
            point_count: i.point_count,
        })
        .collect())
}

/// Network weights.
#[pyclass(name = "Model", module = "semreg_py")]
struct PyModel(nets::Model);

#[pymethods]
impl PyModel {
    /// Fresh weights; `shape_points` is K, the points per instance.
    #[new]
    #[pyo3(signature = (seed = 0, shape_points = 128))]
    fn new(seed: u64, shape_points: usize) -> PyResult<Self> {
        let cfg = ModelConfig {
            shape_points,
            ..ModelConfig::default()
        };
        nets::Model::new(cfg, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, shape_points = 128))]
    fn load(path: PathBuf, shape_points: usize) -> PyResult<Self> {
        let mut m = Self::new(0, shape_points)?;
        io::load_checkpoint(&mut m.0, &path).map_err(err)?;
        Ok(m)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_checkpoint(&self.0, &path).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.params.num_scalars()
    }

    #[getter]
    fn shape_points(&self) -> usize {
        self.0.config.shape_points
    }

    /// Trains in place on `pairs` synthetic scene pairs; returns the mean loss per epoch.
    #[pyo3(signature = (pairs, epochs, seed = 0, learning_rate = 1e-4, batch_size = 16))]
    fn train_synthetic(&mut self, pairs: usize, epochs: usize, seed: u64, learning_rate: f64, batch_size: usize) -> PyResult<Vec<f64>> {
        let cfg = training::TrainConfig {
            epochs,
            seed,
            learning_rate,
            batch_size,
            shape_points: self.0.config.shape_points,
            dustbin_loss: true,
            ..training::TrainConfig::default()
        };
        let data = training::synthetic_pairs(
            pairs,
            training::split_seed(seed, 0),
            &training::SceneGenConfig::default(),
            &CategoryConfig::default(),
            &self.0,
            cfg.graph_k,
            cfg.beta,
        )
        .map_err(err)?;
        let hist = training::train(&mut self.0, &data, &[], &cfg, |_| {}).map_err(err)?;
        Ok(hist.iter().map(|r| r.mean_loss).collect())
    }
}

#[pyclass(name = "Registration", module = "semreg_py", get_all)]
struct PyRegistration {
    coarse: Option<PyTransform>,
    fine: Option<PyTransform>,
    /// `(i, j, score)` instance matches.
    matches: Vec<(usize, usize, f64)>,
    skipped: Option<String>,
    error: Option<String>,
    diagnostics_json: String,
}

/// Registers `x` onto `y`; failures are reported in the result, not raised.
#[pyfunction]
#[pyo3(signature = (x, y, model, threshold = 0.7, min_instances = 5))]
fn register(x: &PyScan, y: &PyScan, model: &PyModel, threshold: f64, min_instances: usize) -> PyResult<PyRegistration> {
    let cfg = RegistrationConfig {
        threshold,
        min_instances,
        ..RegistrationConfig::default()
    };
    cfg.validate().map_err(err)?;
    let r = pipeline::register_pair(&x.0, &y.0, &model.0, &CategoryConfig::default(), &cfg);
    Ok(PyRegistration {
        coarse: r.coarse.map(PyTransform),
        fine: r.fine.map(PyTransform),
        matches: r.correspondences.matches.iter().map(|m| (m.i, m.j, m.score)).collect(),
        skipped: r.diagnostics.skipped.clone(),
        error: r.diagnostics.error.clone(),
        diagnostics_json: serde_json::to_string(&r.diagnostics).expect("diagnostics serialize"),
    })
}

/// Synthetic scene pair `(x, y, gt)` with `gt` taking X into Y's frame.
#[pyfunction]
fn synthetic_pair(seed: u64) -> PyResult<(PyScan, PyScan, PyTransform)> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let p = training::generate_scene_pair(&mut rng, &training::SceneGenConfig::default()).map_err(err)?;
    Ok((PyScan(p.x), PyScan(p.y), PyTransform(p.gt)))
}

/// Least-squares rigid transform taking `src` onto `dst`.
#[pyfunction]
fn kabsch(src: Vec<[f64; 3]>, dst: Vec<[f64; 3]>) -> PyResult<PyTransform> {
    geom::kabsch_svd(&points(src)?, &points(dst)?).map(PyTransform).map_err(err)
}

/// Point-to-point ICP; returns `(transform, converged, rms_history)`.
#[pyfunction]
#[pyo3(signature = (src, dst, init = None, max_iters = 50, max_correspondence_dist = 2.0))]
fn icp(
    src: Vec<[f64; 3]>,
    dst: Vec<[f64; 3]>,
    init: Option<PyTransform>,
    max_iters: usize,
    max_correspondence_dist: f64,
) -> PyResult<(PyTransform, bool, Vec<f64>)> {
    let cfg = IcpConfig {
        max_iters,
        max_correspondence_dist,
        ..IcpConfig::default()
    };
    let init = init.map_or_else(RigidTransform::identity, |t| t.0);
    let r = geom::icp_refine(&PointCloud::new(points(src)?), &PointCloud::new(points(dst)?), &init, &cfg).map_err(err)?;
    Ok((PyTransform(r.transform), r.converged, r.rms_history))
}

/// Row/column normalization of `exp(scores)`; returns `(plan, iterations)`.
#[pyfunction]
#[pyo3(signature = (scores, max_iters = 100, tol = 1e-6))]
fn sinkhorn(scores: Vec<Vec<f64>>, max_iters: usize, tol: f64) -> PyResult<(Vec<Vec<f64>>, usize)> {
    let (plan, iters, _) = matching::sinkhorn_plan(&matrix(scores)?, &SinkhornConfig { max_iters, tol }).map_err(err)?;
    Ok((rows(&plan), iters))
}

/// Mutual-argmax pairs with probability above `threshold`.
#[pyfunction]
#[pyo3(signature = (plan, threshold = 0.7))]
fn hard_assign(plan: Vec<Vec<f64>>, threshold: f64) -> PyResult<Vec<(usize, usize)>> {
    Ok(matching::hard_assign(&matrix(plan)?, threshold).map_err(err)?.pairs())
}

/// Maximum-score one-to-one assignment.
#[pyfunction]
fn hungarian(scores: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    matching::hungarian(&matrix(scores)?).map_err(err)
}

#[pyfunction]
fn read_poses(path: PathBuf) -> PyResult<Vec<PyTransform>> {
    Ok(io::read_poses(&path).map_err(err)?.into_iter().map(PyTransform).collect())
}

#[pymodule]
fn semreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTransform>()?;
    m.add_class::<PyScan>()?;
    m.add_class::<PyInstance>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRegistration>()?;
    m.add_function(wrap_pyfunction!(extract_instances, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pair, m)?)?;
    m.add_function(wrap_pyfunction!(kabsch, m)?)?;
    m.add_function(wrap_pyfunction!(icp, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(hard_assign, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(read_poses, m)?)?;
    Ok(())
}
