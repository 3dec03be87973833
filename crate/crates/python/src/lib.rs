//! Python view of the forestsr library: point clouds cross the boundary as
//! lists of `(x, y, z)` tuples.

use std::path::PathBuf;

use forestsr_core::inventory::{self, CircleDetectConfig, DensityDetectConfig};
use forestsr_core::pcio::{self, Format, Point3, PointCloud};
use forestsr_core::{metrics, model, octree, synthgen, trainer, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cloud(points: Vec<(f64, f64, f64)>) -> PointCloud {
    PointCloud::new(points.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect())
}

fn tuples(c: &PointCloud) -> Vec<(f64, f64, f64)> {
    c.points.iter().map(|p| (p.x, p.y, p.z)).collect()
}

#[pyfunction]
fn read_cloud(path: PathBuf) -> PyResult<Vec<(f64, f64, f64)>> {
    let c = pcio::read_points(&path, Format::from_path(&path)).map_err(to_py)?;
    Ok(tuples(&c))
}

#[pyfunction]
fn write_cloud(path: PathBuf, points: Vec<(f64, f64, f64)>) -> PyResult<()> {
    pcio::write_points(&cloud(points), &path, Format::from_path(&path)).map_err(to_py)
}

#[pyfunction]
fn chamfer(a: Vec<(f64, f64, f64)>, b: Vec<(f64, f64, f64)>) -> PyResult<f64> {
    metrics::chamfer(&cloud(a), &cloud(b)).map_err(to_py)
}

#[pyfunction]
fn hausdorff(a: Vec<(f64, f64, f64)>, b: Vec<(f64, f64, f64)>) -> PyResult<f64> {
    metrics::hausdorff(&cloud(a), &cloud(b)).map_err(to_py)
}

/// `(center_x, center_y, radius, rms_residual)` of the least-squares circle.
#[pyfunction]
fn fit_circle(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64, f64)> {
    let pts: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
    let f = inventory::fit_circle(&pts).map_err(to_py)?;
    Ok((f.center[0], f.center[1], f.radius, f.rms_residual))
}

/// Occupied node count per level, root first.
#[pyfunction]
fn octree_levels(points: Vec<(f64, f64, f64)>, depth: u8) -> PyResult<Vec<usize>> {
    let pts: Vec<Point3> = cloud(points).points;
    let tree = octree::Octree::build(&pts, depth).map_err(to_py)?;
    Ok((0..=depth).map(|l| tree.node_count(l)).collect())
}

/// Synthetic plot as a dict with `hr`, `lr` and `trees` (list of dicts).
#[pyfunction]
#[pyo3(signature = (extent=40.0, trees=16, seed=0, hr_density=2000.0, lr_density=100.0, lr_noise=0.05))]
fn synth_forest<'py>(
    py: Python<'py>,
    extent: f64,
    trees: usize,
    seed: u64,
    hr_density: f64,
    lr_density: f64,
    lr_noise: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = synthgen::ForestSpec {
        extent: [extent, extent],
        trees,
        seed,
        hr_density,
        lr_density,
        lr_noise,
        ..Default::default()
    };
    let f = synthgen::generate(&spec).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("hr", tuples(&f.hr))?;
    out.set_item("lr", tuples(&f.lr))?;
    let mut rows = Vec::new();
    for t in &f.truth.trees {
        let d = PyDict::new(py);
        d.set_item("x", t.x)?;
        d.set_item("y", t.y)?;
        d.set_item("dbh_cm", t.dbh_cm)?;
        d.set_item("height_m", t.height_m)?;
        d.set_item("crown_m", t.crown_m)?;
        d.set_item("volume_m3", t.volume_m3)?;
        rows.push(d);
    }
    out.set_item("trees", rows)?;
    Ok(out)
}

/// Stem detections as `(x, y, dbh_cm)`; the density method has no diameter
/// and reports NaN.
#[pyfunction]
#[pyo3(signature = (points, method="circle"))]
fn detect_stems(points: Vec<(f64, f64, f64)>, method: &str) -> PyResult<Vec<(f64, f64, f64)>> {
    let c = cloud(points);
    match method {
        "circle" => Ok(inventory::detect_stems_circle(&c, &CircleDetectConfig::default())
            .map_err(to_py)?
            .iter()
            .map(|d| (d.location[0], d.location[1], d.dbh_cm()))
            .collect()),
        "density" => Ok(inventory::detect_stems_density(&c, &DensityDetectConfig::default())
            .map_err(to_py)?
            .into_iter()
            .map(|l| (l[0], l[1], f64::NAN))
            .collect()),
        other => Err(PyValueError::new_err(format!("unknown method {other:?}; use 'circle' or 'density'"))),
    }
}

/// Runs a trained checkpoint over the cloud with the block edge it was
/// trained with.
#[pyfunction]
fn super_resolve(points: Vec<(f64, f64, f64)>, checkpoint: PathBuf) -> PyResult<Vec<(f64, f64, f64)>> {
    let t = trainer::load_trainer(&checkpoint).map_err(to_py)?;
    let sr = model::super_resolve(&cloud(points), &t.best_model(), t.config.block_edge).map_err(to_py)?;
    Ok(tuples(&sr))
}

#[pymodule]
fn forestsr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(read_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(write_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(fit_circle, m)?)?;
    m.add_function(wrap_pyfunction!(octree_levels, m)?)?;
    m.add_function(wrap_pyfunction!(synth_forest, m)?)?;
    m.add_function(wrap_pyfunction!(detect_stems, m)?)?;
    m.add_function(wrap_pyfunction!(super_resolve, m)?)?;
    Ok(())
}
