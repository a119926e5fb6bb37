use nalgebra::{Matrix3, Matrix3xX, Vector3};

use super::{FaceMesh, PoseParams, UvMap};
use crate::error::{Error, Result};

/// Landmark configurations whose second singular value falls below this
/// fraction of the first are treated as collinear.
pub const DEGENERACY_RATIO: f64 = 1e-12;

/// Paired landmark positions gathered from the same UV cells of two maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub cells: Vec<super::UvCell>,
    pub positions: Matrix3xX<f64>,
}

impl LandmarkSet {
    pub fn k(&self) -> usize {
        self.cells.len()
    }
}

fn centered(p: &Matrix3xX<f64>) -> (Vector3<f64>, Matrix3xX<f64>) {
    let mean = p.column_mean();
    let mut c = p.clone();
    for mut col in c.column_iter_mut() {
        col -= mean;
    }
    (mean, c)
}

/// Least-squares similarity transform carrying `source` points onto
/// `target` points (Umeyama). Columns correspond.
pub fn similarity_from_points(target: &Matrix3xX<f64>, source: &Matrix3xX<f64>) -> Result<PoseParams> {
    let k = source.ncols();
    if k != target.ncols() {
        return Err(Error::Dimension(format!(
            "{k} source landmarks vs {} target landmarks",
            target.ncols()
        )));
    }
    if k < 3 {
        return Err(Error::Underdetermined(format!("need at least 3 landmarks, got {k}")));
    }
    let (mu_s, xs) = centered(source);
    let (mu_t, xt) = centered(target);

    // Rank 2 is enough: a planar landmark set still pins down a rotation.
    let sv = xs.clone().svd(false, false).singular_values;
    if !(sv[0] > 0.0) || sv[1] < DEGENERACY_RATIO * sv[0] {
        return Err(Error::Underdetermined(
            "landmarks are collinear or coincident".into(),
        ));
    }

    let n = k as f64;
    let cov: Matrix3<f64> = &xt * xs.transpose() / n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[2] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&d) * v_t;
    let var_s = xs.norm_squared() / n;
    let f = svd.singular_values.dot(&d) / var_s;
    if !(f > 0.0) {
        return Err(Error::Underdetermined(format!("non-positive scale estimate {f}")));
    }
    let t = mu_t - f * r * mu_s;
    Ok(PoseParams { f, r, t })
}

/// Similarity transform mapping the pose-invariant landmarks onto the posed
/// ones, so that `compose_geometry(self_align(P, S, ..), S) ≈ P`.
pub fn self_align(pose_dep: &FaceMesh, pose_inv: &FaceMesh, landmarks: &[usize]) -> Result<PoseParams> {
    if pose_dep.m() != pose_inv.m() {
        return Err(Error::Topology(format!(
            "meshes differ in vertex count: {} vs {}",
            pose_dep.m(),
            pose_inv.m()
        )));
    }
    if landmarks.len() < 3 {
        return Err(Error::Underdetermined(format!(
            "need at least 3 landmarks, got {}",
            landmarks.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for &j in landmarks {
        if j >= pose_inv.m() {
            return Err(Error::Topology(format!(
                "landmark vertex {j} out of range for {} vertices",
                pose_inv.m()
            )));
        }
        if !seen.insert(j) {
            return Err(Error::Topology(format!("landmark vertex {j} repeated")));
        }
    }
    let gather = |m: &FaceMesh| Matrix3xX::from_columns(&landmarks.iter().map(|&j| m.vertices().column(j)).collect::<Vec<_>>());
    similarity_from_points(&gather(pose_dep), &gather(pose_inv))
}

/// [`self_align`] driven by UV cells: the same cells on both maps address
/// the same semantic points.
pub fn self_align_uv(pose_dep: &UvMap, pose_inv: &UvMap, cells: &[super::UvCell]) -> Result<PoseParams> {
    if pose_dep.topology().id != pose_inv.topology().id {
        return Err(Error::Topology(format!(
            "UV maps use different topologies: {} vs {}",
            pose_dep.topology().id,
            pose_inv.topology().id
        )));
    }
    let p = super::landmarks_from_uv(pose_dep, cells)?;
    let s = super::landmarks_from_uv(pose_inv, cells)?;
    similarity_from_points(&p.positions, &s.positions)
}
