//! Face geometry: the pose/shape decomposition `G = f·R·S + t` with
//! `S = S̄ + D`, landmark-based similarity alignment, and the UV-space
//! indexing that makes landmark correspondences semantic.

mod align;
mod mesh;
mod uv;

pub use align::{self_align, self_align_uv, similarity_from_points, LandmarkSet, DEGENERACY_RATIO};
pub use mesh::{mean_shape, random_deformation, MeshFile, DEFAULT_TOPOLOGY_ID};
pub use uv::{default_topology, landmarks_from_uv, uv_pack, uv_unpack, Topology, UvCell, UvMap};

use nalgebra::{Matrix3, Matrix3xX, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormality and determinant tolerance for rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// `3 × m` vertex positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMesh {
    vertices: Matrix3xX<f64>,
}

impl FaceMesh {
    pub fn new(vertices: Matrix3xX<f64>) -> Result<Self> {
        if vertices.ncols() < 3 {
            return Err(Error::Dimension(format!(
                "a mesh needs at least 3 vertices, got {}",
                vertices.ncols()
            )));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("mesh coordinates must be finite".into()));
        }
        Ok(Self { vertices })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        Self::new(Matrix3xX::from_column_slice(&flat))
    }

    pub fn vertices(&self) -> &Matrix3xX<f64> {
        &self.vertices
    }

    pub fn m(&self) -> usize {
        self.vertices.ncols()
    }

    pub fn vertex(&self, j: usize) -> Vector3<f64> {
        self.vertices.column(j).into_owned()
    }

    pub fn points(&self) -> Vec<[f64; 3]> {
        self.vertices
            .column_iter()
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }

    /// Largest centroid distance, the mesh's natural length unit.
    pub fn scale(&self) -> f64 {
        let c = self.vertices.column_mean();
        self.vertices
            .column_iter()
            .map(|v| (v - c).norm())
            .fold(0.0, f64::max)
    }
}

/// Similarity transform `x ↦ f·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams {
    pub f: f64,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl PoseParams {
    pub fn identity() -> Self {
        Self {
            f: 1.0,
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f.is_finite() && self.f > 0.0) {
            return Err(Error::InvalidPose(format!("scale must be positive, got {}", self.f)));
        }
        if self.r.iter().chain(self.t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite rotation or translation".into()));
        }
        let ortho = (self.r.transpose() * self.r - Matrix3::identity()).amax();
        if ortho > ROTATION_TOL {
            return Err(Error::InvalidPose(format!("RᵀR deviates from I by {ortho:e}")));
        }
        let det = self.r.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}, expected +1")));
        }
        Ok(())
    }

    /// Largest absolute difference over `f`, the entries of `R`, and `t`.
    pub fn max_abs_diff(&self, other: &PoseParams) -> f64 {
        let df = (self.f - other.f).abs();
        let dr = (self.r - other.r).amax();
        let dt = (self.t - other.t).amax();
        df.max(dr).max(dt)
    }

    /// A random pose: `f` uniform in `scale`, `R` uniform over SO(3), `t`
    /// uniform in `[-shift, shift]³`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, scale: (f64, f64), shift: f64) -> Self {
        let f = rng.random_range(scale.0..=scale.1);
        let t = Vector3::from_fn(|_, _| rng.random_range(-shift..=shift));
        Self {
            f,
            r: random_rotation(rng),
            t,
        }
    }
}

/// Rotation drawn uniformly from SO(3) via a uniform unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    use std::f64::consts::TAU;
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = nalgebra::Quaternion::new(
        b * (TAU * u3).cos(),
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
    );
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    f: f64,
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
}

impl Serialize for PoseParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseJson {
            f: self.f,
            r: std::array::from_fn(|i| std::array::from_fn(|j| self.r[(i, j)])),
            t: [self.t[0], self.t[1], self.t[2]],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoseParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let p = PoseJson::deserialize(d)?;
        Ok(Self {
            f: p.f,
            r: Matrix3::from_fn(|i, j| p.r[i][j]),
            t: Vector3::from(p.t),
        })
    }
}

/// Posed geometry: every vertex mapped through `pose`.
pub fn compose_geometry(pose: &PoseParams, shape: &FaceMesh) -> Result<FaceMesh> {
    pose.validate()?;
    let mut g = shape.vertices() * pose.f;
    g = pose.r * g;
    for mut c in g.column_iter_mut() {
        c += pose.t;
    }
    FaceMesh::new(g)
}

/// `S = S̄ + D`.
pub fn pose_invariant_shape(mean: &FaceMesh, deformation: &FaceMesh) -> Result<FaceMesh> {
    if mean.m() != deformation.m() {
        return Err(Error::Dimension(format!(
            "mean shape has {} vertices, deformation {}",
            mean.m(),
            deformation.m()
        )));
    }
    FaceMesh::new(mean.vertices() + deformation.vertices())
}

/// Inverse of [`compose_geometry`]: `Rᵀ(G - t)/f`.
pub fn invert_pose(mesh: &FaceMesh, pose: &PoseParams) -> Result<FaceMesh> {
    pose.validate()?;
    let mut s = mesh.vertices().clone();
    for mut c in s.column_iter_mut() {
        c -= pose.t;
    }
    FaceMesh::new(pose.r.transpose() * s / pose.f)
}
