use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FaceMesh, UvCell};
use crate::error::{Error, Result};

pub const DEFAULT_TOPOLOGY_ID: &str = "synthetic-face-32x32";
pub(super) const ROWS: usize = 32;
pub(super) const COLS: usize = 32;

fn bump(u: f64, v: f64, cu: f64, cv: f64, su: f64, sv: f64) -> f64 {
    (-((u - cu) / su).powi(2) / 2.0 - ((v - cv) / sv).powi(2) / 2.0).exp()
}

/// Procedural mean face: the front of an ellipsoid with nose, brow and lip
/// protrusions. Vertex `r·COLS + c` sits at lattice row `r`, column `c`;
/// `x` points to the face's left, `y` up, `z` out of the face.
pub fn mean_shape() -> FaceMesh {
    let mut pts = Vec::with_capacity(ROWS * COLS);
    for r in 0..ROWS {
        for c in 0..COLS {
            let u = c as f64 / (COLS - 1) as f64;
            let v = r as f64 / (ROWS - 1) as f64;
            let az = (u - 0.5) * 0.9 * PI;
            let el = (0.5 - v) * 0.8 * PI;
            let mut depth = 0.6 * az.cos() * el.cos();
            depth += 0.25 * bump(u, v, 0.5, 0.52, 0.05, 0.12);
            depth += 0.06 * bump(u, v, 0.5, 0.75, 0.12, 0.03);
            depth += 0.04 * bump(u, v, 0.32, 0.3, 0.08, 0.03);
            depth += 0.04 * bump(u, v, 0.68, 0.3, 0.08, 0.03);
            pts.push([0.8 * az.sin() * el.cos(), 1.0 * el.sin(), depth]);
        }
    }
    FaceMesh::from_points(&pts).expect("procedural mesh is finite")
}

/// Smooth random deformation field `D` for `mean`: a few Gaussian bumps
/// centred on random vertices, each pushing along a random direction.
pub fn random_deformation(mean: &FaceMesh, seed: u64, amplitude: f64) -> FaceMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = mean.scale().max(f64::MIN_POSITIVE);
    let bumps: Vec<(Vector3<f64>, Vector3<f64>, f64)> = (0..6)
        .map(|_| {
            let centre = mean.vertex(rng.random_range(0..mean.m()));
            let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let width = scale * rng.random_range(0.15..0.4);
            (centre, dir * amplitude * scale, width)
        })
        .collect();
    let cols: Vec<Vector3<f64>> = mean
        .vertices()
        .column_iter()
        .map(|x| {
            bumps.iter().fold(Vector3::zeros(), |acc, (c, d, w)| {
                acc + d * (-(x - c).norm_squared() / (2.0 * w * w)).exp()
            })
        })
        .collect();
    FaceMesh::new(Matrix3xX::from_columns(&cols)).expect("finite deformation")
}

fn landmark_uv() -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(68);
    // Jaw line, ear to ear through the chin.
    for s in 0..17 {
        let a = PI * s as f64 / 16.0;
        pts.push((0.5 - 0.4 * a.cos(), 0.35 + 0.6 * a.sin()));
    }
    for side in [0.2, 0.6] {
        for s in 0..5 {
            pts.push((side + 0.05 * s as f64, 0.27));
        }
    }
    for s in 0..4 {
        pts.push((0.5, 0.36 + 0.06 * s as f64));
    }
    for s in 0..5 {
        pts.push((0.42 + 0.04 * s as f64, 0.62));
    }
    for cu in [0.32, 0.68] {
        for s in 0..6 {
            let a = 2.0 * PI * s as f64 / 6.0;
            pts.push((cu + 0.07 * a.cos(), 0.38 + 0.04 * a.sin()));
        }
    }
    for s in 0..12 {
        let a = 2.0 * PI * s as f64 / 12.0;
        pts.push((0.5 + 0.15 * a.cos(), 0.76 + 0.07 * a.sin()));
    }
    for s in 0..8 {
        let a = 2.0 * PI * s as f64 / 8.0;
        pts.push((0.5 + 0.08 * a.cos(), 0.76 + 0.03 * a.sin()));
    }
    pts
}

/// 68 distinct landmark cells: each layout point snaps to the nearest free
/// lattice vertex.
pub(super) fn landmark_cells() -> Vec<UvCell> {
    let mut taken = vec![false; ROWS * COLS];
    landmark_uv()
        .into_iter()
        .map(|(u, v)| {
            let (tu, tv) = (u * (COLS - 1) as f64, v * (ROWS - 1) as f64);
            let best = (0..ROWS * COLS)
                .filter(|&j| !taken[j])
                .min_by(|&a, &b| {
                    let d = |j: usize| ((j % COLS) as f64 - tu).powi(2) + ((j / COLS) as f64 - tv).powi(2);
                    d(a).total_cmp(&d(b))
                })
                .expect("lattice larger than landmark set");
            taken[best] = true;
            UvCell(2 * (best % COLS) as u32, 2 * (best / COLS) as u32)
        })
        .collect()
}

/// On-disk mesh: `{"m", "vertices": [[x,y,z],...], "topology_id"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshFile {
    pub m: usize,
    pub vertices: Vec<[f64; 3]>,
    pub topology_id: String,
}

impl MeshFile {
    pub fn from_mesh(mesh: &FaceMesh, topology_id: impl Into<String>) -> Self {
        Self {
            m: mesh.m(),
            vertices: mesh.points(),
            topology_id: topology_id.into(),
        }
    }

    pub fn to_mesh(&self) -> Result<FaceMesh> {
        if self.m != self.vertices.len() {
            return Err(Error::Dimension(format!(
                "mesh file declares m = {} but lists {} vertices",
                self.m,
                self.vertices.len()
            )));
        }
        FaceMesh::from_points(&self.vertices)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmark_cells_distinct() {
        let cells = landmark_cells();
        assert_eq!(cells.len(), 68);
        let set: std::collections::HashSet<_> = cells.iter().collect();
        assert_eq!(set.len(), 68);
    }

    #[test]
    fn nose_protrudes() {
        let s = mean_shape();
        let tip = s.vertex(16 * COLS + 16);
        let cheek = s.vertex(16 * COLS + 6);
        assert!(tip.z > cheek.z + 0.1);
    }

    #[test]
    fn mesh_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let s = mean_shape();
        MeshFile::from_mesh(&s, DEFAULT_TOPOLOGY_ID).write(&p).unwrap();
        let back = MeshFile::read(&p).unwrap();
        assert_eq!(back.topology_id, DEFAULT_TOPOLOGY_ID);
        assert_eq!(back.to_mesh().unwrap(), s);
        let bad = MeshFile { m: 5, ..back };
        assert!(bad.to_mesh().is_err());
    }
}
