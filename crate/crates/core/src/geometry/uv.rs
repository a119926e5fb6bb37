use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use super::align::LandmarkSet;
use super::FaceMesh;
use crate::error::{Error, Result};

/// Integer UV grid coordinate `(u, v)`, column then row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UvCell(pub u32, pub u32);

/// Fixed vertex → UV cell table shared by every mesh of one face model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub id: String,
    pub width: u32,
    pub height: u32,
    /// `cells[j]` is the cell of vertex `j`.
    pub cells: Vec<UvCell>,
    /// Default landmark cells for alignment.
    #[serde(default)]
    pub landmarks: Vec<UvCell>,
    #[serde(skip)]
    lookup: HashMap<UvCell, usize>,
}

impl Topology {
    pub fn new(id: impl Into<String>, width: u32, height: u32, cells: Vec<UvCell>, landmarks: Vec<UvCell>) -> Result<Self> {
        let mut t = Self {
            id: id.into(),
            width,
            height,
            cells,
            landmarks,
            lookup: HashMap::new(),
        };
        t.index()?;
        Ok(t)
    }

    fn index(&mut self) -> Result<()> {
        self.lookup.clear();
        for (j, &c) in self.cells.iter().enumerate() {
            if c.0 >= self.width || c.1 >= self.height {
                return Err(Error::Topology(format!(
                    "vertex {j} maps to cell ({}, {}) outside the {}×{} grid",
                    c.0, c.1, self.width, self.height
                )));
            }
            if let Some(prev) = self.lookup.insert(c, j) {
                return Err(Error::Topology(format!(
                    "vertices {prev} and {j} collide at cell ({}, {})",
                    c.0, c.1
                )));
            }
        }
        for &c in &self.landmarks {
            if !self.lookup.contains_key(&c) {
                return Err(Error::Topology(format!("landmark cell ({}, {}) holds no vertex", c.0, c.1)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut t: Topology = serde_json::from_str(text)?;
        t.index()?;
        Ok(t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn m(&self) -> usize {
        self.cells.len()
    }

    /// Vertex stored at `cell`, if any.
    pub fn vertex_at(&self, cell: UvCell) -> Option<usize> {
        self.lookup.get(&cell).copied()
    }

    pub fn landmark_vertices(&self) -> Vec<usize> {
        self.landmarks.iter().map(|&c| self.lookup[&c]).collect()
    }
}

/// A mesh laid out on its topology's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMap {
    topology: Arc<Topology>,
    grid: Vec<Vector3<f64>>,
    valid: Vec<bool>,
}

impl UvMap {
    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    fn offset(&self, c: UvCell) -> Option<usize> {
        let t = &self.topology;
        (c.0 < t.width && c.1 < t.height).then(|| (c.1 * t.width + c.0) as usize)
    }

    /// Position stored at `cell`; `None` outside the grid or on empty cells.
    pub fn get(&self, cell: UvCell) -> Option<Vector3<f64>> {
        let o = self.offset(cell)?;
        self.valid[o].then(|| self.grid[o])
    }

    pub fn is_valid(&self, cell: UvCell) -> bool {
        self.offset(cell).is_some_and(|o| self.valid[o])
    }
}

pub fn uv_pack(mesh: &FaceMesh, topology: &Topology) -> Result<UvMap> {
    if mesh.m() != topology.m() {
        return Err(Error::Topology(format!(
            "mesh has {} vertices, topology {} expects {}",
            mesh.m(),
            topology.id,
            topology.m()
        )));
    }
    let size = (topology.width * topology.height) as usize;
    let mut grid = vec![Vector3::zeros(); size];
    let mut valid = vec![false; size];
    for (j, c) in topology.cells.iter().enumerate() {
        let o = (c.1 * topology.width + c.0) as usize;
        grid[o] = mesh.vertex(j);
        valid[o] = true;
    }
    Ok(UvMap {
        topology: Arc::new(topology.clone()),
        grid,
        valid,
    })
}

pub fn uv_unpack(uv: &UvMap) -> Result<FaceMesh> {
    let cols: Vec<Vector3<f64>> = uv
        .topology
        .cells
        .iter()
        .map(|&c| uv.get(c).ok_or_else(|| Error::Topology(format!("cell ({}, {}) is empty", c.0, c.1))))
        .collect::<Result<_>>()?;
    FaceMesh::new(Matrix3xX::from_columns(&cols))
}

/// Positions at `cells`, in order.
pub fn landmarks_from_uv(uv: &UvMap, cells: &[UvCell]) -> Result<LandmarkSet> {
    if cells.is_empty() {
        return Err(Error::Empty("landmark cell list is empty".into()));
    }
    let cols = cells
        .iter()
        .map(|&c| {
            uv.get(c)
                .ok_or_else(|| Error::Topology(format!("landmark cell ({}, {}) is not a valid vertex cell", c.0, c.1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandmarkSet {
        cells: cells.to_vec(),
        positions: Matrix3xX::from_columns(&cols),
    })
}

/// Topology of [`super::mean_shape`]: a `ROWS × COLS` vertex lattice spread
/// over a 64×64 grid, with 68 landmark cells.
pub fn default_topology() -> Topology {
    use super::mesh::{COLS, ROWS};
    let cells = (0..ROWS)
        .flat_map(|r| (0..COLS).map(move |c| UvCell(2 * c as u32, 2 * r as u32)))
        .collect();
    Topology::new(super::DEFAULT_TOPOLOGY_ID, 64, 64, cells, super::mesh::landmark_cells())
        .expect("built-in topology is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mean_shape, random_deformation};

    #[test]
    fn pack_unpack_identity() {
        let t = default_topology();
        let s = mean_shape();
        assert_eq!(uv_unpack(&uv_pack(&s, &t).unwrap()).unwrap(), s);
    }

    #[test]
    fn same_cell_same_vertex_across_meshes() {
        let t = default_topology();
        let a = mean_shape();
        let b = random_deformation(&a, 5, 0.1);
        let (ua, ub) = (uv_pack(&a, &t).unwrap(), uv_pack(&b, &t).unwrap());
        for (j, &c) in t.cells.iter().enumerate().step_by(37) {
            assert_eq!(t.vertex_at(c), Some(j));
            assert_eq!(ua.get(c).unwrap(), a.vertex(j));
            assert_eq!(ub.get(c).unwrap(), b.vertex(j));
        }
    }

    #[test]
    fn landmarks_gather_original_positions() {
        let t = default_topology();
        let s = mean_shape();
        let lm = landmarks_from_uv(&uv_pack(&s, &t).unwrap(), &t.landmarks).unwrap();
        assert_eq!(lm.k(), 68);
        for (i, j) in t.landmark_vertices().into_iter().enumerate() {
            assert_eq!(lm.positions.column(i), s.vertices().column(j));
        }
    }

    #[test]
    fn invalid_cells() {
        let t = default_topology();
        let uv = uv_pack(&mean_shape(), &t).unwrap();
        assert!(landmarks_from_uv(&uv, &[]).is_err());
        assert!(landmarks_from_uv(&uv, &[UvCell(64, 0)]).is_err());
        assert!(landmarks_from_uv(&uv, &[UvCell(1, 1)]).is_err());
    }

    #[test]
    fn collisions_and_range_rejected() {
        assert!(Topology::new("x", 4, 4, vec![UvCell(0, 0), UvCell(0, 0), UvCell(1, 1)], vec![]).is_err());
        assert!(Topology::new("x", 4, 4, vec![UvCell(0, 0), UvCell(4, 0), UvCell(1, 1)], vec![]).is_err());
    }

    #[test]
    fn mesh_topology_mismatch() {
        let t = Topology::new("x", 4, 4, vec![UvCell(0, 0), UvCell(1, 0), UvCell(1, 1), UvCell(2, 2)], vec![]).unwrap();
        assert!(uv_pack(&mean_shape(), &t).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = default_topology();
        let back = Topology::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.vertex_at(t.landmarks[3]), t.vertex_at(t.landmarks[3]));
    }
}
