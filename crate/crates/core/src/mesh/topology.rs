use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deduplicated undirected edge set of a triangle list, as `(lo, hi)` pairs
/// in ascending order.
pub fn derive_edges(faces: &[[u32; 3]], vertex_count: usize) -> Result<Vec<(u32, u32)>> {
    let mut edges = BTreeSet::new();
    for (fi, face) in faces.iter().enumerate() {
        for &v in face {
            if v as usize >= vertex_count {
                return Err(Error::Topology(format!(
                    "face {fi} references vertex {v} but the mesh has {vertex_count} vertices"
                )));
            }
        }
        for (a, b) in [(face[0], face[1]), (face[1], face[2]), (face[0], face[2])] {
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    Ok(edges.into_iter().collect())
}

/// On-disk topology document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TopologyFile {
    pub vertex_count: usize,
    #[serde(default)]
    pub faces: Vec<[u32; 3]>,
    #[serde(default)]
    pub lip_mask: Vec<usize>,
    #[serde(default)]
    pub upper_face_mask: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshTopology {
    vertex_count: usize,
    edges: Vec<(u32, u32)>,
    faces: Vec<[u32; 3]>,
    lip_mask: Vec<bool>,
    upper_face_mask: Vec<bool>,
}

fn mask_from_indices(indices: &[usize], n: usize, what: &str) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(Error::Topology(format!("{what} index {i} out of range for {n} vertices")));
        }
        mask[i] = true;
    }
    Ok(mask)
}

impl MeshTopology {
    pub fn from_faces(
        vertex_count: usize,
        faces: Vec<[u32; 3]>,
        lip_vertices: &[usize],
        upper_face_vertices: &[usize],
    ) -> Result<Self> {
        let edges = derive_edges(&faces, vertex_count)?;
        let mut topo = Self::from_edges(vertex_count, edges, lip_vertices, upper_face_vertices)?;
        topo.faces = faces;
        Ok(topo)
    }

    pub fn from_edges(
        vertex_count: usize,
        edges: Vec<(u32, u32)>,
        lip_vertices: &[usize],
        upper_face_vertices: &[usize],
    ) -> Result<Self> {
        if vertex_count == 0 {
            return Err(Error::Topology("vertex_count must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &edges {
            if a as usize >= vertex_count || b as usize >= vertex_count {
                return Err(Error::Topology(format!(
                    "edge ({a}, {b}) out of range for {vertex_count} vertices"
                )));
            }
            if a == b {
                return Err(Error::Topology(format!("self-loop on vertex {a} must not be stored")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Topology(format!("duplicate edge ({a}, {b})")));
            }
        }
        let lip_mask = mask_from_indices(lip_vertices, vertex_count, "lip_mask")?;
        let upper_face_mask = mask_from_indices(upper_face_vertices, vertex_count, "upper_face_mask")?;
        if let Some(v) = (0..vertex_count).find(|&v| lip_mask[v] && upper_face_mask[v]) {
            return Err(Error::Topology(format!(
                "vertex {v} is in both the lip mask and the upper-face mask"
            )));
        }
        Ok(Self {
            vertex_count,
            edges: seen.into_iter().collect(),
            faces: Vec::new(),
            lip_mask,
            upper_face_mask,
        })
    }

    pub fn from_file_doc(doc: TopologyFile) -> Result<Self> {
        Self::from_faces(doc.vertex_count, doc.faces, &doc.lip_mask, &doc.upper_face_mask)
    }

    pub fn to_file_doc(&self) -> TopologyFile {
        TopologyFile {
            vertex_count: self.vertex_count,
            faces: self.faces.clone(),
            lip_mask: self.lip_vertices(),
            upper_face_mask: self.upper_face_vertices(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let doc: TopologyFile = serde_json::from_str(&text)?;
        Self::from_file_doc(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file_doc())?)?;
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn lip_mask(&self) -> &[bool] {
        &self.lip_mask
    }

    pub fn upper_face_mask(&self) -> &[bool] {
        &self.upper_face_mask
    }

    pub fn lip_vertices(&self) -> Vec<usize> {
        (0..self.vertex_count).filter(|&v| self.lip_mask[v]).collect()
    }

    pub fn upper_face_vertices(&self) -> Vec<usize> {
        (0..self.vertex_count).filter(|&v| self.upper_face_mask[v]).collect()
    }

    /// Neighbours of `v`, excluding `v` itself.
    pub fn neighbours(&self, v: usize) -> Vec<usize> {
        let v = v as u32;
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b as usize)
                } else if b == v {
                    Some(a as usize)
                } else {
                    None
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_triangle_edges() {
        assert_eq!(derive_edges(&[[0, 1, 2]], 3).unwrap(), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn empty_faces_give_no_edges() {
        assert!(derive_edges(&[], 4).unwrap().is_empty());
    }

    #[test]
    fn shared_edge_counted_once() {
        let faces = [[0, 1, 2], [1, 2, 3]];
        let edges = derive_edges(&faces, 4).unwrap();
        // Brute force: every ordered pair within a face, normalized, unique.
        let mut oracle: Vec<(u32, u32)> = Vec::new();
        for f in &faces {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        let e = (f[i].min(f[j]), f[i].max(f[j]));
                        if !oracle.contains(&e) {
                            oracle.push(e);
                        }
                    }
                }
            }
        }
        oracle.sort();
        assert_eq!(edges.len(), 5);
        assert_eq!(edges, oracle);
    }

    #[test]
    fn out_of_range_face_is_topology_error() {
        assert!(matches!(derive_edges(&[[0, 1, 5]], 3), Err(Error::Topology(_))));
    }

    #[test]
    fn overlapping_masks_rejected() {
        let r = MeshTopology::from_faces(3, vec![[0, 1, 2]], &[0, 1], &[1]);
        assert!(matches!(r, Err(Error::Topology(_))));
    }

    #[test]
    fn duplicate_and_self_loop_edges_rejected() {
        assert!(MeshTopology::from_edges(3, vec![(0, 1), (1, 0)], &[], &[]).is_err());
        assert!(MeshTopology::from_edges(3, vec![(1, 1)], &[], &[]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let topo = MeshTopology::from_faces(4, vec![[0, 1, 2], [1, 2, 3]], &[3], &[0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("topo.json");
        topo.save(&path).unwrap();
        assert_eq!(MeshTopology::load(&path).unwrap(), topo);
    }
}
