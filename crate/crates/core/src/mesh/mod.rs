//! Genus-zero closed triangle meshes.
//!
//! [`TriMesh`] is the validated form used everywhere else in the crate: it is
//! a connected, closed, consistently oriented 2-manifold with Euler
//! characteristic 2 and no zero-area faces. Faces are oriented so that their
//! normals point outward (positive enclosed volume).
//!
//! [`RawMesh`] is the unvalidated vertex/face soup read from or written to
//! disk.

mod io;

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::error::{Result, SemError};

pub use io::{load_mesh, load_mesh_as, read_obj, read_off, save_mesh, save_mesh_as, write_obj, write_off, MeshFormat};

pub type Point3 = Vector3<f64>;

/// Relative area below which a triangle counts as degenerate.
const DEGENERATE_REL_AREA: f64 = 1e-14;

/// Area of the triangle `p0 p1 p2`.
pub fn face_area(p0: &Point3, p1: &Point3, p2: &Point3) -> f64 {
    0.5 * (p1 - p0).cross(&(p2 - p0)).norm()
}

/// Unvalidated triangle soup.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawMesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
}

impl RawMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Self {
        Self { vertices, faces }
    }
}

/// An undirected interior edge `[v_i, v_j]` with `i < j`.
///
/// `left` is the vertex opposite the edge in the face `[v_i, v_l, v_j]`
/// (which traverses `j -> i`), `right` the one in `[v_j, v_r, v_i]`
/// (which traverses `i -> j`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub left: usize,
    pub right: usize,
    pub left_face: usize,
    pub right_face: usize,
}

#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
    face_areas: Vec<f64>,
    edges: Vec<Edge>,
    edge_lookup: HashMap<(usize, usize), usize>,
    neighbors: Vec<Vec<usize>>,
    vertex_faces: Vec<Vec<usize>>,
    face_edges: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Validates `raw` and builds adjacency.
    ///
    /// Face winding is repaired by breadth-first propagation and then made
    /// outward-facing.
    pub fn new(raw: RawMesh) -> Result<Self> {
        let RawMesh { vertices, mut faces } = raw;
        let n = vertices.len();
        if faces.is_empty() {
            return Err(SemError::Topology("mesh has no faces".into()));
        }
        for (fi, face) in faces.iter().enumerate() {
            if face.iter().any(|&v| v >= n) {
                return Err(SemError::Topology(format!(
                    "face {fi} references a vertex outside 0..{n}"
                )));
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(SemError::Topology(format!(
                    "face {fi} repeats a vertex"
                )));
            }
        }
        if let Some(p) = vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(SemError::Topology(format!("vertex {p} has non-finite coordinates")));
        }

        let edge_faces = collect_edge_faces(&faces)?;
        orient_faces(&mut faces, &edge_faces)?;

        let mut referenced = vec![false; n];
        for face in &faces {
            for &v in face {
                referenced[v] = true;
            }
        }
        if let Some(v) = referenced.iter().position(|&r| !r) {
            return Err(SemError::Topology(format!("vertex {v} is not used by any face")));
        }

        let euler = n as i64 - edge_faces.len() as i64 + faces.len() as i64;
        if euler != 2 {
            return Err(SemError::Topology(format!(
                "Euler characteristic V - E + F = {} - {} + {} = {euler}, expected 2 (genus zero)",
                n,
                edge_faces.len(),
                faces.len()
            )));
        }

        let signed_volume: f64 = faces
            .iter()
            .map(|&[a, b, c]| vertices[a].dot(&vertices[b].cross(&vertices[c])))
            .sum();
        if signed_volume < 0.0 {
            for face in &mut faces {
                face.swap(1, 2);
            }
        }

        let mut mesh = Self {
            vertices,
            faces,
            face_areas: Vec::new(),
            edges: Vec::new(),
            edge_lookup: HashMap::new(),
            neighbors: Vec::new(),
            vertex_faces: Vec::new(),
            face_edges: Vec::new(),
        };
        mesh.compute_areas()?;
        mesh.build_adjacency();
        Ok(mesh)
    }

    fn compute_areas(&mut self) -> Result<()> {
        let mut areas = Vec::with_capacity(self.faces.len());
        for (fi, &[a, b, c]) in self.faces.iter().enumerate() {
            let (pa, pb, pc) = (&self.vertices[a], &self.vertices[b], &self.vertices[c]);
            let area = face_area(pa, pb, pc);
            let longest = (pb - pa)
                .norm_squared()
                .max((pc - pb).norm_squared())
                .max((pa - pc).norm_squared());
            if !(area > DEGENERATE_REL_AREA * longest) {
                return Err(SemError::DegenerateFace { face: fi, area });
            }
            areas.push(area);
        }
        self.face_areas = areas;
        Ok(())
    }

    fn build_adjacency(&mut self) {
        let n = self.vertices.len();
        // directed half-edge (a, b) -> (face, opposite vertex)
        let mut half: HashMap<(usize, usize), (usize, usize)> = HashMap::with_capacity(3 * self.faces.len());
        let mut vertex_faces = vec![Vec::new(); n];
        for (fi, face) in self.faces.iter().enumerate() {
            for c in 0..3 {
                let (a, b, o) = (face[c], face[(c + 1) % 3], face[(c + 2) % 3]);
                half.insert((a, b), (fi, o));
                vertex_faces[face[c]].push(fi);
            }
        }
        let mut keys: Vec<(usize, usize)> = half.keys().copied().filter(|&(a, b)| a < b).collect();
        keys.sort_unstable();
        let mut edges = Vec::with_capacity(keys.len());
        let mut lookup = HashMap::with_capacity(keys.len());
        let mut neighbors = vec![Vec::new(); n];
        for (i, j) in keys {
            let (right_face, right) = half[&(i, j)];
            let (left_face, left) = half[&(j, i)];
            lookup.insert((i, j), edges.len());
            edges.push(Edge {
                i,
                j,
                left,
                right,
                left_face,
                right_face,
            });
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        self.face_edges = self
            .faces
            .iter()
            .map(|face| {
                std::array::from_fn(|c| {
                    let (a, b) = (face[(c + 1) % 3], face[(c + 2) % 3]);
                    lookup[&(a.min(b), a.max(b))]
                })
            })
            .collect();
        self.edges = edges;
        self.edge_lookup = lookup;
        self.neighbors = neighbors;
        self.vertex_faces = vertex_faces;
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.num_vertices() as i64 - self.num_edges() as i64 + self.num_faces() as i64
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_areas(&self) -> &[f64] {
        &self.face_areas
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas.iter().sum()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Index into [`TriMesh::edges`] of the undirected edge `{a, b}`.
    pub fn edge_index(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_lookup.get(&(a.min(b), a.max(b))).copied()
    }

    /// Sorted one-ring of `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn vertex_faces(&self, v: usize) -> &[usize] {
        &self.vertex_faces[v]
    }

    /// Edge indices of `face`; entry `c` is the edge opposite corner `c`.
    pub fn face_edges(&self, face: usize) -> [usize; 3] {
        self.face_edges[face]
    }

    /// One third of the area of every incident face, per vertex.
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.vertices.len()];
        for (face, &a) in self.faces.iter().zip(&self.face_areas) {
            for &v in face {
                areas[v] += a / 3.0;
            }
        }
        areas
    }

    /// Factor by which [`TriMesh::normalized`] scales the vertices.
    pub fn normalization_scale(&self) -> f64 {
        (4.0 * PI / self.total_area()).sqrt()
    }

    /// Uniformly rescaled copy with total area `4π`.
    pub fn normalized(&self) -> TriMesh {
        let s = self.normalization_scale();
        self.scaled(s)
    }

    pub fn scaled(&self, s: f64) -> TriMesh {
        let mut out = self.clone();
        for p in &mut out.vertices {
            *p *= s;
        }
        for (fi, &[a, b, c]) in out.faces.iter().enumerate() {
            out.face_areas[fi] = face_area(&out.vertices[a], &out.vertices[b], &out.vertices[c]);
        }
        out
    }

    pub fn to_raw(&self) -> RawMesh {
        RawMesh::new(self.vertices.clone(), self.faces.clone())
    }
}

fn collect_edge_faces(faces: &[[usize; 3]]) -> Result<HashMap<(usize, usize), Vec<usize>>> {
    let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::with_capacity(faces.len() * 3 / 2);
    for (fi, face) in faces.iter().enumerate() {
        for c in 0..3 {
            let (a, b) = (face[c], face[(c + 1) % 3]);
            map.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }
    let mut keys: Vec<_> = map.iter().filter(|(_, f)| f.len() != 2).map(|(k, f)| (*k, f.len())).collect();
    keys.sort_unstable();
    if let Some(&((a, b), count)) = keys.first() {
        let what = if count == 1 { "boundary" } else { "non-manifold" };
        return Err(SemError::Topology(format!(
            "{what} edge [{a}, {b}] has {count} incident face(s)"
        )));
    }
    Ok(map)
}

fn has_directed(face: &[usize; 3], a: usize, b: usize) -> bool {
    (0..3).any(|c| face[c] == a && face[(c + 1) % 3] == b)
}

/// Breadth-first winding repair. Fails on non-orientable or disconnected input.
fn orient_faces(faces: &mut [[usize; 3]], edge_faces: &HashMap<(usize, usize), Vec<usize>>) -> Result<()> {
    let mut visited = vec![false; faces.len()];
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    let mut reached = 1;
    while let Some(fi) = queue.pop_front() {
        let face = faces[fi];
        for c in 0..3 {
            let (a, b) = (face[c], face[(c + 1) % 3]);
            let adjacent = &edge_faces[&(a.min(b), a.max(b))];
            let gi = if adjacent[0] == fi { adjacent[1] } else { adjacent[0] };
            let consistent = has_directed(&faces[gi], b, a);
            if visited[gi] {
                if !consistent {
                    return Err(SemError::Topology("surface is not orientable".into()));
                }
                continue;
            }
            if !consistent {
                faces[gi].swap(1, 2);
            }
            visited[gi] = true;
            reached += 1;
            queue.push_back(gi);
        }
    }
    if reached != faces.len() {
        return Err(SemError::Topology(format!(
            "surface is disconnected ({reached} of {} faces reachable)",
            faces.len()
        )));
    }
    Ok(())
}
