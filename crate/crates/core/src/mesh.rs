//! Structured Q1 meshes on box subdomains that share one planar interface,
//! and the degree-of-freedom index partitions used by the subdomain solvers.
//!
//! Nodes are numbered lexicographically with axis 0 running fastest. Every
//! cell is an axis-aligned box, and its local node `l` sits at the corner
//! whose offset along axis `a` is bit `a` of `l`.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which subproblem a mesh or index set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    /// Lower subdomain; receives Dirichlet data on the interface.
    Slave,
    /// Upper subdomain; receives the interface residual as Neumann data.
    Master,
}

/// Axis-aligned box split by the plane `x[interface_axis] = interface_coord`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    /// Taken from `lo` when omitted in JSON.
    #[serde(default)]
    pub dim: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub interface_axis: usize,
    pub interface_coord: f64,
}

impl BoxGeometry {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, interface_axis: usize, interface_coord: f64) -> Result<Self> {
        let geom = BoxGeometry {
            dim: lo.len(),
            lo,
            hi,
            interface_axis,
            interface_coord,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Geometry("dimension not set".into()));
        }
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::Geometry(format!("dimension must be 2 or 3, got {}", self.dim)));
        }
        if self.lo.len() != self.dim || self.hi.len() != self.dim {
            return Err(Error::Geometry("corner vectors do not match the dimension".into()));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Geometry("lo must be strictly below hi on every axis".into()));
        }
        if self.interface_axis >= self.dim {
            return Err(Error::Geometry(format!("interface axis {} out of range", self.interface_axis)));
        }
        let a = self.interface_axis;
        if !(self.lo[a] < self.interface_coord && self.interface_coord < self.hi[a]) {
            return Err(Error::Geometry(format!(
                "interface coordinate {} not strictly inside ({}, {})",
                self.interface_coord, self.lo[a], self.hi[a]
            )));
        }
        Ok(())
    }

    /// Corners of the slave (below the interface) or master (above) box.
    pub fn subdomain(&self, side: Side) -> (Vec<f64>, Vec<f64>) {
        let (mut lo, mut hi) = (self.lo.clone(), self.hi.clone());
        match side {
            Side::Slave => hi[self.interface_axis] = self.interface_coord,
            Side::Master => lo[self.interface_axis] = self.interface_coord,
        }
        (lo, hi)
    }

    /// Measure of the interface, |Γ|.
    pub fn interface_measure(&self) -> f64 {
        (0..self.dim)
            .filter(|&a| a != self.interface_axis)
            .map(|a| self.hi[a] - self.lo[a])
            .product()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }
}

/// A face of the global box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Face {
    pub axis: usize,
    pub upper: bool,
}

/// A Dirichlet face of the global box carrying a constant value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletFace {
    pub axis: usize,
    pub upper: bool,
    pub value: f64,
}

/// Boundary condition layout. Faces not listed are homogeneous Neumann.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryLayout {
    pub dirichlet: Vec<DirichletFace>,
}

impl BoundaryLayout {
    pub fn dirichlet_value(&self, face: Face) -> Option<f64> {
        self.dirichlet
            .iter()
            .find(|d| d.axis == face.axis && d.upper == face.upper)
            .map(|d| d.value)
    }

    fn validate(&self, geom: &BoxGeometry) -> Result<()> {
        for d in &self.dirichlet {
            if d.axis >= geom.dim {
                return Err(Error::Geometry(format!("Dirichlet face axis {} out of range", d.axis)));
            }
        }
        Ok(())
    }

    fn check_clear_of_interface(&self, geom: &BoxGeometry) -> Result<()> {
        for d in &self.dirichlet {
            // faces normal to another axis share corner nodes with the interface
            if d.axis != geom.interface_axis {
                return Err(Error::Geometry(format!(
                    "Dirichlet face on axis {} meets the interface (normal to axis {})",
                    d.axis, geom.interface_axis
                )));
            }
        }
        Ok(())
    }

    /// Boundary values g_D at the given nodes (which must be Dirichlet nodes).
    pub fn values_at(&self, mesh: &Mesh, nodes: &[usize]) -> Vec<f64> {
        nodes
            .iter()
            .map(|&n| {
                mesh.outer_faces_of(n)
                    .into_iter()
                    .find_map(|f| self.dirichlet_value(f))
                    .unwrap_or(0.0)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeTag {
    Dirichlet,
    Neumann,
    Interface,
    Interior,
}

/// Structured tensor-product Q1 mesh.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub dim: usize,
    /// `None` for an undecomposed mesh of the whole box.
    pub side: Option<Side>,
    pub interface_axis: usize,
    /// Nodes per axis.
    pub shape: Vec<usize>,
    pub axis_coords: Vec<Vec<f64>>,
    /// Cell size per axis.
    pub h: Vec<f64>,
    pub nodes: Vec<[f64; 3]>,
    /// Flat connectivity, `2^dim` node indices per cell.
    pub cells: Vec<usize>,
    pub tags: Vec<NodeTag>,
}

/// Grid coordinates `lo + (hi - lo) * i / n`; nested grids share bit-identical nodes.
fn grid_line(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| {
            if i == n {
                hi
            } else {
                lo + (hi - lo) * (i as f64 / n as f64)
            }
        })
        .collect()
}

impl Mesh {
    fn tensor(
        dim: usize,
        side: Option<Side>,
        interface_axis: usize,
        axis_coords: Vec<Vec<f64>>,
        tag_of: impl Fn(&[usize], &[usize]) -> Result<NodeTag>,
    ) -> Result<Mesh> {
        let shape: Vec<usize> = axis_coords.iter().map(Vec::len).collect();
        let h: Vec<f64> = axis_coords.iter().map(|c| (c[c.len() - 1] - c[0]) / (c.len() - 1) as f64).collect();
        let n_nodes: usize = shape.iter().product();
        let mut nodes = Vec::with_capacity(n_nodes);
        let mut tags = Vec::with_capacity(n_nodes);
        let mut idx = vec![0usize; dim];
        for _ in 0..n_nodes {
            let mut x = [0.0; 3];
            for a in 0..dim {
                x[a] = axis_coords[a][idx[a]];
            }
            nodes.push(x);
            tags.push(tag_of(&idx, &shape)?);
            for a in 0..dim {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }

        let npc = 1 << dim;
        let cell_shape: Vec<usize> = shape.iter().map(|s| s - 1).collect();
        let n_cells: usize = cell_shape.iter().product();
        let mut cells = Vec::with_capacity(n_cells * npc);
        let mut cidx = vec![0usize; dim];
        for _ in 0..n_cells {
            for l in 0..npc {
                let mut g = 0;
                let mut stride = 1;
                for a in 0..dim {
                    g += (cidx[a] + ((l >> a) & 1)) * stride;
                    stride *= shape[a];
                }
                cells.push(g);
            }
            for a in 0..dim {
                cidx[a] += 1;
                if cidx[a] < cell_shape[a] {
                    break;
                }
                cidx[a] = 0;
            }
        }

        Ok(Mesh {
            dim,
            side,
            interface_axis,
            shape,
            axis_coords,
            h,
            nodes,
            cells,
            tags,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes_per_cell(&self) -> usize {
        1 << self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / self.nodes_per_cell()
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        let npc = self.nodes_per_cell();
        &self.cells[c * npc..(c + 1) * npc]
    }

    /// Tensor multi-index of a node.
    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut rem = node;
        self.shape
            .iter()
            .map(|&s| {
                let i = rem % s;
                rem /= s;
                i
            })
            .collect()
    }

    pub fn node_at(&self, idx: &[usize]) -> usize {
        let mut g = 0;
        let mut stride = 1;
        for (a, &i) in idx.iter().enumerate() {
            g += i * stride;
            stride *= self.shape[a];
        }
        g
    }

    /// Faces of the global box the node lies on (the interface plane excluded).
    pub fn outer_faces_of(&self, node: usize) -> Vec<Face> {
        let idx = self.multi_index(node);
        let mut faces = Vec::new();
        for a in 0..self.dim {
            if idx[a] == 0 && !(a == self.interface_axis && self.side == Some(Side::Master)) {
                faces.push(Face { axis: a, upper: false });
            }
            if idx[a] + 1 == self.shape[a] && !(a == self.interface_axis && self.side == Some(Side::Slave)) {
                faces.push(Face { axis: a, upper: true });
            }
        }
        faces
    }

    /// Interface nodes in ascending global index.
    pub fn interface_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&n| self.tags[n] == NodeTag::Interface).collect()
    }

    pub fn interface_coords(&self) -> Vec<[f64; 3]> {
        self.interface_nodes().into_iter().map(|n| self.nodes[n]).collect()
    }

    /// Node counts of the interface grid along the transverse axes.
    pub fn interface_shape(&self) -> Vec<usize> {
        (0..self.dim)
            .filter(|&a| a != self.interface_axis)
            .map(|a| self.shape[a])
            .collect()
    }

    /// Writes the mesh in legacy VTK text format with optional point fields.
    pub fn write_vtk<W: Write>(&self, mut w: W, fields: &[(&str, &[f64])]) -> Result<()> {
        writeln!(w, "# vtk DataFile Version 3.0")?;
        writeln!(w, "ddrom mesh")?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(w, "POINTS {} double", self.n_nodes())?;
        for x in &self.nodes {
            writeln!(w, "{:e} {:e} {:e}", x[0], x[1], x[2])?;
        }
        let npc = self.nodes_per_cell();
        let (order, cell_type): (&[usize], u8) = if self.dim == 2 {
            (&[0, 1, 3, 2], 9)
        } else {
            (&[0, 1, 3, 2, 4, 5, 7, 6], 12)
        };
        writeln!(w, "CELLS {} {}", self.n_cells(), self.n_cells() * (npc + 1))?;
        for c in 0..self.n_cells() {
            let cell = self.cell(c);
            write!(w, "{npc}")?;
            for &l in order {
                write!(w, " {}", cell[l])?;
            }
            writeln!(w)?;
        }
        writeln!(w, "CELL_TYPES {}", self.n_cells())?;
        for _ in 0..self.n_cells() {
            writeln!(w, "{cell_type}")?;
        }
        writeln!(w, "POINT_DATA {}", self.n_nodes())?;
        writeln!(w, "SCALARS tag int 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for t in &self.tags {
            let code = match t {
                NodeTag::Interior => 0,
                NodeTag::Neumann => 1,
                NodeTag::Dirichlet => 2,
                NodeTag::Interface => 3,
            };
            writeln!(w, "{code}")?;
        }
        for (name, values) in fields {
            if values.len() != self.n_nodes() {
                return Err(Error::Dimension(format!(
                    "field `{name}` has {} values for {} nodes",
                    values.len(),
                    self.n_nodes()
                )));
            }
            writeln!(w, "SCALARS {name} double 1")?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for v in *values {
                writeln!(w, "{v:e}")?;
            }
        }
        Ok(())
    }
}

fn check_cells(geom: &BoxGeometry, cells: &[usize], what: &str) -> Result<()> {
    if cells.len() != geom.dim {
        return Err(Error::Mesh(format!(
            "{what}: expected {} cell counts, got {}",
            geom.dim,
            cells.len()
        )));
    }
    if cells.iter().any(|&c| c == 0) {
        return Err(Error::Mesh(format!("{what}: cell counts must be at least 1")));
    }
    Ok(())
}

fn subdomain_mesh(geom: &BoxGeometry, layout: &BoundaryLayout, side: Side, cells: &[usize]) -> Result<Mesh> {
    let (lo, hi) = geom.subdomain(side);
    let axis_coords: Vec<Vec<f64>> = (0..geom.dim).map(|a| grid_line(lo[a], hi[a], cells[a])).collect();
    let ia = geom.interface_axis;
    Mesh::tensor(geom.dim, Some(side), ia, axis_coords, |idx, shape| {
        let on_interface = match side {
            Side::Slave => idx[ia] + 1 == shape[ia],
            Side::Master => idx[ia] == 0,
        };
        let mut on_dirichlet = false;
        let mut on_boundary = false;
        for a in 0..idx.len() {
            for (upper, hit) in [(false, idx[a] == 0), (true, idx[a] + 1 == shape[a])] {
                if !hit || (a == ia && upper == (side == Side::Slave)) {
                    continue;
                }
                on_boundary = true;
                on_dirichlet |= layout.dirichlet_value(Face { axis: a, upper }).is_some();
            }
        }
        if on_interface {
            if on_dirichlet {
                return Err(Error::Mesh(
                    "interface boundary meets a Dirichlet face; only disjoint layouts are supported".into(),
                ));
            }
            Ok(NodeTag::Interface)
        } else if on_dirichlet {
            Ok(NodeTag::Dirichlet)
        } else if on_boundary {
            Ok(NodeTag::Neumann)
        } else {
            Ok(NodeTag::Interior)
        }
    })
}

/// Builds the slave and master meshes with independent per-axis cell counts.
pub fn build_subdomain_meshes(
    geom: &BoxGeometry,
    layout: &BoundaryLayout,
    cells_slave: &[usize],
    cells_master: &[usize],
) -> Result<(Mesh, Mesh)> {
    geom.validate()?;
    layout.validate(geom)?;
    layout.check_clear_of_interface(geom)?;
    check_cells(geom, cells_slave, "slave")?;
    check_cells(geom, cells_master, "master")?;
    Ok((
        subdomain_mesh(geom, layout, Side::Slave, cells_slave)?,
        subdomain_mesh(geom, layout, Side::Master, cells_master)?,
    ))
}

/// Builds an undecomposed mesh of the whole box with uniform cells per axis.
/// The interface plane must coincide with a grid plane.
pub fn build_global_mesh(geom: &BoxGeometry, layout: &BoundaryLayout, cells: &[usize]) -> Result<Mesh> {
    geom.validate()?;
    layout.validate(geom)?;
    check_cells(geom, cells, "global")?;
    split_cells(geom, cells)?;
    let axis_coords: Vec<Vec<f64>> = (0..geom.dim).map(|a| grid_line(geom.lo[a], geom.hi[a], cells[a])).collect();
    Mesh::tensor(geom.dim, None, geom.interface_axis, axis_coords, |idx, shape| {
        let mut on_dirichlet = false;
        let mut on_boundary = false;
        for a in 0..idx.len() {
            for (upper, hit) in [(false, idx[a] == 0), (true, idx[a] + 1 == shape[a])] {
                if hit {
                    on_boundary = true;
                    on_dirichlet |= layout.dirichlet_value(Face { axis: a, upper }).is_some();
                }
            }
        }
        Ok(if on_dirichlet {
            NodeTag::Dirichlet
        } else if on_boundary {
            NodeTag::Neumann
        } else {
            NodeTag::Interior
        })
    })
}

/// Splits global per-axis cell counts into conforming slave/master counts.
pub fn split_cells(geom: &BoxGeometry, cells: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    check_cells(geom, cells, "global")?;
    let a = geom.interface_axis;
    let frac = (geom.interface_coord - geom.lo[a]) / (geom.hi[a] - geom.lo[a]) * cells[a] as f64;
    let below = frac.round();
    if (frac - below).abs() > 1e-9 || below < 1.0 || below as usize >= cells[a] {
        return Err(Error::Mesh(format!(
            "interface plane {} is not aligned with the grid ({} cells on axis {a})",
            geom.interface_coord, cells[a]
        )));
    }
    let mut slave = cells.to_vec();
    let mut master = cells.to_vec();
    slave[a] = below as usize;
    master[a] = cells[a] - below as usize;
    Ok((slave, master))
}

/// Cell counts that extend a subdomain's cell size conformingly across the
/// whole box; returned as global per-axis counts.
pub fn extend_resolution(geom: &BoxGeometry, side: Side, cells: &[usize]) -> Result<Vec<usize>> {
    check_cells(geom, cells, "resolution")?;
    let a = geom.interface_axis;
    let (lo, hi) = geom.subdomain(side);
    let h = (hi[a] - lo[a]) / cells[a] as f64;
    let total = (geom.hi[a] - geom.lo[a]) / h;
    let rounded = total.round();
    if (total - rounded).abs() > 1e-9 {
        return Err(Error::Mesh(format!(
            "cell size {h} on axis {a} does not tile the other subdomain"
        )));
    }
    let mut global = cells.to_vec();
    global[a] = rounded as usize;
    Ok(global)
}

/// Degree-of-freedom index partitions of one subdomain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSets {
    pub side: Side,
    pub all: Vec<usize>,
    pub gamma: Vec<usize>,
    pub dirichlet: Vec<usize>,
    pub internal: Vec<usize>,
    pub n_total: usize,
    pub n_internal: usize,
    pub n_gamma: usize,
    internal_pos: Vec<Option<usize>>,
    gamma_pos: Vec<Option<usize>>,
}

impl IndexSets {
    pub fn internal_position(&self, node: usize) -> Option<usize> {
        self.internal_pos[node]
    }

    pub fn gamma_position(&self, node: usize) -> Option<usize> {
        self.gamma_pos[node]
    }
}

/// Derives the index sets. The slave excludes interface nodes from its
/// unknowns; the master keeps them.
pub fn build_index_sets(mesh: &Mesh, side: Side) -> Result<IndexSets> {
    if mesh.tags.len() != mesh.n_nodes() {
        return Err(Error::Mesh(format!(
            "{} tags for {} nodes",
            mesh.tags.len(),
            mesh.n_nodes()
        )));
    }
    let n = mesh.n_nodes();
    let mut gamma = Vec::new();
    let mut dirichlet = Vec::new();
    let mut internal = Vec::new();
    for (i, tag) in mesh.tags.iter().enumerate() {
        match tag {
            NodeTag::Interface => {
                gamma.push(i);
                if side == Side::Master {
                    internal.push(i);
                }
            }
            NodeTag::Dirichlet => dirichlet.push(i),
            NodeTag::Neumann | NodeTag::Interior => internal.push(i),
        }
    }
    let mut internal_pos = vec![None; n];
    for (p, &i) in internal.iter().enumerate() {
        internal_pos[i] = Some(p);
    }
    let mut gamma_pos = vec![None; n];
    for (p, &i) in gamma.iter().enumerate() {
        gamma_pos[i] = Some(p);
    }
    Ok(IndexSets {
        side,
        all: (0..n).collect(),
        n_total: n,
        n_internal: internal.len(),
        n_gamma: gamma.len(),
        gamma,
        dirichlet,
        internal,
        internal_pos,
        gamma_pos,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conformity {
    Conforming,
    NonConforming,
}

/// Conforming iff both interface node coordinate sets are equal.
pub fn conformity_check(mesh1: &Mesh, mesh2: &Mesh) -> Conformity {
    let key = |x: &[f64; 3]| [x[0].to_bits(), x[1].to_bits(), x[2].to_bits()];
    let a: BTreeSet<_> = mesh1.interface_coords().iter().map(key).collect();
    let b: BTreeSet<_> = mesh2.interface_coords().iter().map(key).collect();
    if a == b {
        Conformity::Conforming
    } else {
        Conformity::NonConforming
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> BoxGeometry {
        BoxGeometry::new(vec![0.0, 0.0], vec![1.0, 1.0], 0, 0.5).unwrap()
    }

    fn left_right_dirichlet() -> BoundaryLayout {
        BoundaryLayout {
            dirichlet: vec![
                DirichletFace { axis: 0, upper: false, value: 0.0 },
                DirichletFace { axis: 0, upper: true, value: 1.0 },
            ],
        }
    }

    #[test]
    fn dirichlet_face_touching_interface_rejected() {
        let layout = BoundaryLayout {
            dirichlet: vec![DirichletFace { axis: 1, upper: false, value: 0.0 }],
        };
        let err = build_subdomain_meshes(&unit_square(), &layout, &[2, 2], &[2, 2]).unwrap_err();
        assert!(err.to_string().contains("meets the interface"), "{err}");
    }

    #[test]
    fn two_by_two_slave_counts() {
        let (s, m) = build_subdomain_meshes(&unit_square(), &left_right_dirichlet(), &[2, 2], &[2, 2]).unwrap();
        assert_eq!(s.n_nodes(), 9);
        assert_eq!(s.interface_nodes().len(), 3);
        assert_eq!(m.interface_nodes().len(), 3);
        assert_eq!(s.n_cells(), 4);
        for x in s.interface_coords().iter().chain(m.interface_coords().iter()) {
            assert_eq!(x[0], 0.5);
        }
    }

    #[test]
    fn three_by_three_index_sets() {
        let (s, _) = build_subdomain_meshes(&unit_square(), &left_right_dirichlet(), &[2, 2], &[2, 2]).unwrap();
        let slave = build_index_sets(&s, Side::Slave).unwrap();
        assert_eq!(slave.n_gamma, 3);
        assert_eq!(slave.dirichlet.len(), 3);
        assert_eq!(slave.n_internal, 3);
        let master = build_index_sets(&s, Side::Master).unwrap();
        assert_eq!(master.n_internal, 6);
        assert!(slave.gamma.iter().all(|g| master.internal.contains(g)));
    }

    #[test]
    fn box_3d_counts() {
        let geom = BoxGeometry::new(vec![-0.5, -0.5, -0.5], vec![1.5, 0.5, 0.5], 0, 0.5).unwrap();
        let (s, m) = build_subdomain_meshes(&geom, &BoundaryLayout::default(), &[32; 3], &[32; 3]).unwrap();
        assert_eq!(s.n_nodes(), 35937);
        assert_eq!(m.n_nodes(), 35937);
        assert_eq!(build_index_sets(&s, Side::Slave).unwrap().n_gamma, 1089);
        assert_eq!(build_index_sets(&m, Side::Master).unwrap().n_gamma, 1089);
        assert_eq!(conformity_check(&s, &m), Conformity::Conforming);
    }

    #[test]
    fn coarse_interface_count_and_nonconformity() {
        let geom = BoxGeometry::new(vec![0.5, -1.0], vec![3.0, 1.0], 0, 1.5).unwrap();
        let (s, m) = build_subdomain_meshes(&geom, &left_right_dirichlet(), &[4, 385], &[6, 1537]).unwrap();
        assert_eq!(build_index_sets(&s, Side::Slave).unwrap().n_gamma, 386);
        assert_eq!(build_index_sets(&m, Side::Master).unwrap().n_gamma, 1538);
        assert_eq!(conformity_check(&s, &m), Conformity::NonConforming);
    }

    #[test]
    fn nonconforming_interfaces_stay_on_plane() {
        let (s, m) = build_subdomain_meshes(&unit_square(), &left_right_dirichlet(), &[2, 2], &[2, 4]).unwrap();
        assert_eq!(conformity_check(&s, &m), Conformity::NonConforming);
        assert_eq!(s.interface_nodes().len(), 3);
        assert_eq!(m.interface_nodes().len(), 5);
        assert!(m.interface_coords().iter().all(|x| x[0] == 0.5));
    }

    #[test]
    fn rejects_bad_input() {
        let g = unit_square();
        let l = left_right_dirichlet();
        assert!(build_subdomain_meshes(&g, &l, &[0, 2], &[2, 2]).is_err());
        assert!(build_subdomain_meshes(&g, &l, &[2], &[2, 2]).is_err());
        assert!(BoxGeometry::new(vec![0.0, 0.0], vec![1.0, 1.0], 0, 1.0).is_err());
        assert!(build_global_mesh(&g, &l, &[3, 2]).is_err());
        assert!(build_global_mesh(&g, &l, &[4, 2]).is_ok());
    }

    #[test]
    fn rejects_dirichlet_touching_interface() {
        let layout = BoundaryLayout {
            dirichlet: vec![DirichletFace { axis: 1, upper: false, value: 0.0 }],
        };
        assert!(build_subdomain_meshes(&unit_square(), &layout, &[2, 2], &[2, 2]).is_err());
    }

    #[test]
    fn node_counts_match_closed_form() {
        let g = unit_square();
        let l = left_right_dirichlet();
        let (s, m) = build_subdomain_meshes(&g, &l, &[4, 5], &[4, 5]).unwrap();
        let glob = build_global_mesh(&g, &l, &[8, 5]).unwrap();
        assert_eq!(s.n_nodes(), 5 * 6);
        assert_eq!(m.n_nodes(), 5 * 6);
        // halves glued along the 6 interface nodes tile the global grid
        assert_eq!(s.n_nodes() + m.n_nodes() - 6, glob.n_nodes());
        assert_eq!(split_cells(&g, &[8, 5]).unwrap(), (vec![4, 5], vec![4, 5]));
        assert!(split_cells(&g, &[7, 5]).is_err());
        let sets = build_index_sets(&s, Side::Slave).unwrap();
        assert_eq!(sets.n_internal + sets.n_gamma + sets.dirichlet.len(), sets.n_total);
    }

    #[test]
    fn repeated_builds_are_bit_identical() {
        let g = BoxGeometry::new(vec![0.1, -0.3], vec![1.7, 0.9], 0, 0.9).unwrap();
        let a = build_subdomain_meshes(&g, &left_right_dirichlet(), &[5, 7], &[3, 11]).unwrap();
        let b = build_subdomain_meshes(&g, &left_right_dirichlet(), &[5, 7], &[3, 11]).unwrap();
        let bits = |m: &Mesh| m.nodes.iter().flat_map(|x| x.map(f64::to_bits)).collect::<Vec<_>>();
        assert_eq!(bits(&a.0), bits(&b.0));
        assert_eq!(bits(&a.1), bits(&b.1));
        assert_eq!(a.0.cells, b.0.cells);
    }

    #[test]
    fn vtk_export_has_sections() {
        let (s, _) = build_subdomain_meshes(&unit_square(), &left_right_dirichlet(), &[2, 2], &[2, 2]).unwrap();
        let field: Vec<f64> = (0..s.n_nodes()).map(|i| i as f64).collect();
        let mut buf = Vec::new();
        s.write_vtk(&mut buf, &[("u", &field)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("POINTS 9 double"));
        assert!(text.contains("CELLS 4 20"));
        assert!(text.contains("SCALARS u double 1"));
    }

    #[test]
    fn extend_resolution_keeps_cell_size() {
        let g = BoxGeometry::new(vec![0.5, -1.0], vec![3.0, 1.0], 0, 1.5).unwrap();
        // slave length 1.0, master length 1.5
        assert_eq!(extend_resolution(&g, Side::Slave, &[4, 8]).unwrap(), vec![10, 8]);
        assert_eq!(extend_resolution(&g, Side::Master, &[6, 8]).unwrap(), vec![10, 8]);
        assert!(extend_resolution(&g, Side::Slave, &[3, 8]).is_err());
    }
}
