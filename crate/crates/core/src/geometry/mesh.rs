//! Structured rectilinear grid over a partitioned domain, with exact node
//! classification for the domain, every peeled/remainder region, and every
//! flat portion.

use std::sync::Arc;

use super::{coord_tolerance, AlignedBox, DomainPartition, FlatPortion, GeometryError};
use crate::scalar::{lit, Scalar};

/// Classification of a grid node relative to a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeClass {
    Outside,
    Boundary,
    Interior,
}

/// Region selector used throughout the crate.
///
/// `Peeled(k)` is the union of the first `k` chain subdomains, `Truncated(k)`
/// its complement in the domain (`Truncated(0)` is the whole domain).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionSpec {
    Omega,
    Subdomain(usize),
    Peeled(usize),
    Truncated(usize),
}

impl std::fmt::Display for RegionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegionSpec::Omega => write!(f, "Omega"),
            RegionSpec::Subdomain(j) => write!(f, "D{}", j + 1),
            RegionSpec::Peeled(k) => write!(f, "W{}", k),
            RegionSpec::Truncated(k) => write!(f, "U{}", k),
        }
    }
}

/// Uniform grid with spacing `h` over the bounding box of the partition.
///
/// Every subdomain face and portion patch is required to be resolved exactly
/// by grid planes, so region membership of cells and nodes is unambiguous.
#[derive(Debug)]
pub struct Mesh<T> {
    partition: Arc<DomainPartition<T>>,
    h: T,
    origin: [T; 3],
    nodes: [usize; 3],
    ncells: [usize; 3],
    /// Owning subdomain per grid cell, -1 outside the domain.
    cell_owner: Vec<i32>,
    /// Node classification relative to the whole domain.
    node_class: Vec<NodeClass>,
}

impl<T: Scalar> Mesh<T> {
    pub(super) fn build(partition: DomainPartition<T>, h: T) -> Result<Self, GeometryError> {
        if !(h > T::zero()) {
            return Err(GeometryError::IncompatibleSpacing { why: "h must be positive".into() });
        }
        let dim = partition.dimension;
        let bbox = partition.bounding_box();
        let origin = bbox.lo;
        let on_grid = |value: T, what: &str| -> Result<usize, GeometryError> {
            let q = value / h;
            let r = q.round();
            let tol = coord_tolerance::<T>() * (T::one() + q.abs());
            if (q - r).abs() > tol || r < -tol {
                return Err(GeometryError::IncompatibleSpacing {
                    why: format!("{} = {} is not a multiple of h = {}", what, value, h),
                });
            }
            Ok(r.to_f64().unwrap().round() as usize)
        };
        for (j, b) in partition.subdomains.iter().enumerate() {
            for a in 0..dim {
                on_grid(b.lo[a] - origin[a], &format!("subdomain {} lo[{}]", j + 1, a + 1))?;
                on_grid(b.hi[a] - origin[a], &format!("subdomain {} hi[{}]", j + 1, a + 1))?;
            }
        }
        for (k, p) in partition.portions.iter().enumerate() {
            for a in 0..dim {
                on_grid(p.anchor[a] - origin[a], &format!("portion {} anchor[{}]", k + 1, a + 1))?;
            }
            on_grid(p.extent, &format!("portion {} extent", k + 1))?;
        }

        let mut nodes = [1usize; 3];
        let mut ncells = [1usize; 3];
        for a in 0..dim {
            let n = on_grid(bbox.hi[a] - origin[a], "bounding box")?;
            nodes[a] = n + 1;
            ncells[a] = n;
        }

        let total_cells = ncells[0] * ncells[1] * ncells[2];
        let mut cell_owner = vec![-1i32; total_cells];
        let half = lit::<T>(0.5);
        let tol = coord_tolerance::<T>() * (T::one() / h).max(T::one());
        for (id, owner) in cell_owner.iter_mut().enumerate() {
            let ix = unflatten(id, ncells);
            let mut center = [T::zero(); 3];
            for a in 0..dim {
                center[a] = origin[a] + h * (lit::<T>(ix[a] as f64) + half);
            }
            for (j, b) in partition.subdomains.iter().enumerate() {
                if b.contains(&center, dim, tol) {
                    *owner = j as i32;
                    break;
                }
            }
        }

        let mut mesh = Mesh {
            partition: Arc::new(partition),
            h,
            origin,
            nodes,
            ncells,
            cell_owner,
            node_class: Vec::new(),
        };
        mesh.node_class = mesh.classify_nodes(|owner| owner >= 0);
        Ok(mesh)
    }

    pub fn partition(&self) -> &Arc<DomainPartition<T>> {
        &self.partition
    }

    pub fn dim(&self) -> usize {
        self.partition.dimension
    }

    pub fn h(&self) -> T {
        self.h
    }

    pub fn cell_volume(&self) -> T {
        (0..self.dim()).fold(T::one(), |acc, _| acc * self.h)
    }

    pub fn node_counts(&self) -> [usize; 3] {
        self.nodes
    }

    pub fn node_total(&self) -> usize {
        self.nodes[0] * self.nodes[1] * self.nodes[2]
    }

    pub fn node_index(&self, ix: [usize; 3]) -> usize {
        ix[0] + self.nodes[0] * (ix[1] + self.nodes[1] * ix[2])
    }

    pub fn node_multi_index(&self, id: usize) -> [usize; 3] {
        unflatten(id, self.nodes)
    }

    pub fn node_point(&self, id: usize) -> [T; 3] {
        let ix = self.node_multi_index(id);
        let mut x = [T::zero(); 3];
        for a in 0..self.dim() {
            x[a] = self.origin[a] + self.h * lit::<T>(ix[a] as f64);
        }
        x
    }

    /// Classification of a node with respect to the whole domain.
    pub fn node_class(&self, id: usize) -> NodeClass {
        self.node_class[id]
    }

    /// Grid index of the node nearest to `x`, if `x` is on the grid.
    pub fn node_at(&self, x: &[T; 3]) -> Option<usize> {
        let mut ix = [0usize; 3];
        for a in 0..self.dim() {
            let q = (x[a] - self.origin[a]) / self.h;
            let r = q.round();
            if (q - r).abs() > coord_tolerance::<T>() * (T::one() + q.abs()) {
                return None;
            }
            let i = r.to_f64()?.round() as i64;
            if i < 0 || i as usize >= self.nodes[a] {
                return None;
            }
            ix[a] = i as usize;
        }
        Some(self.node_index(ix))
    }

    fn cell_index(&self, ix: [usize; 3]) -> usize {
        ix[0] + self.ncells[0] * (ix[1] + self.ncells[1] * ix[2])
    }

    /// Counts incident cells of a node accepted by `keep`, out of the 2^n
    /// cells surrounding it.
    fn incident_cells<F: Fn(i32) -> bool>(&self, node: [usize; 3], keep: &F) -> usize {
        let dim = self.dim();
        let mut count = 0;
        'combo: for mask in 0..(1usize << dim) {
            let mut cix = [0usize; 3];
            for a in 0..dim {
                let offset = if mask & (1 << a) != 0 { 0i64 } else { -1 };
                let c = node[a] as i64 + offset;
                if c < 0 || c as usize >= self.ncells[a] {
                    continue 'combo;
                }
                cix[a] = c as usize;
            }
            if keep(self.cell_owner[self.cell_index(cix)]) {
                count += 1;
            }
        }
        count
    }

    fn classify_nodes<F: Fn(i32) -> bool>(&self, keep: F) -> Vec<NodeClass> {
        let full = 1usize << self.dim();
        (0..self.node_total())
            .map(|id| {
                let c = self.incident_cells(self.node_multi_index(id), &keep);
                if c == 0 {
                    NodeClass::Outside
                } else if c == full {
                    NodeClass::Interior
                } else {
                    NodeClass::Boundary
                }
            })
            .collect()
    }

    fn cell_predicate(&self, spec: RegionSpec) -> Result<Box<dyn Fn(i32) -> bool + '_>, GeometryError> {
        let chain = &self.partition.chain;
        let k_max = chain.len();
        match spec {
            RegionSpec::Omega => Ok(Box::new(|o| o >= 0)),
            RegionSpec::Subdomain(j) => {
                if j >= self.partition.subdomains.len() {
                    return Err(GeometryError::InvalidSpec {
                        why: format!("subdomain {} of {}", j + 1, self.partition.subdomains.len()),
                    });
                }
                Ok(Box::new(move |o| o == j as i32))
            }
            RegionSpec::Peeled(k) => {
                if k > k_max {
                    return Err(GeometryError::IndexOutOfChain { k, max: k_max });
                }
                Ok(Box::new(move |o| o >= 0 && chain[..k].contains(&(o as usize))))
            }
            RegionSpec::Truncated(k) => {
                if k > k_max {
                    return Err(GeometryError::IndexOutOfChain { k, max: k_max });
                }
                Ok(Box::new(move |o| o >= 0 && !chain[..k].contains(&(o as usize))))
            }
        }
    }

    /// Node sets and lumped weights of the selected region.
    pub fn region(self: &Arc<Self>, spec: RegionSpec) -> Result<Region<T>, GeometryError> {
        let keep = self.cell_predicate(spec)?;
        let total_cells = self.cell_owner.len();
        let cells: Vec<bool> = (0..total_cells).map(|c| keep(self.cell_owner[c])).collect();
        let full = 1usize << self.dim();
        let inv_full = T::one() / lit::<T>(full as f64);
        let n_nodes = self.node_total();
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut node_weight = vec![T::zero(); n_nodes];
        let mut interior_pos = vec![-1i32; n_nodes];
        let mut boundary_pos = vec![-1i32; n_nodes];
        for id in 0..n_nodes {
            let c = self.incident_cells(self.node_multi_index(id), &|o| keep(o));
            if c == 0 {
                continue;
            }
            node_weight[id] = lit::<T>(c as f64) * inv_full;
            if c == full {
                interior_pos[id] = interior.len() as i32;
                interior.push(id);
            } else {
                boundary_pos[id] = boundary.len() as i32;
                boundary.push(id);
            }
        }
        Ok(Region {
            mesh: Arc::clone(self),
            spec,
            cells,
            interior,
            boundary,
            interior_pos,
            boundary_pos,
            node_weight,
        })
    }

    /// The peeled prefix `W_k` and the remainder `U_k` for `0 ≤ k ≤ K`.
    pub fn truncated_regions(
        self: &Arc<Self>,
        k: usize,
    ) -> Result<(Region<T>, Region<T>), GeometryError> {
        Ok((self.region(RegionSpec::Peeled(k))?, self.region(RegionSpec::Truncated(k))?))
    }

    /// Node layout of chain portion `k` (1-based).
    pub fn portion_grid(&self, k: usize) -> Result<PortionGrid<T>, GeometryError> {
        let k_max = self.partition.chain.len();
        if k == 0 || k > k_max {
            return Err(GeometryError::IndexOutOfChain { k, max: k_max });
        }
        let portion = self.partition.portions[k - 1];
        Ok(self.patch_grid(k, portion))
    }

    /// Node layout of an arbitrary grid-aligned flat patch.
    pub(crate) fn patch_grid(&self, chain_pos: usize, portion: FlatPortion<T>) -> PortionGrid<T> {
        let dim = self.dim();
        let tan_axes = portion.tangent_axes(dim);
        let to_steps = |v: T| -> i64 { (v / self.h).round().to_f64().unwrap().round() as i64 };
        let m = to_steps(portion.extent);
        let mut anchor_ix = [0i64; 3];
        for a in 0..dim {
            anchor_ix[a] = to_steps(portion.anchor[a] - self.origin[a]);
        }
        let counts: Vec<usize> = tan_axes.iter().map(|_| (2 * m - 1).max(0) as usize).collect();
        let mut interior = Vec::new();
        let mut rim = Vec::new();
        // Tensor ordering: first tangential axis fastest.
        let visit_len: i64 = 2 * m + 1;
        let total: i64 = tan_axes.iter().fold(1, |acc, _| acc * visit_len);
        for flat in 0..total {
            let mut rest = flat;
            let mut ix = [0usize; 3];
            ix[portion.normal_axis] = anchor_ix[portion.normal_axis] as usize;
            let mut on_rim = false;
            for (idx, &t) in tan_axes.iter().enumerate() {
                let step = rest % visit_len - m;
                rest /= visit_len;
                if step.abs() == m {
                    on_rim = true;
                }
                ix[t] = (anchor_ix[t] + step) as usize;
                let _ = idx;
            }
            let id = self.node_index(ix);
            if on_rim {
                rim.push(id);
            } else {
                interior.push(id);
            }
        }
        PortionGrid {
            chain_pos,
            portion,
            interior,
            rim,
            tan_axes,
            counts,
            h: self.h,
        }
    }
}

fn unflatten(id: usize, n: [usize; 3]) -> [usize; 3] {
    [id % n[0], (id / n[0]) % n[1], id / (n[0] * n[1])]
}

/// Node sets of a region together with the lumped cell-fraction weights used
/// by the discrete bilinear forms.
///
/// A node is interior when all `2^n` incident cells belong to the region,
/// on the boundary when some but not all do. The weight of a node is the
/// fraction of incident cells inside the region, so interior nodes carry
/// weight 1 and flat boundary nodes weight 1/2.
#[derive(Debug, Clone)]
pub struct Region<T> {
    mesh: Arc<Mesh<T>>,
    pub spec: RegionSpec,
    cells: Vec<bool>,
    pub interior: Vec<usize>,
    pub boundary: Vec<usize>,
    interior_pos: Vec<i32>,
    boundary_pos: Vec<i32>,
    node_weight: Vec<T>,
}

impl<T: Scalar> Region<T> {
    pub fn mesh(&self) -> &Arc<Mesh<T>> {
        &self.mesh
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn h(&self) -> T {
        self.mesh.h()
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty() && self.boundary.is_empty()
    }

    pub fn interior_position(&self, node: usize) -> Option<usize> {
        let p = self.interior_pos[node];
        (p >= 0).then_some(p as usize)
    }

    pub fn boundary_position(&self, node: usize) -> Option<usize> {
        let p = self.boundary_pos[node];
        (p >= 0).then_some(p as usize)
    }

    pub fn in_closure(&self, node: usize) -> bool {
        self.node_weight[node] > T::zero()
    }

    /// Fraction of incident cells inside the region (lumped quadrature
    /// weight; multiply by `h^n` for the node mass).
    pub fn weight(&self, node: usize) -> T {
        self.node_weight[node]
    }

    pub fn node_class(&self, node: usize) -> NodeClass {
        if self.interior_pos[node] >= 0 {
            NodeClass::Interior
        } else if self.boundary_pos[node] >= 0 {
            NodeClass::Boundary
        } else {
            NodeClass::Outside
        }
    }

    /// Number of region cells containing the grid edge from `node` along
    /// `axis`, out of the 2^(n-1) cells around it.
    fn edge_cells(&self, node: [usize; 3], axis: usize) -> usize {
        let dim = self.dim();
        let mesh = &self.mesh;
        if node[axis] >= mesh.ncells[axis] {
            return 0;
        }
        let trans: Vec<usize> = (0..dim).filter(|&a| a != axis).collect();
        let mut count = 0;
        'combo: for mask in 0..(1usize << trans.len()) {
            let mut cix = [0usize; 3];
            cix[axis] = node[axis];
            for (b, &t) in trans.iter().enumerate() {
                let offset = if mask & (1 << b) != 0 { 0i64 } else { -1 };
                let c = node[t] as i64 + offset;
                if c < 0 || c as usize >= mesh.ncells[t] {
                    continue 'combo;
                }
                cix[t] = c as usize;
            }
            if self.cells[mesh.cell_index(cix)] {
                count += 1;
            }
        }
        count
    }

    /// Visits every grid edge carried by the region with its transverse cell
    /// fraction `κ` (1 for edges with an interior endpoint, 1/2 along flat
    /// boundary faces in 2D).
    pub fn for_each_edge<F: FnMut(usize, usize, T)>(&self, mut f: F) {
        let dim = self.dim();
        let mesh = &self.mesh;
        let sub = 1usize << (dim - 1);
        let inv = T::one() / lit::<T>(sub as f64);
        let strides = [1usize, mesh.nodes[0], mesh.nodes[0] * mesh.nodes[1]];
        for id in 0..mesh.node_total() {
            if self.node_weight[id] == T::zero() {
                continue;
            }
            let ix = mesh.node_multi_index(id);
            for a in 0..dim {
                let c = self.edge_cells(ix, a);
                if c == 0 {
                    continue;
                }
                f(id, id + strides[a], lit::<T>(c as f64) * inv);
            }
        }
    }

    /// Neighbours of a node along the grid axes, paired with edge fractions.
    pub fn edges_at<F: FnMut(usize, T)>(&self, node: usize, mut f: F) {
        let dim = self.dim();
        let mesh = &self.mesh;
        let sub = 1usize << (dim - 1);
        let inv = T::one() / lit::<T>(sub as f64);
        let strides = [1usize, mesh.nodes[0], mesh.nodes[0] * mesh.nodes[1]];
        let ix = mesh.node_multi_index(node);
        for a in 0..dim {
            let c = self.edge_cells(ix, a);
            if c > 0 {
                f(node + strides[a], lit::<T>(c as f64) * inv);
            }
            if ix[a] > 0 {
                let mut jx = ix;
                jx[a] -= 1;
                let c = self.edge_cells(jx, a);
                if c > 0 {
                    f(node - strides[a], lit::<T>(c as f64) * inv);
                }
            }
        }
    }

    /// Subdomain supplying the potential value at a node: the owner of the
    /// incident region cell with the lowest chain rank. Boundary nodes thus
    /// take the one-sided limit from inside the region.
    pub fn subdomain_at(&self, node: usize) -> Option<usize> {
        let dim = self.dim();
        let mesh = &self.mesh;
        let ix = mesh.node_multi_index(node);
        let mut best: Option<usize> = None;
        'combo: for mask in 0..(1usize << dim) {
            let mut cix = [0usize; 3];
            for a in 0..dim {
                let offset = if mask & (1 << a) != 0 { 0i64 } else { -1 };
                let c = ix[a] as i64 + offset;
                if c < 0 || c as usize >= mesh.ncells[a] {
                    continue 'combo;
                }
                cix[a] = c as usize;
            }
            let cell = mesh.cell_index(cix);
            if self.cells[cell] {
                let owner = mesh.cell_owner[cell] as usize;
                best = Some(match best {
                    None => owner,
                    Some(b) => {
                        if mesh.partition.chain_rank(owner) < mesh.partition.chain_rank(b) {
                            owner
                        } else {
                            b
                        }
                    }
                });
            }
        }
        best
    }

    /// Bounding box of the region cells.
    pub fn bounding_box(&self) -> Option<AlignedBox<T>> {
        let dim = self.dim();
        let mesh = &self.mesh;
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        let mut any = false;
        for (c, &inside) in self.cells.iter().enumerate() {
            if !inside {
                continue;
            }
            any = true;
            let ix = unflatten(c, mesh.ncells);
            for a in 0..dim {
                lo[a] = lo[a].min(ix[a] as i64);
                hi[a] = hi[a].max(ix[a] as i64 + 1);
            }
        }
        if !any {
            return None;
        }
        let mut blo = [T::zero(); 3];
        let mut bhi = [T::zero(); 3];
        for a in 0..dim {
            blo[a] = mesh.origin[a] + mesh.h * lit::<T>(lo[a] as f64);
            bhi[a] = mesh.origin[a] + mesh.h * lit::<T>(hi[a] as f64);
        }
        Some(AlignedBox { lo: blo, hi: bhi })
    }

    pub fn diameter(&self) -> T {
        self.bounding_box().map(|b| b.diameter(self.dim())).unwrap_or_else(T::zero)
    }

    /// Lumped volume of the region (number of cells times cell volume).
    pub fn volume(&self) -> T {
        let n = self.cells.iter().filter(|&&c| c).count();
        lit::<T>(n as f64) * self.mesh.cell_volume()
    }

    /// True when every cell of `self` is a cell of `other`.
    pub fn is_subregion_of(&self, other: &Region<T>) -> bool {
        self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }

    /// Face-adjacency connectivity of this region's cells with `other`'s
    /// cells removed; the empty difference counts as connected.
    pub fn difference_connected(&self, other: &Region<T>) -> bool {
        let mesh = &self.mesh;
        let keep: Vec<bool> =
            self.cells.iter().zip(&other.cells).map(|(&a, &b)| a && !b).collect();
        let start = match keep.iter().position(|&k| k) {
            Some(s) => s,
            None => return true,
        };
        let mut seen = vec![false; keep.len()];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(c) = stack.pop() {
            let ix = unflatten(c, mesh.ncells);
            for a in 0..self.dim() {
                for d in [-1isize, 1] {
                    let na = ix[a] as isize + d;
                    if na < 0 || na as usize >= mesh.ncells[a] {
                        continue;
                    }
                    let mut jx = ix;
                    jx[a] = na as usize;
                    let j = mesh.cell_index(jx);
                    if keep[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        keep.iter().zip(&seen).all(|(&k, &s)| !k || s)
    }
}

/// Grid layout of a flat portion: interior nodes carry the trace degrees of
/// freedom, rim nodes are where traces vanish.
#[derive(Debug, Clone)]
pub struct PortionGrid<T> {
    /// 1-based position along the chain (0 for ad-hoc patches).
    pub chain_pos: usize,
    pub portion: FlatPortion<T>,
    /// Interior node ids in tensor order (first tangential axis fastest).
    pub interior: Vec<usize>,
    pub rim: Vec<usize>,
    pub tan_axes: Vec<usize>,
    /// Interior node counts per tangential axis.
    pub counts: Vec<usize>,
    pub h: T,
}

impl<T: Scalar> PortionGrid<T> {
    pub fn len(&self) -> usize {
        self.interior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty()
    }

    /// Measure of one face cell, `h^(n-1)`.
    pub fn face_measure(&self) -> T {
        self.tan_axes.iter().fold(T::one(), |acc, _| acc * self.h)
    }
}
