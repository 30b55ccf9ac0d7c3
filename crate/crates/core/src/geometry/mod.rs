//! Partitioned polygonal domains: axis-aligned subdomains, the chain of
//! interfaces along which information is propagated, and flat portions of
//! interfaces where boundary data is supported.
//!
//! All geometry is axis-aligned so that subdomain interfaces and portions are
//! resolved exactly by a rectilinear grid; see [`mesh`] for the discretization.

mod mesh;

pub use mesh::{Mesh, NodeClass, PortionGrid, Region, RegionSpec};

use crate::scalar::{lit, Scalar};
use thiserror::Error;

/// Errors raised while building or discretizing a partition.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("subdomains {i} and {j} have overlapping interiors")]
    OverlappingSubdomains { i: usize, j: usize },
    #[error("chain prefix {level}: peeled or truncated region is disconnected")]
    BrokenChain { level: usize },
    #[error("portion {k}: {why}")]
    PortionNotOnInterface { k: usize, why: String },
    #[error("portion {k}: extent {extent} is below the minimum {min}")]
    PortionTooSmall { k: usize, extent: f64, min: f64 },
    #[error("incompatible mesh spacing: {why}")]
    IncompatibleSpacing { why: String },
    #[error("chain index {k} outside 0..={max}")]
    IndexOutOfChain { k: usize, max: usize },
    #[error("invalid geometry description: {why}")]
    InvalidSpec { why: String },
}

/// Closed axis-aligned box. The third coordinate is ignored in dimension 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedBox<T> {
    pub lo: [T; 3],
    pub hi: [T; 3],
}

impl<T: Scalar> AlignedBox<T> {
    pub fn new(lo: [T; 3], hi: [T; 3]) -> Self {
        Self { lo, hi }
    }

    /// Vertices of the box (4 in 2D, 8 in 3D).
    pub fn vertices(&self, dim: usize) -> Vec<[T; 3]> {
        let mut out = Vec::with_capacity(1 << dim);
        for mask in 0..(1usize << dim) {
            let mut v = [T::zero(); 3];
            for a in 0..dim {
                v[a] = if mask & (1 << a) != 0 { self.hi[a] } else { self.lo[a] };
            }
            out.push(v);
        }
        out
    }

    pub fn contains(&self, x: &[T; 3], dim: usize, tol: T) -> bool {
        (0..dim).all(|a| x[a] >= self.lo[a] - tol && x[a] <= self.hi[a] + tol)
    }

    pub fn volume(&self, dim: usize) -> T {
        (0..dim).fold(T::one(), |acc, a| acc * (self.hi[a] - self.lo[a]))
    }

    pub fn diameter(&self, dim: usize) -> T {
        (0..dim)
            .map(|a| {
                let d = self.hi[a] - self.lo[a];
                d * d
            })
            .fold(T::zero(), |acc, d| acc + d)
            .sqrt()
    }
}

/// Flat portion of an interface: the axis-aligned patch
/// `{ anchor + t · e : |t_j| < extent }` on the hyperplane through `anchor`
/// orthogonal to `normal_axis`. The normal `sign · e_axis` points into the
/// subdomain that is next along the chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatPortion<T> {
    pub anchor: [T; 3],
    pub normal_axis: usize,
    pub normal_sign: i8,
    pub extent: T,
}

impl<T: Scalar> FlatPortion<T> {
    /// Tangential axes, in increasing order.
    pub fn tangent_axes(&self, dim: usize) -> Vec<usize> {
        (0..dim).filter(|&a| a != self.normal_axis).collect()
    }

    /// Outward-pointing unit normal as a coordinate vector.
    pub fn normal(&self) -> [T; 3] {
        let mut nu = [T::zero(); 3];
        nu[self.normal_axis] = if self.normal_sign >= 0 { T::one() } else { -T::one() };
        nu
    }
}

/// Input description of a partition, before validation.
#[derive(Debug, Clone)]
pub struct PartitionSpec<T> {
    pub dimension: usize,
    pub boxes: Vec<AlignedBox<T>>,
    /// 0-based subdomain indices realizing the chain `D_{j_1}, …, D_{j_K}`.
    pub chain: Vec<usize>,
    pub portions: Vec<FlatPortion<T>>,
    /// Flat-portion size scale; inferred from the portion extents when absent.
    pub r0: Option<T>,
}

/// Validated partitioned domain.
///
/// Invariants established by [`build_partition`]:
/// * subdomain interiors are pairwise disjoint;
/// * every chain prefix splits the domain into connected peeled/remainder
///   regions;
/// * portion `k` sits on the interface between chain elements `k-1` and `k`
///   (the outside of the domain for `k = 1`), oriented into element `k`;
/// * portion `k` touches the boundary of the remainder region `k-1` and stays
///   away from the boundaries of the neighbouring remainder regions.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPartition<T> {
    pub dimension: usize,
    pub subdomains: Vec<AlignedBox<T>>,
    pub chain: Vec<usize>,
    pub portions: Vec<FlatPortion<T>>,
    /// Flat-portion size scale: every portion extends at least `r0 / 3`.
    pub r0: T,
    /// Lipschitz constant of the boxes; 1 for axis-aligned geometry.
    pub lipschitz: T,
    /// Volume bound `B` with `|Ω| ≤ B · r0^n`.
    pub volume_bound: T,
    pub volume: T,
}

impl<T: Scalar> DomainPartition<T> {
    pub fn chain_len(&self) -> usize {
        self.chain.len()
    }

    /// Bounding box of the whole domain.
    pub fn bounding_box(&self) -> AlignedBox<T> {
        let mut lo = [T::zero(); 3];
        let mut hi = [T::zero(); 3];
        for a in 0..self.dimension {
            lo[a] = self.subdomains.iter().map(|b| b.lo[a]).fold(self.subdomains[0].lo[a], T::min);
            hi[a] = self.subdomains.iter().map(|b| b.hi[a]).fold(self.subdomains[0].hi[a], T::max);
        }
        AlignedBox { lo, hi }
    }

    /// Chain rank used for interface tie-breaking: position in the chain, or
    /// `K + j` for subdomains off the chain.
    pub fn chain_rank(&self, subdomain: usize) -> usize {
        self.chain
            .iter()
            .position(|&c| c == subdomain)
            .unwrap_or(self.chain.len() + subdomain)
    }

    /// Index of the subdomain owning `x`; interface ties go to the lowest
    /// chain rank.
    pub fn subdomain_of(&self, x: &[T; 3]) -> Option<usize> {
        let tol = coord_tolerance::<T>();
        self.subdomains
            .iter()
            .enumerate()
            .filter(|(_, b)| b.contains(x, self.dimension, tol))
            .min_by_key(|(j, _)| self.chain_rank(*j))
            .map(|(j, _)| j)
    }

    /// Discretize with uniform spacing `h`.
    pub fn mesh(self, h: T) -> Result<Mesh<T>, GeometryError> {
        Mesh::build(self, h)
    }
}

pub(crate) fn coord_tolerance<T: Scalar>() -> T {
    T::default_epsilon() * lit::<T>(1024.0)
}

fn approx_eq<T: Scalar>(a: T, b: T) -> bool {
    let scale = T::one().max(a.abs()).max(b.abs());
    (a - b).abs() <= coord_tolerance::<T>() * scale
}

/// Rectilinear arrangement induced by the subdomain faces; used for the exact
/// validation checks in [`build_partition`].
struct Arrangement<T> {
    dim: usize,
    coords: [Vec<T>; 3],
    /// Cell counts per axis (1 on inactive axes).
    ncells: [usize; 3],
    /// Owning subdomain per arrangement cell, `None` outside the domain.
    owner: Vec<Option<usize>>,
}

impl<T: Scalar> Arrangement<T> {
    fn build(spec: &PartitionSpec<T>) -> Result<Self, GeometryError> {
        let dim = spec.dimension;
        let mut coords: [Vec<T>; 3] = [vec![T::zero()], vec![T::zero()], vec![T::zero()]];
        for (a, coord) in coords.iter_mut().enumerate().take(dim) {
            let mut cs: Vec<T> = Vec::new();
            for b in &spec.boxes {
                cs.push(b.lo[a]);
                cs.push(b.hi[a]);
            }
            cs.sort_by(|x, y| x.partial_cmp(y).unwrap());
            cs.dedup_by(|x, y| approx_eq(*x, *y));
            *coord = cs;
        }
        let mut ncells = [1usize; 3];
        for a in 0..dim {
            ncells[a] = coords[a].len().saturating_sub(1).max(1);
        }
        let total = ncells[0] * ncells[1] * ncells[2];
        let mut owner = vec![None; total];
        let tol = coord_tolerance::<T>();
        let half = lit::<T>(0.5);
        for id in 0..total {
            let ix = Self::unflatten(id, ncells);
            let mut center = [T::zero(); 3];
            for a in 0..dim {
                center[a] = (coords[a][ix[a]] + coords[a][ix[a] + 1]) * half;
            }
            let mut found: Option<usize> = None;
            for (j, b) in spec.boxes.iter().enumerate() {
                if b.contains(&center, dim, tol) {
                    if let Some(i) = found {
                        return Err(GeometryError::OverlappingSubdomains { i, j });
                    }
                    found = Some(j);
                }
            }
            owner[id] = found;
        }
        Ok(Self { dim, coords, ncells, owner })
    }

    fn unflatten(id: usize, n: [usize; 3]) -> [usize; 3] {
        [id % n[0], (id / n[0]) % n[1], id / (n[0] * n[1])]
    }

    fn flatten(&self, ix: [usize; 3]) -> usize {
        ix[0] + self.ncells[0] * (ix[1] + self.ncells[1] * ix[2])
    }

    /// Connectedness of the cell set selected by `keep` under face adjacency.
    fn connected(&self, keep: &[bool]) -> bool {
        let total = self.owner.len();
        let start = match (0..total).find(|&i| keep[i]) {
            Some(s) => s,
            None => return true, // empty set counts as connected
        };
        let mut seen = vec![false; total];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(c) = stack.pop() {
            let ix = Self::unflatten(c, self.ncells);
            for a in 0..self.dim {
                for d in [-1isize, 1] {
                    let na = ix[a] as isize + d;
                    if na < 0 || na as usize >= self.ncells[a] {
                        continue;
                    }
                    let mut jx = ix;
                    jx[a] = na as usize;
                    let j = self.flatten(jx);
                    if keep[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        (0..total).all(|i| !keep[i] || seen[i])
    }

    /// Interval index such that `coords[axis][i] == c`, if any.
    fn plane_index(&self, axis: usize, c: T) -> Option<usize> {
        self.coords[axis].iter().position(|&x| approx_eq(x, c))
    }

    /// Visits every arrangement face lying on the portion plane whose
    /// tangential cell overlaps the portion patch with positive measure.
    /// The callback receives the owners on the negative and positive side of
    /// the plane (`None` when outside the domain or the grid).
    fn for_each_portion_face<F>(
        &self,
        portion: &FlatPortion<T>,
        mut visit: F,
    ) -> Result<(), GeometryError>
    where
        F: FnMut(Option<usize>, Option<usize>),
    {
        let axis = portion.normal_axis;
        let plane = self.plane_index(axis, portion.anchor[axis]).ok_or_else(|| {
            GeometryError::InvalidSpec {
                why: format!("portion plane {} not aligned with any subdomain face", axis),
            }
        })?;
        let tans: Vec<usize> = (0..self.dim).filter(|&a| a != axis).collect();
        // Tangential cell ranges overlapping (anchor - extent, anchor + extent).
        let mut ranges: Vec<(usize, Vec<usize>)> = Vec::new();
        for &t in &tans {
            let lo = portion.anchor[t] - portion.extent;
            let hi = portion.anchor[t] + portion.extent;
            let mut cells = Vec::new();
            for i in 0..self.ncells[t] {
                let (a, b) = (self.coords[t][i], self.coords[t][i + 1]);
                if b > lo + coord_tolerance::<T>() && a < hi - coord_tolerance::<T>() {
                    cells.push(i);
                }
            }
            if cells.is_empty() {
                return Err(GeometryError::InvalidSpec {
                    why: "portion patch has no tangential extent".into(),
                });
            }
            ranges.push((t, cells));
        }
        let mut tangential = vec![Vec::new()];
        for (t, cells) in &ranges {
            let mut next = Vec::new();
            for combo in &tangential {
                for &c in cells {
                    let mut cc: Vec<(usize, usize)> = combo.clone();
                    cc.push((*t, c));
                    next.push(cc);
                }
            }
            tangential = next;
        }
        for combo in tangential {
            let mut ix = [0usize; 3];
            for &(t, c) in &combo {
                ix[t] = c;
            }
            let minus = if plane == 0 {
                None
            } else {
                let mut jx = ix;
                jx[axis] = plane - 1;
                self.owner[self.flatten(jx)]
            };
            let plus = if plane >= self.ncells[axis] {
                None
            } else {
                let mut jx = ix;
                jx[axis] = plane;
                self.owner[self.flatten(jx)]
            };
            visit(minus, plus);
        }
        Ok(())
    }
}

/// Validates a partition description and computes the derived scales.
pub fn build_partition<T: Scalar>(
    spec: PartitionSpec<T>,
) -> Result<DomainPartition<T>, GeometryError> {
    let dim = spec.dimension;
    if dim != 2 && dim != 3 {
        return Err(GeometryError::InvalidSpec { why: format!("dimension {} not supported", dim) });
    }
    if spec.boxes.is_empty() {
        return Err(GeometryError::InvalidSpec { why: "no subdomains".into() });
    }
    for (j, b) in spec.boxes.iter().enumerate() {
        for a in 0..dim {
            if !(b.hi[a] > b.lo[a]) {
                return Err(GeometryError::InvalidSpec {
                    why: format!("subdomain {} is degenerate along axis {}", j + 1, a + 1),
                });
            }
        }
    }
    let k_len = spec.chain.len();
    if k_len == 0 || k_len > spec.boxes.len() {
        return Err(GeometryError::InvalidSpec {
            why: format!("chain length {} outside 1..={}", k_len, spec.boxes.len()),
        });
    }
    for &c in &spec.chain {
        if c >= spec.boxes.len() {
            return Err(GeometryError::InvalidSpec {
                why: format!("chain references subdomain {} of {}", c + 1, spec.boxes.len()),
            });
        }
    }
    {
        let mut seen = spec.chain.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != k_len {
            return Err(GeometryError::InvalidSpec { why: "chain repeats a subdomain".into() });
        }
    }
    if spec.portions.len() != k_len {
        return Err(GeometryError::InvalidSpec {
            why: format!("{} portions for a chain of length {}", spec.portions.len(), k_len),
        });
    }
    for (k, p) in spec.portions.iter().enumerate() {
        if p.normal_axis >= dim {
            return Err(GeometryError::InvalidSpec {
                why: format!("portion {}: normal axis {} outside dimension", k + 1, p.normal_axis + 1),
            });
        }
        if !(p.extent > T::zero()) {
            return Err(GeometryError::InvalidSpec {
                why: format!("portion {}: extent must be positive", k + 1),
            });
        }
    }

    // Size scale: largest r0 such that every portion spans at least r0/3.
    let min_extent =
        spec.portions.iter().map(|p| p.extent).fold(spec.portions[0].extent, T::min);
    let r0 = match spec.r0 {
        Some(r0) => {
            let min = r0 / lit::<T>(3.0);
            for (k, p) in spec.portions.iter().enumerate() {
                if p.extent < min * (T::one() - coord_tolerance::<T>()) {
                    return Err(GeometryError::PortionTooSmall {
                        k: k + 1,
                        extent: p.extent.to_f64().unwrap_or(f64::NAN),
                        min: min.to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
            r0
        }
        None => min_extent * lit::<T>(3.0),
    };

    let arr = Arrangement::build(&spec)?;

    // Connectivity of every peeled prefix and remainder.
    let omega: Vec<bool> = arr.owner.iter().map(|o| o.is_some()).collect();
    if !arr.connected(&omega) {
        return Err(GeometryError::BrokenChain { level: 0 });
    }
    for l in 1..=k_len {
        let peeled: Vec<bool> = arr
            .owner
            .iter()
            .map(|o| o.map(|j| spec.chain[..l].contains(&j)).unwrap_or(false))
            .collect();
        let rest: Vec<bool> =
            omega.iter().zip(&peeled).map(|(&om, &pe)| om && !pe).collect();
        if !arr.connected(&peeled) || !arr.connected(&rest) {
            return Err(GeometryError::BrokenChain { level: l });
        }
    }

    // Interface placement and orientation of every portion.
    for (kk, p) in spec.portions.iter().enumerate() {
        let k = kk + 1; // 1-based chain position
        let inner = spec.chain[kk];
        let prev = if k >= 2 { Some(spec.chain[kk - 1]) } else { None };
        let mut ok = true;
        let mut why = String::new();
        arr.for_each_portion_face(p, |minus, plus| {
            let (near, far) = if p.normal_sign >= 0 { (plus, minus) } else { (minus, plus) };
            if near != Some(inner) {
                ok = false;
                why = format!("patch leaves the face of chain subdomain {}", inner + 1);
            }
            match prev {
                Some(prev) if far != Some(prev) => {
                    ok = false;
                    why = format!("far side is not chain subdomain {}", prev + 1);
                }
                None if far.is_some() => {
                    ok = false;
                    why = "far side of the first portion must be outside the domain".into();
                }
                _ => {}
            }
        })?;
        if !ok {
            return Err(GeometryError::PortionNotOnInterface { k, why });
        }
    }

    // Boundary placement: portion k on the boundary of remainder k-1, away
    // from the boundaries of remainders k and k-2.
    let in_remainder = |l: usize, owner: Option<usize>| -> bool {
        owner.map(|j| !spec.chain[..l].contains(&j)).unwrap_or(false)
    };
    for (kk, p) in spec.portions.iter().enumerate() {
        let k = kk + 1;
        let mut on_prev = true;
        let mut off_cur = true;
        let mut off_prev2 = true;
        arr.for_each_portion_face(p, |minus, plus| {
            let bdry = |l: usize| in_remainder(l, minus) != in_remainder(l, plus);
            if !bdry(k - 1) {
                on_prev = false;
            }
            if k <= k_len - 1 && bdry(k) {
                off_cur = false;
            }
            if k >= 2 && bdry(k - 2) {
                off_prev2 = false;
            }
        })?;
        if !on_prev || !off_cur || !off_prev2 {
            let why = if !on_prev {
                format!("patch leaves the boundary of remainder region {}", k - 1)
            } else if !off_cur {
                format!("patch touches the boundary of remainder region {}", k)
            } else {
                format!("patch touches the boundary of remainder region {}", k - 2)
            };
            return Err(GeometryError::PortionNotOnInterface { k, why });
        }
    }

    let volume =
        spec.boxes.iter().fold(T::zero(), |acc, b| acc + b.volume(dim));
    let r0n = (0..dim).fold(T::one(), |acc, _| acc * r0);
    Ok(DomainPartition {
        dimension: dim,
        subdomains: spec.boxes,
        chain: spec.chain,
        portions: spec.portions,
        r0,
        lipschitz: T::one(),
        volume_bound: volume / r0n,
        volume,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn box2(lo: [f64; 2], hi: [f64; 2]) -> AlignedBox<f64> {
        AlignedBox::new([lo[0], lo[1], 0.0], [hi[0], hi[1], 0.0])
    }

    pub(crate) fn portion2(
        anchor: [f64; 2],
        normal_axis: usize,
        normal_sign: i8,
        extent: f64,
    ) -> FlatPortion<f64> {
        FlatPortion { anchor: [anchor[0], anchor[1], 0.0], normal_axis, normal_sign, extent }
    }

    /// Two stacked unit squares with portions on the bottom edge and the
    /// shared interface.
    pub(crate) fn stacked_spec() -> PartitionSpec<f64> {
        PartitionSpec {
            dimension: 2,
            boxes: vec![box2([0.0, 0.0], [1.0, 1.0]), box2([0.0, 1.0], [1.0, 2.0])],
            chain: vec![0, 1],
            portions: vec![
                portion2([0.5, 0.0], 1, 1, 0.25),
                portion2([0.5, 1.0], 1, 1, 0.25),
            ],
            r0: None,
        }
    }

    #[test]
    fn stacked_squares_is_valid() {
        let p = build_partition(stacked_spec()).unwrap();
        assert_eq!(p.chain_len(), 2);
        assert!((p.r0 - 0.75).abs() < 1e-12);
        assert!((p.volume - 2.0).abs() < 1e-12);
        // |Ω| ≤ B r0^n holds with equality by construction.
        assert!(p.volume <= p.volume_bound * p.r0.powi(2) + 1e-12);
    }

    #[test]
    fn portion_on_outer_boundary_is_rejected() {
        let mut spec = stacked_spec();
        // Second portion anchored on the outer boundary x = 0.
        spec.portions[1] = portion2([0.0, 1.5], 0, 1, 0.25);
        match build_partition(spec) {
            Err(GeometryError::PortionNotOnInterface { k: 2, .. }) => {}
            other => panic!("expected PortionNotOnInterface, got {:?}", other),
        }
    }

    #[test]
    fn undersized_portion_is_rejected() {
        // L-shaped three-box chain with an explicit r0 and one short portion.
        let spec = PartitionSpec {
            dimension: 2,
            boxes: vec![
                box2([0.0, 0.0], [1.0, 1.0]),
                box2([0.0, 1.0], [1.0, 2.0]),
                box2([1.0, 1.0], [2.0, 2.0]),
            ],
            chain: vec![0, 1, 2],
            portions: vec![
                portion2([0.5, 0.0], 1, 1, 0.25),
                portion2([0.5, 1.0], 1, 1, 0.25),
                portion2([1.0, 1.5], 0, 1, 0.1875), // r0/4 < r0/3
            ],
            r0: Some(0.75),
        };
        match build_partition(spec) {
            Err(GeometryError::PortionTooSmall { k: 3, .. }) => {}
            other => panic!("expected PortionTooSmall, got {:?}", other),
        }
    }

    #[test]
    fn overlapping_subdomains_are_rejected() {
        let spec = PartitionSpec {
            dimension: 2,
            boxes: vec![box2([0.0, 0.0], [1.0, 1.0]), box2([0.5, 0.0], [1.5, 1.0])],
            chain: vec![0, 1],
            portions: vec![portion2([0.5, 0.0], 1, 1, 0.25), portion2([1.0, 0.5], 0, 1, 0.25)],
            r0: None,
        };
        assert!(matches!(
            build_partition(spec),
            Err(GeometryError::OverlappingSubdomains { .. })
        ));
    }

    #[test]
    fn disconnected_remainder_is_rejected() {
        // Three boxes in a row, chain removes the middle one first: the
        // remainder after one step is disconnected.
        let spec = PartitionSpec {
            dimension: 2,
            boxes: vec![
                box2([0.0, 0.0], [1.0, 1.0]),
                box2([1.0, 0.0], [2.0, 1.0]),
                box2([2.0, 0.0], [3.0, 1.0]),
            ],
            chain: vec![1, 0, 2],
            portions: vec![
                portion2([1.5, 0.0], 1, 1, 0.25),
                portion2([1.0, 0.5], 0, -1, 0.25),
                portion2([2.0, 0.5], 0, 1, 0.25),
            ],
            r0: None,
        };
        assert!(matches!(build_partition(spec), Err(GeometryError::BrokenChain { level: 1 })));
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_partition(stacked_spec()).unwrap();
        let b = build_partition(stacked_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(format!("{:?}", a), format!("{:?}", b));
    }

    #[test]
    fn interface_ties_go_to_lower_chain_rank() {
        let p = build_partition(stacked_spec()).unwrap();
        assert_eq!(p.subdomain_of(&[0.5, 1.0, 0.0]), Some(0));
        assert_eq!(p.subdomain_of(&[0.5, 1.5, 0.0]), Some(1));
        assert_eq!(p.subdomain_of(&[0.5, 2.5, 0.0]), None);
    }
}
