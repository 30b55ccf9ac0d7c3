//! Piecewise-affine potentials over a partitioned domain, their norms, and
//! the generalized finite-dimensional basis variant.

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::geometry::{DomainPartition, Mesh, PortionGrid, Region, RegionSpec};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("point lies outside the domain")]
    PointOutsideDomain,
    #[error("region {0} contains no subdomain")]
    EmptyRegion(String),
    #[error("{got} coefficient pairs for {expected} subdomains")]
    WrongCoefficientCount { got: usize, expected: usize },
    #[error("sup norm {sup} exceeds the a-priori bound {bound}")]
    BoundExceeded { sup: f64, bound: f64 },
    #[error("restricted basis is numerically dependent: sigma_min/sigma_max = {ratio:e}")]
    DegenerateRestriction { ratio: f64 },
}

/// `q(x) = a_j + A_j · x` on subdomain `D_j`.
///
/// On interfaces the subdomain of lower chain rank wins, which makes pointwise
/// evaluation deterministic; affine pieces disagree only on null sets.
#[derive(Debug, Clone)]
pub struct PiecewiseAffinePotential<T> {
    partition: Arc<DomainPartition<T>>,
    coeffs: Vec<(T, [T; 3])>,
}

impl<T: Scalar> PiecewiseAffinePotential<T> {
    /// Builds a potential; when `bound` is given, enforces the a-priori
    /// sup-norm bound `‖q‖_∞ ≤ E_0` over the domain.
    pub fn new(
        partition: Arc<DomainPartition<T>>,
        coeffs: Vec<(T, [T; 3])>,
        bound: Option<T>,
    ) -> Result<Self, PotentialError> {
        if coeffs.len() != partition.subdomains.len() {
            return Err(PotentialError::WrongCoefficientCount {
                got: coeffs.len(),
                expected: partition.subdomains.len(),
            });
        }
        let q = Self { partition, coeffs };
        if let Some(e0) = bound {
            let sup = q.sup_norm(RegionSpec::Omega)?;
            if sup > e0 * (T::one() + lit::<T>(1e-12)) {
                return Err(PotentialError::BoundExceeded {
                    sup: sup.to_f64().unwrap_or(f64::NAN),
                    bound: e0.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(q)
    }

    pub fn zero(partition: Arc<DomainPartition<T>>) -> Self {
        let n = partition.subdomains.len();
        Self { partition, coeffs: vec![(T::zero(), [T::zero(); 3]); n] }
    }

    pub fn constant(partition: Arc<DomainPartition<T>>, c: T) -> Self {
        let n = partition.subdomains.len();
        Self { partition, coeffs: vec![(c, [T::zero(); 3]); n] }
    }

    pub fn partition(&self) -> &Arc<DomainPartition<T>> {
        &self.partition
    }

    pub fn coefficients(&self) -> &[(T, [T; 3])] {
        &self.coeffs
    }

    pub fn piece(&self, j: usize) -> (T, [T; 3]) {
        self.coeffs[j]
    }

    fn piece_value(&self, j: usize, x: &[T; 3]) -> T {
        let (a, grad) = self.coeffs[j];
        (0..self.partition.dimension).fold(a, |acc, c| acc + grad[c] * x[c])
    }

    /// Pointwise evaluation with the interface tie-break.
    pub fn eval(&self, x: &[T; 3]) -> Result<T, PotentialError> {
        let j = self.partition.subdomain_of(x).ok_or(PotentialError::PointOutsideDomain)?;
        Ok(self.piece_value(j, x))
    }

    /// `max_j ( |a_j| + |A_j|_2 )`, the coefficient norm of the class.
    pub fn triple_norm(&self) -> T {
        let dim = self.partition.dimension;
        self.coeffs
            .iter()
            .map(|(a, grad)| {
                let g2 = (0..dim).fold(T::zero(), |acc, c| acc + grad[c] * grad[c]);
                a.abs() + g2.sqrt()
            })
            .fold(T::zero(), T::max)
    }

    fn region_subdomains(&self, region: RegionSpec) -> Result<Vec<usize>, PotentialError> {
        let n = self.partition.subdomains.len();
        let chain = &self.partition.chain;
        let list: Vec<usize> = match region {
            RegionSpec::Omega => (0..n).collect(),
            RegionSpec::Subdomain(j) => {
                if j >= n {
                    return Err(PotentialError::EmptyRegion(format!("D{}", j + 1)));
                }
                vec![j]
            }
            RegionSpec::Peeled(k) => chain.iter().take(k).copied().collect(),
            RegionSpec::Truncated(k) => {
                (0..n).filter(|j| !chain[..k.min(chain.len())].contains(j)).collect()
            }
        };
        if list.is_empty() {
            return Err(PotentialError::EmptyRegion(region.to_string()));
        }
        Ok(list)
    }

    /// Exact `L^∞` norm over a region made of whole subdomains: affine pieces
    /// attain their extrema at box vertices.
    pub fn sup_norm(&self, region: RegionSpec) -> Result<T, PotentialError> {
        let dim = self.partition.dimension;
        let mut sup = T::zero();
        for j in self.region_subdomains(region)? {
            for v in self.partition.subdomains[j].vertices(dim) {
                sup = sup.max(self.piece_value(j, &v).abs());
            }
        }
        Ok(sup)
    }

    /// Coefficient-wise difference (same partition).
    pub fn difference(&self, other: &Self) -> Self {
        let dim = self.partition.dimension;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(&(a1, g1), &(a2, g2))| {
                let mut g = [T::zero(); 3];
                for c in 0..dim {
                    g[c] = g1[c] - g2[c];
                }
                (a1 - a2, g)
            })
            .collect();
        Self { partition: Arc::clone(&self.partition), coeffs }
    }

    /// Scales all coefficients.
    pub fn scaled(&self, t: T) -> Self {
        let dim = self.partition.dimension;
        let coeffs = self
            .coeffs
            .iter()
            .map(|&(a, g)| {
                let mut grad = [T::zero(); 3];
                for c in 0..dim {
                    grad[c] = g[c] * t;
                }
                (a * t, grad)
            })
            .collect();
        Self { partition: Arc::clone(&self.partition), coeffs }
    }

    /// Adds an affine piece to one subdomain, leaving the others untouched.
    pub fn add_piece(&self, j: usize, a: T, grad: [T; 3]) -> Self {
        let mut coeffs = self.coeffs.clone();
        let dim = self.partition.dimension;
        coeffs[j].0 += a;
        for c in 0..dim {
            coeffs[j].1[c] += grad[c];
        }
        Self { partition: Arc::clone(&self.partition), coeffs }
    }

    /// Coefficient-wise sum (same partition).
    pub fn sum(&self, other: &Self) -> Self {
        let dim = self.partition.dimension;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(&(a1, g1), &(a2, g2))| {
                let mut g = [T::zero(); 3];
                for c in 0..dim {
                    g[c] = g1[c] + g2[c];
                }
                (a1 + a2, g)
            })
            .collect();
        Self { partition: Arc::clone(&self.partition), coeffs }
    }

    /// Stable content hash of the coefficients, used to tag exported data.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (a, grad) in &self.coeffs {
            hasher.update(a.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            for c in 0..self.partition.dimension {
                hasher.update(grad[c].to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{:02x}", b)).collect()
    }

    /// Nodal values over the grid, using the region-side limit at region
    /// boundary nodes; zero outside the region closure. Assembly and
    /// quadrature must share these values for the discrete identities to be
    /// exact.
    pub fn nodal_values(&self, region: &Region<T>) -> Vec<T> {
        let mesh = region.mesh();
        (0..mesh.node_total())
            .map(|id| match region.subdomain_at(id) {
                Some(j) => self.piece_value(j, &mesh.node_point(id)),
                None => T::zero(),
            })
            .collect()
    }
}

/// Subdomain index attaining `‖q1 - q2‖_∞`; ties go to the smallest index.
pub fn max_subdomain<T: Scalar>(
    q1: &PiecewiseAffinePotential<T>,
    q2: &PiecewiseAffinePotential<T>,
) -> usize {
    let diff = q1.difference(q2);
    let n = diff.partition.subdomains.len();
    let mut best = 0;
    let mut best_val = -T::one();
    for j in 0..n {
        let s = diff.sup_norm(RegionSpec::Subdomain(j)).expect("subdomain exists");
        if s > best_val {
            best_val = s;
            best = j;
        }
    }
    best
}

/// General finite-dimensional potential `Σ c_m ψ_m`, recoverable from
/// boundary data when the restrictions of the `ψ_m` to a portion stay
/// linearly independent.
pub struct BasisPotential<T> {
    functions: Vec<Arc<dyn Fn(&[T; 3]) -> T + Send + Sync>>,
    names: Vec<String>,
    coefficients: Vec<T>,
}

impl<T: Scalar> BasisPotential<T> {
    pub fn new(
        functions: Vec<(String, Arc<dyn Fn(&[T; 3]) -> T + Send + Sync>)>,
        coefficients: Vec<T>,
    ) -> Self {
        assert_eq!(functions.len(), coefficients.len());
        let (names, functions) = functions.into_iter().unzip();
        Self { functions, names, coefficients }
    }

    /// The affine basis `{1, x_1, …, x_n}`.
    pub fn affine(dim: usize, coefficients: Vec<T>) -> Self {
        let mut fns: Vec<(String, Arc<dyn Fn(&[T; 3]) -> T + Send + Sync>)> =
            vec![("1".into(), Arc::new(|_: &[T; 3]| T::one()))];
        for c in 0..dim {
            fns.push((format!("x{}", c + 1), Arc::new(move |x: &[T; 3]| x[c])));
        }
        Self::new(fns, coefficients)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn coefficients(&self) -> &[T] {
        &self.coefficients
    }

    pub fn eval(&self, x: &[T; 3]) -> T {
        self.functions
            .iter()
            .zip(&self.coefficients)
            .fold(T::zero(), |acc, (f, &c)| acc + c * f(x))
    }

    /// Samples every basis function at the interior nodes of a portion:
    /// one row per node, one column per function.
    pub fn restriction_matrix(&self, mesh: &Mesh<T>, portion: &PortionGrid<T>) -> DMatrix<T> {
        let rows = portion.interior.len();
        let cols = self.functions.len();
        DMatrix::from_fn(rows, cols, |r, c| (self.functions[c])(&mesh.node_point(portion.interior[r])))
    }

    /// Verifies linear independence of the restricted basis: the smallest
    /// singular value of the sampled restriction matrix must stay above
    /// `1e-8` times the largest. Returns the singular-value ratio.
    pub fn check_independence(
        &self,
        mesh: &Mesh<T>,
        portion: &PortionGrid<T>,
    ) -> Result<T, PotentialError> {
        let m = self.restriction_matrix(mesh, portion);
        let sv = m.singular_values();
        let (mut lo, mut hi) = (T::max_value().unwrap(), T::zero());
        for &s in sv.iter() {
            lo = lo.min(s);
            hi = hi.max(s);
        }
        if sv.len() < self.functions.len() || !(lo > hi * lit::<T>(1e-8)) {
            return Err(PotentialError::DegenerateRestriction {
                ratio: (lo / hi).to_f64().unwrap_or(0.0),
            });
        }
        Ok(lo / hi)
    }

    /// Least-squares fit of the coefficients from point samples.
    pub fn fit_from_samples(&mut self, points: &[[T; 3]], values: &[T]) -> Result<(), PotentialError> {
        assert_eq!(points.len(), values.len());
        let rows = points.len();
        let cols = self.functions.len();
        let m = DMatrix::from_fn(rows, cols, |r, c| (self.functions[c])(&points[r]));
        let rhs = nalgebra::DVector::from_fn(rows, |r, _| values[r]);
        let svd = m.svd(true, true);
        let sv = &svd.singular_values;
        let (mut lo, mut hi) = (T::max_value().unwrap(), T::zero());
        for &s in sv.iter() {
            lo = lo.min(s);
            hi = hi.max(s);
        }
        if sv.len() < cols || !(lo > hi * lit::<T>(1e-8)) {
            return Err(PotentialError::DegenerateRestriction {
                ratio: (lo / hi).to_f64().unwrap_or(0.0),
            });
        }
        let sol = svd.solve(&rhs, T::zero()).expect("svd solve");
        self.coefficients = sol.iter().copied().collect();
        Ok(())
    }
}
