//! Discrete trace spaces on flat portions: the nodal basis supported in the
//! portion and vanishing at its relative boundary, with Gram matrices for the
//! `L²`, half-order, and dual half-order inner products.
//!
//! The half-order Gram is the matrix interpolation norm at exponent 1/2
//! between the portion mass matrix `M` and the zero-trace
//! stiffness-plus-mass matrix `S`: with `S z = λ M z` and `Zᵀ M Z = I`,
//!
//! ```text
//! G = M Z Λ^(1/2) Zᵀ M,     G⁻¹ = Z Λ^(-1/2) Zᵀ,
//! ```
//!
//! so that `G M⁻¹ G = S` exactly. The dual Gram is `G⁻¹` by the duality
//! convention in this basis.

use nalgebra::{DMatrix, DVector};

use super::DtnError;
use crate::geometry::PortionGrid;
use crate::scalar::{lit, Scalar};

/// Trace space over the interior nodes of one portion.
pub struct TraceSpace<T> {
    portion: PortionGrid<T>,
    mass: DMatrix<T>,
    /// `S = K + M`: zero-trace stiffness plus mass on the portion.
    stiffness_plus_mass: DMatrix<T>,
    gram: DMatrix<T>,
    gram_inv: DMatrix<T>,
    gram_sqrt: DMatrix<T>,
    gram_inv_sqrt: DMatrix<T>,
    /// M-orthonormal generalized eigenvectors of `(S, M)`, smoothest first.
    modes: DMatrix<T>,
    mode_eigenvalues: Vec<T>,
}

fn tridiag<T: Scalar>(m: usize, sub: T, diag: T) -> DMatrix<T> {
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            diag
        } else if i.abs_diff(j) == 1 {
            sub
        } else {
            T::zero()
        }
    })
}

fn kron<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

/// Symmetric square root and inverse square root via eigendecomposition.
fn sym_sqrt_pair<T: Scalar>(m: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let eig = symmetrize(m).symmetric_eigen();
    let q = &eig.eigenvectors;
    let n = m.nrows();
    let mut half = DMatrix::zeros(n, n);
    let mut inv_half = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        assert!(lam > T::zero(), "matrix not positive definite");
        let s = lam.sqrt();
        let col = q.column(k);
        for i in 0..n {
            for j in 0..n {
                half[(i, j)] += s * col[i] * col[j];
                inv_half[(i, j)] += col[i] * col[j] / s;
            }
        }
    }
    (half, inv_half)
}

impl<T: Scalar> TraceSpace<T> {
    pub fn build(portion: PortionGrid<T>) -> Result<Self, DtnError> {
        if portion.counts.iter().any(|&m| m < 3) {
            return Err(DtnError::PortionTooCoarse { nodes: portion.len() });
        }
        let h = portion.h;
        let sixth = lit::<T>(1.0 / 6.0);
        let mut mass = DMatrix::identity(1, 1);
        let mut stiff = DMatrix::zeros(1, 1);
        // Tensor product over tangential axes; the first axis is fastest in
        // the portion node ordering, matching `kron(next, prev)`.
        for &m in &portion.counts {
            let m1 = tridiag(m, h * sixth, h * lit::<T>(4.0) * sixth);
            let k1 = tridiag(m, -T::one() / h, lit::<T>(2.0) / h);
            stiff = kron(&k1, &mass) + kron(&m1, &stiff);
            mass = kron(&m1, &mass);
        }
        let s = &stiff + &mass;

        // Generalized eigenbasis of (S, M) through the Cholesky factor of M.
        let n = mass.nrows();
        let chol = nalgebra::Cholesky::new(mass.clone())
            .expect("portion mass matrix is positive definite");
        let l = chol.l();
        let mut b = s.clone();
        // B = L^{-1} S L^{-T}
        for mut col in b.column_iter_mut() {
            l.solve_lower_triangular_mut(&mut col);
        }
        b = b.transpose();
        for mut col in b.column_iter_mut() {
            l.solve_lower_triangular_mut(&mut col);
        }
        let eig = symmetrize(&b).symmetric_eigen();
        // Z = L^{-T} Q, M-orthonormal generalized eigenvectors.
        let mut z = eig.eigenvectors.clone();
        for mut col in z.column_iter_mut() {
            l.tr_solve_lower_triangular_mut(&mut col);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
        let modes = DMatrix::from_fn(n, n, |i, k| z[(i, order[k])]);
        let mode_eigenvalues: Vec<T> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let w = &mass * &z; // columns M z_j
        let mut gram = DMatrix::zeros(n, n);
        let mut gram_inv = DMatrix::zeros(n, n);
        for k in 0..n {
            let lam = eig.eigenvalues[k];
            assert!(lam > T::zero(), "interpolation spectrum must be positive");
            let s_half = lam.sqrt();
            let wc = w.column(k);
            let zc = z.column(k);
            for i in 0..n {
                for j in 0..n {
                    gram[(i, j)] += s_half * wc[i] * wc[j];
                    gram_inv[(i, j)] += zc[i] * zc[j] / s_half;
                }
            }
        }
        let gram = symmetrize(&gram);
        let gram_inv = symmetrize(&gram_inv);
        let (gram_sqrt, gram_inv_sqrt) = sym_sqrt_pair(&gram);
        Ok(Self {
            portion,
            mass,
            stiffness_plus_mass: s,
            gram,
            gram_inv,
            gram_sqrt,
            gram_inv_sqrt,
            modes,
            mode_eigenvalues,
        })
    }

    /// `m`-th generalized eigenmode of `(S, M)`, smoothest first; these play
    /// the role of discrete low-frequency profiles on the portion.
    pub fn smooth_mode(&self, m: usize) -> DVector<T> {
        DVector::from_fn(self.modes.nrows(), |i, _| self.modes[(i, m)])
    }

    pub fn mode_eigenvalue(&self, m: usize) -> T {
        self.mode_eigenvalues[m]
    }

    pub fn portion(&self) -> &PortionGrid<T> {
        &self.portion
    }

    /// Number of trace degrees of freedom.
    pub fn len(&self) -> usize {
        self.portion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.portion.is_empty()
    }

    pub fn mass(&self) -> &DMatrix<T> {
        &self.mass
    }

    pub fn stiffness_plus_mass(&self) -> &DMatrix<T> {
        &self.stiffness_plus_mass
    }

    /// Half-order Gram `G`.
    pub fn gram(&self) -> &DMatrix<T> {
        &self.gram
    }

    /// Dual Gram `G⁻¹`.
    pub fn gram_inv(&self) -> &DMatrix<T> {
        &self.gram_inv
    }

    pub fn gram_sqrt(&self) -> &DMatrix<T> {
        &self.gram_sqrt
    }

    pub fn gram_inv_sqrt(&self) -> &DMatrix<T> {
        &self.gram_inv_sqrt
    }

    /// `‖g‖` in the half-order norm of the trace coefficients.
    pub fn half_norm(&self, g: &DVector<T>) -> T {
        (g.dot(&(&self.gram * g))).max(T::zero()).sqrt()
    }

    /// `‖f‖` in the dual norm of functional coefficients.
    pub fn dual_norm(&self, f: &DVector<T>) -> T {
        (f.dot(&(&self.gram_inv * f))).max(T::zero()).sqrt()
    }

    /// `L²` norm of the trace coefficients.
    pub fn l2_norm(&self, g: &DVector<T>) -> T {
        (g.dot(&(&self.mass * g))).max(T::zero()).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_partition, AlignedBox, FlatPortion, PartitionSpec};
    use std::sync::Arc;

    fn unit_square_portion(h: f64, extent: f64) -> TraceSpace<f64> {
        let spec = PartitionSpec {
            dimension: 2,
            boxes: vec![AlignedBox::new([0.0, 0.0, 0.0], [1.0, 1.0, 0.0])],
            chain: vec![0],
            portions: vec![FlatPortion {
                anchor: [0.5, 0.0, 0.0],
                normal_axis: 1,
                normal_sign: 1,
                extent,
            }],
            r0: None,
        };
        let mesh = Arc::new(build_partition(spec).unwrap().mesh(h).unwrap());
        TraceSpace::build(mesh.portion_grid(1).unwrap()).unwrap()
    }

    #[test]
    fn interval_portion_counts_and_tridiagonal_mass() {
        let ts = unit_square_portion(0.25, 0.5);
        assert_eq!(ts.len(), 3);
        let m = ts.mass();
        for i in 0..3usize {
            for j in 0..3usize {
                if i.abs_diff(j) > 1 {
                    assert_eq!(m[(i, j)], 0.0);
                } else {
                    assert!(m[(i, j)] > 0.0);
                }
            }
        }
        assert!((m[(0, 0)] - 4.0 * 0.25 / 6.0).abs() < 1e-15);
        assert!((m[(0, 1)] - 0.25 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn too_coarse_portion_is_rejected() {
        let spec = PartitionSpec {
            dimension: 2,
            boxes: vec![AlignedBox::new([0.0, 0.0, 0.0], [1.0, 1.0, 0.0])],
            chain: vec![0],
            portions: vec![FlatPortion {
                anchor: [0.5, 0.0, 0.0],
                normal_axis: 1,
                normal_sign: 1,
                extent: 0.25,
            }],
            r0: None,
        };
        let mesh = Arc::new(build_partition(spec).unwrap().mesh(0.25).unwrap());
        assert!(matches!(
            TraceSpace::build(mesh.portion_grid(1).unwrap()),
            Err(DtnError::PortionTooCoarse { .. })
        ));
    }

    #[test]
    fn grams_are_spd() {
        let ts = unit_square_portion(1.0 / 16.0, 0.25);
        for m in [ts.gram(), ts.gram_inv(), ts.mass()] {
            assert!(nalgebra::Cholesky::new(m.clone()).is_some());
        }
        // G and G^{-1} invert each other.
        let prod = ts.gram() * ts.gram_inv();
        let err = (&prod - DMatrix::<f64>::identity(ts.len(), ts.len())).abs().max();
        assert!(err < 1e-9, "G * G^-1 deviates by {err:e}");
        // G^{1/2} squares back to G.
        let sq = ts.gram_sqrt() * ts.gram_sqrt();
        let rel = (&sq - ts.gram()).abs().max() / ts.gram().abs().max();
        assert!(rel < 1e-10);
    }

    #[test]
    fn interpolation_square_identity() {
        // The defining property of the interpolation Gram: G M^{-1} G = S.
        let ts = unit_square_portion(1.0 / 32.0, 0.5);
        let minv = ts.mass().clone().try_inverse().unwrap();
        let lhs = ts.gram() * minv * ts.gram();
        let rel = (&lhs - ts.stiffness_plus_mass()).abs().max()
            / ts.stiffness_plus_mass().abs().max();
        assert!(rel < 1e-9, "G M^-1 G - S relative {rel:e}");
    }

    #[test]
    fn gram_matches_sine_expansion_oracle() {
        // On a uniform interval both M and K are Toeplitz tridiagonal, so the
        // generalized eigenvectors are discrete sines and the interpolation
        // Gram has the closed form below, independent of any eigensolver.
        let h = 1.0 / 16.0;
        let ts = unit_square_portion(h, 0.25);
        let m = ts.len();
        let mp1 = (m + 1) as f64;
        let mut oracle = DMatrix::<f64>::zeros(m, m);
        for j in 1..=m {
            let lam_p = 2.0 * (j as f64 * std::f64::consts::PI / mp1).cos();
            let mj = h / 6.0 * (4.0 + lam_p);
            let kj = (2.0 - lam_p) / h;
            let lam = (kj + mj) / mj;
            let norm2 = mp1 / 2.0;
            let v: Vec<f64> = (1..=m)
                .map(|k| (j as f64 * k as f64 * std::f64::consts::PI / mp1).sin())
                .collect();
            for a in 0..m {
                for b in 0..m {
                    oracle[(a, b)] += lam.sqrt() * mj * v[a] * v[b] / norm2;
                }
            }
        }
        let rel = (ts.gram() - &oracle).abs().max() / oracle.abs().max();
        assert!(rel < 1e-10, "gram deviates from sine oracle by {rel:e}");
        // Half norm of the midpoint hat against the same oracle.
        let mut e = DVector::zeros(m);
        e[m / 2] = 1.0;
        let hn = ts.half_norm(&e);
        let on = (e.dot(&(&oracle * &e))).sqrt();
        assert!((hn - on).abs() <= 1e-10 * on);
    }

    #[test]
    fn three_dimensional_portion_tensor_gram() {
        let spec = PartitionSpec {
            dimension: 3,
            boxes: vec![AlignedBox::new([0.0; 3], [1.0; 3])],
            chain: vec![0],
            portions: vec![FlatPortion {
                anchor: [0.5, 0.5, 0.0],
                normal_axis: 2,
                normal_sign: 1,
                extent: 0.25,
            }],
            r0: None,
        };
        let mesh = Arc::new(build_partition(spec).unwrap().mesh(1.0 / 16.0).unwrap());
        let ts = TraceSpace::build(mesh.portion_grid(1).unwrap()).unwrap();
        assert_eq!(ts.len(), 7 * 7);
        assert!(nalgebra::Cholesky::new(ts.gram().clone()).is_some());
        let minv = ts.mass().clone().try_inverse().unwrap();
        let lhs = ts.gram() * minv * ts.gram();
        let rel = (&lhs - ts.stiffness_plus_mass()).abs().max()
            / ts.stiffness_plus_mass().abs().max();
        assert!(rel < 1e-8);
    }
}
