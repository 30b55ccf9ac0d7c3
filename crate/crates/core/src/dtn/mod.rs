//! Local Dirichlet-to-Neumann matrices on flat portions, the dual operator
//! gap between two of them, and the boundary-interior pairing identity that
//! links a DtN difference to the potential difference.

mod trace;

pub use trace::TraceSpace;

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::Region;
use crate::pde::{
    boundary_functional, lumped_weighted, spectral_threshold, DirichletSolver, PdeError,
};
use crate::potential::PiecewiseAffinePotential;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Error)]
pub enum DtnError {
    #[error("portion resolves only {nodes} interior nodes; need at least 3 per axis")]
    PortionTooCoarse { nodes: usize },
    #[error("operator dimensions differ: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("spectral margin {margin:e} below threshold {threshold:e}")]
    SpectralFailure { margin: f64, threshold: f64 },
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {why}")]
    Format { line: usize, why: String },
}

/// Provenance carried by an assembled or imported DtN matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DtnMeta {
    pub region: String,
    pub portion: usize,
    pub h: String,
    pub q_hash: String,
}

/// Dense local DtN matrix in the nodal trace basis of one portion: entry
/// `(i, j)` is the pairing of the co-normal data of basis datum `j` with
/// basis function `i`. Symmetric in exact arithmetic.
#[derive(Debug, Clone)]
pub struct DtnMatrix<T> {
    pub entries: DMatrix<T>,
    pub meta: DtnMeta,
}

impl<T: Scalar> DtnMatrix<T> {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Relative departure from symmetry.
    pub fn asymmetry(&self) -> T {
        let scale = self.entries.abs().max().max(crate::scalar::tiny());
        (&self.entries - self.entries.transpose()).abs().max() / scale
    }

    /// `⟨Λ g, f⟩` for trace coefficient vectors.
    pub fn pairing(&self, g: &DVector<T>, f: &DVector<T>) -> T {
        f.dot(&(&self.entries * g))
    }
}

/// Expands trace coefficients on the portion to a boundary-value vector of
/// the region (zero off the portion).
pub fn trace_boundary_vector<T: Scalar>(
    region: &Region<T>,
    trace: &TraceSpace<T>,
    g: &DVector<T>,
) -> Result<Vec<T>, DtnError> {
    let mut out = vec![T::zero(); region.boundary.len()];
    for (i, &node) in trace.portion().interior.iter().enumerate() {
        let b = region
            .boundary_position(node)
            .ok_or(PdeError::PortionNotOnBoundary)?;
        out[b] = g[i];
    }
    Ok(out)
}

/// Column-by-column DtN assembly against an existing factorization: one
/// solve per trace basis function, tested with the variational boundary
/// functional on the same portion.
pub fn assemble_dtn_with<T: Scalar>(
    solver: &DirichletSolver<T>,
    trace: &TraceSpace<T>,
    q_hash: String,
) -> Result<DtnMatrix<T>, DtnError> {
    let region = solver.region();
    let m = trace.len();
    let mut entries = DMatrix::zeros(m, m);
    let mut g = vec![T::zero(); region.boundary.len()];
    let dofs: Vec<usize> = trace
        .portion()
        .interior
        .iter()
        .map(|&node| region.boundary_position(node).ok_or(PdeError::PortionNotOnBoundary))
        .collect::<Result<_, _>>()?;
    for j in 0..m {
        g[dofs[j]] = T::one();
        let rep = solver.solve_boundary(&g)?;
        g[dofs[j]] = T::zero();
        let col = boundary_functional(
            region,
            solver.q_nodes(),
            &rep.values,
            &trace.portion().interior,
        )?;
        for i in 0..m {
            entries[(i, j)] = col[i];
        }
    }
    let matrix = DtnMatrix {
        entries,
        meta: DtnMeta {
            region: region.spec.to_string(),
            portion: trace.portion().chain_pos,
            h: format!("{}", region.h()),
            q_hash,
        },
    };
    let asym = matrix.asymmetry();
    if asym > lit::<T>(1e-9) {
        log::warn!("DtN asymmetry {:e} on {}", asym, region.spec);
    }
    Ok(matrix)
}

/// Assembles the local DtN matrix for `(region, q)` after verifying the
/// spectral admissibility of the operator.
pub fn assemble_dtn<T: Scalar>(
    region: &Region<T>,
    q: &PiecewiseAffinePotential<T>,
    trace: &TraceSpace<T>,
) -> Result<DtnMatrix<T>, DtnError> {
    let solver = DirichletSolver::new(region.clone(), q)?;
    let (lambda, _) = solver.smallest_eigenvalue()?;
    let threshold = spectral_threshold(region);
    if lambda.abs() < threshold {
        return Err(DtnError::SpectralFailure {
            margin: lambda.abs().to_f64().unwrap_or(0.0),
            threshold: threshold.to_f64().unwrap_or(0.0),
        });
    }
    assemble_dtn_with(&solver, trace, q.content_hash())
}

/// Operator norm of `Λ₁ - Λ₂` from the half-order space to its dual: the
/// largest singular value of `G^(-1/2) (Λ₁ - Λ₂) G^(-1/2)`.
pub fn dtn_gap<T: Scalar>(
    a: &DtnMatrix<T>,
    b: &DtnMatrix<T>,
    trace: &TraceSpace<T>,
) -> Result<T, DtnError> {
    if a.dim() != b.dim() || a.dim() != trace.len() {
        return Err(DtnError::DimensionMismatch { a: a.dim(), b: b.dim() });
    }
    let w = trace.gram_inv_sqrt() * (&a.entries - &b.entries) * trace.gram_inv_sqrt();
    let sv = w.singular_values();
    Ok(sv.iter().fold(T::zero(), |acc, &s| acc.max(s)))
}

/// Both sides of the boundary-interior pairing identity
/// `⟨(Λ₁-Λ₂) g₁, g₂⟩ = ∫ (q₁-q₂) u₁ u₂` on the region, with the relative
/// residual. The identity is exact for the variational trace; the residual
/// only reflects linear-solver tolerance.
#[derive(Debug, Clone)]
pub struct AlessandriniReport<T> {
    pub lhs: T,
    pub rhs: T,
    pub residual: T,
}

pub fn alessandrini_pairing<T: Scalar>(
    solver1: &DirichletSolver<T>,
    solver2: &DirichletSolver<T>,
    trace: &TraceSpace<T>,
    g1: &DVector<T>,
    g2: &DVector<T>,
) -> Result<AlessandriniReport<T>, DtnError> {
    let region = solver1.region();
    debug_assert_eq!(region.spec, solver2.region().spec);
    let b1 = trace_boundary_vector(region, trace, g1)?;
    let b2 = trace_boundary_vector(region, trace, g2)?;
    let u1 = solver1.solve_boundary(&b1)?.values;
    let u2 = solver2.solve_boundary(&b2)?.values;
    let r1 = boundary_functional(region, solver1.q_nodes(), &u1, &trace.portion().interior)?;
    let r2 = boundary_functional(region, solver2.q_nodes(), &u2, &trace.portion().interior)?;
    let mut lhs = T::zero();
    for i in 0..trace.len() {
        lhs += g2[i] * r1[i] - g1[i] * r2[i];
    }
    let mesh = region.mesh();
    let dq: Vec<T> = (0..mesh.node_total())
        .map(|id| solver1.q_nodes()[id] - solver2.q_nodes()[id])
        .collect();
    let rhs = lumped_weighted(region, &dq, &u1, &u2);
    let residual = (lhs - rhs).abs() / (lhs.abs() + rhs.abs() + T::default_epsilon());
    Ok(AlessandriniReport { lhs, rhs, residual })
}

const CSV_MAGIC: &str = "# dtn-matrix v1";

impl<T: Scalar> DtnMatrix<T> {
    /// Writes the matrix in the exchange format: a commented header block
    /// followed by dense `i,j,value` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", CSV_MAGIC)?;
        writeln!(w, "# tool_version = {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "# region = {}", self.meta.region)?;
        writeln!(w, "# portion = {}", self.meta.portion)?;
        writeln!(w, "# h = {}", self.meta.h)?;
        writeln!(w, "# q_hash = {}", self.meta.q_hash)?;
        writeln!(w, "# rows = {}", self.entries.nrows())?;
        writeln!(w, "# cols = {}", self.entries.ncols())?;
        writeln!(w, "i,j,value")?;
        for j in 0..self.entries.ncols() {
            for i in 0..self.entries.nrows() {
                writeln!(w, "{},{},{}", i, j, self.entries[(i, j)])?;
            }
        }
        Ok(())
    }

    /// Parses the exchange format written by [`DtnMatrix::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, DtnError> {
        let mut meta = DtnMeta {
            region: String::new(),
            portion: 0,
            h: String::new(),
            q_hash: String::new(),
        };
        let mut rows = 0usize;
        let mut cols = 0usize;
        let mut entries: Option<DMatrix<T>> = None;
        let mut saw_magic = false;
        let mut saw_header = false;
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = ln + 1;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            if lineno == 1 {
                if text != CSV_MAGIC {
                    return Err(DtnError::Format {
                        line: 1,
                        why: format!("expected `{}`", CSV_MAGIC),
                    });
                }
                saw_magic = true;
                continue;
            }
            if let Some(rest) = text.strip_prefix('#') {
                let mut parts = rest.splitn(2, '=');
                let key = parts.next().unwrap_or("").trim();
                let value = parts.next().unwrap_or("").trim();
                match key {
                    "region" => meta.region = value.to_string(),
                    "portion" => {
                        meta.portion = value.parse().map_err(|_| DtnError::Format {
                            line: lineno,
                            why: "portion must be an integer".into(),
                        })?
                    }
                    "h" => meta.h = value.to_string(),
                    "q_hash" => meta.q_hash = value.to_string(),
                    "rows" => {
                        rows = value.parse().map_err(|_| DtnError::Format {
                            line: lineno,
                            why: "rows must be an integer".into(),
                        })?
                    }
                    "cols" => {
                        cols = value.parse().map_err(|_| DtnError::Format {
                            line: lineno,
                            why: "cols must be an integer".into(),
                        })?
                    }
                    _ => {}
                }
                continue;
            }
            if !saw_header {
                if text != "i,j,value" {
                    return Err(DtnError::Format {
                        line: lineno,
                        why: "expected column header `i,j,value`".into(),
                    });
                }
                if rows == 0 || cols == 0 {
                    return Err(DtnError::Format {
                        line: lineno,
                        why: "rows/cols missing from header block".into(),
                    });
                }
                entries = Some(DMatrix::zeros(rows, cols));
                saw_header = true;
                continue;
            }
            let m = entries.as_mut().unwrap();
            let mut fields = text.split(',');
            let parse_idx = |f: Option<&str>| -> Result<usize, DtnError> {
                f.and_then(|s| s.trim().parse().ok()).ok_or(DtnError::Format {
                    line: lineno,
                    why: "malformed entry row".into(),
                })
            };
            let i = parse_idx(fields.next())?;
            let j = parse_idx(fields.next())?;
            let v: f64 = fields
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or(DtnError::Format { line: lineno, why: "malformed value".into() })?;
            if i >= rows || j >= cols {
                return Err(DtnError::Format {
                    line: lineno,
                    why: format!("index ({}, {}) outside {}x{}", i, j, rows, cols),
                });
            }
            m[(i, j)] = lit::<T>(v);
        }
        if !saw_magic || !saw_header {
            return Err(DtnError::Format { line: 0, why: "truncated file".into() });
        }
        Ok(DtnMatrix { entries: entries.unwrap(), meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_partition, AlignedBox, FlatPortion, Mesh, PartitionSpec, RegionSpec};
    use std::sync::Arc;

    fn unit_square(h: f64, extent: f64) -> Arc<Mesh<f64>> {
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
        Arc::new(build_partition(spec).unwrap().mesh(h).unwrap())
    }

    fn setup(h: f64) -> (Arc<Mesh<f64>>, Region<f64>, TraceSpace<f64>) {
        let mesh = unit_square(h, 0.5);
        let region = mesh.region(RegionSpec::Omega).unwrap();
        let trace = TraceSpace::build(mesh.portion_grid(1).unwrap()).unwrap();
        (mesh, region, trace)
    }

    fn sine_trace(mesh: &Mesh<f64>, trace: &TraceSpace<f64>) -> DVector<f64> {
        DVector::from_fn(trace.len(), |i, _| {
            let x = mesh.node_point(trace.portion().interior[i]);
            (std::f64::consts::PI * x[0]).sin()
        })
    }

    #[test]
    fn sine_energy_matches_separable_closed_form() {
        let (mesh, region, trace) = setup(1.0 / 32.0);
        let q = PiecewiseAffinePotential::zero(Arc::clone(mesh.partition()));
        let lambda = assemble_dtn(&region, &q, &trace).unwrap();
        let g = sine_trace(&mesh, &trace);
        let energy = lambda.pairing(&g, &g);
        let pi = std::f64::consts::PI;
        let exact = pi / pi.tanh() / 2.0;
        assert!(
            (energy - exact).abs() / exact < 0.02,
            "energy {} vs {}",
            energy,
            exact
        );
    }

    #[test]
    fn energy_is_nonnegative_for_zero_potential() {
        let (_, region, trace) = setup(1.0 / 16.0);
        let q = PiecewiseAffinePotential::zero(Arc::clone(region.mesh().partition()));
        let lambda = assemble_dtn(&region, &q, &trace).unwrap();
        let mut state = 7u64;
        for _ in 0..10 {
            let g = DVector::from_fn(trace.len(), |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            });
            assert!(lambda.pairing(&g, &g) >= -1e-12);
        }
    }

    #[test]
    fn symmetry_and_equal_potentials() {
        let (mesh, region, trace) = setup(1.0 / 16.0);
        let q = PiecewiseAffinePotential::new(
            Arc::clone(mesh.partition()),
            vec![(1.0, [0.5, -0.3, 0.0])],
            None,
        )
        .unwrap();
        let a = assemble_dtn(&region, &q, &trace).unwrap();
        let b = assemble_dtn(&region, &q, &trace).unwrap();
        assert!(a.asymmetry() < 1e-10);
        assert_eq!(a.entries, b.entries);
        assert!(dtn_gap(&a, &b, &trace).unwrap() == 0.0);
    }

    #[test]
    fn gap_normalization_against_gram() {
        let (_, region, trace) = setup(1.0 / 16.0);
        let q = PiecewiseAffinePotential::zero(Arc::clone(region.mesh().partition()));
        let a = assemble_dtn(&region, &q, &trace).unwrap();
        let mut b = a.clone();
        b.entries += trace.gram();
        let gap = dtn_gap(&a, &b, &trace).unwrap();
        assert!((gap - 1.0).abs() < 1e-10, "gap {}", gap);
    }

    #[test]
    fn gap_matches_generalized_eigen_oracle() {
        let (_, region, trace) = setup(1.0 / 16.0);
        let q = PiecewiseAffinePotential::zero(Arc::clone(region.mesh().partition()));
        let a = assemble_dtn(&region, &q, &trace).unwrap();
        let mut b = a.clone();
        // Random symmetric perturbation.
        let mut state = 99u64;
        let m = trace.len();
        for i in 0..m {
            for j in 0..=i {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                let v = ((state >> 11) as f64 / (1u64 << 53) as f64) * 0.2 - 0.1;
                b.entries[(i, j)] += v;
                if i != j {
                    b.entries[(j, i)] += v;
                }
            }
        }
        let gap = dtn_gap(&a, &b, &trace).unwrap();
        // Independent route: the gap equals the largest |eigenvalue| of
        // L^{-1} (A-B) L^{-T} with G = L L^{T}.
        let diff = &a.entries - &b.entries;
        let chol = nalgebra::Cholesky::new(trace.gram().clone()).unwrap();
        let l = chol.l();
        let mut w = diff.clone();
        for mut col in w.column_iter_mut() {
            l.solve_lower_triangular_mut(&mut col);
        }
        w = w.transpose();
        for mut col in w.column_iter_mut() {
            l.solve_lower_triangular_mut(&mut col);
        }
        let sym = (&w + w.transpose()) * 0.5;
        let oracle = sym
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        assert!((gap - oracle).abs() <= 1e-10 * oracle.max(1.0), "{} vs {}", gap, oracle);
    }

    #[test]
    fn alessandrini_identity_cases() {
        let (mesh, region, trace) = setup(1.0 / 16.0);
        let part = Arc::clone(mesh.partition());
        let q1 = PiecewiseAffinePotential::new(
            Arc::clone(&part),
            vec![(1.0, [0.4, -0.2, 0.0])],
            None,
        )
        .unwrap();
        let s1 = DirichletSolver::new(region.clone(), &q1).unwrap();

        // Equal potentials: both sides vanish.
        let g = sine_trace(&mesh, &trace);
        let rep = alessandrini_pairing(&s1, &s1, &trace, &g, &g).unwrap();
        assert!(rep.lhs.abs() < 1e-10 && rep.rhs.abs() < 1e-10);

        // Positive constant difference with equal traces: both sides positive.
        let q2 = PiecewiseAffinePotential::new(
            Arc::clone(&part),
            vec![(0.5, [0.4, -0.2, 0.0])],
            None,
        )
        .unwrap();
        let s2 = DirichletSolver::new(region.clone(), &q2).unwrap();
        let rep = alessandrini_pairing(&s1, &s2, &trace, &g, &g).unwrap();
        assert!(rep.rhs > 0.0);
        assert!(rep.residual <= 1e-8, "residual {:e}", rep.residual);

        // Random affine difference and random traces.
        let mut state = 1234u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..5 {
            let qa = PiecewiseAffinePotential::new(
                Arc::clone(&part),
                vec![(next(), [next(), next(), 0.0])],
                None,
            )
            .unwrap();
            let qb = PiecewiseAffinePotential::new(
                Arc::clone(&part),
                vec![(next(), [next(), next(), 0.0])],
                None,
            )
            .unwrap();
            let sa = DirichletSolver::new(region.clone(), &qa).unwrap();
            let sb = DirichletSolver::new(region.clone(), &qb).unwrap();
            let ga = DVector::from_fn(trace.len(), |_, _| next());
            let gb = DVector::from_fn(trace.len(), |_, _| next());
            let rep = alessandrini_pairing(&sa, &sb, &trace, &ga, &gb).unwrap();
            assert!(rep.residual <= 1e-8, "residual {:e}", rep.residual);
        }
    }

    #[test]
    fn energy_refines_at_order_above_one_point_five() {
        let pi = std::f64::consts::PI;
        let exact = pi / pi.tanh() / 2.0;
        let mut errs = Vec::new();
        for &h in &[1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0] {
            let (mesh, region, trace) = setup(h);
            let q = PiecewiseAffinePotential::zero(Arc::clone(mesh.partition()));
            let lambda = assemble_dtn(&region, &q, &trace).unwrap();
            let g = sine_trace(&mesh, &trace);
            errs.push((lambda.pairing(&g, &g) - exact).abs());
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.5, "refinement order {}", order);
        }
    }

    #[test]
    fn spectral_failure_blocks_assembly() {
        let (mesh, region, trace) = setup(1.0 / 16.0);
        let h = 1.0 / 16.0;
        let discrete = 2.0 * (4.0 / (h * h)) * (std::f64::consts::PI * h / 2.0).sin().powi(2);
        let q =
            PiecewiseAffinePotential::constant(Arc::clone(mesh.partition()), -discrete + 1e-8);
        assert!(matches!(
            assemble_dtn(&region, &q, &trace),
            Err(DtnError::SpectralFailure { .. })
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (_, region, trace) = setup(1.0 / 16.0);
        let q = PiecewiseAffinePotential::new(
            Arc::clone(region.mesh().partition()),
            vec![(0.7, [0.1, 0.2, 0.0])],
            None,
        )
        .unwrap();
        let a = assemble_dtn(&region, &q, &trace).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let b = DtnMatrix::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.entries, b.entries);
        // And the exchange format is byte-stable.
        let mut buf2 = Vec::new();
        b.write_csv(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn csv_errors_cite_lines() {
        let text = "# dtn-matrix v1\n# rows = 2\n# cols = 2\ni,j,value\n0,0,bogus\n";
        match DtnMatrix::<f64>::read_csv(text.as_bytes()) {
            Err(DtnError::Format { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected format error, got {:?}", other.map(|m| m.meta)),
        }
    }
}
