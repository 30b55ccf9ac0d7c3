//! Quantitative approximation of interior solutions by boundary-controlled
//! ones: the restriction operator from traces on a control portion to
//! solution values on an inner region, its singular decomposition in the
//! half-order/`L²` geometry, the adjoint realized through the dual source
//! problem, and spectral-truncation approximation with cost tracking.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dtn::{trace_boundary_vector, DtnError, TraceSpace};
use crate::geometry::Region;
use crate::pde::{
    boundary_functional, h1_norm, spectral_check, DirichletSolver, PdeError,
};
use crate::potential::PiecewiseAffinePotential;
use crate::scalar::{lit, Scalar};
use crate::util::linear_fit;

#[derive(Debug, Error)]
pub enum RungeError {
    #[error("geometric condition violated: {why}")]
    ConditionRViolated { why: String },
    #[error("target {requested:e} below the discrete resolution floor {floor:e}")]
    TargetUnreachable { floor: f64, requested: f64 },
    #[error("input is not a discrete solution on the inner region: residual {residual:e}")]
    NotASolution { residual: f64 },
    #[error("spectral margin {margin:e} below threshold {threshold:e} on {region}")]
    SpectralFailure { margin: f64, threshold: f64, region: String },
    #[error(transparent)]
    Dtn(#[from] DtnError),
    #[error(transparent)]
    Pde(#[from] PdeError),
}

/// Restriction operator `A`: trace coefficients on the control portion of
/// the outer region to solution values on the inner region, with cached
/// singular triplets `(σ_j, φ_j, ψ_j)` in the half-order/`L²` geometry.
pub struct RestrictionOperator<'a, T: Scalar> {
    inner: Region<T>,
    outer_solver: std::sync::Arc<DirichletSolver<T>>,
    trace: &'a TraceSpace<T>,
    /// Inner q values, for the membership residual check.
    inner_q: Vec<T>,
    /// Closure nodes of the inner region (rows of the operator matrix).
    node_list: Vec<usize>,
    /// Lumped inner-region masses per row.
    mass: Vec<T>,
    matrix: DMatrix<T>,
    sigma: Vec<T>,
    /// Right singular vectors in trace coordinates, G-orthonormal.
    phi: Vec<DVector<T>>,
    /// Left singular vectors on the node list, M-orthonormal.
    psi: Vec<DVector<T>>,
}

/// Outcome of one approximation: the controlling boundary datum, the
/// achieved interior error, and its trace-norm cost.
#[derive(Debug, Clone)]
pub struct RungeResult<T> {
    /// Trace coefficients of the approximating datum on the control portion.
    pub datum: DVector<T>,
    /// Absolute interior `L²` error.
    pub error: T,
    /// Error relative to the `H¹` norm of the target.
    pub relative_error: T,
    /// Half-norm of the datum.
    pub cost: T,
    /// Number of singular modes retained.
    pub truncation: usize,
    pub target_h1: T,
    pub target_l2: T,
}

impl<'a, T: Scalar> RestrictionOperator<'a, T> {
    /// Assembles the operator column by column (one solve per trace basis
    /// function) and computes its weighted singular decomposition.
    ///
    /// Requires the geometric separation condition: the outer-minus-inner
    /// region is connected and the closed control portion avoids the inner
    /// boundary; both regions must pass the spectral check.
    pub fn build(
        inner: Region<T>,
        outer: Region<T>,
        trace: &'a TraceSpace<T>,
        q: &PiecewiseAffinePotential<T>,
    ) -> Result<Self, RungeError> {
        for region in [&inner, &outer] {
            let report = spectral_check(region, q)?;
            if !report.pass {
                return Err(RungeError::SpectralFailure {
                    margin: report.lambda_min.abs().to_f64().unwrap_or(0.0),
                    threshold: report.threshold.to_f64().unwrap_or(0.0),
                    region: region.spec.to_string(),
                });
            }
        }
        let outer_solver = std::sync::Arc::new(DirichletSolver::new(outer, q)?);
        Self::build_with_solver(inner, outer_solver, trace, q)
    }

    /// Variant reusing an existing outer-region factorization. The caller
    /// attests that the spectral condition holds on both regions.
    pub fn build_with_solver(
        inner: Region<T>,
        outer_solver: std::sync::Arc<DirichletSolver<T>>,
        trace: &'a TraceSpace<T>,
        q: &PiecewiseAffinePotential<T>,
    ) -> Result<Self, RungeError> {
        let outer = outer_solver.region();
        if !inner.is_subregion_of(outer) {
            return Err(RungeError::ConditionRViolated {
                why: format!("{} is not contained in {}", inner.spec, outer.spec),
            });
        }
        if !outer.difference_connected(&inner) {
            return Err(RungeError::ConditionRViolated {
                why: format!("{} minus {} is disconnected", outer.spec, inner.spec),
            });
        }
        for &node in trace.portion().interior.iter().chain(&trace.portion().rim) {
            if outer.boundary_position(node).is_none() {
                return Err(RungeError::ConditionRViolated {
                    why: "control portion leaves the outer boundary".into(),
                });
            }
            if inner.in_closure(node) {
                return Err(RungeError::ConditionRViolated {
                    why: "control portion touches the inner boundary".into(),
                });
            }
        }
        let inner_q = q.nodal_values(&inner);

        let mesh = inner.mesh();
        let hn = (0..inner.dim()).fold(T::one(), |acc, _| acc * inner.h());
        let node_list: Vec<usize> =
            (0..mesh.node_total()).filter(|&id| inner.in_closure(id)).collect();
        let mass: Vec<T> = node_list.iter().map(|&id| inner.weight(id) * hn).collect();

        let m = trace.len();
        let outer_region = outer_solver.region();
        let mut matrix = DMatrix::zeros(node_list.len(), m);
        let mut g = vec![T::zero(); outer_region.boundary.len()];
        for j in 0..m {
            let node = trace.portion().interior[j];
            let b = outer_region.boundary_position(node).expect("portion on outer boundary");
            g[b] = T::one();
            let rep = outer_solver.solve_boundary(&g)?;
            g[b] = T::zero();
            for (row, &id) in node_list.iter().enumerate() {
                matrix[(row, j)] = rep.values[id];
            }
        }

        // Weighted SVD: B = M^{1/2} A G^{-1/2}.
        let mut b = matrix.clone();
        for (row, &mi) in mass.iter().enumerate() {
            let s = mi.sqrt();
            for j in 0..m {
                b[(row, j)] *= s;
            }
        }
        let b = b * trace.gram_inv_sqrt();
        let svd = b.svd(true, true);
        let u = svd.u.as_ref().expect("left vectors requested");
        let vt = svd.v_t.as_ref().expect("right vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| {
            svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap()
        });
        let mut sigma = Vec::new();
        let mut phi = Vec::new();
        let mut psi = Vec::new();
        for &k in &order {
            let s = svd.singular_values[k];
            if !(s > T::zero()) {
                log::debug!("dropping zero singular value at mode {}", k);
                continue;
            }
            sigma.push(s);
            phi.push(trace.gram_inv_sqrt() * vt.row(k).transpose());
            let mut left = DVector::zeros(node_list.len());
            for (row, &mi) in mass.iter().enumerate() {
                left[row] = u[(row, k)] / mi.sqrt();
            }
            psi.push(left);
        }
        Ok(Self {
            inner,
            outer_solver,
            trace,
            inner_q,
            node_list,
            mass,
            matrix,
            sigma,
            phi,
            psi,
        })
    }

    pub fn inner(&self) -> &Region<T> {
        &self.inner
    }

    pub fn outer(&self) -> &Region<T> {
        self.outer_solver.region()
    }

    pub fn trace_space(&self) -> &TraceSpace<T> {
        self.trace
    }

    pub fn singular_values(&self) -> &[T] {
        &self.sigma
    }

    pub fn singular_pair(&self, j: usize) -> (&DVector<T>, &DVector<T>) {
        (&self.phi[j], &self.psi[j])
    }

    /// Applies `A`: forwards the datum through the outer solve and restricts
    /// to the inner node list.
    pub fn apply(&self, g: &DVector<T>) -> Result<DVector<T>, RungeError> {
        let b = trace_boundary_vector(self.outer(), self.trace, g)?;
        let rep = self.outer_solver.solve_boundary(&b)?;
        Ok(DVector::from_fn(self.node_list.len(), |row, _| rep.values[self.node_list[row]]))
    }

    /// Matrix-route application, for cross-checking `apply`.
    pub fn apply_matrix(&self, g: &DVector<T>) -> DVector<T> {
        &self.matrix * g
    }

    /// Full outer solution driven by a trace datum.
    pub fn outer_solution(&self, g: &DVector<T>) -> Result<Vec<T>, RungeError> {
        let b = trace_boundary_vector(self.outer(), self.trace, g)?;
        Ok(self.outer_solver.solve_boundary(&b)?.values)
    }

    /// Restriction of a dense grid field to the inner node list.
    pub fn restrict(&self, field: &[T]) -> DVector<T> {
        DVector::from_fn(self.node_list.len(), |row, _| field[self.node_list[row]])
    }

    /// Lumped inner-region `L²` product on node-list vectors.
    pub fn l2_inner(&self, a: &DVector<T>, b: &DVector<T>) -> T {
        let mut acc = T::zero();
        for (row, &mi) in self.mass.iter().enumerate() {
            acc += mi * a[row] * b[row];
        }
        acc
    }

    pub fn l2_norm(&self, a: &DVector<T>) -> T {
        self.l2_inner(a, a).max(T::zero()).sqrt()
    }

    /// Adjoint through the dual problem: solves
    /// `(-Δ + q) w = ψ·χ_inner` on the outer region with zero boundary
    /// values and returns the negative variational boundary functional of
    /// `w` on the control portion, i.e. the functional coefficients of
    /// `A*ψ`.
    pub fn adjoint_apply(&self, psi: &DVector<T>) -> Result<DVector<T>, RungeError> {
        let outer = self.outer();
        let hn = (0..outer.dim()).fold(T::one(), |acc, _| acc * outer.h());
        let mut source = vec![T::zero(); outer.interior.len()];
        for (row, &id) in self.node_list.iter().enumerate() {
            if let Some(pos) = outer.interior_position(id) {
                // Pointwise source: lumped inner mass divided by the outer
                // cell mass (interior nodes have unit weight).
                source[pos] = self.mass[row] * psi[row] / hn;
            }
        }
        let w = self.outer_solver.solve_source(&source)?;
        let r = boundary_functional(
            outer,
            self.outer_solver.q_nodes(),
            &w.values,
            &self.trace.portion().interior,
        )?;
        Ok(DVector::from_fn(self.trace.len(), |i, _| -r[i]))
    }

    /// Relative interior-equation residual of a candidate target field.
    fn membership_residual(&self, field: &[T]) -> T {
        let h = self.inner.h();
        let inv_h2 = T::one() / (h * h);
        let two_n = lit::<T>(2.0 * self.inner.dim() as f64);
        let mut worst = T::zero();
        let mut scale = T::zero();
        for &id in &self.inner.interior {
            let mut acc = (two_n * inv_h2 + self.inner_q[id]) * field[id];
            scale = scale.max(two_n * inv_h2 * field[id].abs());
            self.inner.edges_at(id, |nb, _| {
                acc -= inv_h2 * field[nb];
            });
            worst = worst.max(acc.abs());
        }
        worst / scale.max(crate::scalar::tiny())
    }

    /// Spectral-truncation approximation of a discrete solution `h` on the
    /// inner region: retains leading singular modes until the predicted
    /// interior error drops below `eps · ‖h‖_{H¹}` and reports the datum
    /// cost. The predicted error is exact for the discrete operator, so the
    /// discrepancy stop needs no extra solves.
    pub fn approximate(&self, field: &[T], eps: T) -> Result<RungeResult<T>, RungeError> {
        assert!(eps > T::zero() && eps < T::one(), "eps must be in (0, 1)");
        let residual = self.membership_residual(field);
        if residual > lit::<T>(1e-6) {
            return Err(RungeError::NotASolution {
                residual: residual.to_f64().unwrap_or(f64::NAN),
            });
        }
        let h_vec = self.restrict(field);
        let target_l2 = self.l2_norm(&h_vec);
        let target_h1 = h1_norm(&self.inner, field);
        if target_l2 == T::zero() {
            return Ok(RungeResult {
                datum: DVector::zeros(self.trace.len()),
                error: T::zero(),
                relative_error: T::zero(),
                cost: T::zero(),
                truncation: 0,
                target_h1,
                target_l2,
            });
        }
        let goal = eps * target_h1;
        let mut err2 = target_l2 * target_l2;
        let mut datum = DVector::zeros(self.trace.len());
        let mut cost2 = T::zero();
        let mut used = 0;
        for (j, &sigma) in self.sigma.iter().enumerate() {
            if err2.max(T::zero()).sqrt() <= goal {
                break;
            }
            let c = self.l2_inner(&h_vec, &self.psi[j]);
            err2 -= c * c;
            datum += &self.phi[j] * (c / sigma);
            cost2 += (c / sigma) * (c / sigma);
            used = j + 1;
        }
        let error = err2.max(T::zero()).sqrt();
        if error > goal {
            return Err(RungeError::TargetUnreachable {
                floor: (error / target_h1).to_f64().unwrap_or(f64::NAN),
                requested: eps.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(RungeResult {
            datum,
            error,
            relative_error: error / target_h1,
            cost: cost2.sqrt(),
            truncation: used,
            target_h1,
            target_l2,
        })
    }

    /// Linear spectral transfer: retains every mode above a fixed relative
    /// cutoff, with no discrepancy stop. Being independent of the target, it
    /// commutes with linear combinations, so smooth combinations of rough
    /// targets are approximated as well as the smooth field itself. Never
    /// fails on unreachable accuracy; the achieved error is reported.
    pub fn approximate_linear(&self, field: &[T], rel_cutoff: T) -> Result<RungeResult<T>, RungeError> {
        let residual = self.membership_residual(field);
        if residual > lit::<T>(1e-6) {
            return Err(RungeError::NotASolution {
                residual: residual.to_f64().unwrap_or(f64::NAN),
            });
        }
        let h_vec = self.restrict(field);
        let target_l2 = self.l2_norm(&h_vec);
        let target_h1 = h1_norm(&self.inner, field);
        let floor = self.sigma.first().copied().unwrap_or_else(T::zero) * rel_cutoff;
        let mut err2 = target_l2 * target_l2;
        let mut datum = DVector::zeros(self.trace.len());
        let mut cost2 = T::zero();
        let mut used = 0;
        for (j, &sigma) in self.sigma.iter().enumerate() {
            if sigma < floor {
                break;
            }
            let c = self.l2_inner(&h_vec, &self.psi[j]);
            err2 -= c * c;
            datum += &self.phi[j] * (c / sigma);
            cost2 += (c / sigma) * (c / sigma);
            used = j + 1;
        }
        let error = err2.max(T::zero()).sqrt();
        Ok(RungeResult {
            datum,
            error,
            relative_error: if target_h1 > T::zero() { error / target_h1 } else { T::zero() },
            cost: cost2.sqrt(),
            truncation: used,
            target_h1,
            target_l2,
        })
    }
}

/// One row of the accuracy/cost frontier.
#[derive(Debug, Clone)]
pub struct FrontierRow {
    pub eps: f64,
    pub error: f64,
    pub cost: f64,
    pub truncation: usize,
    pub reachable: bool,
}

/// Sweeps `approximate` over a list of accuracy targets.
pub fn frontier_sweep<T: Scalar>(
    op: &RestrictionOperator<'_, T>,
    field: &[T],
    eps_list: &[T],
) -> Result<Vec<FrontierRow>, RungeError> {
    let mut rows = Vec::new();
    for &eps in eps_list {
        match op.approximate(field, eps) {
            Ok(res) => rows.push(FrontierRow {
                eps: eps.to_f64().unwrap_or(f64::NAN),
                error: res.relative_error.to_f64().unwrap_or(f64::NAN),
                cost: res.cost.to_f64().unwrap_or(f64::NAN),
                truncation: res.truncation,
                reachable: true,
            }),
            Err(RungeError::TargetUnreachable { floor, requested }) => {
                log::warn!("target {requested:e} unreachable (floor {floor:e})");
                rows.push(FrontierRow {
                    eps: eps.to_f64().unwrap_or(f64::NAN),
                    error: floor,
                    cost: f64::NAN,
                    truncation: 0,
                    reachable: false,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

/// Exponential cost-law fit `log cost = log C + B · eps^(-μ)` with the
/// exponent selected from a grid by maximizing r².
#[derive(Debug, Clone, Copy)]
pub struct CostFit {
    pub mu: f64,
    pub log_prefactor: f64,
    pub rate: f64,
    pub r2: f64,
}

pub fn fit_cost_curve(rows: &[FrontierRow]) -> Option<CostFit> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.reachable && r.cost.is_finite() && r.cost > 0.0)
        .map(|r| (r.eps, r.cost.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let mut best: Option<CostFit> = None;
    let mut mu = 0.05;
    while mu <= 2.0 + 1e-9 {
        let xs: Vec<f64> = pts.iter().map(|(e, _)| e.powf(-mu)).collect();
        let ys: Vec<f64> = pts.iter().map(|(_, c)| *c).collect();
        let (slope, intercept, r2) = linear_fit(&xs, &ys);
        if slope >= 0.0 && best.map(|b| r2 > b.r2).unwrap_or(true) {
            best = Some(CostFit { mu, log_prefactor: intercept, rate: slope, r2 });
        }
        mu += 0.05;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtn::TraceSpace;
    use crate::geometry::{
        build_partition, AlignedBox, FlatPortion, Mesh, PartitionSpec, RegionSpec,
    };
    use std::sync::Arc;

    fn stacked(h: f64) -> Arc<Mesh<f64>> {
        let spec = PartitionSpec {
            dimension: 2,
            boxes: vec![
                AlignedBox::new([0.0, 0.0, 0.0], [1.0, 1.0, 0.0]),
                AlignedBox::new([0.0, 1.0, 0.0], [1.0, 2.0, 0.0]),
            ],
            chain: vec![0, 1],
            portions: vec![
                FlatPortion { anchor: [0.5, 0.0, 0.0], normal_axis: 1, normal_sign: 1, extent: 0.25 },
                FlatPortion { anchor: [0.5, 1.0, 0.0], normal_axis: 1, normal_sign: 1, extent: 0.25 },
            ],
            r0: None,
        };
        Arc::new(build_partition(spec).unwrap().mesh(h).unwrap())
    }

    struct Setup {
        mesh: Arc<Mesh<f64>>,
        inner: Region<f64>,
        outer: Region<f64>,
        q: PiecewiseAffinePotential<f64>,
    }

    fn setup(h: f64) -> Setup {
        let mesh = stacked(h);
        let (_, outer) = mesh.truncated_regions(0).unwrap();
        let (_, inner) = mesh.truncated_regions(1).unwrap();
        let q = PiecewiseAffinePotential::zero(Arc::clone(mesh.partition()));
        Setup { mesh, inner, outer, q }
    }

    fn control_trace(mesh: &Arc<Mesh<f64>>) -> TraceSpace<f64> {
        TraceSpace::build(mesh.portion_grid(1).unwrap()).unwrap()
    }

    fn coordinate_field(mesh: &Arc<Mesh<f64>>) -> Vec<f64> {
        (0..mesh.node_total()).map(|id| mesh.node_point(id)[0]).collect()
    }

    /// Canonical approximable target: the solution on the inner region driven
    /// by a smooth datum on the next portion, vanishing on the boundary part
    /// shared with the outer region.
    fn transfer_target(s: &Setup) -> Vec<f64> {
        let sigma2 = s.mesh.portion_grid(2).unwrap();
        let solver = DirichletSolver::new(s.inner.clone(), &s.q).unwrap();
        let mut g = vec![0.0; s.inner.boundary.len()];
        for &id in &sigma2.interior {
            let x = s.mesh.node_point(id);
            let t = (x[0] - 0.25) / 0.5; // portion-local coordinate in [0, 1]
            g[s.inner.boundary_position(id).unwrap()] = (std::f64::consts::PI * t).sin();
        }
        solver.solve_boundary(&g).unwrap().values
    }

    #[test]
    fn singular_values_decay_exponentially() {
        let s = setup(1.0 / 16.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        let sv = op.singular_values();
        assert!(sv.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        assert!(sv.iter().all(|&x| x > 0.0));
        assert!(sv[0] / sv[sv.len() - 1] > 1e6, "ill-posedness ratio too small");
        // log σ_j is approximately linear in j over the resolved range.
        let usable: Vec<(f64, f64)> = sv
            .iter()
            .enumerate()
            .take_while(|(_, &x)| x > sv[0] * 1e-13)
            .map(|(j, &x)| (j as f64, x.ln()))
            .collect();
        let xs: Vec<f64> = usable.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = usable.iter().map(|p| p.1).collect();
        let (slope, _, r2) = linear_fit(&xs, &ys);
        assert!(slope < 0.0 && r2 > 0.9, "slope {} r2 {}", slope, r2);
    }

    #[test]
    fn zero_datum_gives_zero_interior_values() {
        let s = setup(1.0 / 8.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        let g = DVector::zeros(trace.len());
        let v = op.apply(&g).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn narrower_control_portion_shrinks_every_singular_value() {
        let s = setup(1.0 / 16.0);
        let wide = TraceSpace::build(s.mesh.portion_grid(1).unwrap()).unwrap();
        let narrow_portion = s.mesh.patch_grid(
            0,
            FlatPortion { anchor: [0.5, 0.0, 0.0], normal_axis: 1, normal_sign: 1, extent: 0.125 },
        );
        let narrow = TraceSpace::build(narrow_portion).unwrap();
        let op_wide =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &wide, &s.q).unwrap();
        let op_narrow =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &narrow, &s.q).unwrap();
        let sw = op_wide.singular_values();
        let sn = op_narrow.singular_values();
        for j in 0..sn.len().min(sw.len()) {
            assert!(
                sn[j] <= sw[j] * (1.0 + 1e-9),
                "mode {}: narrow {} vs wide {}",
                j,
                sn[j],
                sw[j]
            );
        }
    }

    #[test]
    fn condition_r_rejects_bad_geometry() {
        let s = setup(1.0 / 8.0);
        // Control portion on the boundary of the inner region itself.
        let sigma2 = TraceSpace::build(s.mesh.portion_grid(2).unwrap()).unwrap();
        let err = RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &sigma2, &s.q);
        assert!(matches!(err, Err(RungeError::ConditionRViolated { .. })));
        // Inner not contained in outer.
        let trace = control_trace(&s.mesh);
        let err = RestrictionOperator::build(s.outer.clone(), s.inner.clone(), &trace, &s.q);
        assert!(matches!(err, Err(RungeError::ConditionRViolated { .. })));
    }

    #[test]
    fn adjoint_trivial_and_consistency() {
        let s = setup(1.0 / 16.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        let zero = DVector::zeros(op.node_list.len());
        let az = op.adjoint_apply(&zero).unwrap();
        assert!(az.iter().all(|&x| x == 0.0));

        let mut state = 4321u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..5 {
            let g = DVector::from_fn(trace.len(), |_, _| next());
            let psi = DVector::from_fn(op.node_list.len(), |_, _| next());
            let ag = op.apply(&g).unwrap();
            let lhs = op.l2_inner(&ag, &psi);
            let astar = op.adjoint_apply(&psi).unwrap();
            let rhs = g.dot(&astar);
            let g_norm = trace.half_norm(&g);
            let psi_norm = op.l2_norm(&psi);
            assert!(
                (lhs - rhs).abs() <= 1e-8 * g_norm * psi_norm,
                "adjoint mismatch {:e} vs scale {:e}",
                (lhs - rhs).abs(),
                g_norm * psi_norm
            );
        }
    }

    #[test]
    fn adjoint_reproduces_singular_relation() {
        let s = setup(1.0 / 16.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        let sv = op.singular_values();
        for j in 0..sv.len() {
            if sv[j] < sv[0] * 1e-6 {
                break;
            }
            let (phi, psi) = op.singular_pair(j);
            let astar = op.adjoint_apply(psi).unwrap();
            // Riesz-lift the functional and compare with σ_j φ_j.
            let lifted = trace.gram_inv() * &astar;
            let diff = &lifted - phi * sv[j];
            let num = diff.dot(&(trace.gram() * &diff)).sqrt();
            assert!(num <= 1e-6 * sv[j], "mode {}: deviation {:e} vs sigma {:e}", j, num, sv[j]);
        }
    }

    #[test]
    fn approximate_zero_target_is_free() {
        let s = setup(1.0 / 8.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        let zero = vec![0.0; s.mesh.node_total()];
        let res = op.approximate(&zero, 0.1).unwrap();
        assert_eq!(res.truncation, 0);
        assert_eq!(res.error, 0.0);
        assert_eq!(res.cost, 0.0);
    }

    #[test]
    fn in_range_targets_are_recovered_cheaply() {
        let s = setup(1.0 / 16.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        let m = trace.len();
        let g0 = DVector::from_fn(m, |i, _| {
            let t = (i + 1) as f64 / (m + 1) as f64;
            (std::f64::consts::PI * t).sin() + 0.3 * (2.0 * std::f64::consts::PI * t).sin()
        });
        let field = op.outer_solution(&g0).unwrap();
        let res = op.approximate(&field, 1e-3).unwrap();
        assert!(res.relative_error <= 1e-3);
        let g0_norm = trace.half_norm(&g0);
        assert!(res.cost <= 1.1 * g0_norm, "cost {} vs ‖g0‖ {}", res.cost, g0_norm);
        // Reconstructed interior error matches the prediction.
        let actual = {
            let u = op.outer_solution(&res.datum).unwrap();
            let diff = DVector::from_fn(op.node_list.len(), |row, _| {
                field[op.node_list[row]] - u[op.node_list[row]]
            });
            op.l2_norm(&diff)
        };
        assert!(
            (actual - res.error).abs() <= 1e-6 * res.target_h1,
            "actual {:e} vs predicted {:e}",
            actual,
            res.error
        );
    }

    #[test]
    fn membership_check_rejects_non_solutions() {
        let s = setup(1.0 / 8.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        let bad: Vec<f64> =
            (0..s.mesh.node_total()).map(|id| s.mesh.node_point(id)[0].powi(2)).collect();
        assert!(matches!(
            op.approximate(&bad, 0.1),
            Err(RungeError::NotASolution { .. })
        ));
    }

    #[test]
    fn frontier_is_monotone_and_fits_exponential_law() {
        let s = setup(1.0 / 32.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        let field = transfer_target(&s);
        let eps = [0.3, 0.1, 0.03, 0.01];
        let rows = frontier_sweep(&op, &field, &eps).unwrap();
        assert!(rows.iter().all(|r| r.reachable), "all targets reachable");
        for w in rows.windows(2) {
            assert!(w[1].cost >= w[0].cost - 1e-12, "cost must not decrease");
            assert!(w[1].error <= w[0].error + 1e-12, "error must not increase");
            assert!(w[1].truncation >= w[0].truncation);
        }
        for r in &rows {
            assert!(r.error <= r.eps * (1.0 + 1e-12));
        }
        let fit = fit_cost_curve(&rows).expect("fit");
        assert!(fit.mu > 0.0 && fit.mu <= 2.0);
        assert!(fit.r2 >= 0.9, "cost-law fit r2 {}", fit.r2);
    }

    #[test]
    fn datum_vanishes_off_the_control_portion() {
        let s = setup(1.0 / 16.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        let field = transfer_target(&s);
        let res = op.approximate(&field, 0.1).unwrap();
        let u = op.outer_solution(&res.datum).unwrap();
        let portion_nodes: std::collections::HashSet<usize> =
            trace.portion().interior.iter().copied().collect();
        for &id in &s.outer.boundary {
            if !portion_nodes.contains(&id) {
                assert_eq!(u[id], 0.0, "datum must vanish outside the portion");
            }
        }
    }

    #[test]
    fn unreachable_targets_are_reported() {
        let s = setup(1.0 / 16.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        // Tiny targets are below the finite-rank resolution even for
        // approximable fields.
        let field = transfer_target(&s);
        match op.approximate(&field, 1e-13) {
            Err(RungeError::TargetUnreachable { floor, requested }) => {
                assert!(floor > requested);
            }
            other => panic!("expected unreachable target, got {:?}", other.map(|r| r.truncation)),
        }
    }

    #[test]
    fn shared_boundary_obstruction_floor() {
        // Targets that do not vanish on the boundary part shared by the
        // inner and outer regions are not approximable: the dual problem has
        // kernel elements there. The coordinate function is the canonical
        // example; its best-approximation floor is a fixed fraction of the
        // H¹ norm, independent of the requested accuracy.
        let s = setup(1.0 / 16.0);
        let trace = control_trace(&s.mesh);
        let op =
            RestrictionOperator::build(s.inner.clone(), s.outer.clone(), &trace, &s.q).unwrap();
        let field = coordinate_field(&s.mesh);
        match op.approximate(&field, 0.25) {
            Err(RungeError::TargetUnreachable { floor, .. }) => {
                assert!(floor > 0.3 && floor < 0.5, "structural floor ~0.39, got {floor}");
            }
            other => panic!(
                "coordinate target should sit above the floor, got {:?}",
                other.map(|r| r.relative_error)
            ),
        }
    }
}
