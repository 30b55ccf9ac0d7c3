//! Recovery of the affine potential difference on each chain portion from
//! boundary data, and the peeling driver that propagates the difference
//! information inward along the chain.
//!
//! Pointwise values of `q₁ - q₂` near a portion are estimated by pairing the
//! DtN difference against concentrated bump traces: the boundary-interior
//! identity turns the pairing into a weighted interior average of the
//! difference, whose effective depth shrinks with the bump width. The width
//! ladder is extrapolated to depth zero, which is exact for affine
//! differences up to the mass leaking out of the concentration cell.

mod peel;
mod stability;

pub use peel::{
    peel, peel_iterate, propagate_dtn, EpsSchedule, FittedConstants, IterationReport,
    PairingData, PeelInputs, PeelReport, PropagationReport, StepBranch, StepReport,
};
pub use stability::{perturb_dtn, sample_potential, stability_experiment, PairRow, StabilityReport};

use nalgebra::DVector;
use thiserror::Error;

use crate::dtn::{trace_boundary_vector, DtnError, TraceSpace};
use crate::geometry::{GeometryError, Region};
use crate::pde::{DirichletSolver, PdeError};
use crate::potential::PotentialError;
use crate::runge::RungeError;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Error)]
pub enum RecoverError {
    #[error("probe point {distance:.4} from the anchor exceeds the window {window:.4}")]
    ProbeOutsideWindow { distance: f64, window: f64 },
    #[error("width-ladder extrapolation unstable: {why}")]
    ExtrapolationUnstable { why: String },
    #[error("spectral margin {margin:e} below threshold {threshold:e} on {region}")]
    SpectralFailure { margin: f64, threshold: f64, region: String },
    #[error("inconsistent inputs: {why}")]
    DataMismatch { why: String },
    #[error(transparent)]
    Dtn(#[from] DtnError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Runge(#[from] RungeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

/// Probe geometry parameters, derived from the partition scale `r0`.
#[derive(Debug, Clone)]
pub struct ProbeConfig<T> {
    /// Bump half-widths, largest first.
    pub widths: Vec<T>,
    /// Tangential offset of the secondary sample points.
    pub tangential_offset: T,
    /// Validity window around the anchor for pointwise estimates.
    pub window: T,
    /// Minimum bump half-width in units of `h`.
    pub min_width_cells: f64,
}

impl<T: Scalar> ProbeConfig<T> {
    pub fn from_scale(r0: T) -> Self {
        Self {
            widths: vec![r0 / lit::<T>(8.0), r0 / lit::<T>(16.0), r0 / lit::<T>(32.0)],
            tangential_offset: r0 / lit::<T>(5.0),
            window: r0 / lit::<T>(4.0),
            min_width_cells: 3.0,
        }
    }
}

/// One bump measurement: the cell-normalized pairing value, the effective
/// depth of the probing mass below the portion, and the full centroid of the
/// probing density inside the concentration cell.
#[derive(Debug, Clone, Copy)]
pub struct ProbeSample<T> {
    pub width: T,
    pub value: T,
    pub depth: T,
    pub centroid: [T; 3],
    /// Probing mass inside the concentration cell.
    pub normalizer: T,
    /// Probing mass over the whole region; the cell fraction measures how
    /// selectively this probe sees the cell.
    pub total_mass: T,
}

/// Concentrated-bump probe attached to one portion of the chain: pairs the
/// supplied DtN difference data with bump traces and normalizes by the
/// interior concentration of the reference solutions.
pub struct BoundaryProbe<'a, T: Scalar> {
    region: &'a Region<T>,
    trace: &'a TraceSpace<T>,
    pairing: &'a PairingData<T>,
    /// Solver for the current estimate of the first potential.
    solver_est: &'a DirichletSolver<T>,
    /// Solver for the reference potential.
    solver_ref: &'a DirichletSolver<T>,
    /// Concentration cell: the subdomain where the probed affine piece
    /// lives. Defaults to the subdomain behind the probe's portion.
    cell: Region<T>,
    /// Nodal values of the already-recovered difference away from the cell;
    /// its pairing contribution is subtracted before normalizing.
    background: Option<Vec<T>>,
    config: ProbeConfig<T>,
}

impl<'a, T: Scalar> BoundaryProbe<'a, T> {
    pub fn new(
        region: &'a Region<T>,
        trace: &'a TraceSpace<T>,
        pairing: &'a PairingData<T>,
        solver_est: &'a DirichletSolver<T>,
        solver_ref: &'a DirichletSolver<T>,
        config: ProbeConfig<T>,
    ) -> Result<Self, RecoverError> {
        let pos = trace.portion().chain_pos;
        let j = if pos >= 1 {
            region.mesh().partition().chain[pos - 1]
        } else {
            return Err(RecoverError::DataMismatch {
                why: "probe portion is not part of the chain".into(),
            });
        };
        Self::with_cell(region, trace, pairing, solver_est, solver_ref, config, j, None)
    }

    /// Probe aimed at an arbitrary subdomain, optionally subtracting a known
    /// difference supported away from it.
    #[allow(clippy::too_many_arguments)]
    pub fn with_cell(
        region: &'a Region<T>,
        trace: &'a TraceSpace<T>,
        pairing: &'a PairingData<T>,
        solver_est: &'a DirichletSolver<T>,
        solver_ref: &'a DirichletSolver<T>,
        config: ProbeConfig<T>,
        cell_subdomain: usize,
        background: Option<&PiecewiseAffinePotential<T>>,
    ) -> Result<Self, RecoverError> {
        if pairing.dim() != trace.len() {
            return Err(RecoverError::DataMismatch {
                why: format!(
                    "pairing data dimension {} vs trace space {}",
                    pairing.dim(),
                    trace.len()
                ),
            });
        }
        let mesh = region.mesh();
        let cell = mesh.region(crate::geometry::RegionSpec::Subdomain(cell_subdomain))?;
        let background = background.map(|bg| {
            // Zero out the probed piece so only foreign contributions are
            // subtracted.
            let masked = bg.scaled(T::one()).add_piece(
                cell_subdomain,
                -bg.piece(cell_subdomain).0,
                [
                    -bg.piece(cell_subdomain).1[0],
                    -bg.piece(cell_subdomain).1[1],
                    -bg.piece(cell_subdomain).1[2],
                ],
            );
            masked.nodal_values(region)
        });
        Ok(Self { region, trace, pairing, solver_est, solver_ref, cell, background, config })
    }

    pub fn config(&self) -> &ProbeConfig<T> {
        &self.config
    }

    /// Bump half-widths usable at the current resolution.
    fn usable_widths(&self) -> Vec<T> {
        let min = self.region.h() * lit::<T>(self.config.min_width_cells - 1e-9);
        self.config.widths.iter().copied().filter(|&w| w >= min).collect()
    }

    /// Normalized bump trace centered at `center` (a point on the portion
    /// hyperplane) with half-width `width`.
    fn bump(&self, center: &[T; 3], width: T) -> Result<DVector<T>, RecoverError> {
        let portion = self.trace.portion();
        let mesh = self.region.mesh();
        let half_pi = lit::<T>(std::f64::consts::FRAC_PI_2);
        let mut g = DVector::zeros(self.trace.len());
        for (i, &node) in portion.interior.iter().enumerate() {
            let x = mesh.node_point(node);
            let mut v = T::one();
            for &t in &portion.tan_axes {
                let s = (x[t] - center[t]) / width;
                if s.abs() >= T::one() {
                    v = T::zero();
                    break;
                }
                let c = (half_pi * s).cos();
                v *= c * c;
            }
            g[i] = v;
        }
        let norm = self.trace.l2_norm(&g);
        if !(norm > T::zero()) {
            return Err(RecoverError::ExtrapolationUnstable {
                why: "bump support misses every portion node".into(),
            });
        }
        Ok(g / norm)
    }

    /// Single-width probe measurement at `center`.
    pub fn sample(&self, center: &[T; 3], width: T) -> Result<ProbeSample<T>, RecoverError> {
        let g = self.bump(center, width)?;
        let mut value_raw = self.pairing.value(&g, &g);
        let b = trace_boundary_vector(self.region, self.trace, &g)?;
        let u_est = self.solver_est.solve_boundary(&b)?.values;
        let u_ref = self.solver_ref.solve_boundary(&b)?.values;

        let portion = self.trace.portion();
        let nu = portion.portion.normal();
        let axis = portion.portion.normal_axis;
        let dim = self.region.dim();
        let mesh = self.region.mesh();
        let hn = (0..dim).fold(T::one(), |acc, _| acc * self.region.h());
        let mut mass = T::zero();
        let mut moment = T::zero();
        let mut centroid = [T::zero(); 3];
        let mut total_mass = T::zero();
        for id in 0..mesh.node_total() {
            let w_region = self.region.weight(id);
            if w_region == T::zero() {
                continue;
            }
            let rho_region = w_region * hn * u_est[id] * u_ref[id];
            total_mass += rho_region;
            if let Some(bg) = &self.background {
                value_raw -= bg[id] * rho_region;
            }
            let w = self.cell.weight(id);
            if w == T::zero() {
                continue;
            }
            let x = mesh.node_point(id);
            let rho = w * hn * u_est[id] * u_ref[id];
            mass += rho;
            moment += rho * (x[axis] - center[axis]) * nu[axis];
            for (c, acc) in centroid.iter_mut().enumerate().take(dim) {
                *acc += rho * x[c];
            }
        }
        if !(mass > T::zero()) {
            return Err(RecoverError::ExtrapolationUnstable {
                why: "probe mass vanishes in the concentration cell".into(),
            });
        }
        for c in centroid.iter_mut().take(dim) {
            *c /= mass;
        }
        Ok(ProbeSample {
            width,
            value: value_raw / mass,
            depth: moment / mass,
            centroid,
            normalizer: mass,
            total_mass,
        })
    }

    /// Width-ladder samples at `center`, widest first.
    pub fn ladder(&self, center: &[T; 3]) -> Result<Vec<ProbeSample<T>>, RecoverError> {
        let widths = self.usable_widths();
        if widths.len() < 2 {
            return Err(RecoverError::ExtrapolationUnstable {
                why: format!(
                    "only {} usable bump widths at h = {}; refine the mesh",
                    widths.len(),
                    self.region.h()
                ),
            });
        }
        widths.into_iter().map(|w| self.sample(center, w)).collect()
    }

    fn check_window(&self, point: &[T; 3]) -> Result<(), RecoverError> {
        let portion = self.trace.portion();
        let anchor = portion.portion.anchor;
        let dim = self.region.dim();
        let mut dist2 = T::zero();
        for a in 0..dim {
            let d = point[a] - anchor[a];
            if a == portion.portion.normal_axis && d.abs() > lit::<T>(1e-12) {
                return Err(RecoverError::ProbeOutsideWindow {
                    distance: d.abs().to_f64().unwrap_or(f64::NAN),
                    window: 0.0,
                });
            }
            dist2 += d * d;
        }
        let dist = dist2.sqrt();
        if dist > self.config.window * (T::one() + lit::<T>(1e-9)) {
            return Err(RecoverError::ProbeOutsideWindow {
                distance: dist.to_f64().unwrap_or(f64::NAN),
                window: self.config.window.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }
}

/// Extrapolates ladder samples to depth zero. Exact for values affine in the
/// probing depth; the ladder is checked for internal consistency first.
fn extrapolate_to_surface<T: Scalar>(samples: &[ProbeSample<T>]) -> Result<T, RecoverError> {
    assert!(samples.len() >= 2);
    let mut extrapolants = Vec::new();
    for pair in samples.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let dd = a.depth - b.depth;
        if dd.abs() < lit::<T>(1e-3) * a.width {
            return Err(RecoverError::ExtrapolationUnstable {
                why: "probe depths nearly coincide".into(),
            });
        }
        extrapolants.push((a.value * b.depth - b.value * a.depth) / (b.depth - a.depth));
    }
    if extrapolants.len() > 1 {
        let max = extrapolants.iter().copied().fold(extrapolants[0], T::max);
        let min = extrapolants.iter().copied().fold(extrapolants[0], T::min);
        let scale = samples
            .iter()
            .map(|s| s.value.abs())
            .fold(T::zero(), T::max)
            .max(crate::scalar::tiny());
        if max - min > lit::<T>(0.5) * scale {
            return Err(RecoverError::ExtrapolationUnstable {
                why: format!(
                    "ladder extrapolants spread {:e} against scale {:e}",
                    (max - min).to_f64().unwrap_or(f64::NAN),
                    scale.to_f64().unwrap_or(f64::NAN)
                ),
            });
        }
    }
    // The narrowest pair probes closest to the surface.
    Ok(*extrapolants.last().unwrap())
}

/// Pointwise estimate of `(q₁ - q₂)(point)` for a point on the portion
/// within the trusted window around the anchor.
pub fn estimate_pointwise_difference<T: Scalar>(
    probe: &BoundaryProbe<'_, T>,
    point: &[T; 3],
) -> Result<T, RecoverError> {
    probe.check_window(point)?;
    let samples = probe.ladder(point)?;
    extrapolate_to_surface(&samples)
}

/// Normal-derivative estimate at the anchor: the slope of the raw ladder
/// values against their measured concentration depths, using the widest and
/// narrowest interior-concentrated probes.
pub fn estimate_normal_derivative<T: Scalar>(
    probe: &BoundaryProbe<'_, T>,
) -> Result<T, RecoverError> {
    let anchor = probe.trace.portion().portion.anchor;
    let samples = probe.ladder(&anchor)?;
    let a = samples.first().unwrap();
    let b = samples.last().unwrap();
    let dd = a.depth - b.depth;
    if dd.abs() < lit::<T>(1e-3) * a.width {
        return Err(RecoverError::ExtrapolationUnstable {
            why: "probe depths nearly coincide for the normal derivative".into(),
        });
    }
    Ok((a.value - b.value) / dd)
}

/// Affine coefficients from exact sample values: the tangential components
/// from difference quotients at the offset points, the normal component from
/// the normal-derivative estimate, and the offset from the anchor value.
#[allow(clippy::too_many_arguments)]
pub fn affine_from_samples<T: Scalar>(
    dim: usize,
    anchor: &[T; 3],
    tangent_axes: &[usize],
    offset: T,
    anchor_value: T,
    tangent_values: &[T],
    normal_axis: usize,
    normal_sign: i8,
    normal_slope: T,
) -> (T, [T; 3]) {
    let mut beta = [T::zero(); 3];
    for (i, &t) in tangent_axes.iter().enumerate() {
        beta[t] = (tangent_values[i] - anchor_value) / offset;
    }
    beta[normal_axis] =
        if normal_sign >= 0 { normal_slope } else { -normal_slope };
    let mut alpha = anchor_value;
    for c in 0..dim {
        alpha -= beta[c] * anchor[c];
    }
    (alpha, beta)
}

/// Affine estimate of the potential difference on the subdomain behind one
/// portion, with the probe diagnostics that produced it.
#[derive(Debug, Clone)]
pub struct AffineEstimate<T> {
    pub alpha: T,
    pub beta: [T; 3],
    /// Extrapolated pointwise values at the anchor and offset points.
    pub point_values: Vec<T>,
    pub normal_slope: T,
    /// Largest ladder spread observed, as an instability diagnostic.
    pub ladder_spread: T,
    pub confident: bool,
}

impl<T: Scalar> AffineEstimate<T> {
    pub fn eval(&self, x: &[T; 3], dim: usize) -> T {
        (0..dim).fold(self.alpha, |acc, c| acc + self.beta[c] * x[c])
    }
}

/// Recovers the affine difference behind the probe's portion: pointwise
/// estimates at the anchor and at the tangentially offset sample points,
/// the normal slope from interior-concentrated probes, then exact linear
/// algebra.
pub fn recover_affine<T: Scalar>(
    probe: &BoundaryProbe<'_, T>,
) -> Result<AffineEstimate<T>, RecoverError> {
    let portion = probe.trace.portion();
    let anchor = portion.portion.anchor;
    let dim = probe.region.dim();
    let offset = probe.config.tangential_offset;

    let anchor_samples = probe.ladder(&anchor)?;
    let v0 = extrapolate_to_surface(&anchor_samples)?;
    let mut spread = ladder_spread(&anchor_samples);
    let mut tangent_values = Vec::new();
    for &t in &portion.tan_axes {
        let mut center = anchor;
        center[t] += offset;
        let samples = probe.ladder(&center)?;
        spread = spread.max(ladder_spread(&samples));
        tangent_values.push(extrapolate_to_surface(&samples)?);
    }
    let slope = {
        let a = anchor_samples.first().unwrap();
        let b = anchor_samples.last().unwrap();
        (a.value - b.value) / (a.depth - b.depth)
    };
    let (alpha, beta) = affine_from_samples(
        dim,
        &anchor,
        &portion.tan_axes,
        offset,
        v0,
        &tangent_values,
        portion.portion.normal_axis,
        portion.portion.normal_sign,
        slope,
    );
    let mut point_values = vec![v0];
    point_values.extend_from_slice(&tangent_values);
    Ok(AffineEstimate {
        alpha,
        beta,
        point_values,
        normal_slope: slope,
        ladder_spread: spread,
        confident: true,
    })
}

fn ladder_spread<T: Scalar>(samples: &[ProbeSample<T>]) -> T {
    let max = samples.iter().map(|s| s.value).fold(samples[0].value, T::max);
    let min = samples.iter().map(|s| s.value).fold(samples[0].value, T::min);
    max - min
}

/// Right side of the one-step gap propagation estimate
/// `C e^{C ε^{-μ}} (δ + E) (δ / (δ + E))^η + C ε E`, evaluated with fitted
/// constants. Monotone increasing in `δ` for fixed `E`, `ε`.
pub fn runge_bdry_bound<T: Scalar>(
    delta: T,
    e_norm: T,
    eps: T,
    constants: &FittedConstants,
) -> T {
    if delta <= T::zero() {
        return lit::<T>(constants.c) * eps * e_norm;
    }
    let c = lit::<T>(constants.c);
    let amp = (c * eps.powf(-lit::<T>(constants.mu))).min(lit::<T>(700.0)).exp() * c;
    let ratio = delta / (delta + e_norm);
    amp * (delta + e_norm) * ratio.powf(lit::<T>(constants.eta)) + c * eps * e_norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_from_samples_examples() {
        // Forced linear algebra: v(P)=1 at P=(0,0), v(P+0.2 e1)=1.4, slope 3.
        let (alpha, beta) = affine_from_samples::<f64>(
            2,
            &[0.0, 0.0, 0.0],
            &[0],
            0.2,
            1.0,
            &[1.4],
            1,
            1,
            3.0,
        );
        assert!((alpha - 1.0).abs() < 1e-15);
        assert!((beta[0] - 2.0).abs() < 1e-15);
        assert!((beta[1] - 3.0).abs() < 1e-15);

        let (alpha, beta) =
            affine_from_samples::<f64>(2, &[0.5, 1.0, 0.0], &[0], 0.15, 0.0, &[0.0], 1, -1, 0.0);
        assert_eq!(alpha, 0.0);
        assert_eq!(beta, [0.0; 3]);
    }

    #[test]
    fn affine_from_samples_is_exact_for_random_affine_fields() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..50 {
            let alpha = next();
            let beta = [next(), next(), 0.0];
            let anchor = [0.3, 1.0, 0.0];
            let offset = 0.15;
            let f = |x: &[f64; 3]| alpha + beta[0] * x[0] + beta[1] * x[1];
            let v0 = f(&anchor);
            let vt = f(&[anchor[0] + offset, anchor[1], 0.0]);
            // Normal points along -e2 here.
            let (a, b) = affine_from_samples(
                2,
                &anchor,
                &[0],
                offset,
                v0,
                &[vt],
                1,
                -1,
                -beta[1],
            );
            assert!((a - alpha).abs() <= 1e-12 * (1.0 + alpha.abs()));
            assert!((b[0] - beta[0]).abs() <= 1e-12);
            assert!((b[1] - beta[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn surface_extrapolation_is_exact_for_affine_ladders() {
        let samples: Vec<ProbeSample<f64>> = vec![
            ProbeSample { width: 0.125, value: 2.0 + 3.0 * 0.05, depth: 0.05, normalizer: 1.0 },
            ProbeSample { width: 0.0625, value: 2.0 + 3.0 * 0.025, depth: 0.025, normalizer: 1.0 },
            ProbeSample { width: 0.03125, value: 2.0 + 3.0 * 0.0125, depth: 0.0125, normalizer: 1.0 },
        ];
        let v = extrapolate_to_surface(&samples).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn inconsistent_ladders_are_flagged() {
        let samples: Vec<ProbeSample<f64>> = vec![
            ProbeSample { width: 0.125, value: 1.0, depth: 0.05, normalizer: 1.0 },
            ProbeSample { width: 0.0625, value: 5.0, depth: 0.025, normalizer: 1.0 },
            ProbeSample { width: 0.03125, value: -4.0, depth: 0.0125, normalizer: 1.0 },
        ];
        assert!(matches!(
            extrapolate_to_surface(&samples),
            Err(RecoverError::ExtrapolationUnstable { .. })
        ));
    }

    #[test]
    fn bound_formula_cases() {
        let constants = FittedConstants { c: 2.0, mu: 0.5, eta: 0.5 };
        // Zero gap leaves only the absorption term.
        let b0 = runge_bdry_bound::<f64>(0.0, 1.0, 0.05, &constants);
        assert!((b0 - 2.0 * 0.05).abs() < 1e-12);
        // Monotone in the gap.
        let mut prev = b0;
        for &d in &[1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let b = runge_bdry_bound::<f64>(d, 1.0, 0.05, &constants);
            assert!(b >= prev);
            prev = b;
        }
    }
}
