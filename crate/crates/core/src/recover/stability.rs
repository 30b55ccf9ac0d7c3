//! Empirical stability experiment: sample admissible potential pairs,
//! measure the sup-norm of their difference against the dual-norm gap of
//! their first-portion DtN maps, and report the worst ratio as the empirical
//! stability constant of the scenario.

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::RecoverError;
use crate::dtn::{assemble_dtn, DtnError, DtnMatrix, TraceSpace};
use crate::geometry::{DomainPartition, Mesh, RegionSpec};
use crate::potential::PiecewiseAffinePotential;
use crate::scalar::{lit, Scalar};

/// One sampled pair of the experiment.
#[derive(Debug, Clone)]
pub struct PairRow {
    pub id: usize,
    pub e: f64,
    pub delta: f64,
    pub ratio: f64,
    pub accepted: bool,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub rows: Vec<PairRow>,
    pub max_ratio: f64,
    pub accepted: usize,
    pub rejected: usize,
}

/// Draws one admissible potential: coefficients uniform in
/// `± E₀ / (1 + diam Ω)` per component, redrawn (rarely) until the sup-norm
/// bound holds.
pub fn sample_potential<T: Scalar>(
    partition: &Arc<DomainPartition<T>>,
    e0: T,
    rng: &mut ChaCha12Rng,
) -> PiecewiseAffinePotential<T> {
    let dim = partition.dimension;
    let diam = partition.bounding_box().diameter(dim).to_f64().unwrap_or(1.0);
    let amp = e0.to_f64().unwrap_or(1.0) / (1.0 + diam);
    let dist = Uniform::new_inclusive(-amp, amp);
    for _ in 0..64 {
        let coeffs: Vec<(T, [T; 3])> = (0..partition.subdomains.len())
            .map(|_| {
                let a = lit::<T>(dist.sample(rng));
                let mut g = [T::zero(); 3];
                for c in g.iter_mut().take(dim) {
                    *c = lit::<T>(dist.sample(rng));
                }
                (a, g)
            })
            .collect();
        if let Ok(q) = PiecewiseAffinePotential::new(Arc::clone(partition), coeffs, Some(e0)) {
            return q;
        }
    }
    // The amplitude rule makes rejection essentially impossible; fall back
    // to the zero potential rather than loop forever.
    PiecewiseAffinePotential::zero(Arc::clone(partition))
}

/// Symmetric relative perturbation of a DtN matrix, seeded.
pub fn perturb_dtn<T: Scalar>(matrix: &mut DtnMatrix<T>, rel: f64, seed: u64) {
    if rel == 0.0 {
        return;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-rel, rel);
    let scale = matrix.entries.abs().max();
    let n = matrix.dim();
    for i in 0..n {
        for j in 0..=i {
            let noise = scale * lit::<T>(dist.sample(&mut rng));
            matrix.entries[(i, j)] += noise;
            if i != j {
                matrix.entries[(j, i)] += noise;
            }
        }
    }
}

/// Runs the sampled-pair experiment on the first portion of the scenario.
///
/// Pairs whose difference is numerically zero are excluded from the ratio
/// (degenerate 0/0); pairs failing a spectral check are rejected and logged.
/// Rows are deterministic for a fixed seed regardless. of the worker count.
pub fn stability_experiment<T: Scalar>(
    mesh: &Arc<Mesh<T>>,
    e0: T,
    pairs: usize,
    seed: u64,
    jobs: usize,
    noise: f64,
) -> Result<StabilityReport, RecoverError> {
    let (_, omega) = mesh.truncated_regions(0)?;
    let trace = TraceSpace::build(mesh.portion_grid(1)?)?;
    let partition = mesh.partition();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let samples: Vec<(PiecewiseAffinePotential<T>, PiecewiseAffinePotential<T>)> = (0..pairs)
        .map(|_| {
            (sample_potential(partition, e0, &mut rng), sample_potential(partition, e0, &mut rng))
        })
        .collect();

    let run_pair = |(id, (q1, q2)): (usize, &(PiecewiseAffinePotential<T>, PiecewiseAffinePotential<T>))| -> PairRow {
        let e = q1
            .difference(q2)
            .sup_norm(RegionSpec::Omega)
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .unwrap_or(f64::NAN);
        if e <= 1e-12 * e0.to_f64().unwrap_or(1.0) {
            return PairRow {
                id,
                e,
                delta: 0.0,
                ratio: f64::NAN,
                accepted: false,
                note: "degenerate: potentials coincide".into(),
            };
        }
        let assemble = |q: &PiecewiseAffinePotential<T>, tag: u64| -> Result<DtnMatrix<T>, DtnError> {
            let mut m = assemble_dtn(&omega, q, &trace)?;
            if noise > 0.0 {
                perturb_dtn(&mut m, noise, seed ^ (id as u64) << 8 ^ tag);
            }
            Ok(m)
        };
        match (assemble(q1, 1), assemble(q2, 2)) {
            (Ok(l1), Ok(l2)) => {
                let delta = crate::dtn::dtn_gap(&l1, &l2, &trace)
                    .map(|v| v.to_f64().unwrap_or(f64::NAN))
                    .unwrap_or(f64::NAN);
                PairRow { id, e, delta, ratio: e / delta, accepted: true, note: String::new() }
            }
            (Err(err), _) | (_, Err(err)) => {
                log::warn!("pair {}: rejected ({})", id, err);
                PairRow {
                    id,
                    e,
                    delta: f64::NAN,
                    ratio: f64::NAN,
                    accepted: false,
                    note: format!("rejected: {}", err),
                }
            }
        }
    };

    let rows: Vec<PairRow> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| RecoverError::DataMismatch { why: format!("thread pool: {}", e) })?;
        pool.install(|| {
            use rayon::prelude::*;
            samples.par_iter().enumerate().map(run_pair).collect()
        })
    } else {
        samples.iter().enumerate().map(run_pair).collect()
    };

    let accepted = rows.iter().filter(|r| r.accepted).count();
    let max_ratio = rows
        .iter()
        .filter(|r| r.accepted && r.ratio.is_finite())
        .map(|r| r.ratio)
        .fold(0.0, f64::max);
    Ok(StabilityReport { rejected: rows.len() - accepted, accepted, rows, max_ratio })
}
