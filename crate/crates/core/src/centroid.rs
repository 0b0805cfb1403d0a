//! The centroid probe: centroid matrices, rank-90 trajectories, directional
//! sensitivity, and coupling ratios against random baselines.
//!
//! The sensitivity of a unit attention direction `v` at parameters θ is the
//! probe-averaged squared norm of the central-difference centroid response:
//!
//! ```text
//! A(v) = mean_x ‖(μ_x(θ + εv) − μ_x(θ − εv)) / 2ε‖²,   ε = eps_rel · ‖θ_attn‖
//! ```
//!
//! with the perturbation applied to the attention slice only. The coupling
//! ratio `R_k = A(v_k) / median_j A(r_j)` compares each basis direction
//! against 20 random Gaussian unit directions drawn fresh per checkpoint.

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::{OpKind, ProbeSet};
use crate::linalg;
use crate::model::{Model, ParamVector};
use crate::rng::RngStream;
use crate::{Error, Result};

pub const DEFAULT_EPS_REL: f64 = 0.005;
pub const DEFAULT_N_RANDOM: usize = 20;
pub const RANK90_FRACTION: f64 = 0.9;

/// Per-probe centroids at one checkpoint: `|X| × 2·d_model`.
pub struct CentroidMatrix {
    pub c: Array2<f64>,
    pub step: u64,
    pub op: OpKind,
}

pub fn centroid_matrix(
    model: &Model,
    params: &ParamVector,
    probes: &ProbeSet,
    op: OpKind,
    head: usize,
    step: u64,
) -> Result<CentroidMatrix> {
    let labels = probes.labels(op, model.arch.vocab as u32);
    let c = model.centroids(params, &probes.pairs, &labels, head)?;
    Ok(CentroidMatrix { c, step, op })
}

/// rank-90: smallest r whose top-r squared singular values capture 90% of
/// the centroid matrix's energy.
pub fn rank90(c: &CentroidMatrix) -> Result<usize> {
    let svals = linalg::singular_values(&c.c)?;
    Ok(linalg::rank_at_energy(&svals, RANK90_FRACTION)?)
}

/// Directional sensitivity A(v); `direction` must be unit-norm over the
/// attention slice.
pub fn sensitivity(
    model: &Model,
    params: &ParamVector,
    direction: &[f64],
    eps_rel: f64,
    probes: &ProbeSet,
    labels: &[u8],
    head: usize,
) -> Result<f64> {
    let attn_norm = model.layout.attention_norm(params);
    if attn_norm == 0.0 {
        return Err(Error::Analysis("zero attention norm".into()));
    }
    let eps = eps_rel * attn_norm;
    let plus = model.layout.perturbed_along_attention(params, direction, eps);
    let minus = model
        .layout
        .perturbed_along_attention(params, direction, -eps);
    let c_plus = model.centroids(&plus, &probes.pairs, labels, head)?;
    let c_minus = model.centroids(&minus, &probes.pairs, labels, head)?;
    let inv_2eps = 1.0 / (2.0 * eps);
    let n = probes.len();
    let mut total = 0.0;
    for i in 0..n {
        let rp = c_plus.row(i);
        let rm = c_minus.row(i);
        let mut s = 0.0;
        for (a, b) in rp.iter().zip(rm.iter()) {
            let d = (a - b) * inv_2eps;
            s += d * d;
        }
        total += s;
    }
    let a = total / n as f64;
    if !a.is_finite() {
        return Err(Error::Analysis("non-finite sensitivity".into()));
    }
    Ok(a)
}

/// Median convention: even counts average the two middle order statistics
/// (n = 20 → mean of the 10th and 11th).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Sensitivities along `n_random` fresh Gaussian unit directions for this
/// checkpoint; direction j comes from stream
/// `(master_seed, "rand-dirs", step, j)`, so parallel order cannot change
/// the draws.
pub fn random_baseline(
    model: &Model,
    params: &ParamVector,
    probes: &ProbeSet,
    labels: &[u8],
    head: usize,
    eps_rel: f64,
    n_random: usize,
    master_seed: u64,
    step: u64,
) -> Result<Vec<f64>> {
    (0..n_random)
        .into_par_iter()
        .map(|j| {
            let mut rng =
                RngStream::derive_indexed(master_seed, "rand-dirs", &[step, j as u64]);
            let dir = linalg::random_unit_vector(model.layout.attn_len(), &mut rng);
            sensitivity(model, params, &dir, eps_rel, probes, labels, head)
        })
        .collect()
}

/// One checkpoint's coupling diagnostics for one basis.
#[derive(Debug, Clone)]
pub struct CouplingReport {
    pub step: u64,
    pub op: OpKind,
    pub estimator: String,
    pub window: usize,
    pub k: usize,
    pub eps_rel: f64,
    /// A(v_k) for each basis direction.
    pub a_dirs: Vec<f64>,
    /// R_k = A(v_k) / median_j A(r_j).
    pub r: Vec<f64>,
    /// Mean of the top-K coupling ratios.
    pub rbar: f64,
    pub a_rand: Vec<f64>,
    pub a_rand_median: f64,
    pub rank90: usize,
    pub grok_step: Option<u64>,
}

impl CouplingReport {
    pub fn r_or_nan(&self, i: usize) -> f64 {
        self.r.get(i).copied().unwrap_or(f64::NAN)
    }

    pub fn a_or_nan(&self, i: usize) -> f64 {
        self.a_dirs.get(i).copied().unwrap_or(f64::NAN)
    }
}

/// Compute A for every basis direction plus the random baseline and assemble
/// the report. `baseline` may be precomputed (it is shared between estimators
/// analyzed at the same checkpoint); pass `None` to draw it here.
#[allow(clippy::too_many_arguments)]
pub fn coupling_ratio(
    model: &Model,
    params: &ParamVector,
    basis: &crate::seddiag::SedBasis,
    probes: &ProbeSet,
    op: OpKind,
    head: usize,
    eps_rel: f64,
    n_random: usize,
    master_seed: u64,
    rank90_value: usize,
    baseline: Option<Vec<f64>>,
) -> Result<CouplingReport> {
    if basis.k() == 0 {
        return Err(Error::Analysis("degenerate basis".into()));
    }
    let labels = probes.labels(op, model.arch.vocab as u32);
    let a_rand = match baseline {
        Some(b) => b,
        None => random_baseline(
            model,
            params,
            probes,
            &labels,
            head,
            eps_rel,
            n_random,
            master_seed,
            basis.step,
        )?,
    };
    let a_rand_median = median(&a_rand);
    if a_rand_median <= 0.0 {
        return Err(Error::Analysis("degenerate random baseline".into()));
    }
    let a_dirs: Vec<f64> = (0..basis.k())
        .into_par_iter()
        .map(|i| {
            sensitivity(
                model,
                params,
                basis.directions.row(i).as_slice().unwrap(),
                eps_rel,
                probes,
                &labels,
                head,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    let r: Vec<f64> = a_dirs.iter().map(|a| a / a_rand_median).collect();
    let rbar = r.iter().sum::<f64>() / r.len() as f64;
    Ok(CouplingReport {
        step: basis.step,
        op,
        estimator: basis.kind.name(),
        window: basis.window,
        k: basis.k(),
        eps_rel,
        a_dirs,
        r,
        rbar,
        a_rand,
        a_rand_median,
        rank90: rank90_value,
        grok_step: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn setup() -> (Model, ParamVector, ProbeSet) {
        let model = Model::new(Architecture::single_task());
        let params = model.init_params(&mut RngStream::derive(5, "init"));
        let probes = ProbeSet::sample(5, 0, 64, 97);
        (model, params, probes)
    }

    #[test]
    fn sensitivity_is_symmetric_in_direction_sign() {
        let (model, params, probes) = setup();
        let labels = probes.labels(OpKind::Add, 97);
        let mut rng = RngStream::derive(6, "dir");
        let dir = linalg::random_unit_vector(model.layout.attn_len(), &mut rng);
        let neg: Vec<f64> = dir.iter().map(|x| -x).collect();
        let a_pos = sensitivity(&model, &params, &dir, 0.005, &probes, &labels, 0).unwrap();
        let a_neg = sensitivity(&model, &params, &neg, 0.005, &probes, &labels, 0).unwrap();
        assert!(
            (a_pos - a_neg).abs() <= 1e-10 * a_pos.abs(),
            "A(v)={a_pos} A(-v)={a_neg}"
        );
    }

    #[test]
    fn sensitivity_invariant_under_probe_reordering() {
        let (model, params, probes) = setup();
        let labels = probes.labels(OpKind::Add, 97);
        let mut rng = RngStream::derive(7, "dir");
        let dir = linalg::random_unit_vector(model.layout.attn_len(), &mut rng);
        let a = sensitivity(&model, &params, &dir, 0.005, &probes, &labels, 0).unwrap();

        let mut rev_pairs = probes.pairs.clone();
        rev_pairs.reverse();
        let rev = ProbeSet {
            pairs: rev_pairs,
            probe_seed: probes.probe_seed,
        };
        let rev_labels = rev.labels(OpKind::Add, 97);
        let b = sensitivity(&model, &params, &dir, 0.005, &rev, &rev_labels, 0).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn median_convention_is_mean_of_middle_pair() {
        let vals: Vec<f64> = (1..=20).map(|x| x as f64).collect();
        assert_eq!(median(&vals), 10.5);
        let odd: Vec<f64> = (1..=5).map(|x| x as f64).collect();
        assert_eq!(median(&odd), 3.0);
        // Order must not matter.
        let mut shuffled = vals.clone();
        shuffled.reverse();
        assert_eq!(median(&shuffled), 10.5);
    }

    #[test]
    fn rank90_of_identical_probes_is_one() {
        let (model, params, _) = setup();
        let pairs = vec![(3u8, 4u8); 32];
        let probes = ProbeSet {
            pairs,
            probe_seed: 0,
        };
        let cm = centroid_matrix(&model, &params, &probes, OpKind::Add, 0, 0).unwrap();
        assert_eq!(rank90(&cm).unwrap(), 1);
    }

    #[test]
    fn random_direction_ratio_is_near_unity() {
        // A fresh random direction's sensitivity divided by the median of 20
        // others lands within a modest band; the baseline is self-consistent.
        let (model, params, probes) = setup();
        let labels = probes.labels(OpKind::Add, 97);
        let baseline = random_baseline(&model, &params, &probes, &labels, 0, 0.005, 20, 5, 0)
            .unwrap();
        let med = median(&baseline);
        let mut rng = RngStream::derive(99, "fresh-dir");
        let mut in_band = 0;
        let trials = 6;
        for _ in 0..trials {
            let dir = linalg::random_unit_vector(model.layout.attn_len(), &mut rng);
            let a = sensitivity(&model, &params, &dir, 0.005, &probes, &labels, 0).unwrap();
            let ratio = a / med;
            if (0.5..=2.0).contains(&ratio) {
                in_band += 1;
            }
        }
        assert!(
            in_band >= trials - 1,
            "only {in_band}/{trials} random ratios within [0.5, 2]"
        );
    }

    #[test]
    fn coupling_of_random_basis_direction_is_near_one() {
        let (model, params, probes) = setup();
        // Use an independently drawn random direction as a 1-vector "basis":
        // its R must be a draw from the baseline population (≈ 1).
        let mut rng = RngStream::derive(123, "basis-dir");
        let dir = linalg::random_unit_vector(model.layout.attn_len(), &mut rng);
        let mut directions = Array2::zeros((1, model.layout.attn_len()));
        for (i, &x) in dir.iter().enumerate() {
            directions[[0, i]] = x;
        }
        let basis = crate::seddiag::SedBasis {
            directions,
            singular_values: vec![1.0],
            kind: crate::seddiag::EstimatorKind::Gradient,
            window: 1,
            step: 0,
            rank_deficient: false,
        };
        let report = coupling_ratio(
            &model, &params, &basis, &probes, OpKind::Add, 0, 0.005, 20, 5, 1, None,
        )
        .unwrap();
        assert!(
            report.r[0] > 0.2 && report.r[0] < 5.0,
            "R of a random direction = {}",
            report.r[0]
        );
        assert_eq!(report.a_rand.len(), 20);
        assert!((report.rbar - report.r[0]).abs() < 1e-12);
    }

    #[test]
    fn coupling_ratio_invariant_to_common_centroid_rescaling() {
        // R is a ratio of quadratic forms in the centroids, so scaling every
        // head weight (hence every centroid) by c scales numerator and
        // denominator by c² and leaves R unchanged.
        let (model, params, probes) = setup();
        let labels = probes.labels(OpKind::Add, 97);
        let mut rng = RngStream::derive(31, "dir");
        let dir = linalg::random_unit_vector(model.layout.attn_len(), &mut rng);

        let mut scaled = params.clone();
        let (wr, br) = (
            model.layout.heads_range_for_test(0).0,
            model.layout.heads_range_for_test(0).1,
        );
        for x in scaled.data[wr].iter_mut() {
            *x *= 3.0;
        }
        for x in scaled.data[br].iter_mut() {
            *x *= 3.0;
        }

        let a1 = sensitivity(&model, &params, &dir, 0.005, &probes, &labels, 0).unwrap();
        let b1 = random_baseline(&model, &params, &probes, &labels, 0, 0.005, 20, 5, 0).unwrap();
        let a2 = sensitivity(&model, &scaled, &dir, 0.005, &probes, &labels, 0).unwrap();
        let b2 = random_baseline(&model, &scaled, &probes, &labels, 0, 0.005, 20, 5, 0).unwrap();
        let r1 = a1 / median(&b1);
        let r2 = a2 / median(&b2);
        assert!(
            (r1 - r2).abs() < 1e-9 * r1.abs(),
            "R changed under common rescaling: {r1} vs {r2}"
        );
    }
}
