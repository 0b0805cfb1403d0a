//! Spectral-edge (SED) estimators: top-K right singular vectors of rolling
//! windows of attention-slice vectors.
//!
//! Four flavors share the same SVD core and differ only in what the rows are:
//! realized optimizer steps (update SED), loss gradients on a fixed batch
//! (gradient SED), per-op gradients on multitask checkpoints (per-op SED),
//! and centered per-example gradients at one checkpoint (per-example SED).
//! Rows enter the SVD raw — uncentered and unnormalized — except for the
//! per-example flavor, which centers.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::data::OpKind;
use crate::linalg;
use crate::model::{Model, ParamVector};
use crate::{Error, Result};

/// FIFO buffer of the last `capacity` attention-slice rows.
#[derive(Debug, Clone)]
pub struct RollingBuffer {
    capacity: usize,
    rows: VecDeque<Vec<f64>>,
}

impl RollingBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window must be positive");
        RollingBuffer {
            capacity,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.rows.iter().map(|r| r.as_slice()).collect()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Update,
    Gradient,
    PerOp(OpKind),
    PerExample,
}

impl EstimatorKind {
    pub fn name(&self) -> String {
        match self {
            EstimatorKind::Update => "update".into(),
            EstimatorKind::Gradient => "gradient".into(),
            EstimatorKind::PerOp(op) => format!("per_op_{}", op.name()),
            EstimatorKind::PerExample => "per_example".into(),
        }
    }
}

/// K orthonormal directions in attention space, tagged with provenance.
#[derive(Debug, Clone)]
pub struct SedBasis {
    /// `k_eff × attn_len`, rows unit-norm and mutually orthogonal.
    pub directions: Array2<f64>,
    pub singular_values: Vec<f64>,
    pub kind: EstimatorKind,
    pub window: usize,
    pub step: u64,
    /// True when the buffer rank was below the requested K.
    pub rank_deficient: bool,
}

impl SedBasis {
    pub fn k(&self) -> usize {
        self.directions.nrows()
    }
}

/// Deterministic sign convention: flip each direction so its
/// largest-magnitude coordinate is positive (first index wins ties), which
/// stabilizes cosine diagnostics across checkpoints.
pub fn fix_signs(directions: &mut Array2<f64>) {
    for mut row in directions.rows_mut() {
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for (i, &x) in row.iter().enumerate() {
            let a = x.abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|x| -x);
        }
    }
}

/// Top-K right singular vectors of the buffered rows (raw, uncentered).
pub fn sed_from_buffer(
    buffer: &RollingBuffer,
    k: usize,
    kind: EstimatorKind,
    step: u64,
) -> Result<SedBasis> {
    if buffer.is_empty() {
        return Err(Error::Analysis("empty rolling buffer".into()));
    }
    let rows = buffer.rows();
    let k_req = k.min(rows.len());
    let top = linalg::topk_right_singular_rows(&rows, k_req)?;
    let mut directions = top.directions;
    fix_signs(&mut directions);
    Ok(SedBasis {
        directions,
        singular_values: top.singular_values,
        kind,
        window: buffer.capacity(),
        step,
        rank_deficient: top.rank_deficient || k_req < k,
    })
}

pub fn update_sed(buffer: &RollingBuffer, k: usize, step: u64) -> Result<SedBasis> {
    sed_from_buffer(buffer, k, EstimatorKind::Update, step)
}

pub fn gradient_sed(buffer: &RollingBuffer, k: usize, step: u64) -> Result<SedBasis> {
    sed_from_buffer(buffer, k, EstimatorKind::Gradient, step)
}

pub fn per_op_sed(buffer: &RollingBuffer, op: OpKind, k: usize, step: u64) -> Result<SedBasis> {
    sed_from_buffer(buffer, k, EstimatorKind::PerOp(op), step)
}

/// Per-example SED at a single checkpoint: stack per-example attention
/// gradients, subtract the mean row, take top-K right singular vectors.
///
/// Returns the basis plus the normalized mean-gradient direction (which the
/// centering removed).
pub fn per_example_sed(
    model: &Model,
    params: &ParamVector,
    pairs: &[(u8, u8)],
    labels: &[u8],
    head: usize,
    k: usize,
    step: u64,
) -> Result<(SedBasis, Vec<f64>)> {
    if pairs.len() < 2 {
        return Err(Error::Analysis(
            "per-example SED needs at least two examples".into(),
        ));
    }
    let mut rows = model.per_example_attention_grads(params, pairs, labels, head)?;
    let mean = rows
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty batch");
    for mut row in rows.rows_mut() {
        row -= &mean;
    }
    let mean_norm = linalg::norm(mean.as_slice().unwrap());
    if mean_norm == 0.0 {
        return Err(Error::Analysis("zero mean gradient".into()));
    }
    let mean_dir: Vec<f64> = mean.iter().map(|x| x / mean_norm).collect();

    let row_refs: Vec<&[f64]> = rows
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("contiguous"))
        .collect();
    let top = linalg::topk_right_singular_rows(&row_refs, k).map_err(|e| match e {
        linalg::LinalgError::ZeroMatrix => {
            Error::Analysis("all per-example gradients identical; centered matrix is zero".into())
        }
        other => Error::Linalg(other),
    })?;
    let mut directions = top.directions;
    fix_signs(&mut directions);
    Ok((
        SedBasis {
            directions,
            singular_values: top.singular_values,
            kind: EstimatorKind::PerExample,
            window: 1,
            step,
            rank_deficient: top.rank_deficient,
        },
        mean_dir,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_split, sample_batch, SplitSpec, P};
    use crate::model::Architecture;
    use crate::rng::RngStream;

    fn toy_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = RngStream::derive(seed, "toy-rows");
        (0..n)
            .map(|_| (0..dim).map(|_| rng.normal_f64()).collect())
            .collect()
    }

    #[test]
    fn buffer_eviction_is_fifo() {
        let mut buf = RollingBuffer::new(3);
        for i in 0..5 {
            buf.push(vec![i as f64; 4]);
        }
        assert_eq!(buf.len(), 3);
        let rows = buf.rows();
        assert_eq!(rows[0][0], 2.0);
        assert_eq!(rows[2][0], 4.0);
    }

    #[test]
    fn pushing_past_capacity_equals_last_w_rows() {
        let dim = 50;
        let rows = toy_rows(25, dim, 3);
        let mut full = RollingBuffer::new(20);
        for r in &rows {
            full.push(r.clone());
        }
        let mut last = RollingBuffer::new(20);
        for r in &rows[5..] {
            last.push(r.clone());
        }
        let a = sed_from_buffer(&full, 3, EstimatorKind::Gradient, 0).unwrap();
        let b = sed_from_buffer(&last, 3, EstimatorKind::Gradient, 0).unwrap();
        assert_eq!(a.directions, b.directions);
    }

    #[test]
    fn single_row_buffer_returns_normalized_row() {
        let mut buf = RollingBuffer::new(20);
        let row = vec![3.0, 0.0, 4.0, 0.0];
        buf.push(row.clone());
        let basis = update_sed(&buf, 3, 7).unwrap();
        assert_eq!(basis.k(), 1);
        assert!(basis.rank_deficient);
        assert_eq!(basis.step, 7);
        let d = basis.directions.row(0);
        assert!((d[0] - 0.6).abs() < 1e-12);
        assert!((d[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_have_vanishing_second_singular_value() {
        let mut buf = RollingBuffer::new(20);
        let row = toy_rows(1, 64, 5).pop().unwrap();
        for _ in 0..20 {
            buf.push(row.clone());
        }
        let basis = update_sed(&buf, 3, 0).unwrap();
        assert_eq!(basis.k(), 1, "effective rank must be 1");
        // The rank cutoff removed σ₂; if it had survived it would be tiny.
        assert!(basis.rank_deficient);
    }

    #[test]
    fn basis_matches_dense_svd_oracle_on_toy_slice() {
        let rows = toy_rows(20, 50, 9);
        let mut buf = RollingBuffer::new(20);
        for r in &rows {
            buf.push(r.clone());
        }
        let basis = gradient_sed(&buf, 3, 0).unwrap();

        let mat = nalgebra::DMatrix::from_fn(20, 50, |i, j| rows[i][j]);
        let svd = mat.svd(false, true);
        let vt = svd.v_t.unwrap();
        for i in 0..3 {
            let oracle: Vec<f64> = vt.row(i).iter().cloned().collect();
            let cos = linalg::dot(basis.directions.row(i).as_slice().unwrap(), &oracle);
            assert!(
                (cos.abs() - 1.0).abs() < 1e-6,
                "direction {i}: |cos| = {}",
                cos.abs()
            );
            assert!((basis.singular_values[i] - svd.singular_values[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn directions_invariant_to_global_row_scaling() {
        let rows = toy_rows(10, 40, 11);
        let mut buf = RollingBuffer::new(10);
        let mut buf_scaled = RollingBuffer::new(10);
        for r in &rows {
            buf.push(r.clone());
            buf_scaled.push(r.iter().map(|x| 7.5 * x).collect());
        }
        let a = gradient_sed(&buf, 3, 0).unwrap();
        let b = gradient_sed(&buf_scaled, 3, 0).unwrap();
        for i in 0..3 {
            let cos = linalg::dot(
                a.directions.row(i).as_slice().unwrap(),
                b.directions.row(i).as_slice().unwrap(),
            );
            assert!((cos.abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn sign_convention_makes_largest_coordinate_positive() {
        let mut dirs = Array2::zeros((2, 4));
        dirs[[0, 2]] = -0.9;
        dirs[[0, 0]] = 0.1;
        dirs[[1, 1]] = 0.8;
        fix_signs(&mut dirs);
        assert!(dirs[[0, 2]] > 0.0);
        assert!(dirs[[1, 1]] > 0.0);
    }

    #[test]
    fn empty_buffer_errors() {
        let buf = RollingBuffer::new(5);
        assert!(update_sed(&buf, 3, 0).is_err());
    }

    #[test]
    fn zero_rows_error() {
        let mut buf = RollingBuffer::new(5);
        buf.push(vec![0.0; 8]);
        assert!(matches!(
            update_sed(&buf, 1, 0),
            Err(Error::Linalg(linalg::LinalgError::ZeroMatrix))
        ));
    }

    #[test]
    fn two_example_per_example_sed_is_difference_direction() {
        let model = Model::new(Architecture::single_task());
        let params = model.init_params(&mut RngStream::derive(3, "init"));
        let pairs = [(5u8, 9u8), (40u8, 77u8)];
        let labels: Vec<u8> = pairs
            .iter()
            .map(|&(a, b)| crate::data::apply_op(OpKind::Add, a as u32, b as u32, P) as u8)
            .collect();
        let (basis, mean_dir) =
            per_example_sed(&model, &params, &pairs, &labels, 0, 1, 0).unwrap();
        let grads = model
            .per_example_attention_grads(&params, &pairs, &labels, 0)
            .unwrap();
        let diff: Vec<f64> = (0..grads.ncols())
            .map(|j| grads[[0, j]] - grads[[1, j]])
            .collect();
        let dn = linalg::norm(&diff);
        let cos = linalg::dot(basis.directions.row(0).as_slice().unwrap(), &diff) / dn;
        assert!(
            (cos.abs() - 1.0).abs() < 1e-8,
            "top direction not parallel to g1 − g2: |cos| = {}",
            cos.abs()
        );
        assert!((linalg::norm(&mean_dir) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn per_example_mean_linearity_at_checkpoint() {
        let model = Model::new(Architecture::single_task());
        let params = model.init_params(&mut RngStream::derive(13, "init"));
        let split = build_split(&SplitSpec::default()).unwrap();
        let mut rng = RngStream::derive(13, "analysis-batch");
        let batch = sample_batch(&split.train, 24, P, &mut rng).unwrap();
        let per_ex = model
            .per_example_attention_grads(&params, &batch.pairs, batch.labels(OpKind::Mul), 0)
            .unwrap();
        let mean = per_ex.mean_axis(ndarray::Axis(0)).unwrap();
        let (_, grad) = model
            .loss_and_param_grad(&params, &batch, 0, OpKind::Mul)
            .unwrap();
        let batch_attn = model.layout.extract_attention(&grad);
        let diff: f64 = mean
            .iter()
            .zip(&batch_attn)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff / linalg::norm(&batch_attn) < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn fifo_window_equals_suffix(extra in 1usize..10, w in 2usize..8) {
                let rows = toy_rows(w + extra, 16, 21);
                let mut full = RollingBuffer::new(w);
                for r in &rows {
                    full.push(r.clone());
                }
                let mut suffix = RollingBuffer::new(w);
                for r in &rows[extra..] {
                    suffix.push(r.clone());
                }
                let a = sed_from_buffer(&full, 2, EstimatorKind::Update, 0).unwrap();
                let b = sed_from_buffer(&suffix, 2, EstimatorKind::Update, 0).unwrap();
                prop_assert_eq!(a.directions, b.directions);
            }
        }
    }
}
