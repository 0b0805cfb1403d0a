//! AdamW with decoupled weight decay and the two projection hook points that
//! distinguish update-projected from gradient-projected interventions.
//!
//! * `GradientPreMoments` projects the attention slice of the gradient before
//!   the moment updates, so the optimizer state itself only ever sees the
//!   projected component. Weight decay is untouched.
//! * `UpdatePostStep` leaves the moments on the full gradient and projects
//!   the attention slice of the realized step (including its decay part)
//!   after it has been computed.
//!
//! Projections touch the attention slice only; every other coordinate flows
//! through unchanged.

use ndarray::Array2;

use crate::linalg;
use crate::model::{ParamLayout, ParamVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be > 0, weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// First/second moment state; shapes match the parameter vector.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamWState {
    pub fn new(param_len: usize) -> Self {
        AdamWState {
            step: 0,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    Keep,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookPoint {
    GradientPreMoments,
    UpdatePostStep,
}

/// A rank-K projection applied at one hook point, scoped to the attention
/// slice.
pub struct ProjectionHook<'a> {
    pub point: HookPoint,
    pub mode: ProjectionMode,
    /// K orthonormal rows of length `attn_len`.
    pub basis: &'a Array2<f64>,
}

/// keep → V Vᵀ x; remove → x − V Vᵀ x. In place.
pub fn project(vec: &mut [f64], basis: &Array2<f64>, mode: ProjectionMode) -> Result<()> {
    let dim = basis.ncols();
    if vec.len() != dim {
        return Err(Error::Linalg(linalg::LinalgError::DimensionMismatch {
            expected: dim,
            got: vec.len(),
        }));
    }
    let k = basis.nrows();
    let mut coeffs = Vec::with_capacity(k);
    for i in 0..k {
        coeffs.push(linalg::dot(vec, basis.row(i).as_slice().unwrap()));
    }
    match mode {
        ProjectionMode::Keep => {
            for x in vec.iter_mut() {
                *x = 0.0;
            }
            for (i, &c) in coeffs.iter().enumerate() {
                linalg::axpy(vec, c, basis.row(i).as_slice().unwrap());
            }
        }
        ProjectionMode::Remove => {
            for (i, &c) in coeffs.iter().enumerate() {
                linalg::axpy(vec, -c, basis.row(i).as_slice().unwrap());
            }
        }
    }
    Ok(())
}

fn check_basis_orthonormal(basis: &Array2<f64>) -> Result<()> {
    let k = basis.nrows();
    for i in 0..k {
        for j in i..k {
            let d = linalg::dot(
                basis.row(i).as_slice().unwrap(),
                basis.row(j).as_slice().unwrap(),
            );
            let want = if i == j { 1.0 } else { 0.0 };
            if (d - want).abs() > 1e-8 {
                return Err(Error::Config(format!(
                    "projection basis not orthonormal: <v{i},v{j}> = {d}"
                )));
            }
        }
    }
    Ok(())
}

/// One AdamW step with decoupled decay:
/// `θ ← θ − lr·λ·θ − lr·m̂/(√v̂ + ε)` with standard bias correction.
///
/// Returns the realized update, computed as `params_after − params_before`
/// so it is bit-exact against the stored parameters.
pub fn adamw_step(
    state: &mut AdamWState,
    params: &mut ParamVector,
    grad: &ParamVector,
    cfg: &AdamWConfig,
    hook: Option<&ProjectionHook>,
    layout: &ParamLayout,
) -> Result<Vec<f64>> {
    let n = params.len();
    if grad.len() != n || state.m.len() != n {
        return Err(Error::Config("parameter/gradient shape mismatch".into()));
    }
    if grad.data.iter().any(|g| !g.is_finite()) {
        return Err(Error::Model("non-finite gradient".into()));
    }
    if let Some(h) = hook {
        check_basis_orthonormal(h.basis)?;
    }

    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);

    // Gradient-side hook: project the attention slice before the moments.
    let mut projected_grad;
    let grad_eff: &ParamVector = match hook {
        Some(h) if h.point == HookPoint::GradientPreMoments => {
            let mut attn = layout.extract_attention(grad);
            project(&mut attn, h.basis, h.mode)?;
            projected_grad = grad.clone();
            layout.insert_attention(&mut projected_grad, &attn);
            &projected_grad
        }
        _ => {
            projected_grad = ParamVector::zeros(0);
            let _ = &projected_grad;
            grad
        }
    };

    let before = params.data.clone();
    let mut delta = vec![0.0f64; n];
    for i in 0..n {
        let g = grad_eff.data[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        delta[i] = -cfg.lr * cfg.weight_decay * before[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }

    // Update-side hook: project the attention slice of the realized delta,
    // decay contribution included.
    if let Some(h) = hook {
        if h.point == HookPoint::UpdatePostStep {
            let ranges = layout.attention_ranges();
            let mut attn_delta = Vec::with_capacity(layout.attn_len());
            for r in &ranges {
                attn_delta.extend_from_slice(&delta[r.clone()]);
            }
            project(&mut attn_delta, h.basis, h.mode)?;
            let mut at = 0;
            for r in &ranges {
                delta[r.clone()].copy_from_slice(&attn_delta[at..at + r.len()]);
                at += r.len();
            }
        }
    }

    for i in 0..n {
        params.data[i] = before[i] + delta[i];
    }
    let realized: Vec<f64> = params
        .data
        .iter()
        .zip(&before)
        .map(|(a, b)| a - b)
        .collect();
    Ok(realized)
}
