//! Flow subproblem: with the image sequence frozen, minimize the L¹-TV
//! optical flow energy
//!
//! ```text
//! ‖u_t + ∇u·v‖₁ + λ ‖∇v‖₁,    λ = β / γ
//! ```
//!
//! The TV term is dualized with `C v = (∇v¹, ∇v²)`; the data term is handled
//! exactly by the pointwise affine shrinkage.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::diff::{
    div_backward_into, grad_forward_into, operator_norm_estimate, POWER_ITERATIONS,
    POWER_ITERATION_SEED,
};
use crate::error::{Error, Result};
use crate::grid::{BlockShape, DualBlock, FlowField, Grid, ImageSequence};
use crate::prox::{project_block, shrink_affine_in_place, ShrinkageData};
use crate::report::{IterationRecord, SolveReport};
use crate::solver_u::STEP_FACTOR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PDParamsV {
    pub sigma: Option<f64>,
    pub tau: Option<f64>,
    /// TV weight of the flow, `β / γ` in the joint model.
    pub lambda: f64,
    pub max_iters: usize,
    pub eps_v: f64,
    pub energy_every: usize,
    pub power_seed: u64,
}

impl PDParamsV {
    pub fn new(lambda: f64) -> Self {
        PDParamsV {
            sigma: None,
            tau: None,
            lambda,
            max_iters: 1000,
            eps_v: 1e-6,
            energy_every: 0,
            power_seed: POWER_ITERATION_SEED,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be finite and > 0"));
        }
        if !(self.eps_v > 0.0) {
            return Err(Error::config("eps_v must be > 0"));
        }
        for (name, s) in [("sigma", self.sigma), ("tau", self.tau)] {
            if let Some(s) = s {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::config(format!("{name} must be > 0")));
                }
            }
        }
        Ok(())
    }
}

/// `‖∇‖` of the forward-difference gradient on `grid`, cached per grid and seed.
pub fn gradient_norm(grid: Grid, seed: u64) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<(Grid, u64), f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&n) = cache.lock().unwrap().get(&(grid, seed)) {
        return n;
    }
    let n = grid.len();
    let apply = |x: &[f64]| {
        let mut out = vec![0.0; 2 * n];
        let (a, b) = out.split_at_mut(n);
        grad_forward_into(grid, x, a, b);
        out
    };
    let adjoint = |y: &[f64]| {
        let mut out = vec![0.0; n];
        div_backward_into(grid, &y[..n], &y[n..], &mut out);
        out.iter_mut().for_each(|e| *e = -*e);
        out
    };
    let norm = operator_norm_estimate(apply, adjoint, n, POWER_ITERATIONS, seed);
    cache.lock().unwrap().insert((grid, seed), norm);
    norm
}

fn flow_gradient_into(grid: Grid, v1: &[f64], v2: &[f64], out: &mut DualBlock) {
    let n = grid.len();
    let (a, rest) = out.data.split_at_mut(n);
    let (b, rest) = rest.split_at_mut(n);
    let (c, d) = rest.split_at_mut(n);
    grad_forward_into(grid, v1, a, b);
    grad_forward_into(grid, v2, c, d);
}

/// `(out1, out2) = C^T y = (-div(y₀, y₁), -div(y₂, y₃))`.
fn flow_gradient_adjoint_into(grid: Grid, y: &DualBlock, out1: &mut [f64], out2: &mut [f64]) {
    div_backward_into(grid, y.channel(0), y.channel(1), out1);
    div_backward_into(grid, y.channel(2), y.channel(3), out2);
    out1.iter_mut().for_each(|e| *e = -*e);
    out2.iter_mut().for_each(|e| *e = -*e);
}

fn flow_tv(block: &DualBlock) -> f64 {
    let n = block.points;
    let d = &block.data;
    let mut s = 0.0;
    for p in 0..n {
        let a = d[p];
        let b = d[n + p];
        let c = d[2 * n + p];
        let e = d[3 * n + p];
        s += (a * a + b * b + c * c + e * e).sqrt();
    }
    s
}

/// Isotropic TV of a flow field over its four gradient channels.
pub fn flow_tv_of(v: &FlowField) -> f64 {
    let mut g = DualBlock::zeros(BlockShape::Vector4, v.grid().len());
    flow_gradient_into(v.grid(), &v.v1, &v.v2, &mut g);
    flow_tv(&g)
}

fn data_term(data: &ShrinkageData, v1: &[f64], v2: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in 0..v1.len() {
        s += data.rho(p, v1[p], v2[p]).abs();
    }
    s
}

/// `‖u_t + ∇u·v‖₁ + λ ‖∇v‖₁` with the isotropic norm over the four
/// gradient channels of `v`.
pub fn energy_v(v: &FlowField, u: &ImageSequence, lambda: f64) -> Result<f64> {
    let grid = v.grid();
    grid.ensure_same(&u.grid(), "energy_v")?;
    let data = ShrinkageData::from_sequence(u);
    Ok(data_term(&data, &v.v1, &v.v2) + lambda * flow_tv_of(v))
}

pub fn solve_v(
    u: &ImageSequence,
    v0: &FlowField,
    params: &PDParamsV,
) -> Result<(FlowField, SolveReport)> {
    solve_v_inner(u, v0, params, None)
}

/// Like [`solve_v`] but keeps the dual variable across calls.
pub fn solve_v_warm(
    u: &ImageSequence,
    v0: &FlowField,
    params: &PDParamsV,
    duals: &mut Option<DualBlock>,
) -> Result<(FlowField, SolveReport)> {
    solve_v_inner(u, v0, params, Some(duals))
}

fn solve_v_inner(
    u: &ImageSequence,
    v0: &FlowField,
    params: &PDParamsV,
    warm: Option<&mut Option<DualBlock>>,
) -> Result<(FlowField, SolveReport)> {
    let grid = u.grid();
    grid.ensure_same(&v0.grid(), "solve_v")?;
    params.validate()?;

    let norm = gradient_norm(grid, params.power_seed);
    let default_step = STEP_FACTOR / norm;
    let sigma = params.sigma.unwrap_or(default_step);
    let tau = params.tau.unwrap_or(default_step);
    if sigma * tau * norm * norm > 1.0 {
        return Err(Error::config(format!(
            "step sizes violate sigma*tau*|C|^2 <= 1 (sigma={sigma}, tau={tau}, |C|={norm})"
        )));
    }
    let lambda = params.lambda;
    let data = ShrinkageData::from_sequence(u);

    let n = grid.len();
    let mut v1 = v0.v1.clone();
    let mut v2 = v0.v2.clone();
    let mut w1 = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut ct1 = vec![0.0; n];
    let mut ct2 = vec![0.0; n];
    let mut ct1_new = vec![0.0; n];
    let mut ct2_new = vec![0.0; n];
    let mut cv = DualBlock::zeros(BlockShape::Vector4, n);
    let mut cv_new = DualBlock::zeros(BlockShape::Vector4, n);
    flow_gradient_into(grid, &v1, &v2, &mut cv);

    let (mut y, mut cbar) = match warm.as_ref().and_then(|w| w.as_ref()) {
        Some(y0) if y0.points == n && y0.shape == BlockShape::Vector4 => {
            flow_gradient_adjoint_into(grid, y0, &mut ct1, &mut ct2);
            (y0.clone(), cv.clone())
        }
        _ => (
            DualBlock::zeros(BlockShape::Vector4, n),
            DualBlock::zeros(BlockShape::Vector4, n),
        ),
    };
    let mut y_new = DualBlock::zeros(BlockShape::Vector4, n);

    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for it in 1..=params.max_iters {
        for ((yn, yo), cb) in y_new.data.iter_mut().zip(&y.data).zip(&cbar.data) {
            *yn = yo + sigma * cb;
        }
        project_block(&mut y_new, |_| lambda)?;

        flow_gradient_adjoint_into(grid, &y_new, &mut ct1_new, &mut ct2_new);
        for p in 0..n {
            w1[p] = v1[p] - tau * ct1_new[p];
            w2[p] = v2[p] - tau * ct2_new[p];
        }
        shrink_affine_in_place(&mut w1, &mut w2, &data, tau)?;
        flow_gradient_into(grid, &w1, &w2, &mut cv_new);

        let mut primal = 0.0;
        for p in 0..n {
            primal += ((v1[p] - w1[p]) / tau - (ct1[p] - ct1_new[p])).abs();
            primal += ((v2[p] - w2[p]) / tau - (ct2[p] - ct2_new[p])).abs();
        }
        let mut dual = 0.0;
        for q in 0..y.data.len() {
            dual += ((y.data[q] - y_new.data[q]) / sigma - (cv.data[q] - cv_new.data[q])).abs();
        }
        residual = (primal + dual) / n as f64;
        iterations = it;
        if !residual.is_finite() {
            return Err(Error::Divergence {
                solver: "solve_v",
                iteration: it,
            });
        }

        for ((cb, cn), co) in cbar.data.iter_mut().zip(&cv_new.data).zip(&cv.data) {
            *cb = 2.0 * cn - co;
        }
        std::mem::swap(&mut v1, &mut w1);
        std::mem::swap(&mut v2, &mut w2);
        std::mem::swap(&mut y, &mut y_new);
        std::mem::swap(&mut cv, &mut cv_new);
        std::mem::swap(&mut ct1, &mut ct1_new);
        std::mem::swap(&mut ct2, &mut ct2_new);

        let energy = (params.energy_every > 0 && it % params.energy_every == 0)
            .then(|| data_term(&data, &v1, &v2) + lambda * flow_tv(&cv));
        history.push(IterationRecord {
            iteration: it,
            residual,
            energy,
        });
        if residual < params.eps_v {
            converged = true;
            break;
        }
    }

    let energy = data_term(&data, &v1, &v2) + lambda * flow_tv(&cv);
    if let Some(w) = warm {
        *w = Some(y);
    }
    let report = SolveReport {
        iterations,
        residual,
        energy,
        converged,
        sigma,
        tau,
        operator_norm: norm,
        history,
    };
    Ok((FlowField::from_vecs(grid, v1, v2)?, report))
}
