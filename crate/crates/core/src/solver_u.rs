//! Image subproblem: with the flow frozen, minimize
//!
//! ```text
//! 1/2 ‖K u - f‖² + α ‖∇u‖₁ + γ ‖u_t + ∇u·v‖₁
//! ```
//!
//! by Chambolle-Pock on the stacked operator `C u = (K u, ∇u, A_v u)`. The
//! three dual blocks are updated by the L² data prox and two pointwise ball
//! projections of radius `α` (per frame) and `γ`.

use serde::{Deserialize, Serialize};

use crate::diff::{
    div_backward_into, grad_forward_into, operator_norm_estimate, transport_adjoint_into,
    transport_apply_into, POWER_ITERATIONS, POWER_ITERATION_SEED,
};
use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::grid::{l1_norm, BlockShape, DualState, FlowField, Grid, ImageSequence};
use crate::prox::{project_block, prox_l2_data_in_place};
use crate::report::{IterationRecord, SolveReport};

/// Safety factor applied to `1 / ‖C‖` for the default step sizes.
pub const STEP_FACTOR: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PDParamsU {
    /// Dual step; `None` picks `0.99 / ‖C_u‖`.
    pub sigma: Option<f64>,
    /// Primal step; `None` picks `0.99 / ‖C_u‖`.
    pub tau: Option<f64>,
    /// TV weight per frame.
    pub alpha: Vec<f64>,
    /// Transport weight. Zero drops the transport block (plain ROF).
    pub gamma: f64,
    pub max_iters: usize,
    pub eps_u: f64,
    /// Record the energy every this many iterations (0 = only at the end).
    pub energy_every: usize,
    pub power_seed: u64,
}

impl PDParamsU {
    pub fn new(alpha: Vec<f64>, gamma: f64) -> Self {
        PDParamsU {
            sigma: None,
            tau: None,
            alpha,
            gamma,
            max_iters: 1000,
            eps_u: 1e-6,
            energy_every: 0,
            power_seed: POWER_ITERATION_SEED,
        }
    }

    pub fn uniform(alpha: f64, gamma: f64, frames: usize) -> Self {
        Self::new(vec![alpha; frames], gamma)
    }

    fn validate(&self, grid: Grid) -> Result<()> {
        if self.alpha.len() != grid.frames() {
            return Err(Error::config(format!(
                "alpha has {} entries for {} frames",
                self.alpha.len(),
                grid.frames()
            )));
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::config("alpha entries must be finite and >= 0"));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("gamma must be finite and >= 0"));
        }
        if !(self.eps_u > 0.0) {
            return Err(Error::config("eps_u must be > 0"));
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

/// The stacked operator `C u = (K u, ∇u, A_v u)` with `v` frozen.
pub struct ImageOperator<'a> {
    grid: Grid,
    k: &'a ForwardOperator,
    v: &'a FlowField,
    transport: bool,
}

impl<'a> ImageOperator<'a> {
    pub fn new(k: &'a ForwardOperator, v: &'a FlowField, transport: bool) -> Result<Self> {
        let grid = k.domain();
        grid.ensure_same(&v.grid(), "image operator")?;
        Ok(ImageOperator {
            grid,
            k,
            v,
            transport,
        })
    }

    pub fn dual_layout(&self) -> Vec<(BlockShape, usize)> {
        let mut l = vec![
            (BlockShape::Scalar, self.k.range().len()),
            (BlockShape::Vector2, self.grid.len()),
        ];
        if self.transport {
            l.push((BlockShape::Scalar, self.grid.len()));
        }
        l
    }

    pub fn apply_into(&self, u: &[f64], out: &mut DualState) {
        let n = self.grid.len();
        self.k.apply_into(u, &mut out.blocks[0].data);
        let (gx, gy) = out.blocks[1].data.split_at_mut(n);
        grad_forward_into(self.grid, u, gx, gy);
        if self.transport {
            transport_apply_into(
                self.grid,
                u,
                &self.v.v1,
                &self.v.v2,
                &mut out.blocks[2].data,
            );
        }
    }

    /// `out = C^T y`; `scratch` must hold one primal field.
    pub fn adjoint_into(&self, y: &DualState, out: &mut [f64], scratch: &mut [f64]) {
        let n = self.grid.len();
        self.k.adjoint_into(&y.blocks[0].data, out);
        let (yx, yy) = y.blocks[1].data.split_at(n);
        div_backward_into(self.grid, yx, yy, scratch);
        for (o, d) in out.iter_mut().zip(scratch.iter()) {
            *o -= d;
        }
        if self.transport {
            transport_adjoint_into(
                self.grid,
                &y.blocks[2].data,
                &self.v.v1,
                &self.v.v2,
                scratch,
            );
            for (o, d) in out.iter_mut().zip(scratch.iter()) {
                *o += d;
            }
        }
    }

    pub fn norm_estimate(&self, seed: u64) -> f64 {
        let layout = self.dual_layout();
        let apply = |x: &[f64]| {
            let mut y = DualState::zeros(&layout);
            self.apply_into(x, &mut y);
            y.blocks
                .into_iter()
                .flat_map(|b| b.data)
                .collect::<Vec<_>>()
        };
        let adjoint = |flat: &[f64]| {
            let mut y = DualState::zeros(&layout);
            let mut off = 0;
            for b in &mut y.blocks {
                let len = b.data.len();
                b.data.copy_from_slice(&flat[off..off + len]);
                off += len;
            }
            let mut out = vec![0.0; self.grid.len()];
            let mut scratch = vec![0.0; self.grid.len()];
            self.adjoint_into(&y, &mut out, &mut scratch);
            out
        };
        operator_norm_estimate(apply, adjoint, self.grid.len(), POWER_ITERATIONS, seed)
    }
}

/// Applies the dual prox of block `b` in place.
fn dual_prox_block(
    b: usize,
    y: &mut DualState,
    f: &[f64],
    sigma: f64,
    alpha: &[f64],
    gamma: f64,
    frame_len: usize,
) -> Result<()> {
    match b {
        0 => prox_l2_data_in_place(&mut y.blocks[0].data, f, sigma),
        1 => project_block(&mut y.blocks[1], |p| alpha[p / frame_len]),
        _ => project_block(&mut y.blocks[2], |_| gamma),
    }
}

/// Sum over frames of `α_t Σ_p |∇u(p)|₂`.
pub(crate) fn weighted_tv(grid: Grid, gx: &[f64], gy: &[f64], alpha: &[f64]) -> f64 {
    let n = grid.frame_len();
    let mut total = 0.0;
    for (t, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let mut s = 0.0;
        for p in t * n..(t + 1) * n {
            s += (gx[p] * gx[p] + gy[p] * gy[p]).sqrt();
        }
        total += a * s;
    }
    total
}

/// `1/2 ‖K u - f‖² + Σ_t α_t ‖∇u_t‖₁ + γ ‖u_t + ∇u·v‖₁` (isotropic TV).
pub fn energy_u(
    u: &ImageSequence,
    f: &ImageSequence,
    k: &ForwardOperator,
    v: &FlowField,
    alpha: &[f64],
    gamma: f64,
) -> Result<f64> {
    let grid = u.grid();
    grid.ensure_same(&v.grid(), "energy_u")?;
    k.range().ensure_same(&f.grid(), "energy_u data")?;
    if alpha.len() != grid.frames() {
        return Err(Error::contract(
            "energy_u: alpha length differs from frame count",
        ));
    }
    let ku = k.apply(u)?;
    let data: f64 = ku
        .values()
        .iter()
        .zip(f.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        * 0.5;
    let mut gx = vec![0.0; grid.len()];
    let mut gy = vec![0.0; grid.len()];
    grad_forward_into(grid, u.values(), &mut gx, &mut gy);
    let tv = weighted_tv(grid, &gx, &gy, alpha);
    let transport = if gamma != 0.0 {
        let mut a = vec![0.0; grid.len()];
        transport_apply_into(grid, u.values(), &v.v1, &v.v2, &mut a);
        gamma * l1_norm(&a)
    } else {
        0.0
    };
    Ok(data + tv + transport)
}

/// Energy from a precomputed `C u`.
fn energy_from_cu(cu: &DualState, f: &[f64], grid: Grid, alpha: &[f64], gamma: f64) -> f64 {
    let n = grid.len();
    let data: f64 = cu.blocks[0]
        .data
        .iter()
        .zip(f)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        * 0.5;
    let (gx, gy) = cu.blocks[1].data.split_at(n);
    let tv = weighted_tv(grid, gx, gy, alpha);
    let transport = if cu.blocks.len() > 2 {
        gamma * l1_norm(&cu.blocks[2].data)
    } else {
        0.0
    };
    data + tv + transport
}

pub fn solve_u(
    f: &ImageSequence,
    k: &ForwardOperator,
    v: &FlowField,
    u0: &ImageSequence,
    params: &PDParamsU,
) -> Result<(ImageSequence, SolveReport)> {
    solve_u_inner(f, k, v, u0, params, None)
}

/// Like [`solve_u`] but starts from and returns the given dual variables
/// instead of resetting them to zero.
pub fn solve_u_warm(
    f: &ImageSequence,
    k: &ForwardOperator,
    v: &FlowField,
    u0: &ImageSequence,
    params: &PDParamsU,
    duals: &mut Option<DualState>,
) -> Result<(ImageSequence, SolveReport)> {
    solve_u_inner(f, k, v, u0, params, Some(duals))
}

fn solve_u_inner(
    f: &ImageSequence,
    k: &ForwardOperator,
    v: &FlowField,
    u0: &ImageSequence,
    params: &PDParamsU,
    warm: Option<&mut Option<DualState>>,
) -> Result<(ImageSequence, SolveReport)> {
    let grid = u0.grid();
    k.domain().ensure_same(&grid, "solve_u: operator domain")?;
    k.range().ensure_same(&f.grid(), "solve_u: data")?;
    grid.ensure_same(&v.grid(), "solve_u: flow")?;
    params.validate(grid)?;

    let op = ImageOperator::new(k, v, params.gamma > 0.0)?;
    let layout = op.dual_layout();
    let norm = op.norm_estimate(params.power_seed);
    let default_step = if norm > 0.0 { STEP_FACTOR / norm } else { 1.0 };
    let sigma = params.sigma.unwrap_or(default_step);
    let tau = params.tau.unwrap_or(default_step);
    if sigma * tau * norm * norm > 1.0 {
        return Err(Error::config(format!(
            "step sizes violate sigma*tau*|C|^2 <= 1 (sigma={sigma}, tau={tau}, |C|={norm})"
        )));
    }

    let n = grid.len();
    let frame_len = grid.frame_len();
    let fv = f.values();
    let mut u = u0.values().to_vec();
    let mut u_new = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut cty = vec![0.0; n];
    let mut cty_new = vec![0.0; n];
    let mut cu = DualState::zeros(&layout);
    let mut cu_new = DualState::zeros(&layout);
    op.apply_into(&u, &mut cu);

    let (mut y, mut cbar) = match warm.as_ref().and_then(|w| w.as_ref()) {
        Some(y0) if y0.layout() == layout => {
            op.adjoint_into(y0, &mut cty, &mut scratch);
            (y0.clone(), cu.clone())
        }
        _ => (DualState::zeros(&layout), DualState::zeros(&layout)),
    };
    let mut y_new = DualState::zeros(&layout);

    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for it in 1..=params.max_iters {
        for (b, blk) in y_new.blocks.iter_mut().enumerate() {
            for ((yn, yo), cb) in blk
                .data
                .iter_mut()
                .zip(&y.blocks[b].data)
                .zip(&cbar.blocks[b].data)
            {
                *yn = yo + sigma * cb;
            }
        }
        for b in 0..layout.len() {
            dual_prox_block(
                b,
                &mut y_new,
                fv,
                sigma,
                &params.alpha,
                params.gamma,
                frame_len,
            )?;
        }

        op.adjoint_into(&y_new, &mut cty_new, &mut scratch);
        for ((un, uo), c) in u_new.iter_mut().zip(&u).zip(&cty_new) {
            *un = uo - tau * c;
        }
        op.apply_into(&u_new, &mut cu_new);

        let mut primal = 0.0;
        for p in 0..n {
            primal += ((u[p] - u_new[p]) / tau - (cty[p] - cty_new[p])).abs();
        }
        let mut dual = 0.0;
        for b in 0..layout.len() {
            let (yo, yn) = (&y.blocks[b].data, &y_new.blocks[b].data);
            let (co, cn) = (&cu.blocks[b].data, &cu_new.blocks[b].data);
            for q in 0..yo.len() {
                dual += ((yo[q] - yn[q]) / sigma - (co[q] - cn[q])).abs();
            }
        }
        residual = (primal + dual) / n as f64;
        iterations = it;
        if !residual.is_finite() {
            return Err(Error::Divergence {
                solver: "solve_u",
                iteration: it,
            });
        }

        for b in 0..layout.len() {
            for ((cb, cn), co) in cbar.blocks[b]
                .data
                .iter_mut()
                .zip(&cu_new.blocks[b].data)
                .zip(&cu.blocks[b].data)
            {
                *cb = 2.0 * cn - co;
            }
        }
        std::mem::swap(&mut u, &mut u_new);
        std::mem::swap(&mut y, &mut y_new);
        std::mem::swap(&mut cu, &mut cu_new);
        std::mem::swap(&mut cty, &mut cty_new);

        let energy = (params.energy_every > 0 && it % params.energy_every == 0)
            .then(|| energy_from_cu(&cu, fv, grid, &params.alpha, params.gamma));
        history.push(IterationRecord {
            iteration: it,
            residual,
            energy,
        });
        if residual < params.eps_u {
            converged = true;
            break;
        }
    }

    let energy = energy_from_cu(&cu, fv, grid, &params.alpha, params.gamma);
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
    Ok((ImageSequence::from_vec(grid, u)?, report))
}
