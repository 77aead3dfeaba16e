//! Closed-form proximal maps used by the two primal-dual solvers.

use crate::diff::{central_grad_into, forward_dt_into};
use crate::error::{Error, Result};
use crate::grid::{DualBlock, FlowField, Grid, ImageSequence};

/// Prox of the conjugate of `1/2 ‖· - f‖²`: `(ỹ - σ f) / (σ + 1)`.
pub fn prox_l2_data(y_tilde: &[f64], f: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if y_tilde.len() != f.len() {
        return Err(Error::contract("prox_l2_data: length mismatch"));
    }
    let mut out = y_tilde.to_vec();
    prox_l2_data_in_place(&mut out, f, sigma)?;
    Ok(out)
}

pub fn prox_l2_data_in_place(y: &mut [f64], f: &[f64], sigma: f64) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!(
            "prox_l2_data needs sigma > 0, got {sigma}"
        )));
    }
    let denom = sigma + 1.0;
    for (yi, fi) in y.iter_mut().zip(f) {
        *yi = (*yi - sigma * fi) / denom;
    }
    Ok(())
}

/// Pointwise projection of a channel-major buffer onto Euclidean balls of
/// the given radius. A single channel reduces to clamping.
pub fn project_linf_ball(y_tilde: &[f64], channels: usize, radius: f64) -> Result<Vec<f64>> {
    if channels == 0 || !y_tilde.len().is_multiple_of(channels) {
        return Err(Error::contract(
            "project_linf_ball: buffer not divisible into channels",
        ));
    }
    let mut block = DualBlock {
        shape: match channels {
            1 => crate::grid::BlockShape::Scalar,
            2 => crate::grid::BlockShape::Vector2,
            4 => crate::grid::BlockShape::Vector4,
            c => return Err(Error::contract(format!("unsupported channel count {c}"))),
        },
        points: y_tilde.len() / channels,
        data: y_tilde.to_vec(),
    };
    project_block(&mut block, |_| radius)?;
    Ok(block.data)
}

/// Projects every point of `block` onto the ball of radius `radius(p)`.
pub fn project_block(block: &mut DualBlock, radius: impl Fn(usize) -> f64) -> Result<()> {
    let n = block.points;
    let c = block.shape.channels();
    let data = &mut block.data;
    for p in 0..n {
        let r = radius(p);
        if !(r >= 0.0) {
            return Err(Error::config(format!(
                "projection radius must be >= 0, got {r}"
            )));
        }
        let mut sq = 0.0;
        for k in 0..c {
            let x = data[k * n + p];
            sq += x * x;
        }
        if sq > r * r {
            let scale = r / sq.sqrt();
            for k in 0..c {
                data[k * n + p] *= scale;
            }
        }
    }
    Ok(())
}

/// Linearized brightness-constancy data of a frozen sequence:
/// `ρ(v) = u_t + β·v` with `β = (u_x, u_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageData {
    pub grid: Grid,
    pub ut: Vec<f64>,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta_norm_sq: Vec<f64>,
}

impl ShrinkageData {
    pub fn from_sequence(u: &ImageSequence) -> Self {
        let grid = u.grid();
        let n = grid.len();
        let mut ut = vec![0.0; n];
        let mut beta1 = vec![0.0; n];
        let mut beta2 = vec![0.0; n];
        forward_dt_into(grid, u.values(), &mut ut);
        central_grad_into(grid, u.values(), &mut beta1, &mut beta2);
        let beta_norm_sq = beta1
            .iter()
            .zip(&beta2)
            .map(|(a, b)| a * a + b * b)
            .collect();
        ShrinkageData {
            grid,
            ut,
            beta1,
            beta2,
            beta_norm_sq,
        }
    }

    #[inline]
    pub fn rho(&self, p: usize, v1: f64, v2: f64) -> f64 {
        self.ut[p] + self.beta1[p] * v1 + self.beta2[p] * v2
    }
}

/// Which case of the affine shrinkage fired at a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinkBranch {
    /// `ρ < -τ‖β‖²`: step `+τβ`.
    Increase,
    /// `ρ > τ‖β‖²`: step `-τβ`.
    Decrease,
    /// `|ρ| <= τ‖β‖²`: project onto `ρ = 0`.
    Project,
    /// `β = 0`: the data term is constant in `v`.
    Degenerate,
}

#[inline]
pub fn shrink_branch(rho: f64, beta_norm_sq: f64, tau: f64) -> ShrinkBranch {
    if beta_norm_sq == 0.0 {
        ShrinkBranch::Degenerate
    } else if rho < -tau * beta_norm_sq {
        ShrinkBranch::Increase
    } else if rho > tau * beta_norm_sq {
        ShrinkBranch::Decrease
    } else {
        ShrinkBranch::Project
    }
}

/// Pointwise solution of `argmin_v 1/2 ‖v - ṽ‖² + τ |ρ(v)|`.
#[inline]
pub fn shrink_point(
    v1: f64,
    v2: f64,
    rho: f64,
    b1: f64,
    b2: f64,
    bn2: f64,
    tau: f64,
) -> (f64, f64) {
    match shrink_branch(rho, bn2, tau) {
        ShrinkBranch::Degenerate => (v1, v2),
        ShrinkBranch::Increase => (v1 + tau * b1, v2 + tau * b2),
        ShrinkBranch::Decrease => (v1 - tau * b1, v2 - tau * b2),
        ShrinkBranch::Project => {
            let c = rho / bn2;
            (v1 - c * b1, v2 - c * b2)
        }
    }
}

pub fn shrink_affine(v_tilde: &FlowField, data: &ShrinkageData, tau: f64) -> Result<FlowField> {
    v_tilde.grid().ensure_same(&data.grid, "shrink_affine")?;
    let mut out = v_tilde.clone();
    shrink_affine_in_place(&mut out.v1, &mut out.v2, data, tau)?;
    Ok(out)
}

pub fn shrink_affine_in_place(
    v1: &mut [f64],
    v2: &mut [f64],
    data: &ShrinkageData,
    tau: f64,
) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::config(format!(
            "shrink_affine needs tau > 0, got {tau}"
        )));
    }
    for p in 0..v1.len() {
        let rho = data.rho(p, v1[p], v2[p]);
        let (a, b) = shrink_point(
            v1[p],
            v2[p],
            rho,
            data.beta1[p],
            data.beta2[p],
            data.beta_norm_sq[p],
            tau,
        );
        v1[p] = a;
        v2[p] = b;
    }
    Ok(())
}
