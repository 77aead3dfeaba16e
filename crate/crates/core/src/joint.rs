//! Alternating minimization of the joint energy
//!
//! ```text
//! E(u, v) = 1/2 ‖K u - f‖² + α ‖∇u‖₁ + γ ‖u_t + ∇u·v‖₁ + β ‖∇v‖₁
//! ```
//!
//! Each outer pass solves the image subproblem with `v` frozen, then the flow
//! subproblem with `u` frozen, and stops once the mean absolute change
//! `err_main` of both iterates falls below `eps_main`. The module also hosts
//! the baselines used for comparison: framewise ROF, ROF with an extra
//! temporal TV term, and plain TV-L¹ optical flow.

use serde::{Deserialize, Serialize};

use crate::diff::POWER_ITERATION_SEED;
use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::grid::{DualState, FlowField, Frame, Grid, ImageSequence};
use crate::report::SolveReport;
use crate::solver_u::{energy_u, solve_u, solve_u_warm, PDParamsU};
use crate::solver_v::{energy_v, flow_tv_of, solve_v, solve_v_warm, PDParamsV};

/// Iteration budget and tolerance of one inner primal-dual solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerSettings {
    pub max_iters: usize,
    pub eps: f64,
}

impl Default for InnerSettings {
    fn default() -> Self {
        InnerSettings {
            max_iters: 1000,
            eps: 1e-6,
        }
    }
}

/// Geometric ramp of the transport weight: outer pass `k` (from 1) uses
/// `min(start * factor^(k-1), gamma)`. Early passes with a weak transport
/// term leave the temporal changes of `u` in place, so the flow step sees
/// the motion instead of a sequence already flattened along `v = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaContinuation {
    pub start: f64,
    pub factor: f64,
}

impl Default for GammaContinuation {
    fn default() -> Self {
        GammaContinuation {
            start: 0.01,
            factor: 2.0,
        }
    }
}

/// Starting point of the outer loop when no explicit `u_init`/`v_init` is
/// given.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointInit {
    /// `u = v = 0`.
    #[default]
    Zero,
    /// `u` from TV-L² reconstruction with the same `K` and `alpha` and no
    /// transport term, `v` from TV-L¹ flow on that `u` with `lambda = beta /
    /// gamma`: the sequential pipeline's output.
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    /// TV weight of the images, one entry per frame.
    pub alpha: Vec<f64>,
    /// TV weight of the flow.
    pub beta: f64,
    /// Weight of the optical flow constraint.
    pub gamma: f64,
    pub eps_main: f64,
    pub max_outer: usize,
    pub inner_u: InnerSettings,
    pub inner_v: InnerSettings,
    /// Keep dual variables between outer passes instead of resetting them.
    /// Off by default: every pass restarts the inner solvers from zero duals.
    pub warm_start_duals: bool,
    pub init: JointInit,
    /// Ramp `gamma` up over the first outer passes. `None` runs every pass
    /// at the target weight.
    pub continuation: Option<GammaContinuation>,
    /// Keep the previous iterate when an inner solve ends above the energy
    /// it started from (possible when the inner solve is cut off early).
    /// Only applies to passes at the target `gamma`.
    pub descent_safeguard: bool,
    pub power_seed: u64,
    pub k: ForwardOperator,
}

impl JointConfig {
    pub fn new(k: ForwardOperator, alpha: f64, beta: f64, gamma: f64) -> Self {
        let frames = k.domain().frames();
        JointConfig {
            alpha: vec![alpha; frames],
            beta,
            gamma,
            eps_main: 1e-6,
            max_outer: 20,
            inner_u: InnerSettings::default(),
            inner_v: InnerSettings::default(),
            warm_start_duals: false,
            init: JointInit::Zero,
            continuation: None,
            descent_safeguard: true,
            power_seed: POWER_ITERATION_SEED,
            k,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.beta / self.gamma
    }

    /// Transport weight used in outer pass `outer` (counting from 1).
    pub fn gamma_at(&self, outer: usize) -> f64 {
        match self.continuation {
            Some(c) => {
                let exp = i32::try_from(outer.saturating_sub(1)).unwrap_or(i32::MAX);
                (c.start * c.factor.powi(exp)).min(self.gamma)
            }
            None => self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.k.domain();
        if self.alpha.len() != grid.frames() {
            return Err(Error::config(format!(
                "alpha has {} entries for {} frames",
                self.alpha.len(),
                grid.frames()
            )));
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::config("alpha entries must be >= 0"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma must be > 0"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("beta must be > 0"));
        }
        if let Some(c) = self.continuation {
            if !(c.start > 0.0) || !(c.factor > 1.0) {
                return Err(Error::config("continuation needs start > 0 and factor > 1"));
            }
        }
        for (name, e) in [
            ("eps_main", self.eps_main),
            ("eps_u", self.inner_u.eps),
            ("eps_v", self.inner_v.eps),
        ] {
            if !(e > 0.0) {
                return Err(Error::config(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }

    fn params_u(&self, gamma: f64) -> PDParamsU {
        let mut p = PDParamsU::new(self.alpha.clone(), gamma);
        p.max_iters = self.inner_u.max_iters;
        p.eps_u = self.inner_u.eps;
        p.power_seed = self.power_seed;
        p
    }

    fn params_v(&self, gamma: f64) -> PDParamsV {
        let mut p = PDParamsV::new(self.beta / gamma);
        p.max_iters = self.inner_v.max_iters;
        p.eps_v = self.inner_v.eps;
        p.power_seed = self.power_seed;
        p
    }
}

/// One outer pass of the joint solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuterRecord {
    pub outer_iter: usize,
    /// Transport weight of this pass.
    pub gamma: f64,
    pub err_main: f64,
    /// Joint energy at `gamma`.
    pub energy: f64,
    pub inner_iters_u: usize,
    pub inner_iters_v: usize,
    pub u_rejected: bool,
    pub v_rejected: bool,
}

#[derive(Debug, Clone)]
pub struct JointResult {
    pub u: ImageSequence,
    pub v: FlowField,
    pub trace: Vec<OuterRecord>,
    pub converged: bool,
}

/// Joint energy `E(u, v)`.
pub fn joint_energy(
    u: &ImageSequence,
    v: &FlowField,
    f: &ImageSequence,
    config: &JointConfig,
) -> Result<f64> {
    joint_energy_at(u, v, f, config, config.gamma)
}

fn joint_energy_at(
    u: &ImageSequence,
    v: &FlowField,
    f: &ImageSequence,
    config: &JointConfig,
    gamma: f64,
) -> Result<f64> {
    Ok(energy_u(u, f, &config.k, v, &config.alpha, gamma)? + config.beta * flow_tv_of(v))
}

/// `(Σ|u - u_old| + Σ|v - v_old|) / (2 |Ω|)` with `|Ω|` the space-time point
/// count; both flow channels enter the flow sum.
pub fn err_main(
    u: &ImageSequence,
    u_old: &ImageSequence,
    v: &FlowField,
    v_old: &FlowField,
) -> Result<f64> {
    u.grid().ensure_same(&u_old.grid(), "err_main")?;
    v.grid().ensure_same(&v_old.grid(), "err_main")?;
    u.grid().ensure_same(&v.grid(), "err_main")?;
    let du: f64 = u
        .values()
        .iter()
        .zip(u_old.values())
        .map(|(a, b)| (a - b).abs())
        .sum();
    let dv: f64 =
        v.v1.iter()
            .zip(&v_old.v1)
            .chain(v.v2.iter().zip(&v_old.v2))
            .map(|(a, b)| (a - b).abs())
            .sum();
    Ok((du + dv) / (2.0 * u.grid().len() as f64))
}

pub fn solve_joint(
    f: &ImageSequence,
    config: &JointConfig,
    u_init: Option<&ImageSequence>,
    v_init: Option<&FlowField>,
) -> Result<JointResult> {
    config.validate()?;
    let grid = config.k.domain();
    config
        .k
        .range()
        .ensure_same(&f.grid(), "solve_joint: data")?;
    if let Some(u0) = u_init {
        grid.ensure_same(&u0.grid(), "solve_joint: u_init")?;
    }
    if let Some(v0) = v_init {
        grid.ensure_same(&v0.grid(), "solve_joint: v_init")?;
    }
    let (mut u, mut v) = match (config.init, u_init, v_init) {
        (_, Some(u0), Some(v0)) => (u0.clone(), v0.clone()),
        (JointInit::Zero, u0, v0) => (
            u0.cloned().unwrap_or_else(|| ImageSequence::zeros(grid)),
            v0.cloned().unwrap_or_else(|| FlowField::zeros(grid)),
        ),
        (JointInit::Sequential, u0, v0) => {
            let u = match u0 {
                Some(u0) => u0.clone(),
                None => {
                    let p = config.params_u(0.0);
                    let zero = FlowField::zeros(grid);
                    solve_u(f, &config.k, &zero, &ImageSequence::zeros(grid), &p)
                        .map_err(|e| e.context("sequential init"))?
                        .0
                }
            };
            let v = match v0 {
                Some(v0) => v0.clone(),
                None => {
                    solve_v(&u, &FlowField::zeros(grid), &config.params_v(config.gamma))
                        .map_err(|e| e.context("sequential init"))?
                        .0
                }
            };
            (u, v)
        }
    };

    let mut duals_u: Option<DualState> = None;
    let mut duals_v = None;
    let mut trace = Vec::new();
    let mut converged = false;

    for outer in 1..=config.max_outer {
        let wrap = |e: Error| Error::Outer {
            outer,
            source: Box::new(e),
        };
        let gamma = config.gamma_at(outer);
        let pu = config.params_u(gamma);
        let pv = config.params_v(gamma);
        let u_old = u.clone();
        let v_old = v.clone();
        let guard = config.descent_safeguard && gamma == config.gamma;

        let (u_next, rep_u) = if config.warm_start_duals {
            solve_u_warm(f, &config.k, &v, &u, &pu, &mut duals_u)
        } else {
            solve_u(f, &config.k, &v, &u, &pu)
        }
        .map_err(wrap)?;
        let mut u_rejected = false;
        if guard {
            let before = energy_u(&u, f, &config.k, &v, &config.alpha, gamma)?;
            let after = energy_u(&u_next, f, &config.k, &v, &config.alpha, gamma)?;
            u_rejected = after > before;
        }
        if !u_rejected {
            u = u_next;
        }

        let (v_next, rep_v) = if config.warm_start_duals {
            solve_v_warm(&u, &v, &pv, &mut duals_v)
        } else {
            solve_v(&u, &v, &pv)
        }
        .map_err(wrap)?;
        let mut v_rejected = false;
        if guard {
            v_rejected = energy_v(&v_next, &u, pv.lambda)? > energy_v(&v, &u, pv.lambda)?;
        }
        if !v_rejected {
            v = v_next;
        }

        let err = err_main(&u, &u_old, &v, &v_old)?;
        trace.push(OuterRecord {
            outer_iter: outer,
            gamma,
            err_main: err,
            energy: joint_energy_at(&u, &v, f, config, gamma)?,
            inner_iters_u: rep_u.iterations,
            inner_iters_v: rep_v.iterations,
            u_rejected,
            v_rejected,
        });
        // Passes below the target weight never end the solve.
        if gamma == config.gamma && err < config.eps_main {
            converged = true;
            break;
        }
    }
    Ok(JointResult {
        u,
        v,
        trace,
        converged,
    })
}

/// TV-L² denoising of a single frame.
pub fn solve_rof_2d(
    frame: &Frame,
    alpha: f64,
    settings: InnerSettings,
) -> Result<(Frame, SolveReport)> {
    // Two identical frames with no temporal coupling decouple into two copies
    // of the same 2-D problem.
    let seq = ImageSequence::from_frames(&[frame.clone(), frame.clone()])?;
    let (u, rep) = solve_rof_2d_sequence(&seq, alpha, settings)?;
    Ok((u.frame(0), rep))
}

/// Framewise TV-L² denoising of every frame (no temporal coupling).
pub fn solve_rof_2d_sequence(
    seq: &ImageSequence,
    alpha: f64,
    settings: InnerSettings,
) -> Result<(ImageSequence, SolveReport)> {
    let grid = seq.grid();
    let k = ForwardOperator::identity(grid)?;
    let mut p = PDParamsU::uniform(alpha, 0.0, grid.frames());
    p.max_iters = settings.max_iters;
    p.eps_u = settings.eps;
    solve_u(seq, &k, &FlowField::zeros(grid), seq, &p)
}

/// TV-L² denoising with an additional `α ‖u_t‖₁` temporal term; both
/// regularizers carry the same weight.
pub fn solve_rof_2dt(
    seq: &ImageSequence,
    alpha: f64,
    settings: InnerSettings,
) -> Result<(ImageSequence, SolveReport)> {
    let grid = seq.grid();
    let k = ForwardOperator::identity(grid)?;
    // With zero flow the transport row is the forward time difference.
    let mut p = PDParamsU::uniform(alpha, alpha, grid.frames());
    p.max_iters = settings.max_iters;
    p.eps_u = settings.eps;
    if alpha == 0.0 {
        p.gamma = 0.0;
    }
    solve_u(seq, &k, &FlowField::zeros(grid), seq, &p)
}

/// Static TV-L¹ optical flow on a given (noisy or pre-denoised) sequence.
pub fn solve_tvl1_flow(
    seq: &ImageSequence,
    lambda: f64,
    settings: InnerSettings,
) -> Result<(FlowField, SolveReport)> {
    let mut p = PDParamsV::new(lambda);
    p.max_iters = settings.max_iters;
    p.eps_v = settings.eps;
    solve_v(seq, &FlowField::zeros(seq.grid()), &p)
}

/// Per-frame TV weights for a sequence with unknown frames: `alpha` on
/// known frames, zero on unknown ones.
pub fn masked_alpha(known: &[bool], alpha: f64) -> Vec<f64> {
    known.iter().map(|&k| if k { alpha } else { 0.0 }).collect()
}

/// Grid of a single frame stacked twice; used by 2-D helpers.
pub fn frame_grid(frame: &Frame) -> Result<Grid> {
    Grid::with_dims(frame.width, frame.height, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(r: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
        Frame::new(w, h, (0..w * h).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_data_converges_quickly() {
        let g = Grid::new(7, 7, 2).unwrap();
        let f = ImageSequence::constant(g, 0.5);
        let mut cfg = JointConfig::new(ForwardOperator::identity(g).unwrap(), 0.03, 0.07, 1.0);
        cfg.eps_main = 1e-5;
        let res = solve_joint(&f, &cfg, None, None).unwrap();
        assert!(res.converged);
        assert!(res.trace.len() <= 2, "{:?}", res.trace);
        for &x in res.u.values() {
            assert!((x - 0.5).abs() < 1e-4);
        }
        assert!(res.v.v1.iter().chain(&res.v.v2).all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn err_main_is_zero_iff_unchanged() {
        let g = Grid::new(3, 3, 1).unwrap();
        let u = ImageSequence::constant(g, 0.2);
        let v = FlowField::constant(g, 0.1, 0.1);
        assert_eq!(err_main(&u, &u, &v, &v).unwrap(), 0.0);
        let mut u2 = u.clone();
        u2.values_mut()[3] += 0.5;
        let e = err_main(&u2, &u, &v, &v).unwrap();
        assert!((e - 0.5 / (2.0 * g.len() as f64)).abs() < 1e-15);
    }

    #[test]
    fn rof_2d_constant_and_small_alpha() {
        let c = Frame::new(6, 6, vec![0.4; 36]).unwrap();
        let (out, _) = solve_rof_2d(&c, 0.1, InnerSettings::default()).unwrap();
        assert!(out.values.iter().all(|x| (x - 0.4).abs() < 1e-6));

        let mut r = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut r, 8, 8);
        let settings = InnerSettings {
            max_iters: 5000,
            eps: 1e-9,
        };
        let (out, _) = solve_rof_2d(&f, 1e-9, settings).unwrap();
        for (a, b) in out.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rof_2dt_reduces_to_rof_2d_for_time_constant_input() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let fr = random_frame(&mut r, 8, 8);
        let seq = ImageSequence::from_frames(&[fr.clone(), fr.clone()]).unwrap();
        let settings = InnerSettings {
            max_iters: 4000,
            eps: 1e-8,
        };
        let (a, _) = solve_rof_2dt(&seq, 0.05, settings).unwrap();
        let (b, _) = solve_rof_2d(&fr, 0.05, settings).unwrap();
        for (x, y) in a.frame_slice(0).iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn tvl1_flow_of_static_sequence_is_zero() {
        let g = Grid::new(6, 6, 2).unwrap();
        let seq = ImageSequence::from_fn(g, |i, j, _| ((i * j) % 4) as f64 / 4.0);
        let (v, _) = solve_tvl1_flow(&seq, 0.1, InnerSettings::default()).unwrap();
        assert!(v.v1.iter().chain(&v.v2).all(|&x| x == 0.0));
    }

    #[test]
    fn continuation_ramps_to_target() {
        let g = Grid::new(3, 3, 1).unwrap();
        let mut cfg = JointConfig::new(ForwardOperator::identity(g).unwrap(), 0.03, 0.07, 1.0);
        assert_eq!(cfg.gamma_at(5), 1.0);
        cfg.continuation = Some(GammaContinuation::default());
        let ramp: Vec<f64> = (1..=9).map(|k| cfg.gamma_at(k)).collect();
        assert_eq!(ramp[0], 0.01);
        assert!(ramp.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(ramp[8], 1.0);
    }

    #[test]
    fn safeguarded_energy_is_monotone() {
        let g = Grid::new(11, 11, 2).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let f = ImageSequence::from_fn(g, |i, j, t| {
            let d = ((i as f64 - 5.0 - 0.5 * t as f64).powi(2) + (j as f64 - 5.0).powi(2)).sqrt();
            if d < 3.5 {
                0.8
            } else {
                0.2
            }
        });
        let noisy = ImageSequence::from_vec(
            g,
            f.values()
                .iter()
                .map(|x| x + 0.05 * (r.random::<f64>() - 0.5))
                .collect(),
        )
        .unwrap();
        for init in [JointInit::Zero, JointInit::Sequential] {
            let mut cfg = JointConfig::new(ForwardOperator::identity(g).unwrap(), 0.03, 0.1, 1.0);
            cfg.init = init;
            cfg.max_outer = 6;
            cfg.inner_u.max_iters = 200;
            cfg.inner_v.max_iters = 200;
            let res = solve_joint(&noisy, &cfg, None, None).unwrap();
            for w in res.trace.windows(2) {
                assert!(
                    w[1].energy <= w[0].energy + 1e-12,
                    "{init:?} {:?}",
                    res.trace
                );
            }
        }
    }

    #[test]
    fn config_validation() {
        let g = Grid::new(3, 3, 1).unwrap();
        let k = ForwardOperator::identity(g).unwrap();
        let mut cfg = JointConfig::new(k.clone(), 0.03, 0.07, 0.0);
        assert!(cfg.validate().is_err());
        cfg.gamma = 1.0;
        cfg.alpha = vec![0.1];
        assert!(cfg.validate().is_err());
        let cfg = JointConfig::new(k, 0.03, 0.0, 1.0);
        assert!(cfg.validate().is_err());
    }
}
