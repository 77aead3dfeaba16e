//! Finite-difference operators on the space-time grid and their adjoints.
//!
//! * Spatial gradient: forward differences, zero in the last column/row.
//! * Divergence: backward differences with Dirichlet-type boundary cases,
//!   `div = -grad^T`.
//! * Transport `A u = u_t + v1 u_x + v2 u_y`: forward difference in time
//!   (zero at `t = nt`), central differences in space (zero for `i in {0, nx}`
//!   resp. `j in {0, ny}`, and zero at `t = nt`).
//!
//! The transport adjoint is the exact transpose of `A`, verified by the
//! adjointness tests below.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::{dot, FlowField, Grid, ImageSequence};

/// Seed of the power-iteration start vector when none is configured.
pub const POWER_ITERATION_SEED: u64 = 0x6a6f_696e_7466_6c77;

/// Default power-iteration budget.
pub const POWER_ITERATIONS: usize = 50;

/// Per-frame spatial gradient channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub grid: Grid,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

pub fn grad_forward(u: &ImageSequence) -> GradientField {
    let grid = u.grid();
    let mut gx = vec![0.0; grid.len()];
    let mut gy = vec![0.0; grid.len()];
    grad_forward_into(grid, u.values(), &mut gx, &mut gy);
    GradientField { grid, gx, gy }
}

pub fn div_backward(g: &GradientField) -> Vec<f64> {
    let mut out = vec![0.0; g.grid.len()];
    div_backward_into(g.grid, &g.gx, &g.gy, &mut out);
    out
}

/// Writes the forward-difference gradient of `u` into `gx`, `gy`.
pub fn grad_forward_into(grid: Grid, u: &[f64], gx: &mut [f64], gy: &mut [f64]) {
    let (w, h) = (grid.width(), grid.height());
    let n = grid.frame_len();
    for t in 0..grid.frames() {
        let base = t * n;
        for j in 0..h {
            let row = base + j * w;
            for i in 0..w {
                let p = row + i;
                gx[p] = if i + 1 < w { u[p + 1] - u[p] } else { 0.0 };
                gy[p] = if j + 1 < h { u[p + w] - u[p] } else { 0.0 };
            }
        }
    }
}

/// Writes `div (yx, yy)` into `out`. Entries of `yx` at `i = nx` and of `yy`
/// at `j = ny` are ignored, matching the zero rows of the forward gradient.
pub fn div_backward_into(grid: Grid, yx: &[f64], yy: &[f64], out: &mut [f64]) {
    let (nx, ny) = (grid.nx(), grid.ny());
    let w = grid.width();
    let n = grid.frame_len();
    for t in 0..grid.frames() {
        let base = t * n;
        for j in 0..=ny {
            let row = base + j * w;
            for i in 0..=nx {
                let p = row + i;
                let dx = if i == 0 {
                    yx[p]
                } else if i == nx {
                    -yx[p - 1]
                } else {
                    yx[p] - yx[p - 1]
                };
                let dy = if j == 0 {
                    yy[p]
                } else if j == ny {
                    -yy[p - w]
                } else {
                    yy[p] - yy[p - w]
                };
                out[p] = dx + dy;
            }
        }
    }
}

/// Forward time difference, zero at `t = nt`.
pub fn forward_dt_into(grid: Grid, u: &[f64], out: &mut [f64]) {
    let n = grid.frame_len();
    let last = grid.nt() * n;
    for p in 0..last {
        out[p] = u[p + n] - u[p];
    }
    out[last..].iter_mut().for_each(|x| *x = 0.0);
}

/// Central differences `(u_x, u_y)` with the boundary and `t = nt` zeros.
pub fn central_grad_into(grid: Grid, u: &[f64], ux: &mut [f64], uy: &mut [f64]) {
    let (nx, ny, nt) = (grid.nx(), grid.ny(), grid.nt());
    let w = grid.width();
    let n = grid.frame_len();
    for t in 0..=nt {
        let base = t * n;
        for j in 0..=ny {
            let row = base + j * w;
            for i in 0..=nx {
                let p = row + i;
                if t == nt {
                    ux[p] = 0.0;
                    uy[p] = 0.0;
                    continue;
                }
                ux[p] = if i > 0 && i < nx {
                    0.5 * (u[p + 1] - u[p - 1])
                } else {
                    0.0
                };
                uy[p] = if j > 0 && j < ny {
                    0.5 * (u[p + w] - u[p - w])
                } else {
                    0.0
                };
            }
        }
    }
}

/// `out = u_t + v1 u_x + v2 u_y` on raw buffers.
pub fn transport_apply_into(grid: Grid, u: &[f64], v1: &[f64], v2: &[f64], out: &mut [f64]) {
    let (nx, ny, nt) = (grid.nx(), grid.ny(), grid.nt());
    let w = grid.width();
    let n = grid.frame_len();
    for t in 0..nt {
        let base = t * n;
        for j in 0..=ny {
            let row = base + j * w;
            let jin = j > 0 && j < ny;
            for i in 0..=nx {
                let p = row + i;
                let mut val = u[p + n] - u[p];
                if i > 0 && i < nx {
                    val += v1[p] * 0.5 * (u[p + 1] - u[p - 1]);
                }
                if jin {
                    val += v2[p] * 0.5 * (u[p + w] - u[p - w]);
                }
                out[p] = val;
            }
        }
    }
    out[nt * n..].iter_mut().for_each(|x| *x = 0.0);
}

/// `out = A^T y` for the transport operator with frozen `(v1, v2)`.
pub fn transport_adjoint_into(grid: Grid, y: &[f64], v1: &[f64], v2: &[f64], out: &mut [f64]) {
    let (nx, ny, nt) = (grid.nx(), grid.ny(), grid.nt());
    let w = grid.width();
    let n = grid.frame_len();
    // Time part: D_t^T y = y(t-1) - y(t), with the t = 0 and t = nt cases.
    for t in 0..=nt {
        let base = t * n;
        for k in 0..n {
            let p = base + k;
            let prev = if t > 0 { y[p - n] } else { 0.0 };
            let cur = if t < nt { y[p] } else { 0.0 };
            out[p] = prev - cur;
        }
    }
    // Spatial part: D_x^T (v1 y) + D_y^T (v2 y). Row r of D_x is nonzero only
    // for 0 < i < nx and t < nt, so scatter from those rows.
    for t in 0..nt {
        let base = t * n;
        for j in 0..=ny {
            let row = base + j * w;
            let jin = j > 0 && j < ny;
            for i in 0..=nx {
                let p = row + i;
                if i > 0 && i < nx {
                    let z = 0.5 * v1[p] * y[p];
                    out[p + 1] += z;
                    out[p - 1] -= z;
                }
                if jin {
                    let z = 0.5 * v2[p] * y[p];
                    out[p + w] += z;
                    out[p - w] -= z;
                }
            }
        }
    }
}

pub fn transport_apply(u: &ImageSequence, v: &FlowField) -> Result<ImageSequence> {
    let grid = u.grid();
    grid.ensure_same(&v.grid(), "transport_apply")?;
    let mut out = vec![0.0; grid.len()];
    transport_apply_into(grid, u.values(), &v.v1, &v.v2, &mut out);
    ImageSequence::from_vec(grid, out)
}

pub fn transport_adjoint(y: &ImageSequence, v: &FlowField) -> Result<ImageSequence> {
    let grid = y.grid();
    grid.ensure_same(&v.grid(), "transport_adjoint")?;
    let mut out = vec![0.0; grid.len()];
    transport_adjoint_into(grid, y.values(), &v.v1, &v.v2, &mut out);
    ImageSequence::from_vec(grid, out)
}

/// Largest singular value of `apply` by power iteration on `adjoint ∘ apply`.
///
/// Returns `‖apply x‖` for the current unit iterate `x`, which approaches the
/// operator norm from below. Stops after `iterations` steps or once two
/// successive estimates agree to 1e-6 relative.
pub fn operator_norm_estimate<A, T>(
    apply: A,
    adjoint: T,
    input_len: usize,
    iterations: usize,
    seed: u64,
) -> f64
where
    A: Fn(&[f64]) -> Vec<f64>,
    T: Fn(&[f64]) -> Vec<f64>,
{
    if input_len == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..input_len)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let nx = dot(&x, &x).sqrt();
    x.iter_mut().for_each(|e| *e /= nx);

    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let ax = apply(&x);
        let next_estimate = dot(&ax, &ax).sqrt();
        let ata = adjoint(&ax);
        let norm = dot(&ata, &ata).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return next_estimate;
        }
        let converged = (next_estimate - estimate).abs() <= 1e-6 * next_estimate;
        estimate = next_estimate;
        if converged {
            break;
        }
        x = ata.into_iter().map(|e| e / norm).collect();
    }
    estimate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::inner_product;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    // Stencil oracles written point by point from the case formulas.
    fn oracle_grad(g: Grid, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; g.len()];
        let mut gy = vec![0.0; g.len()];
        for t in 0..=g.nt() {
            for j in 0..=g.ny() {
                for i in 0..=g.nx() {
                    let at = |ii, jj| u[g.idx(ii, jj, t)];
                    if i < g.nx() {
                        gx[g.idx(i, j, t)] = at(i + 1, j) - at(i, j);
                    }
                    if j < g.ny() {
                        gy[g.idx(i, j, t)] = at(i, j + 1) - at(i, j);
                    }
                }
            }
        }
        (gx, gy)
    }

    fn oracle_transport(g: Grid, u: &[f64], v1: &[f64], v2: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        for t in 0..=g.nt() {
            for j in 0..=g.ny() {
                for i in 0..=g.nx() {
                    let at = |ii: usize, jj: usize, tt: usize| u[g.idx(ii, jj, tt)];
                    let ut = if t < g.nt() {
                        at(i, j, t + 1) - at(i, j, t)
                    } else {
                        0.0
                    };
                    let ux = if i > 0 && i < g.nx() && t < g.nt() {
                        (at(i + 1, j, t) - at(i - 1, j, t)) / 2.0
                    } else {
                        0.0
                    };
                    let uy = if j > 0 && j < g.ny() && t < g.nt() {
                        (at(i, j + 1, t) - at(i, j - 1, t)) / 2.0
                    } else {
                        0.0
                    };
                    let p = g.idx(i, j, t);
                    out[p] = ut + v1[p] * ux + v2[p] * uy;
                }
            }
        }
        out
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = Grid::new(4, 3, 1).unwrap();
        let gr = grad_forward(&ImageSequence::constant(g, 0.7));
        assert!(gr.gx.iter().chain(&gr.gy).all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_of_ramp() {
        let g = Grid::new(2, 2, 1).unwrap();
        let u = ImageSequence::from_fn(g, |i, _, _| i as f64);
        let gr = grad_forward(&u);
        for t in 0..2 {
            for j in 0..3 {
                for i in 0..3 {
                    let p = g.idx(i, j, t);
                    assert_eq!(gr.gx[p], if i < 2 { 1.0 } else { 0.0 });
                    assert_eq!(gr.gy[p], 0.0);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_oracle() {
        let g = Grid::new(3, 3, 1).unwrap();
        let mut r = rng(1);
        let u = ImageSequence::from_vec(g, rand_vec(&mut r, g.len())).unwrap();
        let gr = grad_forward(&u);
        let (ox, oy) = oracle_grad(g, u.values());
        assert_eq!(gr.gx, ox);
        assert_eq!(gr.gy, oy);
    }

    #[test]
    fn divergence_zero_and_impulse() {
        let g = Grid::new(4, 4, 1).unwrap();
        let zero = GradientField {
            grid: g,
            gx: vec![0.0; g.len()],
            gy: vec![0.0; g.len()],
        };
        assert!(div_backward(&zero).iter().all(|&x| x == 0.0));

        let mut imp = zero.clone();
        imp.gx[g.idx(2, 1, 0)] = 1.0;
        let d = div_backward(&imp);
        for (p, &val) in d.iter().enumerate() {
            let expected = if p == g.idx(2, 1, 0) {
                1.0
            } else if p == g.idx(3, 1, 0) {
                -1.0
            } else {
                0.0
            };
            assert_eq!(val, expected, "at {p}");
        }
    }

    #[test]
    fn divergence_of_constant_dual_follows_boundary_cases() {
        let g = Grid::new(3, 2, 1).unwrap();
        let gf = GradientField {
            grid: g,
            gx: vec![1.0; g.len()],
            gy: vec![0.0; g.len()],
        };
        let d = div_backward(&gf);
        for j in 0..=2 {
            assert_eq!(d[g.idx(0, j, 0)], 1.0);
            assert_eq!(d[g.idx(1, j, 0)], 0.0);
            assert_eq!(d[g.idx(2, j, 0)], 0.0);
            assert_eq!(d[g.idx(3, j, 0)], -1.0);
        }
    }

    #[test]
    fn grad_div_adjoint_on_5x5() {
        let g = Grid::new(4, 4, 1).unwrap();
        let mut r = rng(2);
        let u = ImageSequence::from_vec(g, rand_vec(&mut r, g.len())).unwrap();
        let y = GradientField {
            grid: g,
            gx: rand_vec(&mut r, g.len()),
            gy: rand_vec(&mut r, g.len()),
        };
        let gu = grad_forward(&u);
        let lhs = inner_product(&gu.gx, &y.gx).unwrap() + inner_product(&gu.gy, &y.gy).unwrap();
        let rhs = -inner_product(u.values(), &div_backward(&y)).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10);
    }

    #[test]
    fn transport_constant_in_time_is_zero() {
        let g = Grid::new(5, 5, 2).unwrap();
        let u = ImageSequence::constant(g, 0.3);
        let mut r = rng(3);
        let v =
            FlowField::from_vecs(g, rand_vec(&mut r, g.len()), rand_vec(&mut r, g.len())).unwrap();
        let out = transport_apply(&u, &v).unwrap();
        assert!(out.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transport_of_time_ramp() {
        let g = Grid::new(3, 3, 2).unwrap();
        let u = ImageSequence::from_fn(g, |_, _, t| t as f64);
        let out = transport_apply(&u, &FlowField::zeros(g)).unwrap();
        for t in 0..=2 {
            for &x in out.frame_slice(t) {
                assert_eq!(x, if t < 2 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn transport_matches_oracle() {
        let g = Grid::new(5, 5, 2).unwrap();
        let mut r = rng(4);
        let u = ImageSequence::from_vec(g, rand_vec(&mut r, g.len())).unwrap();
        let v =
            FlowField::from_vecs(g, rand_vec(&mut r, g.len()), rand_vec(&mut r, g.len())).unwrap();
        let out = transport_apply(&u, &v).unwrap();
        let oracle = oracle_transport(g, u.values(), &v.v1, &v.v2);
        for (a, b) in out.values().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn transport_adjoint_identity() {
        let g = Grid::new(4, 4, 2).unwrap();
        let mut r = rng(5);
        for _ in 0..10 {
            let u = ImageSequence::from_vec(g, rand_vec(&mut r, g.len())).unwrap();
            let y = ImageSequence::from_vec(g, rand_vec(&mut r, g.len())).unwrap();
            let v = FlowField::from_vecs(g, rand_vec(&mut r, g.len()), rand_vec(&mut r, g.len()))
                .unwrap();
            let lhs = inner_product(transport_apply(&u, &v).unwrap().values(), y.values()).unwrap();
            let rhs =
                inner_product(u.values(), transport_adjoint(&y, &v).unwrap().values()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn transport_adjoint_impulse_without_flow() {
        let g = Grid::new(4, 4, 2).unwrap();
        let mut y = ImageSequence::zeros(g);
        let p = g.idx(2, 2, 1);
        y.values_mut()[p] = 1.0;
        let out = transport_adjoint(&y, &FlowField::zeros(g)).unwrap();
        // -y_t: y(t) at the impulse contributes -1 at t and +1 at t+1.
        for (q, &val) in out.values().iter().enumerate() {
            let expected = if q == p {
                -1.0
            } else if q == g.idx(2, 2, 2) {
                1.0
            } else {
                0.0
            };
            assert_eq!(val, expected, "at {q}");
        }
        let zero = transport_adjoint(&ImageSequence::zeros(g), &FlowField::zeros(g)).unwrap();
        assert!(zero.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transport_is_local() {
        let g = Grid::new(5, 5, 2).unwrap();
        let mut r = rng(6);
        let u = ImageSequence::from_vec(g, rand_vec(&mut r, g.len())).unwrap();
        let v =
            FlowField::from_vecs(g, rand_vec(&mut r, g.len()), rand_vec(&mut r, g.len())).unwrap();
        let base = transport_apply(&u, &v).unwrap();
        let mut u2 = u.clone();
        u2.values_mut()[g.idx(3, 2, 1)] += 1.0;
        let moved = transport_apply(&u2, &v).unwrap();
        for t in 0..=2usize {
            for j in 0..=5usize {
                for i in 0..=5usize {
                    let p = g.idx(i, j, t);
                    let near = i.abs_diff(3) <= 1 && j.abs_diff(2) <= 1 && t.abs_diff(1) <= 1;
                    if !near {
                        assert_eq!(base.values()[p], moved.values()[p]);
                    }
                }
            }
        }
    }

    #[test]
    fn power_iteration_identity_and_zero() {
        let id = operator_norm_estimate(|x| x.to_vec(), |x| x.to_vec(), 50, 50, 1);
        assert!((id - 1.0).abs() <= 1e-6);
        let zero =
            operator_norm_estimate(|x| vec![0.0; x.len()], |x| vec![0.0; x.len()], 50, 50, 1);
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn power_iteration_gradient_norm_approaches_sqrt8() {
        let g = Grid::new(63, 63, 1).unwrap();
        let apply = |x: &[f64]| {
            let mut out = vec![0.0; 2 * g.len()];
            let (a, b) = out.split_at_mut(g.len());
            grad_forward_into(g, x, a, b);
            out
        };
        let adjoint = |y: &[f64]| {
            let mut out = vec![0.0; g.len()];
            div_backward_into(g, &y[..g.len()], &y[g.len()..], &mut out);
            out.iter_mut().for_each(|e| *e = -*e);
            out
        };
        let est = operator_norm_estimate(apply, adjoint, g.len(), 2000, POWER_ITERATION_SEED);
        assert!(est < 8f64.sqrt());
        assert!(est > 2.75, "estimate {est}");
    }

    #[test]
    fn power_iteration_is_deterministic() {
        let f = |x: &[f64]| x.iter().map(|e| 2.0 * e).collect::<Vec<_>>();
        let a = operator_norm_estimate(f, f, 30, 50, 9);
        let b = operator_norm_estimate(f, f, 30, 50, 9);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
