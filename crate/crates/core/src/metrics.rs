//! Image quality (SSIM, SNR, PSNR) and flow error (AEE, AE) measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FlowField, Frame, ImageSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    /// Side of the square uniform window, clipped to the frame size.
    pub window: usize,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            window: 8,
        }
    }
}

/// Mean SSIM over all positions of a sliding uniform window. Local variances
/// and covariance use the unbiased `1/(N-1)` normalization.
pub fn ssim(u_ref: &Frame, u_rec: &Frame, params: &SsimParams) -> Result<f64> {
    if u_ref.width != u_rec.width || u_ref.height != u_rec.height {
        return Err(Error::contract("ssim: frame sizes differ"));
    }
    let wx = params.window.min(u_ref.width).max(1);
    let wy = params.window.min(u_ref.height).max(1);
    let count = (wx * wy) as f64;
    let norm = if count > 1.0 { count - 1.0 } else { 1.0 };
    let (w, h) = (u_ref.width, u_ref.height);
    let (a, b) = (&u_ref.values, &u_rec.values);

    let mut total = 0.0;
    let mut positions = 0usize;
    for y0 in 0..=(h - wy) {
        for x0 in 0..=(w - wx) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wy {
                for x in x0..x0 + wx {
                    let p = y * w + x;
                    sa += a[p];
                    sb += b[p];
                    saa += a[p] * a[p];
                    sbb += b[p] * b[p];
                    sab += a[p] * b[p];
                }
            }
            let ma = sa / count;
            let mb = sb / count;
            let va = (saa - count * ma * ma) / norm;
            let vb = (sbb - count * mb * mb) / norm;
            let cov = (sab - count * ma * mb) / norm;
            let num = (2.0 * ma * mb + params.c1) * (2.0 * cov + params.c2);
            let den = (ma * ma + mb * mb + params.c1) * (va + vb + params.c2);
            total += num / den;
            positions += 1;
        }
    }
    Ok(total / positions as f64)
}

/// Framewise SSIM averaged over frames.
pub fn ssim_sequence(
    u_ref: &ImageSequence,
    u_rec: &ImageSequence,
    params: &SsimParams,
) -> Result<f64> {
    u_ref.grid().ensure_same(&u_rec.grid(), "ssim_sequence")?;
    let frames = u_ref.grid().frames();
    let mut s = 0.0;
    for t in 0..frames {
        s += ssim(&u_ref.frame(t), &u_rec.frame(t), params)?;
    }
    Ok(s / frames as f64)
}

fn mse(u_ref: &[f64], u_rec: &[f64]) -> Result<f64> {
    if u_ref.len() != u_rec.len() || u_ref.is_empty() {
        return Err(Error::contract(
            "image metrics need equal, non-empty buffers",
        ));
    }
    Ok(u_ref
        .iter()
        .zip(u_rec)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / u_ref.len() as f64)
}

/// `10 log10(max(u²) / mse)` in dB; `+inf` when the inputs are identical.
pub fn psnr(u_ref: &[f64], u_rec: &[f64]) -> Result<f64> {
    let m = mse(u_ref, u_rec)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = u_ref.iter().map(|x| x * x).fold(0.0, f64::max);
    Ok(10.0 * (peak / m).log10())
}

/// `10 log10(mean(u²) / mse)` in dB; `+inf` when the inputs are identical.
pub fn snr(u_ref: &[f64], u_rec: &[f64]) -> Result<f64> {
    let m = mse(u_ref, u_rec)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    let power = u_ref.iter().map(|x| x * x).sum::<f64>() / u_ref.len() as f64;
    Ok(10.0 * (power / m).log10())
}

/// Spatial region over which flow errors are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlowRegion {
    /// Pixels excluded along every image border.
    pub margin: usize,
}

fn flow_mean(
    v: &FlowField,
    v_gt: &FlowField,
    region: FlowRegion,
    err: impl Fn(f64, f64, f64, f64) -> f64,
) -> Result<f64> {
    let g = v.grid();
    g.ensure_same(&v_gt.grid(), "flow metric")?;
    let m = region.margin;
    if 2 * m >= g.width() || 2 * m >= g.height() {
        return Err(Error::contract("flow metric margin leaves no pixels"));
    }
    let mut per_transition = 0.0;
    for t in 0..g.nt() {
        let mut s = 0.0;
        let mut count = 0usize;
        for j in m..g.height() - m {
            for i in m..g.width() - m {
                let p = g.idx(i, j, t);
                s += err(v.v1[p], v.v2[p], v_gt.v1[p], v_gt.v2[p]);
                count += 1;
            }
        }
        per_transition += s / count as f64;
    }
    Ok(per_transition / g.nt() as f64)
}

fn endpoint(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    ((a1 - b1) * (a1 - b1) + (a2 - b2) * (a2 - b2)).sqrt()
}

fn angular(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    // arccos of the normalized dot product, evaluated as atan2(|a x b|, a.b)
    // so that identical vectors give exactly zero
    let dot = a1 * b1 + a2 * b2 + 1.0;
    let (cx, cy, cz) = (a2 - b2, b1 - a1, a1 * b2 - a2 * b1);
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    cross.atan2(dot)
}

/// Average endpoint error over all transitions (frames `0..nt`).
pub fn aee(v: &FlowField, v_gt: &FlowField) -> Result<f64> {
    flow_mean(v, v_gt, FlowRegion::default(), endpoint)
}

pub fn aee_region(v: &FlowField, v_gt: &FlowField, region: FlowRegion) -> Result<f64> {
    flow_mean(v, v_gt, region, endpoint)
}

/// Average angular error in radians between the lifted vectors `(v¹, v², 1)`.
pub fn ae(v: &FlowField, v_gt: &FlowField) -> Result<f64> {
    flow_mean(v, v_gt, FlowRegion::default(), angular)
}

pub fn ae_region(v: &FlowField, v_gt: &FlowField, region: FlowRegion) -> Result<f64> {
    flow_mean(v, v_gt, region, angular)
}

/// Image and flow scores of one reconstruction. Missing entries are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub snr: Option<f64>,
    pub aee: Option<f64>,
    pub ae: Option<f64>,
}

impl Scores {
    pub fn images(u_ref: &ImageSequence, u_rec: &ImageSequence) -> Result<Self> {
        Ok(Scores {
            ssim: Some(ssim_sequence(u_ref, u_rec, &SsimParams::default())?),
            psnr: Some(psnr(u_ref.values(), u_rec.values())?),
            snr: Some(snr(u_ref.values(), u_rec.values())?),
            ..Default::default()
        })
    }

    pub fn flows(v: &FlowField, v_gt: &FlowField, region: FlowRegion) -> Result<Self> {
        Ok(Scores {
            aee: Some(aee_region(v, v_gt, region)?),
            ae: Some(ae_region(v, v_gt, region)?),
            ..Default::default()
        })
    }

    pub fn merge(self, other: Scores) -> Scores {
        Scores {
            ssim: self.ssim.or(other.ssim),
            psnr: self.psnr.or(other.psnr),
            snr: self.snr.or(other.snr),
            aee: self.aee.or(other.aee),
            ae: self.ae.or(other.ae),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    // Windowed SSIM written with explicit two-pass statistics.
    fn oracle_ssim(a: &Frame, b: &Frame, win: usize) -> f64 {
        let (c1, c2) = (1e-4, 9e-4);
        let mut vals = Vec::new();
        for y0 in 0..=a.height - win {
            for x0 in 0..=a.width - win {
                let mut pa = Vec::new();
                let mut pb = Vec::new();
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        pa.push(a.at(x, y));
                        pb.push(b.at(x, y));
                    }
                }
                let n = pa.len() as f64;
                let ma = pa.iter().sum::<f64>() / n;
                let mb = pb.iter().sum::<f64>() / n;
                let va = pa.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0);
                let vb = pb.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (n - 1.0);
                let cov = pa
                    .iter()
                    .zip(&pb)
                    .map(|(x, y)| (x - ma) * (y - mb))
                    .sum::<f64>()
                    / (n - 1.0);
                vals.push(
                    (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
                );
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    fn random_frame(r: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
        Frame::new(w, h, (0..w * h).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn default_ssim_constants() {
        let p = SsimParams::default();
        assert_eq!(p.c1, 0.01 * 0.01);
        assert_eq!(p.c2, 0.03 * 0.03);
        assert_eq!(p.window, 8);
    }

    #[test]
    fn ssim_identity_and_inverse() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = random_frame(&mut r, 16, 12);
        let s = ssim(&a, &a, &SsimParams::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let inv = Frame::new(16, 12, a.values.iter().map(|x| 1.0 - x).collect()).unwrap();
        let si = ssim(&a, &inv, &SsimParams::default()).unwrap();
        assert!(si < 1.0);
        assert!((si - oracle_ssim(&a, &inv, 8)).abs() < 1e-10);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = random_frame(&mut r, 10, 10);
        let b = random_frame(&mut r, 10, 10);
        let p = SsimParams::default();
        assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() < 1e-14);
        assert!((ssim(&a, &b, &p).unwrap() - oracle_ssim(&a, &b, 8)).abs() < 1e-10);
    }

    #[test]
    fn psnr_examples() {
        let a = vec![1.0; 16];
        let b = vec![0.9; 16];
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-12, "{p}");
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(snr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b[..3]).is_err());
    }

    #[test]
    fn psnr_snr_match_oracle_and_order() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a: Vec<f64> = (0..64).map(|_| r.random::<f64>()).collect();
            let b: Vec<f64> = (0..64).map(|_| r.random::<f64>()).collect();
            let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 64.0;
            let max2 = a.iter().map(|x| x * x).fold(0.0, f64::max);
            let mean2 = a.iter().map(|x| x * x).sum::<f64>() / 64.0;
            let p = psnr(&a, &b).unwrap();
            let s = snr(&a, &b).unwrap();
            assert!((p - 10.0 * (max2 / mse).log10()).abs() < 1e-10);
            assert!((s - 10.0 * (mean2 / mse).log10()).abs() < 1e-10);
            assert!(p >= s);
        }
    }

    #[test]
    fn aee_examples() {
        let g = Grid::new(3, 3, 2).unwrap();
        let gt = FlowField::constant(g, 0.5, -0.5);
        assert_eq!(aee(&gt, &gt).unwrap(), 0.0);
        let off = FlowField::constant(g, 3.5, 3.5);
        assert_eq!(aee(&off, &gt).unwrap(), 5.0);
    }

    #[test]
    fn ae_single_point_case() {
        let g = Grid::new(1, 1, 1).unwrap();
        let v = FlowField::zeros(g);
        let gt = FlowField::constant(g, 1.0, 0.0);
        assert!((ae(&v, &gt).unwrap() - FRAC_PI_4).abs() < 1e-12);
        assert_eq!(ae(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn flow_metrics_match_oracle() {
        let g = Grid::new(6, 5, 3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut rf = || -> Vec<f64> { (0..g.len()).map(|_| r.random_range(-2.0..2.0)).collect() };
        let v = FlowField::from_vecs(g, rf(), rf()).unwrap();
        let w = FlowField::from_vecs(g, rf(), rf()).unwrap();
        let mut e_sum = 0.0;
        let mut a_sum = 0.0;
        let mut n = 0.0;
        for t in 0..g.nt() {
            for j in 0..g.height() {
                for i in 0..g.width() {
                    let p = g.idx(i, j, t);
                    e_sum += (v.v1[p] - w.v1[p]).hypot(v.v2[p] - w.v2[p]);
                    let va = [v.v1[p], v.v2[p], 1.0];
                    let wa = [w.v1[p], w.v2[p], 1.0];
                    let nv = va.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nw = wa.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let d: f64 = va.iter().zip(&wa).map(|(x, y)| x / nv * y / nw).sum();
                    a_sum += d.clamp(-1.0, 1.0).acos();
                    n += 1.0;
                }
            }
        }
        assert!((aee(&v, &w).unwrap() - e_sum / n).abs() < 1e-12);
        assert!((ae(&v, &w).unwrap() - a_sum / n).abs() < 1e-10);
        assert!(ae(&v, &w).unwrap() >= 0.0);
    }
}
