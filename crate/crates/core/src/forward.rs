//! Linear measurement operators `K`, applied frame by frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, ImageSequence};

/// Convolution kernel with odd side lengths, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn new(width: usize, height: usize, weights: Vec<f64>) -> Result<Self> {
        if width.is_multiple_of(2) || height.is_multiple_of(2) {
            return Err(Error::config("blur kernel sides must be odd"));
        }
        if weights.len() != width * height {
            return Err(Error::config(format!(
                "blur kernel has {} weights, expected {}",
                weights.len(),
                width * height
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("blur kernel has non-finite weights"));
        }
        Ok(Kernel {
            width,
            height,
            weights,
        })
    }

    /// Uniform `size x size` box.
    pub fn boxed(size: usize) -> Result<Self> {
        let n = size * size;
        Kernel::new(size, size, vec![1.0 / n as f64; n])
    }

    /// Normalized Gaussian with the given standard deviation, radius `ceil(3 sigma)`.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::config("gaussian blur needs sigma > 0"));
        }
        let r = (3.0 * sigma).ceil() as i64;
        let size = (2 * r + 1) as usize;
        let mut weights = Vec::with_capacity(size * size);
        for y in -r..=r {
            for x in -r..=r {
                weights.push((-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp());
            }
        }
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        Kernel::new(size, size, weights)
    }
}

/// The per-frame part of `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameOp {
    Identity,
    Blur {
        kernel: Kernel,
    },
    /// Block averaging over `factor x factor` pixel blocks.
    Subsample {
        factor: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Identity,
    FrameMask,
    Blur,
    Subsample,
}

/// `K` bound to its domain grid. An optional frame mask zeroes the data of
/// unknown frames, which makes the operator time dependent.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    domain: Grid,
    range: Grid,
    op: FrameOp,
    known: Option<Vec<bool>>,
}

impl ForwardOperator {
    pub fn new(domain: Grid, op: FrameOp, known: Option<Vec<bool>>) -> Result<Self> {
        let range = match &op {
            FrameOp::Identity | FrameOp::Blur { .. } => domain,
            FrameOp::Subsample { factor } => {
                if *factor == 0 {
                    return Err(Error::config("subsample factor must be >= 1"));
                }
                Grid::with_dims(
                    domain.width() / factor,
                    domain.height() / factor,
                    domain.frames(),
                )
                .map_err(|_| Error::config("subsample factor leaves fewer than 2x2 pixels"))?
            }
        };
        if let Some(k) = &known {
            if k.len() != domain.frames() {
                return Err(Error::config(format!(
                    "frame mask has {} entries for {} frames",
                    k.len(),
                    domain.frames()
                )));
            }
        }
        let out = ForwardOperator {
            domain,
            range,
            op,
            known,
        };
        let ones = out.apply(&ImageSequence::constant(domain, 1.0))?;
        if ones.values().iter().all(|&x| x == 0.0) {
            return Err(Error::config(
                "forward operator maps the constant 1 to zero",
            ));
        }
        Ok(out)
    }

    pub fn identity(domain: Grid) -> Result<Self> {
        Self::new(domain, FrameOp::Identity, None)
    }

    pub fn frame_mask(domain: Grid, known: Vec<bool>) -> Result<Self> {
        Self::new(domain, FrameOp::Identity, Some(known))
    }

    pub fn blur(domain: Grid, kernel: Kernel) -> Result<Self> {
        Self::new(domain, FrameOp::Blur { kernel }, None)
    }

    pub fn subsample(domain: Grid, factor: usize) -> Result<Self> {
        Self::new(domain, FrameOp::Subsample { factor }, None)
    }

    pub fn kind(&self) -> OperatorKind {
        match (&self.op, &self.known) {
            (FrameOp::Identity, Some(_)) => OperatorKind::FrameMask,
            (FrameOp::Identity, None) => OperatorKind::Identity,
            (FrameOp::Blur { .. }, _) => OperatorKind::Blur,
            (FrameOp::Subsample { .. }, _) => OperatorKind::Subsample,
        }
    }

    pub fn domain(&self) -> Grid {
        self.domain
    }
    pub fn range(&self) -> Grid {
        self.range
    }
    pub fn frame_op(&self) -> &FrameOp {
        &self.op
    }
    pub fn known_frames(&self) -> Option<&[bool]> {
        self.known.as_deref()
    }

    pub fn is_known(&self, t: usize) -> bool {
        self.known.as_ref().is_none_or(|k| k[t])
    }

    pub fn apply(&self, u: &ImageSequence) -> Result<ImageSequence> {
        self.domain
            .ensure_same(&u.grid(), "forward operator apply")?;
        let mut out = vec![0.0; self.range.len()];
        self.apply_into(u.values(), &mut out);
        ImageSequence::from_vec(self.range, out)
    }

    pub fn adjoint(&self, d: &ImageSequence) -> Result<ImageSequence> {
        self.range
            .ensure_same(&d.grid(), "forward operator adjoint")?;
        let mut out = vec![0.0; self.domain.len()];
        self.adjoint_into(d.values(), &mut out);
        ImageSequence::from_vec(self.domain, out)
    }

    /// `out = K u` on raw buffers (`out` has range length).
    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let dn = self.domain.frame_len();
        let rn = self.range.frame_len();
        for t in 0..self.domain.frames() {
            let dst = &mut out[t * rn..(t + 1) * rn];
            if !self.is_known(t) {
                dst.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let src = &u[t * dn..(t + 1) * dn];
            match &self.op {
                FrameOp::Identity => dst.copy_from_slice(src),
                FrameOp::Blur { kernel } => {
                    blur_frame(self.domain.width(), self.domain.height(), kernel, src, dst)
                }
                FrameOp::Subsample { factor } => subsample_frame(
                    self.domain.width(),
                    self.range.width(),
                    self.range.height(),
                    *factor,
                    src,
                    dst,
                ),
            }
        }
    }

    /// `out = K^T d` on raw buffers (`out` has domain length).
    pub fn adjoint_into(&self, d: &[f64], out: &mut [f64]) {
        let dn = self.domain.frame_len();
        let rn = self.range.frame_len();
        for t in 0..self.domain.frames() {
            let dst = &mut out[t * dn..(t + 1) * dn];
            if !self.is_known(t) {
                dst.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let src = &d[t * rn..(t + 1) * rn];
            match &self.op {
                FrameOp::Identity => dst.copy_from_slice(src),
                FrameOp::Blur { kernel } => {
                    blur_frame_adjoint(self.domain.width(), self.domain.height(), kernel, src, dst)
                }
                FrameOp::Subsample { factor } => subsample_frame_adjoint(
                    self.domain.width(),
                    self.range.width(),
                    self.range.height(),
                    *factor,
                    src,
                    dst,
                ),
            }
        }
    }
}

/// Half-sample symmetric reflection into `0..n`.
fn reflect(mut k: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if k < 0 {
            k = -k - 1;
        } else if k >= n {
            k = 2 * n - k - 1;
        } else {
            return k as usize;
        }
    }
}

fn blur_frame(w: usize, h: usize, kernel: &Kernel, src: &[f64], dst: &mut [f64]) {
    let (cx, cy) = ((kernel.width / 2) as i64, (kernel.height / 2) as i64);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for b in 0..kernel.height {
                let sy = reflect(y as i64 + cy - b as i64, h);
                for a in 0..kernel.width {
                    let sx = reflect(x as i64 + cx - a as i64, w);
                    acc += kernel.weights[b * kernel.width + a] * src[sy * w + sx];
                }
            }
            dst[y * w + x] = acc;
        }
    }
}

fn blur_frame_adjoint(w: usize, h: usize, kernel: &Kernel, src: &[f64], dst: &mut [f64]) {
    dst.iter_mut().for_each(|x| *x = 0.0);
    let (cx, cy) = ((kernel.width / 2) as i64, (kernel.height / 2) as i64);
    for y in 0..h {
        for x in 0..w {
            let d = src[y * w + x];
            for b in 0..kernel.height {
                let sy = reflect(y as i64 + cy - b as i64, h);
                for a in 0..kernel.width {
                    let sx = reflect(x as i64 + cx - a as i64, w);
                    dst[sy * w + sx] += kernel.weights[b * kernel.width + a] * d;
                }
            }
        }
    }
}

fn subsample_frame(w: usize, rw: usize, rh: usize, s: usize, src: &[f64], dst: &mut [f64]) {
    let scale = 1.0 / (s * s) as f64;
    for y in 0..rh {
        for x in 0..rw {
            let mut acc = 0.0;
            for b in 0..s {
                for a in 0..s {
                    acc += src[(y * s + b) * w + x * s + a];
                }
            }
            dst[y * rw + x] = acc * scale;
        }
    }
}

fn subsample_frame_adjoint(w: usize, rw: usize, rh: usize, s: usize, src: &[f64], dst: &mut [f64]) {
    dst.iter_mut().for_each(|x| *x = 0.0);
    let scale = 1.0 / (s * s) as f64;
    for y in 0..rh {
        for x in 0..rw {
            let d = src[y * rw + x] * scale;
            for b in 0..s {
                for a in 0..s {
                    dst[(y * s + b) * w + x * s + a] = d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::inner_product;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(r: &mut ChaCha8Rng, g: Grid) -> ImageSequence {
        ImageSequence::from_vec(g, (0..g.len()).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn all_ops(g: Grid) -> Vec<ForwardOperator> {
        let mut known = vec![true; g.frames()];
        known[1] = false;
        vec![
            ForwardOperator::identity(g).unwrap(),
            ForwardOperator::frame_mask(g, known.clone()).unwrap(),
            ForwardOperator::blur(g, Kernel::boxed(3).unwrap()).unwrap(),
            ForwardOperator::blur(g, Kernel::new(3, 1, vec![0.2, 0.5, 0.3]).unwrap()).unwrap(),
            ForwardOperator::subsample(g, 2).unwrap(),
            ForwardOperator::new(
                g,
                FrameOp::Blur {
                    kernel: Kernel::gaussian(1.0).unwrap(),
                },
                Some(known),
            )
            .unwrap(),
        ]
    }

    #[test]
    fn identity_copies() {
        let g = Grid::new(3, 3, 1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let u = random_seq(&mut r, g);
        let k = ForwardOperator::identity(g).unwrap();
        assert_eq!(k.apply(&u).unwrap(), u);
        assert_eq!(k.adjoint(&u).unwrap(), u);
        assert_eq!(k.kind(), OperatorKind::Identity);
    }

    #[test]
    fn frame_mask_zeroes_unknown_frames() {
        let g = Grid::new(2, 2, 2).unwrap();
        let u = ImageSequence::constant(g, 1.0);
        let k = ForwardOperator::frame_mask(g, vec![true, false, true]).unwrap();
        let d = k.apply(&u).unwrap();
        assert!(d.frame_slice(0).iter().all(|&x| x == 1.0));
        assert!(d.frame_slice(1).iter().all(|&x| x == 0.0));
        assert!(d.frame_slice(2).iter().all(|&x| x == 1.0));
        // self-adjoint and idempotent
        assert_eq!(k.adjoint(&d).unwrap(), d);
        assert_eq!(k.apply(&d).unwrap(), d);
    }

    #[test]
    fn all_unknown_mask_is_rejected() {
        let g = Grid::new(2, 2, 1).unwrap();
        assert!(ForwardOperator::frame_mask(g, vec![false, false]).is_err());
        assert!(ForwardOperator::blur(g, Kernel::new(1, 1, vec![0.0]).unwrap()).is_err());
    }

    #[test]
    fn box_blur_of_impulse() {
        let g = Grid::new(6, 6, 1).unwrap();
        let mut u = ImageSequence::zeros(g);
        u.values_mut()[g.idx(3, 3, 0)] = 1.0;
        let k = ForwardOperator::blur(g, Kernel::boxed(3).unwrap()).unwrap();
        let d = k.apply(&u).unwrap();
        // direct convolution oracle
        for j in 0..7usize {
            for i in 0..7usize {
                let expected = if i.abs_diff(3) <= 1 && j.abs_diff(3) <= 1 {
                    1.0 / 9.0
                } else {
                    0.0
                };
                assert!((d.at(i, j, 0) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blur_preserves_mean() {
        let g = Grid::new(9, 6, 1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let u = random_seq(&mut r, g);
        for kernel in [Kernel::boxed(3).unwrap(), Kernel::gaussian(1.5).unwrap()] {
            let k = ForwardOperator::blur(g, kernel).unwrap();
            let d = k.apply(&u).unwrap();
            for t in 0..2 {
                let a: f64 = u.frame_slice(t).iter().sum();
                let b: f64 = d.frame_slice(t).iter().sum();
                assert!((a - b).abs() / g.frame_len() as f64 <= 1e-12);
            }
        }
    }

    #[test]
    fn subsample_block_average() {
        let g = Grid::new(3, 3, 1).unwrap();
        let u = ImageSequence::from_fn(g, |i, j, _| (i + 4 * j) as f64);
        let k = ForwardOperator::subsample(g, 2).unwrap();
        let d = k.apply(&u).unwrap();
        assert_eq!(d.grid().width(), 2);
        assert_eq!(d.at(0, 0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(d.at(1, 1, 1), (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn adjointness_of_every_operator() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for g in [
            Grid::new(3, 3, 1).unwrap(),
            Grid::new(7, 7, 3).unwrap(),
            Grid::new(6, 4, 2).unwrap(),
        ] {
            for k in all_ops(g) {
                for _ in 0..20 {
                    let u = random_seq(&mut r, g);
                    let d = random_seq(&mut r, k.range());
                    let lhs = inner_product(k.apply(&u).unwrap().values(), d.values()).unwrap();
                    let rhs = inner_product(u.values(), k.adjoint(&d).unwrap().values()).unwrap();
                    assert!(
                        (lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()),
                        "{:?}",
                        k.kind()
                    );
                }
            }
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let g = Grid::new(3, 3, 1).unwrap();
        let k = ForwardOperator::identity(g).unwrap();
        assert!(k
            .apply(&ImageSequence::zeros(Grid::new(2, 3, 1).unwrap()))
            .is_err());
    }
}
