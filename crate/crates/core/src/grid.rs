//! Space-time grid, field containers and the small amount of linear algebra
//! shared by every operator.
//!
//! All fields live in one contiguous buffer indexed `(t, j, i)` with `i`
//! fastest, so a frame is a contiguous slice of `width * height` values.
//! Grid spacing is 1 in space and time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points `(i, j, t)` with `i = 0..=nx`, `j = 0..=ny`, `t = 0..=nt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    nx: usize,
    ny: usize,
    nt: usize,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, nt: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nt == 0 {
            return Err(Error::contract(format!(
                "grid needs nx, ny, nt >= 1 (got {nx}, {ny}, {nt})"
            )));
        }
        Ok(Grid { nx, ny, nt })
    }

    /// Grid from pixel dimensions and frame count.
    pub fn with_dims(width: usize, height: usize, frames: usize) -> Result<Self> {
        if width < 2 || height < 2 || frames < 2 {
            return Err(Error::contract(format!(
                "need at least 2x2 pixels and 2 frames (got {width}x{height}x{frames})"
            )));
        }
        Grid::new(width - 1, height - 1, frames - 1)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn width(&self) -> usize {
        self.nx + 1
    }
    pub fn height(&self) -> usize {
        self.ny + 1
    }
    pub fn frames(&self) -> usize {
        self.nt + 1
    }
    pub fn frame_len(&self) -> usize {
        self.width() * self.height()
    }
    pub fn len(&self) -> usize {
        self.frame_len() * self.frames()
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, t: usize) -> usize {
        (t * self.height() + j) * self.width() + i
    }

    pub(crate) fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::contract(format!(
                "{what}: grid mismatch {self:?} vs {other:?}"
            )));
        }
        Ok(())
    }
}

/// A single 2-D frame, row-major with `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::contract(format!(
                "frame buffer has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(Frame {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Frame {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Frame {
            width,
            height,
            values,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Gray-valued image sequence `u` on a space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    grid: Grid,
    values: Vec<f64>,
}

impl ImageSequence {
    pub fn zeros(grid: Grid) -> Self {
        ImageSequence {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        ImageSequence {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_vec(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::contract(format!(
                "sequence buffer has {} values, grid holds {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(ImageSequence { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for t in 0..grid.frames() {
            for j in 0..grid.height() {
                for i in 0..grid.width() {
                    values.push(f(i, j, t));
                }
            }
        }
        ImageSequence { grid, values }
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::contract("sequence needs at least one frame"))?;
        let grid = Grid::with_dims(first.width, first.height, frames.len())?;
        let mut values = Vec::with_capacity(grid.len());
        for (t, fr) in frames.iter().enumerate() {
            if fr.width != first.width || fr.height != first.height {
                return Err(Error::contract(format!(
                    "frame {t} is {}x{}, expected {}x{}",
                    fr.width, fr.height, first.width, first.height
                )));
            }
            values.extend_from_slice(&fr.values);
        }
        Ok(ImageSequence { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, t: usize) -> f64 {
        self.values[self.grid.idx(i, j, t)]
    }

    pub fn frame_slice(&self, t: usize) -> &[f64] {
        let n = self.grid.frame_len();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn frame(&self, t: usize) -> Frame {
        Frame {
            width: self.grid.width(),
            height: self.grid.height(),
            values: self.frame_slice(t).to_vec(),
        }
    }

    pub fn frames(&self) -> Vec<Frame> {
        (0..self.grid.frames()).map(|t| self.frame(t)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Flow field `v = (v1, v2)` in pixels per frame, one vector per grid point.
/// Frame `t` holds the motion from frame `t` to `t + 1`; the last frame has no
/// outgoing transition.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    grid: Grid,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
}

impl FlowField {
    pub fn zeros(grid: Grid) -> Self {
        FlowField {
            grid,
            v1: vec![0.0; grid.len()],
            v2: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: Grid, v1: f64, v2: f64) -> Self {
        FlowField {
            grid,
            v1: vec![v1; grid.len()],
            v2: vec![v2; grid.len()],
        }
    }

    pub fn from_vecs(grid: Grid, v1: Vec<f64>, v2: Vec<f64>) -> Result<Self> {
        if v1.len() != grid.len() || v2.len() != grid.len() {
            return Err(Error::contract(format!(
                "flow channels have {} and {} values, grid holds {}",
                v1.len(),
                v2.len(),
                grid.len()
            )));
        }
        Ok(FlowField { grid, v1, v2 })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Channels of frame `t` as `(v1, v2)` slices.
    pub fn frame_slices(&self, t: usize) -> (&[f64], &[f64]) {
        let n = self.grid.frame_len();
        (&self.v1[t * n..(t + 1) * n], &self.v2[t * n..(t + 1) * n])
    }

    pub fn frame(&self, t: usize) -> FlowFrame {
        let (a, b) = self.frame_slices(t);
        FlowFrame {
            width: self.grid.width(),
            height: self.grid.height(),
            v1: a.to_vec(),
            v2: b.to_vec(),
        }
    }

    /// Builds a field from per-transition frames; the final frame is zero.
    pub fn from_transitions(transitions: &[FlowFrame]) -> Result<Self> {
        let first = transitions
            .first()
            .ok_or_else(|| Error::contract("flow needs at least one transition"))?;
        let grid = Grid::with_dims(first.width, first.height, transitions.len() + 1)?;
        let mut out = FlowField::zeros(grid);
        let n = grid.frame_len();
        for (t, fr) in transitions.iter().enumerate() {
            if fr.width != first.width || fr.height != first.height {
                return Err(Error::contract(format!(
                    "flow frame {t} has mismatched size"
                )));
            }
            out.v1[t * n..(t + 1) * n].copy_from_slice(&fr.v1);
            out.v2[t * n..(t + 1) * n].copy_from_slice(&fr.v2);
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.v1.iter().chain(&self.v2).all(|v| v.is_finite())
    }
}

/// One 2-D flow frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowFrame {
    pub width: usize,
    pub height: usize,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
}

impl FlowFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowFrame {
            width,
            height,
            v1: vec![0.0; width * height],
            v2: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, v1: f64, v2: f64) -> Self {
        FlowFrame {
            width,
            height,
            v1: vec![v1; width * height],
            v2: vec![v2; width * height],
        }
    }
}

/// Number of channels a dual block carries per primal point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockShape {
    Scalar,
    Vector2,
    Vector4,
}

impl BlockShape {
    pub fn channels(self) -> usize {
        match self {
            BlockShape::Scalar => 1,
            BlockShape::Vector2 => 2,
            BlockShape::Vector4 => 4,
        }
    }
}

/// A dual variable paired with one operator row. Channel-major: channel `c`
/// of point `p` sits at `data[c * points + p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBlock {
    pub shape: BlockShape,
    pub points: usize,
    pub data: Vec<f64>,
}

impl DualBlock {
    pub fn zeros(shape: BlockShape, points: usize) -> Self {
        DualBlock {
            shape,
            points,
            data: vec![0.0; shape.channels() * points],
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.points..(c + 1) * self.points]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.points..(c + 1) * self.points]
    }
}

/// Stacked dual variables of a primal-dual solve.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub blocks: Vec<DualBlock>,
}

impl DualState {
    pub fn zeros(layout: &[(BlockShape, usize)]) -> Self {
        DualState {
            blocks: layout
                .iter()
                .map(|&(s, n)| DualBlock::zeros(s, n))
                .collect(),
        }
    }

    pub fn layout(&self) -> Vec<(BlockShape, usize)> {
        self.blocks.iter().map(|b| (b.shape, b.points)).collect()
    }

    pub fn fill_zero(&mut self) {
        for b in &mut self.blocks {
            b.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// `sum a_i b_i` in one sequential pass.
pub fn inner_product(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "inner product of buffers with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot(a, b))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

pub fn norms(buffer: &[f64]) -> Result<Norms> {
    let mut l1 = 0.0;
    let mut sq = 0.0;
    let mut linf: f64 = 0.0;
    for &x in buffer {
        if !x.is_finite() {
            return Err(Error::contract("norm of a buffer with non-finite entries"));
        }
        let a = x.abs();
        l1 += a;
        sq += x * x;
        linf = linf.max(a);
    }
    Ok(Norms {
        l1,
        l2: sq.sqrt(),
        linf,
    })
}

pub(crate) fn l1_norm(buffer: &[f64]) -> f64 {
    buffer.iter().map(|x| x.abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    // Pairwise summation, independent of the sequential pass.
    fn pairwise_sum(x: &[f64]) -> f64 {
        if x.len() <= 2 {
            return x.iter().sum();
        }
        let (a, b) = x.split_at(x.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }

    #[test]
    fn grid_counts_and_bounds() {
        let g = Grid::new(3, 2, 1).unwrap();
        assert_eq!(g.len(), 4 * 3 * 2);
        assert_eq!(g.idx(3, 2, 1), g.len() - 1);
        assert!(Grid::new(0, 2, 1).is_err());
        assert!(Grid::new(2, 2, 0).is_err());
    }

    #[test]
    fn layout_is_i_fastest() {
        let g = Grid::new(2, 1, 1).unwrap();
        let u = ImageSequence::from_fn(g, |i, j, t| (100 * t + 10 * j + i) as f64);
        assert_eq!(&u.values()[..4], &[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(u.frame_slice(1)[0], 100.0);
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(inner_product(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(inner_product(&[5.0, -2.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            inner_product(&[1.0], &[1.0, 2.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn inner_product_matches_pairwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_vec(&mut rng, 100);
        let b = random_vec(&mut rng, 100);
        let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let reference = pairwise_sum(&prod);
        let got = inner_product(&a, &b).unwrap();
        assert!((got - reference).abs() <= 1e-12 * reference.abs().max(1.0));
    }

    #[test]
    fn norm_examples() {
        let n = norms(&[3.0, -4.0]).unwrap();
        assert_eq!((n.l1, n.l2, n.linf), (7.0, 5.0, 4.0));
        let z = norms(&[0.0; 5]).unwrap();
        assert_eq!((z.l1, z.l2, z.linf), (0.0, 0.0, 0.0));
        assert!(norms(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn norms_match_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_vec(&mut rng, 257);
        let n = norms(&a).unwrap();
        let l1: f64 = pairwise_sum(&a.iter().map(|x| x.abs()).collect::<Vec<_>>());
        let l2 = pairwise_sum(&a.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt();
        let linf = a
            .iter()
            .fold(0.0f64, |m, x| if x.abs() > m { x.abs() } else { m });
        assert!((n.l1 - l1).abs() <= 1e-12 * l1);
        assert!((n.l2 - l2).abs() <= 1e-12 * l2);
        assert_eq!(n.linf, linf);
    }

    #[test]
    fn sequence_from_mismatched_frames_fails() {
        let a = Frame::zeros(3, 3);
        let b = Frame::zeros(4, 3);
        assert!(ImageSequence::from_frames(&[a, b]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
            (1usize..64).prop_flat_map(|n| {
                (
                    prop::collection::vec(-10.0f64..10.0, n),
                    prop::collection::vec(-10.0f64..10.0, n),
                    prop::collection::vec(-10.0f64..10.0, n),
                )
            })
        }

        proptest! {
            #[test]
            fn symmetric_and_bilinear((a, b, c) in pair(), s in -3.0f64..3.0) {
                let ab = inner_product(&a, &b).unwrap();
                prop_assert_eq!(ab, inner_product(&b, &a).unwrap());
                let sa_c: Vec<f64> = a.iter().zip(&c).map(|(x, z)| s * x + z).collect();
                let lhs = inner_product(&sa_c, &b).unwrap();
                let rhs = s * ab + inner_product(&c, &b).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
            }

            #[test]
            fn l2_squared_is_self_inner_product((a, _b, _c) in pair()) {
                let n = norms(&a).unwrap();
                let ip = inner_product(&a, &a).unwrap();
                prop_assert!((n.l2 * n.l2 - ip).abs() <= 1e-12 * ip.max(1e-300));
            }
        }
    }
}
