//! Synthetic test sequences with known motion.
//!
//! Flow follows the transport convention `u_t + ∇u·v = 0`: content at `x` in
//! frame `t` appears at `x + v` in frame `t + 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FlowField, FlowFrame, Frame, Grid, ImageSequence};

/// Flow vectors with a component magnitude above this are treated as unknown.
pub const INVALID_FLOW: f64 = 1e9;

pub fn is_valid_flow(v1: f64, v2: f64) -> bool {
    v1.is_finite() && v2.is_finite() && v1.abs() <= INVALID_FLOW && v2.abs() <= INVALID_FLOW
}

/// Rescales a flow frame so that its largest valid vector has length at most
/// one. Invalid vectors are set to zero.
pub fn scale_flow_to_unit(v: &FlowFrame) -> Result<FlowFrame> {
    let mut out = v.clone();
    let mut max_mag: f64 = 0.0;
    let mut any_valid = false;
    for (a, b) in out.v1.iter_mut().zip(out.v2.iter_mut()) {
        if is_valid_flow(*a, *b) {
            any_valid = true;
            max_mag = max_mag.max(a.hypot(*b));
        } else {
            *a = 0.0;
            *b = 0.0;
        }
    }
    if !any_valid {
        return Err(Error::contract("flow has no valid vectors"));
    }
    if max_mag > 1.0 {
        let s = 1.0 / max_mag;
        out.v1
            .iter_mut()
            .chain(out.v2.iter_mut())
            .for_each(|x| *x *= s);
    }
    Ok(out)
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Bicubic sample at a fractional position; indices outside the frame are
/// clamped to the border.
pub fn sample_cubic(frame: &Frame, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let wx = catmull_rom(x - x0);
    let wy = catmull_rom(y - y0);
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64) as usize;
    let mut acc = 0.0;
    for (b, wyb) in wy.iter().enumerate() {
        let yy = clamp(y0 + b as f64 - 1.0, frame.height);
        let row = &frame.values[yy * frame.width..(yy + 1) * frame.width];
        let mut r = 0.0;
        for (a, wxa) in wx.iter().enumerate() {
            r += wxa * row[clamp(x0 + a as f64 - 1.0, frame.width)];
        }
        acc += wyb * r;
    }
    acc
}

/// Samples `frame` at `x + k v(x)` with Catmull-Rom interpolation.
pub fn warp_cubic(frame: &Frame, v: &FlowFrame, k: f64) -> Result<Frame> {
    if v.width != frame.width || v.height != frame.height {
        return Err(Error::contract("warp_cubic: flow and frame sizes differ"));
    }
    let mut out = Frame::zeros(frame.width, frame.height);
    for y in 0..frame.height {
        for x in 0..frame.width {
            let p = y * frame.width + x;
            out.values[p] = sample_cubic(frame, x as f64 + k * v.v1[p], y as f64 + k * v.v2[p]);
        }
    }
    Ok(out)
}

/// Adds i.i.d. Gaussian noise of the given variance. No clamping.
pub fn add_gaussian_noise(seq: &ImageSequence, variance: f64, seed: u64) -> Result<ImageSequence> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::config(format!(
            "noise variance {variance} must be >= 0"
        )));
    }
    let mut out = seq.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in out.values_mut() {
        *x += normal.sample(&mut rng);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscParams {
    pub radius: f64,
    /// Centre in the first frame; `None` places the disc so that its path is
    /// centred in the frame.
    pub center: Option<[f64; 2]>,
    pub velocity: [f64; 2],
    pub foreground: f64,
    pub background: f64,
    /// Width of the smooth edge in pixels.
    pub edge: f64,
    /// Amplitude of a sinusoidal texture that moves with the disc.
    pub texture: f64,
    /// Wavelength of the texture in pixels.
    pub period: f64,
}

impl Default for DiscParams {
    fn default() -> Self {
        DiscParams {
            radius: 12.0,
            center: None,
            velocity: [0.5, 0.0],
            foreground: 0.8,
            background: 0.2,
            edge: 1.5,
            texture: 0.0,
            period: 16.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RampParams {
    pub slope: [f64; 2],
    pub offset: f64,
    pub velocity: [f64; 2],
}

impl Default for RampParams {
    fn default() -> Self {
        RampParams {
            slope: [1.0 / 32.0, 0.0],
            offset: 0.1,
            velocity: [1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneKind {
    /// Frame `k` is the base sampled at `x - k v`, with `v` the flow scaled to
    /// unit maximum magnitude.
    WarpedFromFlow {
        base: Frame,
        flow: FlowFrame,
    },
    TranslatingDisc(DiscParams),
    TranslatingRamp(RampParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub noise_variance: f64,
}

impl SyntheticScene {
    pub fn disc(width: usize, height: usize, frames: usize, params: DiscParams) -> Self {
        SyntheticScene {
            kind: SceneKind::TranslatingDisc(params),
            width,
            height,
            frames,
            noise_variance: 0.0,
        }
    }

    pub fn ramp(width: usize, height: usize, frames: usize, params: RampParams) -> Self {
        SyntheticScene {
            kind: SceneKind::TranslatingRamp(params),
            width,
            height,
            frames,
            noise_variance: 0.0,
        }
    }

    pub fn warped(base: Frame, flow: FlowFrame, frames: usize) -> Self {
        SyntheticScene {
            width: base.width,
            height: base.height,
            kind: SceneKind::WarpedFromFlow { base, flow },
            frames,
            noise_variance: 0.0,
        }
    }

    pub fn with_noise(mut self, variance: f64) -> Self {
        self.noise_variance = variance;
        self
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::with_dims(self.width, self.height, self.frames)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub f: ImageSequence,
    pub u_clean: ImageSequence,
    pub v_gt: FlowField,
}

fn disc_center(p: &DiscParams, width: usize, height: usize, frames: usize) -> [f64; 2] {
    p.center.unwrap_or_else(|| {
        let travel = (frames - 1) as f64;
        [
            0.5 * (width as f64 - 1.0) - 0.5 * travel * p.velocity[0],
            0.5 * (height as f64 - 1.0) - 0.5 * travel * p.velocity[1],
        ]
    })
}

pub fn make_scene(scene: &SyntheticScene, seed: u64) -> Result<Scene> {
    let grid = scene.grid()?;
    let (w, h) = (scene.width, scene.height);
    let (frames, flow) = match &scene.kind {
        SceneKind::WarpedFromFlow { base, flow } => {
            if base.width != w || base.height != h {
                return Err(Error::contract("scene size differs from base frame"));
            }
            let v = scale_flow_to_unit(flow)?;
            let frames = (0..scene.frames)
                .map(|k| warp_cubic(base, &v, -(k as f64)))
                .collect::<Result<Vec<_>>>()?;
            (frames, v)
        }
        SceneKind::TranslatingDisc(p) => {
            if !(p.radius > 0.0 && p.edge > 0.0 && p.period > 0.0) {
                return Err(Error::config("disc radius, edge and period must be > 0"));
            }
            let k = std::f64::consts::TAU / p.period;
            let c = disc_center(p, w, h, scene.frames);
            let frames = (0..scene.frames)
                .map(|t| {
                    let cx = c[0] + t as f64 * p.velocity[0];
                    let cy = c[1] + t as f64 * p.velocity[1];
                    Frame::from_fn(w, h, |x, y| {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        let s = 0.5 * (1.0 - ((dx.hypot(dy) - p.radius) / p.edge).tanh());
                        let tex = p.texture * (k * dx).sin() * (k * dy).cos();
                        p.background + (p.foreground - p.background) * s + tex
                    })
                })
                .collect();
            (
                frames,
                FlowFrame::constant(w, h, p.velocity[0], p.velocity[1]),
            )
        }
        SceneKind::TranslatingRamp(p) => {
            let frames = (0..scene.frames)
                .map(|t| {
                    let t = t as f64;
                    Frame::from_fn(w, h, |x, y| {
                        p.offset
                            + p.slope[0] * (x as f64 - t * p.velocity[0])
                            + p.slope[1] * (y as f64 - t * p.velocity[1])
                    })
                })
                .collect();
            (
                frames,
                FlowFrame::constant(w, h, p.velocity[0], p.velocity[1]),
            )
        }
    };
    let u_clean = ImageSequence::from_frames(&frames)?;
    u_clean.grid().ensure_same(&grid, "make_scene")?;
    let v_gt = FlowField::from_transitions(&vec![flow; scene.frames - 1])?;
    let f = add_gaussian_noise(&u_clean, scene.noise_variance, seed)?;
    Ok(Scene { f, u_clean, v_gt })
}

/// Intensity-weighted centroid of `|u - background|`.
pub fn centroid(frame: &Frame, background: f64) -> Option<[f64; 2]> {
    let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
    for y in 0..frame.height {
        for x in 0..frame.width {
            let wgt = (frame.at(x, y) - background).abs();
            m += wgt;
            mx += wgt * x as f64;
            my += wgt * y as f64;
        }
    }
    (m > 0.0).then(|| [mx / m, my / m])
}
