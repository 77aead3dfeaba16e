//! Experiment drivers: single solves, the noise sweep, the comparison table
//! and temporal inpainting, plus writing their artifacts.
//!
//! Independent cells (one weight pair at one noise level) run on a rayon
//! pool; each cell is sequential, and all files are written afterwards from
//! the calling thread.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSpec, ExperimentConfig, ExperimentKind, SceneName};
use crate::data_gen::{add_gaussian_noise, make_scene, SceneKind, SyntheticScene};
use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::grid::{FlowField, ImageSequence};
use crate::io::{
    frame_path, load_flow, load_frame, load_sequence, read_flo, save_flow, save_flow_color,
    save_frame, save_sequence, BitDepth,
};
use crate::joint::{
    masked_alpha, solve_joint, solve_rof_2d_sequence, solve_rof_2dt, solve_tvl1_flow, JointResult,
    OuterRecord,
};
use crate::metrics::{ae, aee, psnr, ssim_sequence, Scores, SsimParams};

/// Observed data together with whatever ground truth is available.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub f: ImageSequence,
    pub clean: Option<ImageSequence>,
    pub v_gt: Option<FlowField>,
}

fn synthetic_scene(cfg: &ExperimentConfig, frames: usize, variance: f64) -> Result<SyntheticScene> {
    let DataSpec::Synthetic {
        scene,
        width,
        height,
        disc,
        ramp,
        base,
        flow,
        ..
    } = &cfg.data
    else {
        return Err(Error::config("not a synthetic data source"));
    };
    let kind = match scene {
        SceneName::TranslatingDisc => SceneKind::TranslatingDisc(*disc),
        SceneName::TranslatingRamp => SceneKind::TranslatingRamp(*ramp),
        SceneName::WarpedFromFlow => {
            let (Some(b), Some(fl)) = (base, flow) else {
                return Err(Error::config(
                    "warped_from_flow needs data.base and data.flow",
                ));
            };
            let base = load_frame(b)?;
            let flow = read_flo(fl)?;
            SceneKind::WarpedFromFlow { base, flow }
        }
    };
    let (width, height) = match &kind {
        SceneKind::WarpedFromFlow { base, .. } => (base.width, base.height),
        _ => (*width, *height),
    };
    Ok(SyntheticScene {
        kind,
        width,
        height,
        frames,
        noise_variance: variance,
    })
}

fn configured_variance(cfg: &ExperimentConfig) -> f64 {
    match cfg.data {
        DataSpec::Synthetic { noise_variance, .. } | DataSpec::Directory { noise_variance, .. } => {
            noise_variance
        }
    }
}

/// Builds the dataset of `cfg`, optionally overriding the noise variance and
/// the frame count of synthetic scenes.
pub fn load_dataset(
    cfg: &ExperimentConfig,
    variance: Option<f64>,
    frames: Option<usize>,
) -> Result<Dataset> {
    let variance = variance.unwrap_or_else(|| configured_variance(cfg));
    match &cfg.data {
        DataSpec::Synthetic { frames: n, .. } => {
            let scene = synthetic_scene(cfg, frames.unwrap_or(*n), variance)?;
            let s = make_scene(&scene, cfg.seed)?;
            Ok(Dataset {
                f: s.f,
                clean: Some(s.u_clean),
                v_gt: Some(s.v_gt),
            })
        }
        DataSpec::Directory {
            path, ground_truth, ..
        } => {
            let clean = load_sequence(path)?;
            let v_gt = ground_truth.as_deref().map(load_flow).transpose()?;
            if let Some(v) = &v_gt {
                v.grid().ensure_same(&clean.grid(), "ground-truth flow")?;
            }
            Ok(Dataset {
                f: add_gaussian_noise(&clean, variance, cfg.seed)?,
                clean: Some(clean),
                v_gt,
            })
        }
    }
}

pub fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

fn image_scores(clean: Option<&ImageSequence>, u: &ImageSequence) -> Result<Scores> {
    clean.map_or(Ok(Scores::default()), |c| Scores::images(c, u))
}

fn flow_scores(v_gt: Option<&FlowField>, v: &FlowField) -> Result<Scores> {
    Ok(match v_gt {
        Some(g) => Scores {
            aee: Some(aee(v, g)?),
            ae: Some(ae(v, g)?),
            ..Default::default()
        },
        None => Scores::default(),
    })
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub data: Dataset,
    pub result: JointResult,
    pub scores: Scores,
}

/// One joint solve on the configured data with the configured weights. With
/// `identity` the forward operator is ignored.
pub fn single_solve(cfg: &ExperimentConfig, identity: bool) -> Result<SolveOutcome> {
    let data = load_dataset(cfg, None, None)?;
    let grid = data
        .clean
        .as_ref()
        .map(|c| c.grid())
        .unwrap_or_else(|| data.f.grid());
    let k = if identity {
        ForwardOperator::identity(grid)?
    } else {
        cfg.operator.build(grid)?
    };
    let f = if identity {
        data.f.clone()
    } else {
        // Synthetic data is clean in the image domain: measure it through K
        // before adding noise.
        let clean = data.clean.as_ref().unwrap_or(&data.f);
        add_gaussian_noise(&k.apply(clean)?, configured_variance(cfg), cfg.seed)?
    };
    let jc = cfg.joint_config(k, cfg.model.alpha, cfg.model.beta);
    let result = solve_joint(&f, &jc, None, None).map_err(|e| e.context("joint solve"))?;
    let scores = image_scores(data.clean.as_ref(), &result.u)?
        .merge(flow_scores(data.v_gt.as_ref(), &result.v)?);
    Ok(SolveOutcome {
        data: Dataset { f, ..data },
        result,
        scores,
    })
}

/// Best scores of one method at one noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepLevel {
    pub variance: f64,
    pub joint_aee: f64,
    pub joint_ae: f64,
    pub static_aee: f64,
    pub static_ae: f64,
}

/// One evaluated cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub variance: f64,
    pub method: &'static str,
    pub alpha: Option<f64>,
    pub beta: f64,
    pub aee: f64,
    pub ae: f64,
}

fn min_by<T>(items: impl Iterator<Item = T>, key: impl Fn(&T) -> f64) -> Option<f64> {
    items
        .map(|x| key(&x))
        .fold(None, |m, x| Some(m.map_or(x, |m: f64| m.min(x))))
}

/// Joint model against static TV-L¹ flow over the configured noise levels.
/// Each method reports its best AEE and AE over the weight grid.
pub fn noise_sweep(
    cfg: &ExperimentConfig,
    pool: &rayon::ThreadPool,
) -> Result<(Vec<SweepLevel>, Vec<SweepCell>)> {
    let sw = &cfg.sweep;
    if sw.variances.is_empty() || sw.alpha.is_empty() || sw.beta.is_empty() {
        return Err(Error::config(
            "noise sweep needs variances, alpha and beta values",
        ));
    }
    let data = sw
        .variances
        .iter()
        .map(|&var| load_dataset(cfg, Some(var), None).map(|d| (var, d)))
        .collect::<Result<Vec<_>>>()?;
    if data.iter().any(|(_, d)| d.v_gt.is_none()) {
        return Err(Error::config("noise sweep needs ground-truth flow"));
    }
    let mut jobs = Vec::new();
    for (li, _) in data.iter().enumerate() {
        for &b in &sw.beta {
            jobs.push((li, None, b));
            for &a in &sw.alpha {
                jobs.push((li, Some(a), b));
            }
        }
    }
    let gamma = cfg.model.gamma;
    let cells = pool
        .install(|| {
            jobs.par_iter()
                .map(|&(li, alpha, beta)| {
                    let (var, d) = &data[li];
                    let gt = d.v_gt.as_ref().expect("checked above");
                    let (method, v) = match alpha {
                        Some(a) => {
                            let k = ForwardOperator::identity(d.f.grid())?;
                            let r = solve_joint(&d.f, &cfg.joint_config(k, a, beta), None, None)?;
                            ("joint", r.v)
                        }
                        None => (
                            "static",
                            solve_tvl1_flow(&d.f, beta / gamma, cfg.solver.inner_v())?.0,
                        ),
                    };
                    Ok(SweepCell {
                        variance: *var,
                        method,
                        alpha,
                        beta,
                        aee: aee(&v, gt)?,
                        ae: ae(&v, gt)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .map_err(|e| e.context("noise sweep"))?;
    let levels = data
        .iter()
        .map(|(var, _)| {
            let cells = &cells;
            let of = |m: &'static str| {
                cells
                    .iter()
                    .filter(move |c| c.variance == *var && c.method == m)
            };
            SweepLevel {
                variance: *var,
                joint_aee: min_by(of("joint"), |c| c.aee).unwrap_or(f64::NAN),
                joint_ae: min_by(of("joint"), |c| c.ae).unwrap_or(f64::NAN),
                static_aee: min_by(of("static"), |c| c.aee).unwrap_or(f64::NAN),
                static_ae: min_by(of("static"), |c| c.ae).unwrap_or(f64::NAN),
            }
        })
        .collect();
    Ok((levels, cells))
}

pub const TABLE_ROWS: [&str; 5] = ["Joint", "ROF 2D", "ROF 2D+t", "OF Noisy", "OF Denoised"];

/// One row of the comparison table: best value of every column over the
/// method's weight grid; `None` where the method produces no such output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub algorithm: &'static str,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub aee: Option<f64>,
    pub ae: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
enum TableJob {
    Joint(f64, f64),
    Rof2d(f64),
    Rof2dt(f64),
    OfNoisy(f64),
    OfDenoised(f64, f64),
}

impl TableJob {
    fn row(&self) -> usize {
        match self {
            TableJob::Joint(..) => 0,
            TableJob::Rof2d(_) => 1,
            TableJob::Rof2dt(_) => 2,
            TableJob::OfNoisy(_) => 3,
            TableJob::OfDenoised(..) => 4,
        }
    }
}

pub fn comparison_table(cfg: &ExperimentConfig, pool: &rayon::ThreadPool) -> Result<Vec<TableRow>> {
    let d = load_dataset(cfg, None, None)?;
    let clean = d
        .clean
        .as_ref()
        .ok_or_else(|| Error::config("comparison table needs clean frames"))?;
    let gt = d
        .v_gt
        .as_ref()
        .ok_or_else(|| Error::config("comparison table needs ground-truth flow"))?;
    let sw = &cfg.sweep;
    let gamma = cfg.model.gamma;
    let mut jobs = Vec::new();
    for &a in &sw.alpha {
        jobs.push(TableJob::Rof2d(a));
        jobs.push(TableJob::Rof2dt(a));
        for &b in &sw.beta {
            jobs.push(TableJob::Joint(a, b));
            jobs.push(TableJob::OfDenoised(a, b));
        }
    }
    for &b in &sw.beta {
        jobs.push(TableJob::OfNoisy(b));
    }
    let (iu, iv) = (cfg.solver.inner_u(), cfg.solver.inner_v());
    let ssim_p = SsimParams::default();
    let scored = pool
        .install(|| {
            jobs.par_iter()
                .map(|job| {
                    let (u, v) = match *job {
                        TableJob::Joint(a, b) => {
                            let k = ForwardOperator::identity(d.f.grid())?;
                            let r = solve_joint(&d.f, &cfg.joint_config(k, a, b), None, None)?;
                            (Some(r.u), Some(r.v))
                        }
                        TableJob::Rof2d(a) => (Some(solve_rof_2d_sequence(&d.f, a, iu)?.0), None),
                        TableJob::Rof2dt(a) => (Some(solve_rof_2dt(&d.f, a, iu)?.0), None),
                        TableJob::OfNoisy(b) => {
                            (None, Some(solve_tvl1_flow(&d.f, b / gamma, iv)?.0))
                        }
                        TableJob::OfDenoised(a, b) => {
                            let ud = solve_rof_2d_sequence(&d.f, a, iu)?.0;
                            (None, Some(solve_tvl1_flow(&ud, b / gamma, iv)?.0))
                        }
                    };
                    let mut s = [None; 4];
                    if let Some(u) = &u {
                        s[0] = Some(ssim_sequence(clean, u, &ssim_p)?);
                        s[1] = Some(psnr(clean.values(), u.values())?);
                    }
                    if let Some(v) = &v {
                        s[2] = Some(aee(v, gt)?);
                        s[3] = Some(ae(v, gt)?);
                    }
                    Ok((job.row(), s))
                })
                .collect::<Result<Vec<_>>>()
        })
        .map_err(|e| e.context("comparison table"))?;
    let best = |row: usize, col: usize, larger: bool| {
        scored
            .iter()
            .filter(|(r, _)| *r == row)
            .filter_map(|(_, s)| s[col])
            .reduce(|a, b| if (b > a) == larger { b } else { a })
    };
    Ok(TABLE_ROWS
        .iter()
        .enumerate()
        .map(|(r, name)| TableRow {
            algorithm: name,
            ssim: best(r, 0, true),
            psnr: best(r, 1, true),
            aee: best(r, 2, false),
            ae: best(r, 3, false),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct InpaintOutcome {
    /// Observed frames with unknown ones set to zero.
    pub f: ImageSequence,
    pub known: Vec<bool>,
    pub clean: Option<ImageSequence>,
    pub v_gt: Option<FlowField>,
    pub result: JointResult,
}

/// Reconstructs `inserted` unknown frames between each pair of observed
/// frames. The data term and the image TV are switched off on unknown frames.
pub fn temporal_inpaint(cfg: &ExperimentConfig) -> Result<InpaintOutcome> {
    let m = cfg.inpaint.inserted;
    let (full, known_only) = match &cfg.data {
        DataSpec::Synthetic { frames, .. } => {
            let total = frames + (frames - 1) * m;
            (load_dataset(cfg, None, Some(total))?, false)
        }
        DataSpec::Directory { .. } => (load_dataset(cfg, None, None)?, true),
    };
    let (f_obs, known, clean, v_gt) = if known_only {
        // Only the observed frames exist on disk: interleave black frames.
        let frames = full.f.frames();
        let mut out = Vec::new();
        let mut known = Vec::new();
        for (i, fr) in frames.iter().enumerate() {
            out.push(fr.clone());
            known.push(true);
            if i + 1 < frames.len() {
                for _ in 0..m {
                    out.push(crate::grid::Frame::zeros(fr.width, fr.height));
                    known.push(false);
                }
            }
        }
        (ImageSequence::from_frames(&out)?, known, None, None)
    } else {
        let g = full.f.grid();
        let known: Vec<bool> = (0..g.frames()).map(|t| t % (m + 1) == 0).collect();
        let mut f = full.f.clone();
        let n = g.frame_len();
        for (t, _) in known.iter().enumerate().filter(|(_, k)| !**k) {
            f.values_mut()[t * n..(t + 1) * n].fill(0.0);
        }
        (f, known, full.clean, full.v_gt)
    };
    let grid = f_obs.grid();
    let k = ForwardOperator::frame_mask(grid, known.clone())?;
    let mut jc = cfg.joint_config(k, cfg.model.alpha, cfg.model.beta);
    jc.alpha = masked_alpha(&known, cfg.model.alpha);
    let result =
        solve_joint(&f_obs, &jc, None, None).map_err(|e| e.context("temporal inpainting"))?;
    Ok(InpaintOutcome {
        f: f_obs,
        known,
        clean,
        v_gt,
        result,
    })
}

/// Files written by [`run_experiment`] plus a JSON summary of the results.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<PathBuf> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    write_text(path, &text)
}

/// Reconstructed frames, flow files, colour-coded flow and the trace.
fn write_solution(
    dir: &Path,
    u: &ImageSequence,
    v: &FlowField,
    trace: &[OuterRecord],
) -> Result<Vec<PathBuf>> {
    let mut files = save_sequence(u, &dir.join("u"), BitDepth::Sixteen)?;
    files.extend(save_flow(v, &dir.join("flow"))?);
    let color_dir = dir.join("flow_color");
    fs::create_dir_all(&color_dir).map_err(|e| Error::io(&color_dir, e))?;
    let max_mag =
        v.v1.iter()
            .zip(&v.v2)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max);
    for t in 0..v.grid().nt() {
        let p = frame_path(&color_dir, "flow", t, "png");
        save_flow_color(&v.frame(t), Some(max_mag), &p)?;
        files.push(p);
    }
    files.push(write_csv(&dir.join("trace.csv"), trace)?);
    Ok(files)
}

/// Runs the configured experiment and writes its artifacts, a snapshot of
/// the configuration and the seed into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<RunOutput> {
    let out = &cfg.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = vec![write_text(&out.join("config.toml"), &cfg.to_toml()?)?];
    files.push(write_text(
        &out.join("seed.txt"),
        &format!("{}\n", cfg.seed),
    )?);
    let summary = match cfg.experiment {
        ExperimentKind::DenoiseJoint | ExperimentKind::SingleSolve => {
            let o = single_solve(cfg, cfg.experiment == ExperimentKind::DenoiseJoint)?;
            files.extend(write_solution(
                out,
                &o.result.u,
                &o.result.v,
                &o.result.trace,
            )?);
            files.push(write_json(&out.join("metrics.json"), &o.scores)?);
            serde_json::json!({
                "converged": o.result.converged,
                "outer_iterations": o.result.trace.len(),
                "scores": o.scores,
            })
        }
        ExperimentKind::NoiseSweep => {
            let pool = worker_pool(workers)?;
            let (levels, cells) = noise_sweep(cfg, &pool)?;
            files.push(write_csv(&out.join("noise_sweep.csv"), &levels)?);
            files.push(write_csv(&out.join("noise_sweep_cells.csv"), &cells)?);
            serde_json::json!({ "levels": levels })
        }
        ExperimentKind::ComparisonTable => {
            let pool = worker_pool(workers)?;
            let rows = comparison_table(cfg, &pool)?;
            files.push(write_csv(&out.join("comparison.csv"), &rows)?);
            files.push(write_json(&out.join("comparison.json"), &rows)?);
            serde_json::json!({ "rows": rows })
        }
        ExperimentKind::TemporalInpaint => {
            let o = temporal_inpaint(cfg)?;
            files.extend(write_solution(
                out,
                &o.result.u,
                &o.result.v,
                &o.result.trace,
            )?);
            let interp = out.join("interpolated");
            fs::create_dir_all(&interp).map_err(|e| Error::io(&interp, e))?;
            let frames = o.result.u.frames();
            for (t, _) in o.known.iter().enumerate().filter(|(_, k)| !**k) {
                let p = frame_path(&interp, "frame", t, "png");
                save_frame(&frames[t], &p, BitDepth::Sixteen)?;
                files.push(p);
            }
            let scores = image_scores(o.clean.as_ref(), &o.result.u)?
                .merge(flow_scores(o.v_gt.as_ref(), &o.result.v)?);
            files.push(write_json(&out.join("metrics.json"), &scores)?);
            serde_json::json!({
                "known": o.known,
                "outer_iterations": o.result.trace.len(),
                "scores": scores,
            })
        }
    };
    files.push(write_json(&out.join("summary.json"), &summary)?);
    Ok(RunOutput { files, summary })
}

/// Writes the configured scene as observed frames, clean frames and
/// ground-truth flow, in the layout accepted by a directory data source.
pub fn write_scene(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let d = load_dataset(cfg, None, None)?;
    let mut files = save_sequence(&d.f, &dir.join("observed"), BitDepth::Sixteen)?;
    if let Some(c) = &d.clean {
        files.extend(save_sequence(c, &dir.join("clean"), BitDepth::Sixteen)?);
    }
    if let Some(v) = &d.v_gt {
        files.extend(save_flow(v, &dir.join("flow"))?);
    }
    files.push(write_text(&dir.join("config.toml"), &cfg.to_toml()?)?);
    Ok(files)
}
