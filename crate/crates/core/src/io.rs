//! Image sequences, Middlebury `.flo` files and flow colour coding.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data_gen::is_valid_flow;
use crate::error::{Error, Result};
use crate::grid::{FlowField, FlowFrame, Frame, ImageSequence};

const FLO_MAGIC: &[u8; 4] = b"PIEH";
const FRAME_EXTENSIONS: [&str; 4] = ["png", "pgm", "pnm", "ppm"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    #[serde(rename = "8")]
    Eight,
    #[default]
    #[serde(rename = "16")]
    Sixteen,
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Numeric index of a frame file: the last run of digits in the file stem.
fn frame_index(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let end = stem.rfind(|c: char| c.is_ascii_digit())? + 1;
    let start = stem[..end]
        .rfind(|c: char| !c.is_ascii_digit())
        .map_or(0, |p| p + 1);
    stem[start..end].parse().ok()
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(image_err(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|p| p as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b
            .into_raw()
            .into_iter()
            .map(|p| p as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::format(
                path,
                format!("expected a grayscale image, found {:?}", other.color()),
            ))
        }
    };
    Frame::new(w, h, values)
}

/// Loads every numbered PNG/PGM frame in `dir`, ordered by index. Frames
/// must share one size and form a consecutive index run.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let index = frame_index(&path)
            .ok_or_else(|| Error::format(&path, "frame file name carries no index"))?;
        files.push((index, path));
    }
    if files.is_empty() {
        return Err(Error::format(dir, "no image frames found"));
    }
    files.sort();
    for w in files.windows(2) {
        if w[1].0 == w[0].0 {
            return Err(Error::format(
                dir,
                format!("duplicate frame index {}", w[0].0),
            ));
        }
        if w[1].0 != w[0].0 + 1 {
            return Err(Error::FrameGap {
                dir: dir.to_path_buf(),
                index: w[0].0 + 1,
            });
        }
    }
    let frames = files
        .iter()
        .map(|(_, p)| load_frame(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some((k, f)) = frames
        .iter()
        .enumerate()
        .find(|(_, f)| f.width != frames[0].width || f.height != frames[0].height)
    {
        return Err(Error::format(
            &files[k].1,
            format!(
                "frame is {}x{}, first frame is {}x{}",
                f.width, f.height, frames[0].width, frames[0].height
            ),
        ));
    }
    Ok(frames)
}

/// [`load_frames`] as a sequence; needs at least two frames.
pub fn load_sequence(dir: &Path) -> Result<ImageSequence> {
    ImageSequence::from_frames(&load_frames(dir)?)
}

/// Writes a frame as a grayscale PNG (or PGM when the extension says so).
/// Values are clamped to `[0, 1]`.
pub fn save_frame(frame: &Frame, path: &Path, depth: BitDepth) -> Result<()> {
    let (w, h) = (frame.width as u32, frame.height as u32);
    let q = |x: f64, max: f64| (x.clamp(0.0, 1.0) * max).round();
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("pnm") => {
            ImageFormat::Pnm
        }
        _ => ImageFormat::Png,
    };
    let img = match depth {
        BitDepth::Eight => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(
                w,
                h,
                frame.values.iter().map(|&x| q(x, 255.0) as u8).collect(),
            )
            .expect("buffer matches frame size"),
        ),
        BitDepth::Sixteen => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(
                w,
                h,
                frame.values.iter().map(|&x| q(x, 65535.0) as u16).collect(),
            )
            .expect("buffer matches frame size"),
        ),
    };
    img.save_with_format(path, format).map_err(image_err(path))
}

pub fn frame_path(dir: &Path, prefix: &str, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("{prefix}_{index:04}.{ext}"))
}

/// Writes `frame_0000.png`, `frame_0001.png`, ... into `dir`.
pub fn save_sequence(seq: &ImageSequence, dir: &Path, depth: BitDepth) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    seq.frames()
        .iter()
        .enumerate()
        .map(|(t, fr)| {
            let p = frame_path(dir, "frame", t, "png");
            save_frame(fr, &p, depth).map(|_| p)
        })
        .collect()
}

pub fn read_flo(path: &Path) -> Result<FlowFrame> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FLO_MAGIC {
        return Err(Error::format(path, "missing PIEH magic"));
    }
    let dim = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let (w, h) = (dim(4), dim(8));
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("invalid size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!("truncated payload: {} bytes, expected {need}", bytes.len()),
        ));
    }
    let mut out = FlowFrame::zeros(w, h);
    for (p, chunk) in bytes[12..need].chunks_exact(8).enumerate() {
        out.v1[p] = f32::from_le_bytes(chunk[..4].try_into().expect("4 bytes")) as f64;
        out.v2[p] = f32::from_le_bytes(chunk[4..].try_into().expect("4 bytes")) as f64;
    }
    Ok(out)
}

/// Writes a Middlebury `.flo` file. Invalid vectors are written as zero.
pub fn write_flo(flow: &FlowFrame, path: &Path) -> Result<()> {
    let n = flow.width * flow.height;
    let mut bytes = Vec::with_capacity(12 + 8 * n);
    bytes.extend_from_slice(FLO_MAGIC);
    let dim = |d: usize| {
        i32::try_from(d).map_err(|_| Error::format(path, format!("dimension {d} too large")))
    };
    bytes.extend_from_slice(&dim(flow.width)?.to_le_bytes());
    bytes.extend_from_slice(&dim(flow.height)?.to_le_bytes());
    for (&a, &b) in flow.v1.iter().zip(&flow.v2) {
        let (a, b) = if is_valid_flow(a, b) {
            (a, b)
        } else {
            (0.0, 0.0)
        };
        bytes.extend_from_slice(&(a as f32).to_le_bytes());
        bytes.extend_from_slice(&(b as f32).to_le_bytes());
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

/// Writes `flow_0000.flo`, ... for every transition of the field.
pub fn save_flow(v: &FlowField, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..v.grid().nt())
        .map(|t| {
            let p = frame_path(dir, "flow", t, "flo");
            write_flo(&v.frame(t), &p).map(|_| p)
        })
        .collect()
}

/// Loads numbered `.flo` files as the transitions of a flow field.
pub fn load_flow(dir: &Path) -> Result<FlowField> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "flo") {
            let index = frame_index(&path)
                .ok_or_else(|| Error::format(&path, "flow file name carries no index"))?;
            files.push((index, path));
        }
    }
    files.sort();
    let transitions = files
        .iter()
        .map(|(_, p)| read_flo(p))
        .collect::<Result<Vec<_>>>()?;
    FlowField::from_transitions(&transitions)
}

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;
const NCOLS: usize = RY + YG + GC + CB + BM + MR;

fn color_wheel() -> [[f64; 3]; NCOLS] {
    let mut w = [[0.0; 3]; NCOLS];
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    let mut c = 0;
    for i in 0..RY {
        w[c] = [255.0, ramp(i, RY), 0.0];
        c += 1;
    }
    for i in 0..YG {
        w[c] = [255.0 - ramp(i, YG), 255.0, 0.0];
        c += 1;
    }
    for i in 0..GC {
        w[c] = [0.0, 255.0, ramp(i, GC)];
        c += 1;
    }
    for i in 0..CB {
        w[c] = [0.0, 255.0 - ramp(i, CB), 255.0];
        c += 1;
    }
    for i in 0..BM {
        w[c] = [ramp(i, BM), 0.0, 255.0];
        c += 1;
    }
    for i in 0..MR {
        w[c] = [255.0, 0.0, 255.0 - ramp(i, MR)];
        c += 1;
    }
    w
}

/// Fractional position on the colour wheel, in `[0, NCOLS - 1]`.
fn wheel_position(u: f64, v: f64) -> f64 {
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    (a + 1.0) / 2.0 * (NCOLS - 1) as f64
}

fn encode(wheel: &[[f64; 3]; NCOLS], u: f64, v: f64) -> [u8; 3] {
    let rad = u.hypot(v);
    let fk = wheel_position(u, v);
    let k0 = fk.floor() as usize;
    let k1 = if k0 + 1 == NCOLS { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let col = (1.0 - f) * wheel[k0][ch] / 255.0 + f * wheel[k1][ch] / 255.0;
        let col = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
        *o = (255.0 * col).floor() as u8;
    }
    out
}

/// Middlebury colour coding. Vectors are divided by `max_mag`, or by the
/// largest valid magnitude when `None`; invalid vectors are black.
pub fn flow_to_color(flow: &FlowFrame, max_mag: Option<f64>) -> RgbImage {
    let wheel = color_wheel();
    let max_mag = max_mag.unwrap_or_else(|| {
        flow.v1
            .iter()
            .zip(&flow.v2)
            .filter(|(a, b)| is_valid_flow(**a, **b))
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    });
    let scale = if max_mag > 0.0 { 1.0 / max_mag } else { 1.0 };
    let mut img = RgbImage::new(flow.width as u32, flow.height as u32);
    for (p, px) in img.pixels_mut().enumerate() {
        let (a, b) = (flow.v1[p], flow.v2[p]);
        *px = if is_valid_flow(a, b) {
            Rgb(encode(&wheel, a * scale, b * scale))
        } else {
            Rgb([0, 0, 0])
        };
    }
    img
}

pub fn save_flow_color(flow: &FlowFrame, max_mag: Option<f64>, path: &Path) -> Result<()> {
    flow_to_color(flow, max_mag)
        .save_with_format(path, ImageFormat::Png)
        .map_err(image_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_index_parsing() {
        assert_eq!(frame_index(Path::new("frame_0012.png")), Some(12));
        assert_eq!(frame_index(Path::new("seq2_frame7.pgm")), Some(7));
        assert_eq!(frame_index(Path::new("3.png")), Some(3));
        assert_eq!(frame_index(Path::new("frame.png")), None);
    }

    #[test]
    fn pgm_8bit_is_scaled() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("f_0.pgm"),
            b"P5\n2 2\n255\n\x00\xff\x80\x01",
        )
        .unwrap();
        let frames = load_frames(dir.path()).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].values, vec![0.0, 1.0, 128.0 / 255.0, 1.0 / 255.0]);
        assert!(load_sequence(dir.path()).is_err());
    }

    #[test]
    fn sixteen_bit_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::with_dims(5, 4, 3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let vals = (0..g.len())
            .map(|_| r.random_range(0..=65535u32) as f64 / 65535.0)
            .collect();
        let seq = ImageSequence::from_vec(g, vals).unwrap();
        save_sequence(&seq, dir.path(), BitDepth::Sixteen).unwrap();
        assert_eq!(load_sequence(dir.path()).unwrap(), seq);
    }

    #[test]
    fn gap_and_empty_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_sequence(dir.path()),
            Err(Error::Format { .. })
        ));
        let fr = Frame::zeros(2, 2);
        save_frame(&fr, &dir.path().join("frame_0000.png"), BitDepth::Eight).unwrap();
        save_frame(&fr, &dir.path().join("frame_0002.png"), BitDepth::Eight).unwrap();
        match load_sequence(dir.path()) {
            Err(Error::FrameGap { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected gap error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_sizes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_frame(
            &Frame::zeros(2, 2),
            &dir.path().join("frame_0000.png"),
            BitDepth::Eight,
        )
        .unwrap();
        save_frame(
            &Frame::zeros(3, 2),
            &dir.path().join("frame_0001.png"),
            BitDepth::Eight,
        )
        .unwrap();
        assert!(load_sequence(dir.path()).is_err());
    }

    #[test]
    fn flo_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut v = FlowFrame::zeros(7, 5);
        for x in v.v1.iter_mut().chain(v.v2.iter_mut()) {
            *x = r.random_range(-3.0f32..3.0) as f64;
        }
        let p = dir.path().join("a.flo");
        write_flo(&v, &p).unwrap();
        assert_eq!(read_flo(&p).unwrap(), v);

        let p1 = dir.path().join("one.flo");
        write_flo(&FlowFrame::constant(1, 1, 0.5, -0.25), &p1).unwrap();
        assert_eq!(fs::metadata(&p1).unwrap().len(), 20);
    }

    #[test]
    fn flo_errors_and_sentinels() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.flo");
        fs::write(&bad, b"PIEX\x01\0\0\0\x01\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_flo(&bad), Err(Error::Format { .. })));
        let short = dir.path().join("short.flo");
        fs::write(&short, b"PIEH\x02\0\0\0\x01\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_flo(&short), Err(Error::Format { .. })));

        // Sentinels survive loading but are never written.
        let sentinel = dir.path().join("s.flo");
        let mut raw = b"PIEH\x01\0\0\0\x01\0\0\0".to_vec();
        raw.extend_from_slice(&1.0e10f32.to_le_bytes());
        raw.extend_from_slice(&1.0e10f32.to_le_bytes());
        fs::write(&sentinel, &raw).unwrap();
        let v = read_flo(&sentinel).unwrap();
        assert_eq!(v.v1[0], 1.0e10f32 as f64);
        write_flo(&v, &sentinel).unwrap();
        assert_eq!(read_flo(&sentinel).unwrap().v1[0], 0.0);
    }

    #[test]
    fn flow_field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::with_dims(4, 3, 3).unwrap();
        let mut v = FlowField::constant(g, 0.25, -0.5);
        let n = g.frame_len();
        v.v1[2 * n..].fill(0.0);
        v.v2[2 * n..].fill(0.0);
        save_flow(&v, dir.path()).unwrap();
        assert_eq!(load_flow(dir.path()).unwrap(), v);
    }

    #[test]
    fn wheel_has_55_colours_and_white_centre() {
        assert_eq!(NCOLS, 55);
        let img = flow_to_color(&FlowFrame::zeros(2, 2), Some(1.0));
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn max_flow_along_x_is_saturated_red() {
        let img = flow_to_color(&FlowFrame::constant(1, 1, 2.0, 0.0), Some(2.0));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
        let beyond = flow_to_color(&FlowFrame::constant(1, 1, 4.0, 0.0), Some(2.0));
        assert_eq!(beyond.get_pixel(0, 0).0, [191, 0, 0]);
    }

    #[test]
    fn quarter_turn_shifts_wheel_by_a_quarter() {
        let quarter = (NCOLS - 1) as f64 / 4.0;
        for k in 0..16 {
            let th = k as f64 * 0.37;
            let (u, v) = (th.cos(), th.sin());
            let d = wheel_position(-v, u) - wheel_position(u, v);
            let d = d.rem_euclid((NCOLS - 1) as f64);
            assert!((d - quarter).abs() < 1e-9, "{d}");
        }
    }

    #[test]
    fn invalid_flow_is_black() {
        let mut v = FlowFrame::constant(2, 1, 0.3, 0.1);
        v.v1[1] = 2.0e9;
        let img = flow_to_color(&v, None);
        assert_eq!(img.get_pixel(1, 0).0, [0, 0, 0]);
        assert_ne!(img.get_pixel(0, 0).0, [0, 0, 0]);
    }
}
