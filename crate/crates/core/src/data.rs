//! Frames, sequences, temporal windows, synthetic rain and augmentation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::reflect_index;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 8;

/// An RGB image with values in `[0, 1]`, stored planar as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pixels: Tensor,
}

impl Frame {
    pub fn new(pixels: Tensor) -> Result<Self> {
        ensure!(
            pixels.shape().len() == 3 && pixels.shape()[0] == 3,
            Argument,
            "frame must be [3, H, W], got {:?}",
            pixels.shape()
        );
        let (_, h, w) = pixels.chw();
        ensure!(
            h >= MIN_SIDE && w >= MIN_SIDE,
            Argument,
            "frame {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}"
        );
        ensure!(
            pixels.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            Argument,
            "frame values must be finite and within [0, 1]"
        );
        Ok(Frame { pixels })
    }

    /// Clips into `[0, 1]` (non-finite values become 0) before validating shape.
    pub fn from_tensor_clipped(t: &Tensor) -> Result<Self> {
        Frame::new(t.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }))
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Frame::new(Tensor::from_vec(&[3, height, width], data)?)
    }

    /// Interleaved 8-bit RGB, rescaled by 1/255.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        ensure!(
            rgb.len() == width * height * 3,
            Format,
            "expected {} bytes of RGB, got {}",
            width * height * 3,
            rgb.len()
        );
        let hw = width * height;
        let mut data = vec![0.0; 3 * hw];
        for (p, px) in rgb.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = px[c] as f64 / 255.0;
            }
        }
        Frame::new(Tensor::new(&[3, height, width], data))
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let (_, h, w) = self.pixels.chw();
        let hw = h * w;
        let d = self.pixels.data();
        let mut out = Vec::with_capacity(3 * hw);
        for p in 0..hw {
            for c in 0..3 {
                out.push((d[c * hw + p] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    pub fn same_size(&self, other: &Frame) -> bool {
        self.pixels.shape() == other.pixels.shape()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.mean()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
            .expect("buffer size matches dimensions");
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        Frame::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }
}

/// Temporally ordered frames sharing one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub identifier: String,
    frames: Vec<Frame>,
    names: Vec<String>,
}

impl VideoSequence {
    pub fn new(identifier: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let names = (0..frames.len()).map(|i| format!("{i:03}.png")).collect();
        Self::with_names(identifier, frames, names)
    }

    pub fn with_names(identifier: impl Into<String>, frames: Vec<Frame>, names: Vec<String>) -> Result<Self> {
        ensure!(!frames.is_empty(), Format, "no frames found");
        ensure!(names.len() == frames.len(), Argument, "one name per frame required");
        let first = &frames[0];
        for (f, n) in frames.iter().zip(&names) {
            ensure!(
                f.same_size(first),
                Format,
                "frame {n} is {}x{} but the sequence is {}x{}",
                f.height(),
                f.width(),
                first.height(),
                first.width()
            );
        }
        Ok(VideoSequence {
            identifier: identifier.into(),
            frames,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (f, n) in self.frames.iter().zip(&self.names) {
            f.save(&dir.join(n))?;
        }
        Ok(())
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "bmp")
    )
}

/// Loads every PNG/BMP frame of `dir`, ordered by file name.
/// Whether `dir` directly holds frame images.
pub fn is_sequence_dir(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).any(|e| e.path().is_file() && is_image(&e.path())))
        .unwrap_or(false)
}

pub fn load_sequence(dir: &Path) -> Result<VideoSequence> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    if paths.is_empty() {
        return Err(Error::Format(format!("no frames found in {}", dir.display())));
    }
    paths.sort();
    let frames = paths.iter().map(|p| Frame::load(p)).collect::<Result<Vec<_>>>()?;
    let names = paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    VideoSequence::with_names(id, frames, names)
}

/// Where a window's frames came from in their sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowOrigin {
    pub sequence: String,
    pub indices: Vec<usize>,
}

/// Frames around a reference frame; the reference sits at the center.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameWindow {
    pub frames: Vec<Frame>,
    pub reference_index: usize,
    pub ground_truth: Option<Frame>,
    pub origin: Option<WindowOrigin>,
}

impl FrameWindow {
    pub fn new(frames: Vec<Frame>, ground_truth: Option<Frame>) -> Result<Self> {
        ensure!(
            frames.len() % 2 == 1,
            Argument,
            "window length must be odd, got {}",
            frames.len()
        );
        for f in frames.iter().chain(ground_truth.iter()) {
            ensure!(f.same_size(&frames[0]), Argument, "window frames differ in size");
        }
        Ok(FrameWindow {
            reference_index: (frames.len() - 1) / 2,
            frames,
            ground_truth,
            origin: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn reference(&self) -> &Frame {
        &self.frames[self.reference_index]
    }

    /// Temporal offset of slot `i` relative to the reference.
    pub fn offset(&self, i: usize) -> isize {
        i as isize - self.reference_index as isize
    }
}

/// Sequence indices of a size-`w` window centered on `t`. Indices beyond the
/// ends mirror about the first/last frame (`-1 -> 1`); a one-frame sequence
/// repeats its only frame.
pub fn window_indices(len: usize, t: usize, w: usize) -> Result<Vec<usize>> {
    ensure!(w % 2 == 1, Argument, "window size must be odd, got {w}");
    ensure!(t < len, Argument, "frame index {t} out of range for {len} frames");
    let r = (w / 2) as isize;
    Ok((-r..=r).map(|o| reflect_index(t as isize + o, len)).collect())
}

pub fn window(seq: &VideoSequence, t: usize, w: usize) -> Result<FrameWindow> {
    let idx = window_indices(seq.len(), t, w)?;
    let mut win = FrameWindow::new(idx.iter().map(|&i| seq.frame(i).clone()).collect(), None)?;
    win.origin = Some(WindowOrigin {
        sequence: seq.identifier.clone(),
        indices: idx,
    });
    Ok(win)
}

/// Like [`window`], attaching the clean frame at `t` as ground truth.
pub fn paired_window(rainy: &VideoSequence, clean: &VideoSequence, t: usize, w: usize) -> Result<FrameWindow> {
    let mut win = window(rainy, t, w)?;
    ensure!(
        clean.len() == rainy.len() && clean.frame(t).same_size(rainy.frame(t)),
        Format,
        "ground truth for `{}` does not match the rainy frames",
        rainy.identifier
    );
    win.ground_truth = Some(clean.frame(t).clone());
    Ok(win)
}

/// Parameters of the desk-scale streak renderer. Ranges are inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct StreakConfig {
    pub count: (usize, usize),
    /// Degrees from the image x-axis (90 is vertical).
    pub angle_deg: (f64, f64),
    pub length: (f64, f64),
    pub opacity: (f64, f64),
    /// Stroke width in pixels.
    pub width: f64,
    /// Draw new streaks every frame; otherwise one set falls through the sequence.
    pub per_frame: bool,
    /// Fall speed in pixels per frame when `per_frame` is false.
    pub speed: f64,
}

impl Default for StreakConfig {
    fn default() -> Self {
        StreakConfig {
            count: (40, 60),
            angle_deg: (75.0, 105.0),
            length: (6.0, 16.0),
            opacity: (0.25, 0.5),
            width: 1.0,
            per_frame: true,
            speed: 6.0,
        }
    }
}

impl StreakConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.opacity;
        ensure!(
            (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi,
            Argument,
            "opacity range [{lo}, {hi}] must lie within [0, 1]"
        );
        ensure!(self.count.0 <= self.count.1, Argument, "streak count range is reversed");
        ensure!(
            self.length.0 >= 0.0 && self.length.0 <= self.length.1,
            Argument,
            "streak length range is invalid"
        );
        ensure!(self.angle_deg.0 <= self.angle_deg.1, Argument, "angle range is reversed");
        ensure!(self.width > 0.0, Argument, "stroke width must be positive");
        Ok(())
    }
}

impl fmt::Display for StreakConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rain.count_min = {}", self.count.0)?;
        writeln!(f, "rain.count_max = {}", self.count.1)?;
        writeln!(f, "rain.angle_min = {}", self.angle_deg.0)?;
        writeln!(f, "rain.angle_max = {}", self.angle_deg.1)?;
        writeln!(f, "rain.length_min = {}", self.length.0)?;
        writeln!(f, "rain.length_max = {}", self.length.1)?;
        writeln!(f, "rain.opacity_min = {}", self.opacity.0)?;
        writeln!(f, "rain.opacity_max = {}", self.opacity.1)?;
        writeln!(f, "rain.width = {}", self.width)?;
        writeln!(f, "rain.per_frame = {}", self.per_frame)?;
        write!(f, "rain.speed = {}", self.speed)
    }
}

#[derive(Clone, Copy, Debug)]
struct Streak {
    cx: f64,
    cy: f64,
    angle: f64,
    length: f64,
    opacity: f64,
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn sample_streaks(rng: &mut ChaCha8Rng, cfg: &StreakConfig, h: usize, w: usize) -> Vec<Streak> {
    let n = rng.random_range(cfg.count.0..=cfg.count.1);
    (0..n)
        .map(|_| Streak {
            cx: rng.random_range(0.0..w as f64),
            cy: rng.random_range(0.0..h as f64),
            angle: sample_range(rng, cfg.angle_deg).to_radians(),
            length: sample_range(rng, cfg.length),
            opacity: sample_range(rng, cfg.opacity),
        })
        .collect()
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Adds one anti-aliased stroke: coverage falls off linearly over the last pixel of the half-width.
fn draw_streak(layer: &mut [f64], h: usize, w: usize, s: &Streak, width: f64) {
    let (dx, dy) = (s.angle.cos() * s.length / 2.0, s.angle.sin() * s.length / 2.0);
    let (ax, ay, bx, by) = (s.cx - dx, s.cy - dy, s.cx + dx, s.cy + dy);
    let half = width / 2.0;
    let pad = half + 1.0;
    let x0 = (ax.min(bx) - pad).floor().max(0.0) as usize;
    let y0 = (ay.min(by) - pad).floor().max(0.0) as usize;
    let x1 = ((ax.max(bx) + pad).ceil().max(0.0) as usize).min(w.saturating_sub(1));
    let y1 = ((ay.max(by) + pad).ceil().max(0.0) as usize).min(h.saturating_sub(1));
    if x0 >= w || y0 >= h {
        return;
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, ax, ay, bx, by);
            let cover = (half + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                layer[y * w + x] += s.opacity * cover;
            }
        }
    }
}

fn render_layer(streaks: &[Streak], h: usize, w: usize, width: f64) -> Frame {
    let mut layer = vec![0.0; h * w];
    for s in streaks {
        draw_streak(&mut layer, h, w, s, width);
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend(layer.iter().map(|v| v.min(1.0)));
    }
    Frame::new(Tensor::new(&[3, h, w], data)).expect("rain layer within range")
}

/// Rain layers of additive anti-aliased line streaks, composited as
/// `rainy = clip(clean + rain, 0, 1)`. Identical inputs give identical outputs.
pub fn synthesize_rainy(
    clean: &VideoSequence,
    params: &StreakConfig,
    seed: u64,
) -> Result<(VideoSequence, VideoSequence)> {
    params.validate()?;
    let (h, w) = (clean.height(), clean.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let persistent = sample_streaks(&mut rng, params, h, w);
    let mut rainy = Vec::with_capacity(clean.len());
    let mut rain = Vec::with_capacity(clean.len());
    for (t, frame) in clean.frames().iter().enumerate() {
        let streaks = if params.per_frame {
            sample_streaks(&mut rng, params, h, w)
        } else {
            persistent
                .iter()
                .map(|s| {
                    let step = params.speed * t as f64;
                    Streak {
                        cx: (s.cx + step * s.angle.cos()).rem_euclid(w as f64),
                        cy: (s.cy + step * s.angle.sin()).rem_euclid(h as f64),
                        ..*s
                    }
                })
                .collect()
        };
        let layer = render_layer(&streaks, h, w, params.width);
        let composite = frame.tensor().zip_map(layer.tensor(), |a, b| (a + b).clamp(0.0, 1.0));
        rainy.push(Frame::new(composite)?);
        rain.push(layer);
    }
    Ok((
        VideoSequence::with_names(clean.identifier.clone(), rainy, clean.names().to_vec())?,
        VideoSequence::with_names(clean.identifier.clone(), rain, clean.names().to_vec())?,
    ))
}

/// Smooth procedural scene panning at a constant sub-pixel velocity, used as
/// clean footage for offline experiments.
pub fn procedural_sequence(id: &str, height: usize, width: usize, frames: usize, seed: u64) -> Result<VideoSequence> {
    ensure!(frames >= 1, Argument, "need at least one frame");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let base = color(&mut rng);
    let grad_x = color(&mut rng);
    let grad_y = color(&mut rng);
    let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..6)
        .map(|_| {
            let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            (
                c,
                rng.random_range(0.0..width as f64 * 1.5),
                rng.random_range(0.0..height as f64),
                rng.random_range(0.08..0.22) * width.min(height) as f64,
            )
        })
        .collect();
    let freq = rng.random_range(0.15..0.35);
    let vx = rng.random_range(0.5..1.5);
    let vy = rng.random_range(-0.5..0.5);
    let hw = height * width;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut data = vec![0.0; 3 * hw];
        for y in 0..height {
            for x in 0..width {
                let u = x as f64 + vx * t as f64;
                let v = y as f64 + vy * t as f64;
                let texture = 0.06 * (freq * u).sin() * (freq * 0.7 * v).cos();
                for c in 0..3 {
                    let mut val = 0.15
                        + 0.35 * base[c]
                        + 0.2 * grad_x[c] * u / width as f64
                        + 0.2 * grad_y[c] * v / height as f64
                        + texture;
                    for (bc, bx, by, br) in &blobs {
                        let d = ((u - bx).powi(2) + (v - by).powi(2)).sqrt();
                        let edge = ((br - d) / 1.5).clamp(0.0, 1.0);
                        val = val * (1.0 - edge) + (0.1 + 0.8 * bc[c]) * edge;
                    }
                    data[c * hw + y * width + x] = val.clamp(0.0, 1.0);
                }
            }
        }
        out.push(Frame::new(Tensor::new(&[3, height, width], data))?);
    }
    VideoSequence::new(id, out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

/// One geometric transform shared by every frame of a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub y0: usize,
    pub x0: usize,
    pub crop: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub fn sample(height: usize, width: usize, crop: usize, flips: Flips, seed: u64) -> Result<Self> {
        ensure!(
            crop >= MIN_SIDE && crop <= height.min(width),
            Argument,
            "crop {crop} does not fit a {height}x{width} frame"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y0 = rng.random_range(0..=height - crop);
        let x0 = rng.random_range(0..=width - crop);
        let hflip = rng.random_bool(0.5) && flips.horizontal;
        let vflip = rng.random_bool(0.5) && flips.vertical;
        Ok(Transform {
            y0,
            x0,
            crop,
            hflip,
            vflip,
        })
    }

    pub fn apply(&self, f: &Frame) -> Frame {
        let w = f.width();
        let hw = f.height() * w;
        let c = self.crop;
        let src = f.tensor().data();
        let mut data = Vec::with_capacity(3 * c * c);
        for ch in 0..3 {
            for y in 0..c {
                let sy = if self.vflip { c - 1 - y } else { y } + self.y0;
                for x in 0..c {
                    let sx = if self.hflip { c - 1 - x } else { x } + self.x0;
                    data.push(src[ch * hw + sy * w + sx]);
                }
            }
        }
        Frame::new(Tensor::new(&[3, c, c], data)).expect("crop of a valid frame")
    }

    pub fn apply_window(&self, win: &FrameWindow) -> FrameWindow {
        FrameWindow {
            frames: win.frames.iter().map(|f| self.apply(f)).collect(),
            reference_index: win.reference_index,
            ground_truth: win.ground_truth.as_ref().map(|f| self.apply(f)),
            origin: win.origin.clone(),
        }
    }
}

/// Random square crop plus optional flips, identical for every frame and the ground truth.
pub fn augment(win: &FrameWindow, crop: usize, flips: Flips, seed: u64) -> Result<FrameWindow> {
    let r = win.reference();
    let t = Transform::sample(r.height(), r.width(), crop, flips, seed)?;
    Ok(t.apply_window(win))
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// BT.601 luma as an `[H, W]` array.
pub fn luminance(f: &Frame) -> Tensor {
    luminance_of(f.tensor())
}

pub(crate) fn luminance_of(t: &Tensor) -> Tensor {
    let (_, h, w) = t.chw();
    let hw = h * w;
    let d = t.data();
    let y = (0..hw)
        .map(|p| LUMA_WEIGHTS[0] * d[p] + LUMA_WEIGHTS[1] * d[hw + p] + LUMA_WEIGHTS[2] * d[2 * hw + p])
        .collect();
    Tensor::new(&[h, w], y)
}

/// Rainy/clean pairs stored as `<root>/rainy/<id>/` and `<root>/clean/<id>/`
/// with identical file names.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub rainy: Vec<VideoSequence>,
    pub clean: Vec<VideoSequence>,
}

pub const RAINY_DIR: &str = "rainy";
pub const CLEAN_DIR: &str = "clean";
pub const RAIN_DIR: &str = "rain";
pub const MANIFEST: &str = "manifest.txt";

fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

impl PairedDataset {
    pub fn new(rainy: Vec<VideoSequence>, clean: Vec<VideoSequence>) -> Result<Self> {
        ensure!(rainy.len() == clean.len(), Format, "rainy/clean sequence counts differ");
        for (r, c) in rainy.iter().zip(&clean) {
            ensure!(
                r.identifier == c.identifier && r.names() == c.names(),
                Format,
                "unpaired frames in sequence `{}`",
                r.identifier
            );
            ensure!(
                r.frame(0).same_size(c.frame(0)),
                Format,
                "sequence `{}` differs in resolution from its ground truth",
                r.identifier
            );
        }
        Ok(PairedDataset { rainy, clean })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let rainy = sequence_dirs(&root.join(RAINY_DIR))?
            .iter()
            .map(|d| load_sequence(d))
            .collect::<Result<Vec<_>>>()?;
        ensure!(!rainy.is_empty(), Format, "no sequences under {}", root.join(RAINY_DIR).display());
        let clean = rainy
            .iter()
            .map(|r| load_sequence(&root.join(CLEAN_DIR).join(&r.identifier)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rainy, clean)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for (r, c) in self.rainy.iter().zip(&self.clean) {
            r.save(&root.join(RAINY_DIR).join(&r.identifier))?;
            c.save(&root.join(CLEAN_DIR).join(&c.identifier))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rainy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rainy.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.rainy.iter().map(VideoSequence::len).sum()
    }

    /// `(sequence, frame)` for every frame, in storage order.
    pub fn samples(&self) -> Vec<(usize, usize)> {
        self.rainy
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.len()).map(move |t| (s, t)))
            .collect()
    }

    pub fn window(&self, sample: (usize, usize), w: usize) -> Result<FrameWindow> {
        paired_window(&self.rainy[sample.0], &self.clean[sample.0], sample.1, w)
    }

    /// Splits whole sequences: every `k`-th sequence (starting from the last) goes to validation.
    pub fn split(&self, val_every: usize) -> Result<(PairedDataset, PairedDataset)> {
        ensure!(val_every >= 2, Config, "validation split needs val_every >= 2");
        let n = self.len();
        let (mut tr, mut va) = ((vec![], vec![]), (vec![], vec![]));
        for i in 0..n {
            let dst = if (n - 1 - i) % val_every == 0 { &mut va } else { &mut tr };
            dst.0.push(self.rainy[i].clone());
            dst.1.push(self.clean[i].clone());
        }
        ensure!(
            !tr.0.is_empty() && !va.0.is_empty(),
            Config,
            "cannot split {n} sequence(s) into non-empty train/validation sets"
        );
        Ok((PairedDataset::new(tr.0, tr.1)?, PairedDataset::new(va.0, va.1)?))
    }
}

/// Clean procedural sequences with synthetic rain, plus the manifest text.
pub fn synthesize_dataset(
    sequences: usize,
    frames: usize,
    size: usize,
    streaks: &StreakConfig,
    seed: u64,
) -> Result<(PairedDataset, Vec<VideoSequence>, String)> {
    let mut rainy = Vec::new();
    let mut clean = Vec::new();
    let mut rain = Vec::new();
    for s in 0..sequences {
        let id = format!("seq{s:02}");
        let c = procedural_sequence(&id, size, size, frames, seed.wrapping_mul(7919).wrapping_add(s as u64))?;
        let (r, layer) = synthesize_rainy(&c, streaks, seed.wrapping_add(1000 + s as u64))?;
        rainy.push(r);
        clean.push(c);
        rain.push(layer);
    }
    let manifest = format!(
        "seed = {seed}\nsequences = {sequences}\nframes = {frames}\nsize = {size}\n{streaks}\n"
    );
    Ok((PairedDataset::new(rainy, clean)?, rain, manifest))
}

pub fn write_synthetic(root: &Path, data: &PairedDataset, rain: &[VideoSequence], manifest: &str) -> Result<()> {
    data.save(root)?;
    for r in rain {
        r.save(&root.join(RAIN_DIR).join(&r.identifier))?;
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}
