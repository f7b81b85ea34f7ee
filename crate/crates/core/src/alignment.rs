//! Frame alignment: flow-based warping, temporal grouping and their weighted mixture.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{Var, WarpMap};
use crate::data::{luminance, Frame, FrameWindow};
use crate::error::{ensure, Error, Result};
use crate::networks::{init_residual_block, residual_block};
use crate::params::{conv, Initializer, ParamStore, Session};
use crate::tensor::Tensor;

/// Macro logits `[2]`: flow alignment, temporal grouping.
pub const BETA: &str = "arch.beta";
const OFM: &str = "align.ofm";
const TGM: &str = "align.tgm";

/// Per-pixel displacement, stored planar as `[2, H, W]` (horizontal, vertical).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    vectors: Tensor,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            vectors: Tensor::zeros(&[2, height, width]),
        }
    }

    pub fn new(vectors: Tensor) -> Result<Self> {
        ensure!(
            vectors.shape().len() == 3 && vectors.shape()[0] == 2,
            Argument,
            "flow must be [2, H, W], got {:?}",
            vectors.shape()
        );
        ensure!(vectors.all_finite(), Argument, "flow vectors must be finite");
        Ok(FlowField { vectors })
    }

    /// Every pixel displaced by `(u, v)`.
    pub fn uniform(height: usize, width: usize, u: f64, v: f64) -> Self {
        let hw = height * width;
        let mut data = vec![u; hw];
        data.extend(std::iter::repeat_n(v, hw));
        FlowField {
            vectors: Tensor::new(&[2, height, width], data),
        }
    }

    pub fn height(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.vectors.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.vectors
    }

    pub fn u(&self) -> &[f64] {
        let hw = self.height() * self.width();
        &self.vectors.data()[..hw]
    }

    pub fn v(&self) -> &[f64] {
        let hw = self.height() * self.width();
        &self.vectors.data()[hw..]
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.u().len() as f64;
        self.u().iter().zip(self.v()).map(|(u, v)| u.hypot(*v)).sum::<f64>() / n
    }

    /// Little-endian `FLO2` encoding: magic, H and W as u32, then `(u, v)` f32 pairs row-major.
    pub fn to_flo2(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(12 + 8 * h * w);
        out.extend_from_slice(b"FLO2");
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        for (u, v) in self.u().iter().zip(self.v()) {
            out.extend_from_slice(&(*u as f32).to_le_bytes());
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_flo2(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 12 && &bytes[..4] == b"FLO2", Format, "missing FLO2 header");
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (h, w) = (word(4), word(8));
        ensure!(
            bytes.len() == 12 + 8 * h * w,
            Format,
            "FLO2 payload of {} bytes does not match {h}x{w}",
            bytes.len() - 12
        );
        let hw = h * w;
        let mut data = vec![0.0; 2 * hw];
        for (p, chunk) in bytes[12..].chunks(8).enumerate() {
            data[p] = f32::from_le_bytes(chunk[..4].try_into().unwrap()) as f64;
            data[hw + p] = f32::from_le_bytes(chunk[4..].try_into().unwrap()) as f64;
        }
        FlowField::new(Tensor::new(&[2, h, w], data))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_flo2(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_flo2()).map_err(|e| Error::io(path, e))
    }
}

/// Bilinear backward warp `out(p) = f(p + flow(p))`, sampling clamped to the border.
pub fn warp(f: &Frame, flow: &FlowField) -> Result<Frame> {
    ensure!(
        flow.height() == f.height() && flow.width() == f.width(),
        Argument,
        "flow {}x{} does not match frame {}x{}",
        flow.height(),
        flow.width(),
        f.height(),
        f.width()
    );
    let map = WarpMap::new(flow.tensor().data(), f.height(), f.width());
    Frame::from_tensor_clipped(&Tensor::new(f.tensor().shape(), map.forward(f.tensor().data(), 3)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub levels: usize,
    pub iterations: usize,
    /// Half-size of the least-squares window.
    pub radius: usize,
    /// Tikhonov weight per window pixel; pulls ill-conditioned solves to zero.
    pub regularization: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            levels: 3,
            iterations: 5,
            radius: 2,
            regularization: 1e-4,
        }
    }
}

/// One flow query: which displacement brings `neighbor` onto `reference`.
pub struct FlowRequest<'a> {
    pub reference: &'a Frame,
    pub neighbor: &'a Frame,
    /// Sequence id and frame indices, when the frames come from a stored sequence.
    pub origin: Option<(&'a str, usize, usize)>,
}

pub trait FlowEstimator: Sync {
    fn estimate(&self, req: &FlowRequest) -> Result<FlowField>;
}

/// Coarse-to-fine iterative least-squares estimator on luminance.
#[derive(Clone, Debug, Default)]
pub struct PyramidalFlow {
    pub config: FlowConfig,
}

impl FlowEstimator for PyramidalFlow {
    fn estimate(&self, req: &FlowRequest) -> Result<FlowField> {
        estimate_flow(req.reference, req.neighbor, &self.config)
    }
}

/// Reads `<dir>/<sequence>/<ref>_<nbr>.flo2`, indices zero-padded to three digits.
#[derive(Clone, Debug)]
pub struct PrecomputedFlow {
    pub dir: PathBuf,
}

impl PrecomputedFlow {
    pub fn path(&self, sequence: &str, reference: usize, neighbor: usize) -> PathBuf {
        self.dir.join(sequence).join(format!("{reference:03}_{neighbor:03}.flo2"))
    }
}

impl FlowEstimator for PrecomputedFlow {
    fn estimate(&self, req: &FlowRequest) -> Result<FlowField> {
        let (seq, r, n) = req
            .origin
            .ok_or_else(|| Error::Argument("precomputed flow needs sequence frame indices".into()))?;
        let flow = FlowField::read(&self.path(seq, r, n))?;
        ensure!(
            flow.height() == req.reference.height() && flow.width() == req.reference.width(),
            Format,
            "stored flow for {seq} {r}->{n} does not match the frame size"
        );
        Ok(flow)
    }
}

fn downsample(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            let (sy, sx) = (2 * y, 2 * x);
            out[y * w2 + x] =
                0.25 * (img[sy * w + sx] + img[sy * w + sx + 1] + img[(sy + 1) * w + sx] + img[(sy + 1) * w + sx + 1]);
        }
    }
    (out, h2, w2)
}

/// Bilinear resize of a planar flow, rescaling the vectors to the new grid.
fn upsample_flow(flow: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = vec![0.0; 2 * nh * nw];
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for c in 0..2 {
                let p = &flow[c * h * w..(c + 1) * h * w];
                let v = (1.0 - ty) * ((1.0 - tx) * p[y0 * w + x0] + tx * p[y0 * w + x1])
                    + ty * ((1.0 - tx) * p[y1 * w + x0] + tx * p[y1 * w + x1]);
                let scale = if c == 0 { 1.0 / sx } else { 1.0 / sy };
                out[c * nh * nw + y * nw + x] = v * scale;
            }
        }
    }
    out
}

fn gradient(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            gx[y * w + x] = (img[y * w + xr] - img[y * w + xl]) / (xr - xl).max(1) as f64;
            gy[y * w + x] = (img[yd * w + x] - img[yu * w + x]) / (yd - yu).max(1) as f64;
        }
    }
    (gx, gy)
}

/// Separable box sum with the window clipped at the borders.
fn box_sum(a: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = a[y * w + lo..=y * w + hi].iter().sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).sum();
        }
    }
    out
}

fn refine(reference: &[f64], neighbor: &[f64], h: usize, w: usize, flow: &mut [f64], cfg: &FlowConfig) {
    let hw = h * w;
    let lambda = cfg.regularization * ((2 * cfg.radius + 1) * (2 * cfg.radius + 1)) as f64;
    let (rx, ry) = gradient(reference, h, w);
    for _ in 0..cfg.iterations {
        let warped = WarpMap::new(flow, h, w).forward(neighbor, 1);
        let (wx, wy) = gradient(&warped, h, w);
        let mut prods = vec![vec![0.0; hw]; 5];
        for p in 0..hw {
            let gx = 0.5 * (rx[p] + wx[p]);
            let gy = 0.5 * (ry[p] + wy[p]);
            let it = warped[p] - reference[p];
            prods[0][p] = gx * gx;
            prods[1][p] = gx * gy;
            prods[2][p] = gy * gy;
            prods[3][p] = gx * it;
            prods[4][p] = gy * it;
        }
        let s: Vec<Vec<f64>> = prods.iter().map(|a| box_sum(a, h, w, cfg.radius)).collect();
        for p in 0..hw {
            let (a, b, c) = (s[0][p] + lambda, s[1][p], s[2][p] + lambda);
            let det = a * c - b * b;
            if det <= 0.0 || !det.is_finite() {
                continue;
            }
            let (e, f) = (-s[3][p], -s[4][p]);
            let du = ((c * e - b * f) / det).clamp(-1.0, 1.0);
            let dv = ((a * f - b * e) / det).clamp(-1.0, 1.0);
            flow[p] += du;
            flow[hw + p] += dv;
        }
    }
}

/// Flow that backward-warps `nbr` onto `reference`: `nbr(p + flow(p)) ~ reference(p)`.
pub fn estimate_flow(reference: &Frame, nbr: &Frame, cfg: &FlowConfig) -> Result<FlowField> {
    ensure!(reference.same_size(nbr), Argument, "flow endpoints differ in size");
    let (h, w) = (reference.height(), reference.width());
    let mut pyramid = vec![(luminance(reference).into_data(), luminance(nbr).into_data(), h, w)];
    while pyramid.len() < cfg.levels.max(1) {
        let (r, n, ph, pw) = pyramid.last().unwrap();
        if ph / 2 < 8 || pw / 2 < 8 {
            break;
        }
        let (r2, h2, w2) = downsample(r, *ph, *pw);
        let (n2, ..) = downsample(n, *ph, *pw);
        pyramid.push((r2, n2, h2, w2));
    }
    let (mut fh, mut fw) = pyramid.last().map(|l| (l.2, l.3)).unwrap();
    let mut flow = vec![0.0; 2 * fh * fw];
    for (r, n, ph, pw) in pyramid.iter().rev() {
        if (*ph, *pw) != (fh, fw) {
            flow = upsample_flow(&flow, fh, fw, *ph, *pw);
            (fh, fw) = (*ph, *pw);
        }
        refine(r, n, *ph, *pw, &mut flow, cfg);
    }
    FlowField::new(Tensor::new(&[2, h, w], flow))
}

/// Window offsets split by parity: even offsets (with the reference) and odd offsets plus the reference.
pub fn group_offsets(w: usize) -> Result<(Vec<isize>, Vec<isize>)> {
    ensure!(w % 2 == 1, Argument, "window size must be odd, got {w}");
    let r = (w / 2) as isize;
    let g1 = (-r..=r).filter(|o| o % 2 == 0).collect();
    let g2 = (-r..=r).filter(|o| o % 2 != 0 || *o == 0).collect();
    Ok((g1, g2))
}

pub fn group_frames(win: &FrameWindow) -> Result<(Vec<&Frame>, Vec<&Frame>)> {
    let (g1, g2) = group_offsets(win.len())?;
    let pick = |g: &[isize]| {
        g.iter()
            .map(|o| &win.frames[(win.reference_index as isize + o) as usize])
            .collect()
    };
    Ok((pick(&g1), pick(&g2)))
}

pub fn init_ofm(init: &mut Initializer, store: &mut ParamStore, frames: usize, f: usize) {
    init.conv(store, &format!("{OFM}.fuse0"), 3 * frames, f, 3);
    init.conv_zero(store, &format!("{OFM}.fuse1"), f, 3, 3);
}

pub fn init_tgm(init: &mut Initializer, store: &mut ParamStore, f: usize) {
    init.conv(store, &format!("{TGM}.stem"), 3, f, 3);
    init_residual_block(init, store, &format!("{TGM}.enc"), f, f, 1.0);
    init.conv_zero(store, &format!("{TGM}.proj"), 2 * f, 3, 1);
}

/// Flows from each non-reference frame to the reference, in window order.
pub fn window_flows(win: &FrameWindow, est: &dyn FlowEstimator) -> Result<Vec<Option<FlowField>>> {
    let r = win.reference_index;
    (0..win.len())
        .map(|i| {
            if i == r {
                return Ok(None);
            }
            let origin = win
                .origin
                .as_ref()
                .map(|o| (o.sequence.as_str(), o.indices[r], o.indices[i]));
            est.estimate(&FlowRequest {
                reference: win.reference(),
                neighbor: &win.frames[i],
                origin,
            })
            .map(Some)
        })
        .collect()
}

fn frame_vars(s: &mut Session, win: &FrameWindow) -> Vec<Var> {
    win.frames.iter().map(|f| s.constant(f.tensor().clone())).collect()
}

/// Neighbors warped onto the reference, stacked with it, fused, plus a skip from the reference.
pub fn align_ofm(s: &mut Session, win: &FrameWindow, flows: &[Option<FlowField>]) -> Result<Var> {
    ensure!(flows.len() == win.len(), Argument, "one flow slot per window frame required");
    let frames = frame_vars(s, win);
    let mut stack = Vec::with_capacity(win.len());
    for (&x, flow) in frames.iter().zip(flows) {
        stack.push(match flow {
            Some(f) => s.g.warp(x, f.tensor()),
            None => x,
        });
    }
    let x = s.g.concat(&stack);
    let y = conv(s, x, &format!("{OFM}.fuse0"), 1)?;
    let y = s.g.relu(y);
    let y = conv(s, y, &format!("{OFM}.fuse1"), 1)?;
    Ok(s.g.add(frames[win.reference_index], y))
}

/// Shared per-frame encoder, mean over each parity group, 1x1 projection, plus the reference.
pub fn align_tgm(s: &mut Session, win: &FrameWindow) -> Result<Var> {
    let (g1, g2) = group_offsets(win.len())?;
    let frames = frame_vars(s, win);
    let mut feats = Vec::with_capacity(win.len());
    for &x in &frames {
        let y = conv(s, x, &format!("{TGM}.stem"), 1)?;
        feats.push(residual_block(s, y, &format!("{TGM}.enc"))?);
    }
    let mut pooled = Vec::with_capacity(2);
    for g in [&g1, &g2] {
        let mut acc = feats[(win.reference_index as isize + g[0]) as usize];
        for o in &g[1..] {
            acc = s.g.add(acc, feats[(win.reference_index as isize + o) as usize]);
        }
        pooled.push(s.g.scale(acc, 1.0 / g.len() as f64));
    }
    let x = s.g.concat(&pooled);
    let y = conv(s, x, &format!("{TGM}.proj"), 1)?;
    Ok(s.g.add(frames[win.reference_index], y))
}

/// `softmax(beta)[0] * ofm + softmax(beta)[1] * tgm`.
pub fn align_mixed(s: &mut Session, win: &FrameWindow, flows: &[Option<FlowField>]) -> Result<Var> {
    let ofm = align_ofm(s, win, flows)?;
    let tgm = align_tgm(s, win)?;
    let beta = s.param(BETA)?;
    let b = s.g.reshape(beta, &[1, 2]);
    let b = s.g.softmax_rows(b);
    let b = s.g.reshape(b, &[2]);
    Ok(s.g.weighted_sum(&[ofm, tgm], b))
}
