//! Composite rain model and the auxiliary streak generator feeding the dominant branch.

use crate::autodiff::{FixedFilter, Padding, Var};
use crate::data::Frame;
use crate::error::{ensure, Result};
use crate::networks::{init_residual_block, residual_path};
use crate::params::{Initializer, ParamStore, Session, BUFFER_PREFIX};
use crate::tensor::Tensor;

pub const BANK_WEIGHTS: &str = "gars.bank.weights";
pub const COARSE_PREFIX: &str = "gars.coarse";
const GROUPS_KEY: &str = "buffer.gars.groups";

fn kernel_key(i: usize) -> String {
    format!("{BUFFER_PREFIX}gars.kernel.{i}")
}

/// One streak-shaped blur kernel: a Gaussian-profile line segment.
#[derive(Clone, Debug, PartialEq)]
pub struct StreakKernel {
    pub size: usize,
    /// Degrees from the x-axis, 90 is vertical.
    pub angle_deg: f64,
    pub length: f64,
    /// Gaussian std of the line profile, in pixels.
    pub blur: f64,
    pub group: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankConfig {
    pub kernels: Vec<StreakKernel>,
}

impl Default for BankConfig {
    /// Three short blurred kernels of size 9 and three long sharp ones of size 15.
    fn default() -> Self {
        Self::two_groups(3, 9, 15)
    }
}

impl BankConfig {
    pub fn two_groups(per_group: usize, short_size: usize, long_size: usize) -> Self {
        let angles = |n: usize, spread: f64| -> Vec<f64> {
            if n == 1 {
                vec![90.0]
            } else {
                (0..n)
                    .map(|i| 90.0 - spread + 2.0 * spread * i as f64 / (n - 1) as f64)
                    .collect()
            }
        };
        let mut kernels = Vec::new();
        for a in angles(per_group, 15.0) {
            kernels.push(StreakKernel {
                size: short_size,
                angle_deg: a,
                length: short_size as f64 * 0.5,
                blur: 1.0,
                group: 0,
            });
        }
        for a in angles(per_group, 10.0) {
            kernels.push(StreakKernel {
                size: long_size,
                angle_deg: a,
                length: long_size as f64 - 2.0,
                blur: 0.5,
                group: 1,
            });
        }
        BankConfig { kernels }
    }

    pub fn delta() -> Self {
        BankConfig {
            kernels: vec![StreakKernel {
                size: 1,
                angle_deg: 0.0,
                length: 0.0,
                blur: 1.0,
                group: 0,
            }],
        }
    }
}

/// Unit-sum kernel whose mass follows a segment through the center.
pub fn line_kernel(size: usize, angle_deg: f64, length: f64, blur: f64) -> Result<Tensor> {
    ensure!(size % 2 == 1, Argument, "kernel size must be odd, got {size}");
    ensure!(blur > 0.0 && length >= 0.0, Argument, "kernel blur must be positive and length nonnegative");
    let r = (size / 2) as f64;
    let (dx, dy) = (angle_deg.to_radians().cos(), angle_deg.to_radians().sin());
    let half = (length - 1.0).max(0.0) / 2.0;
    let mut k = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let (x, y) = (col as f64 - r, row as f64 - r);
            let t = (x * dx + y * dy).clamp(-half, half);
            let d2 = (x - t * dx).powi(2) + (y - t * dy).powi(2);
            k.push((-d2 / (2.0 * blur * blur)).exp());
        }
    }
    let total: f64 = k.iter().sum();
    Ok(Tensor::new(&[size, size], k.into_iter().map(|v| v / total).collect()))
}

/// Fixed kernels `K_i` with learnable scalar weights `W_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    kernels: Vec<Tensor>,
    weights: Vec<f64>,
    group_ids: Vec<u8>,
}

impl KernelBank {
    pub fn new(kernels: Vec<Tensor>, weights: Vec<f64>, group_ids: Vec<u8>) -> Result<Self> {
        let n = kernels.len();
        ensure!(n >= 1, Argument, "a kernel bank needs at least one kernel");
        ensure!(
            weights.len() == n && group_ids.len() == n,
            Argument,
            "bank has {n} kernels but {} weights and {} group ids",
            weights.len(),
            group_ids.len()
        );
        for (i, k) in kernels.iter().enumerate() {
            let s = k.shape();
            ensure!(
                s.len() == 2 && s[0] == s[1] && s[0] % 2 == 1,
                Argument,
                "kernel {i} must be odd and square, got {s:?}"
            );
            ensure!(
                k.data().iter().all(|&v| v >= 0.0) && (k.sum() - 1.0).abs() <= 1e-6,
                Argument,
                "kernel {i} must be nonnegative with unit sum"
            );
        }
        ensure!(group_ids.iter().all(|&g| g <= 1), Argument, "group ids must be 0 or 1");
        if n >= 2 {
            ensure!(
                group_ids.contains(&0) && group_ids.contains(&1),
                Argument,
                "a bank of {n} kernels must represent both groups"
            );
        }
        Ok(KernelBank {
            kernels,
            weights,
            group_ids,
        })
    }

    /// A single identity kernel with weight `w`.
    pub fn delta(w: f64) -> Self {
        KernelBank::new(vec![Tensor::full(&[1, 1], 1.0)], vec![w], vec![0]).expect("valid delta bank")
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernels(&self) -> &[Tensor] {
        &self.kernels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn group_ids(&self) -> &[u8] {
        &self.group_ids
    }

    pub fn set_weights(&mut self, w: Vec<f64>) -> Result<()> {
        ensure!(w.len() == self.len(), Argument, "expected {} bank weights", self.len());
        self.weights = w;
        Ok(())
    }

    fn filter(&self, i: usize, x: &Tensor) -> Vec<f64> {
        let (c, h, w) = x.chw();
        let k = &self.kernels[i];
        FixedFilter::new(k.data(), k.shape()[0], Padding::Reflect, h, w).forward(x.data(), c)
    }

    /// `sum_i W_i * (K_i conv x)` with reflect padding.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        for i in 0..self.len() {
            let wi = self.weights[i];
            for (o, v) in out.data_mut().iter_mut().zip(self.filter(i, x)) {
                *o += wi * v;
            }
        }
        out
    }

    /// Writes kernels and group ids as buffers and the weights as a trainable parameter.
    pub fn install(&self, store: &mut ParamStore) {
        for (i, k) in self.kernels.iter().enumerate() {
            store.insert(kernel_key(i), k.clone());
        }
        let groups = self.group_ids.iter().map(|&g| g as f64).collect();
        store.insert(GROUPS_KEY, Tensor::new(&[self.len()], groups));
        store.insert(BANK_WEIGHTS, Tensor::new(&[self.len()], self.weights.clone()));
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let groups = store.get(GROUPS_KEY)?;
        let n = groups.len();
        let kernels = (0..n)
            .map(|i| store.get(&kernel_key(i)).cloned())
            .collect::<Result<Vec<_>>>()?;
        let weights = store.get(BANK_WEIGHTS)?.data().to_vec();
        let group_ids = groups.data().iter().map(|&g| g as u8).collect();
        KernelBank::new(kernels, weights, group_ids)
    }
}

/// Renders every kernel of `cfg`; all weights start at `1/N`.
pub fn make_kernel_bank(cfg: &BankConfig) -> Result<KernelBank> {
    ensure!(!cfg.kernels.is_empty(), Argument, "a kernel bank needs at least one kernel");
    let n = cfg.kernels.len();
    let kernels = cfg
        .kernels
        .iter()
        .map(|k| line_kernel(k.size, k.angle_deg, k.length, k.blur))
        .collect::<Result<Vec<_>>>()?;
    KernelBank::new(
        kernels,
        vec![1.0 / n as f64; n],
        cfg.kernels.iter().map(|k| k.group).collect(),
    )
}

/// `lam*(B+R) + (1-lam)*(B + bank(R))`, clipped to `[0, 1]`. `lam` is `[H, W]`,
/// `[1, H, W]` or `[3, H, W]`.
pub fn compose_rainy(b: &Frame, r: &Frame, lam: &Tensor, bank: &KernelBank) -> Result<Frame> {
    ensure!(b.same_size(r), Argument, "background and rain layer differ in size");
    let (c, h, w) = b.tensor().chw();
    let hw = h * w;
    let per_channel = match lam.shape() {
        [lh, lw] | [1, lh, lw] if (*lh, *lw) == (h, w) => false,
        [3, lh, lw] if (*lh, *lw) == (h, w) => true,
        s => {
            return Err(crate::Error::Argument(format!(
                "mixing weights {s:?} do not match a {h}x{w} frame"
            )))
        }
    };
    ensure!(
        lam.data().iter().all(|v| (0.0..=1.0).contains(v)),
        Argument,
        "mixing weights must lie in [0, 1]"
    );
    let blurred = bank.apply(r.tensor());
    let (bd, rd, kd, ld) = (b.tensor().data(), r.tensor().data(), blurred.data(), lam.data());
    let out = (0..c * hw)
        .map(|i| {
            let l = if per_channel { ld[i] } else { ld[i % hw] };
            (l * (bd[i] + rd[i]) + (1.0 - l) * (bd[i] + kd[i])).clamp(0.0, 1.0)
        })
        .collect();
    Frame::new(Tensor::new(&[c, h, w], out))
}

/// `bank(r) + r`.
pub fn generate_aux_rain(r: &Tensor, bank: &KernelBank) -> Tensor {
    let mut out = bank.apply(r);
    out.add_assign(r);
    out
}

pub fn init_rain_model(init: &mut Initializer, store: &mut ParamStore, cfg: &BankConfig, channels: usize) -> Result<()> {
    make_kernel_bank(cfg)?.install(store);
    // A small final scale keeps the initial auxiliary rain faint.
    init_residual_block(init, store, COARSE_PREFIX, 3, channels, 0.01);
    Ok(())
}

/// Rough rain layer of `x`: the residual path of a 3-channel residual block.
pub fn coarse_rain(s: &mut Session, x: Var) -> Result<Var> {
    residual_path(s, x, COARSE_PREFIX)
}

pub fn aux_rain(s: &mut Session, r: Var, bank: &KernelBank) -> Result<Var> {
    let terms: Vec<Var> = bank
        .kernels()
        .iter()
        .map(|k| s.g.filter(r, k.data(), k.shape()[0], Padding::Reflect))
        .collect();
    let w = s.param(BANK_WEIGHTS)?;
    let mixed = s.g.weighted_sum(&terms, w);
    Ok(s.g.add(mixed, r))
}

/// `clip(x + aux_rain(coarse_rain(x)), 0, 1)`.
pub fn augment(s: &mut Session, x: Var, bank: &KernelBank) -> Result<Var> {
    let r = coarse_rain(s, x)?;
    let aux = aux_rain(s, r, bank)?;
    let y = s.g.add(x, aux);
    Ok(s.g.clamp(y, 0.0, 1.0))
}

pub fn estimate_coarse_rain(store: &ParamStore, frame: &Frame) -> Result<Tensor> {
    let mut s = Session::new(store, crate::params::Trainable::None);
    let x = s.constant(frame.tensor().clone());
    let r = coarse_rain(&mut s, x)?;
    Ok(s.g.value(r).clone())
}

pub fn augment_frame(store: &ParamStore, frame: &Frame) -> Result<Frame> {
    let bank = KernelBank::from_store(store)?;
    let mut s = Session::new(store, crate::params::Trainable::None);
    let x = s.constant(frame.tensor().clone());
    let y = augment(&mut s, x, &bank)?;
    Frame::new(s.g.value(y).clone())
}
