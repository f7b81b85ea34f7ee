//! Structural-similarity task loss, architecture entropy regularizer and fidelity metrics.

use crate::autodiff::{Graph, Padding, Var};
use crate::data::{luminance, Frame};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the mean absolute error term.
    pub rho: f64,
    /// Weight of the entropy regularizer.
    pub eta: f64,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            rho: 0.75,
            eta: 0.01,
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.rho >= 0.0 && self.eta >= 0.0, Config, "rho and eta must be nonnegative");
        ensure!(self.window % 2 == 1, Config, "ssim window must be odd, got {}", self.window);
        ensure!(self.sigma > 0.0, Config, "ssim sigma must be positive");
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized Gaussian window, shrunk to the largest odd size that fits `h x w`.
    pub fn gaussian_window(&self, h: usize, w: usize) -> (Vec<f64>, usize) {
        let mut k = self.window.min(h).min(w);
        if k % 2 == 0 {
            k -= 1;
        }
        let r = (k / 2) as f64;
        let g: Vec<f64> = (0..k)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = g.iter().sum::<f64>().powi(2);
        let mut out = Vec::with_capacity(k * k);
        for a in &g {
            for b in &g {
                out.push(a * b / total);
            }
        }
        (out, k)
    }
}

/// Mean SSIM over valid window positions and channels of `[C, H, W]` inputs.
pub fn ssim_var(g: &mut Graph, x: Var, y: Var, cfg: &LossConfig) -> Var {
    let (_, h, w) = g.value(x).chw();
    let (win, k) = cfg.gaussian_window(h, w);
    let blur = |g: &mut Graph, v: Var| g.filter(v, &win, k, Padding::Valid);
    let mx = blur(g, x);
    let my = blur(g, y);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let exx = blur(g, xx);
    let eyy = blur(g, yy);
    let exy = blur(g, xy);
    let mx2 = g.mul(mx, mx);
    let my2 = g.mul(my, my);
    let mxy = g.mul(mx, my);
    let vx = g.sub(exx, mx2);
    let vy = g.sub(eyy, my2);
    let cxy = g.sub(exy, mxy);
    let n1 = g.scale(mxy, 2.0);
    let n1 = g.add_scalar(n1, cfg.c1());
    let n2 = g.scale(cxy, 2.0);
    let n2 = g.add_scalar(n2, cfg.c2());
    let d1 = g.add(mx2, my2);
    let d1 = g.add_scalar(d1, cfg.c1());
    let d2 = g.add(vx, vy);
    let d2 = g.add_scalar(d2, cfg.c2());
    let num = g.mul(n1, n2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    g.mean(map)
}

fn check_same(x: &Tensor, y: &Tensor) -> Result<()> {
    ensure!(
        x.shape() == y.shape() && x.shape().len() == 3,
        Argument,
        "inputs differ in shape: {:?} vs {:?}",
        x.shape(),
        y.shape()
    );
    Ok(())
}

/// Channel-averaged SSIM of two `[C, H, W]` arrays.
pub fn ssim_tensor(x: &Tensor, y: &Tensor, cfg: &LossConfig) -> Result<f64> {
    check_same(x, y)?;
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(y.clone());
    let s = ssim_var(&mut g, a, b, cfg);
    Ok(g.scalar(s))
}

pub fn ssim(x: &Frame, y: &Frame, cfg: &LossConfig) -> Result<f64> {
    ssim_tensor(x.tensor(), y.tensor(), cfg)
}

/// SSIM of the luma planes, as used for evaluation.
pub fn ssim_luminance(x: &Frame, y: &Frame, cfg: &LossConfig) -> Result<f64> {
    check_same(x.tensor(), y.tensor())?;
    let (h, w) = (x.height(), x.width());
    ssim_tensor(
        &luminance(x).reshaped(&[1, h, w]),
        &luminance(y).reshaped(&[1, h, w]),
        cfg,
    )
}

/// `-ssim(x, y) + rho * mean|x - y|`.
pub fn task_loss_var(g: &mut Graph, x: Var, y: Var, cfg: &LossConfig) -> Var {
    let s = ssim_var(g, x, y, cfg);
    let d = g.sub(x, y);
    let d = g.abs(d);
    let mae = g.mean(d);
    let mae = g.scale(mae, cfg.rho);
    let neg = g.scale(s, -1.0);
    g.add(neg, mae)
}

/// Batch mean of the per-sample task loss.
pub fn task_loss(xs: &[Tensor], ys: &[Tensor], cfg: &LossConfig) -> Result<f64> {
    ensure!(!xs.is_empty() && xs.len() == ys.len(), Argument, "batch sizes differ or are empty");
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        check_same(x, y)?;
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let b = g.constant(y.clone());
        let l = task_loss_var(&mut g, a, b, cfg);
        total += g.scalar(l);
    }
    Ok(total / xs.len() as f64)
}

/// Sum of per-node Shannon entropies (natural log) of `softmax(alpha)`.
pub fn entropy_reg_var(g: &mut Graph, alpha: Var) -> Var {
    g.entropy_rows(alpha)
}

pub fn entropy_reg(alpha: &Tensor) -> Result<f64> {
    ensure!(
        alpha.shape().len() == 2 && alpha.all_finite(),
        Argument,
        "architecture logits must be a finite 2-D array"
    );
    let mut g = Graph::new();
    let a = g.constant(alpha.clone());
    let e = entropy_reg_var(&mut g, a);
    Ok(g.scalar(e))
}

pub fn arch_loss_var(g: &mut Graph, task: Var, alpha: Var, cfg: &LossConfig) -> Var {
    let e = entropy_reg_var(g, alpha);
    let e = g.scale(e, cfg.eta);
    g.add(task, e)
}

pub fn arch_loss(task_val_loss: f64, alpha: &Tensor, cfg: &LossConfig) -> Result<f64> {
    Ok(task_val_loss + cfg.eta * entropy_reg(alpha)?)
}

/// Luma PSNR in dB for unit dynamic range; identical frames give `+inf`.
pub fn psnr(x: &Frame, y: &Frame) -> Result<f64> {
    check_same(x.tensor(), y.tensor())?;
    let (a, b) = (luminance(x), luminance(y));
    let mse = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::procedural_sequence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_frame(seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(Tensor::from_vec(&[3, 16, 16], (0..768).map(|_| rng.random::<f64>()).collect()).unwrap()).unwrap()
    }

    #[test]
    fn ssim_identity_symmetry_and_constants() {
        let cfg = LossConfig::default();
        let (x, y) = (rand_frame(1), rand_frame(2));
        assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&x, &y, &cfg).unwrap() - ssim(&y, &x, &cfg).unwrap()).abs() < 1e-9);
        let a = Frame::filled(16, 16, [0.5; 3]).unwrap();
        let b = Frame::filled(16, 16, [0.25; 3]).unwrap();
        let c1 = 1e-4;
        let closed = (2.0 * 0.5 * 0.25 + c1) / (0.25 + 0.0625 + c1);
        assert!((ssim(&a, &b, &cfg).unwrap() - closed).abs() < 1e-6);
        assert!(ssim(&a, &Frame::filled(8, 8, [0.5; 3]).unwrap(), &cfg).is_err());
    }

    #[test]
    fn small_frames_use_a_shrunken_window() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.gaussian_window(8, 12).1, 7);
        assert_eq!(cfg.gaussian_window(64, 64).1, 11);
        let (w, _) = cfg.gaussian_window(9, 9);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn task_loss_closed_forms() {
        let x = rand_frame(3);
        let cfg = LossConfig::default();
        assert_eq!(task_loss(&[x.tensor().clone()], &[x.tensor().clone()], &cfg).unwrap(), -1.0);
        let y = rand_frame(4);
        let no_l1 = LossConfig { rho: 0.0, ..cfg.clone() };
        let l = task_loss(&[x.tensor().clone()], &[y.tensor().clone()], &no_l1).unwrap();
        assert!((l + ssim(&x, &y, &cfg).unwrap()).abs() < 1e-12);
        let a = Frame::filled(16, 16, [0.5; 3]).unwrap();
        let b = Frame::filled(16, 16, [0.25; 3]).unwrap();
        let closed = -(0.2501 / 0.3126) + 0.75 * 0.25;
        let got = task_loss(&[a.tensor().clone()], &[b.tensor().clone()], &cfg).unwrap();
        assert!((got - closed).abs() < 1e-9);
    }

    #[test]
    fn task_loss_falls_along_interpolation() {
        let cfg = LossConfig::default();
        for seed in 0..3 {
            let (x, y) = (rand_frame(10 + seed), rand_frame(20 + seed));
            let mut prev = f64::INFINITY;
            for k in 0..10 {
                let t = k as f64 / 9.0;
                let z = x.tensor().zip_map(y.tensor(), |a, b| (1.0 - t) * a + t * b);
                let l = task_loss(&[z], &[y.tensor().clone()], &cfg).unwrap();
                assert!(l < prev);
                prev = l;
            }
        }
    }

    #[test]
    fn entropy_bounds_and_arch_loss() {
        let uniform = Tensor::zeros(&[4, 8]);
        let e = entropy_reg(&uniform).unwrap();
        assert!((e - 4.0 * 8f64.ln()).abs() < 1e-9);
        let mut hot = Tensor::zeros(&[4, 8]);
        for l in 0..4 {
            hot.data_mut()[l * 8 + l] = 60.0;
        }
        assert!(entropy_reg(&hot).unwrap() < 1e-20);
        let cfg = LossConfig::default();
        assert!((arch_loss(0.3, &uniform, &cfg).unwrap() - (0.3 + 0.01 * 4.0 * 8f64.ln())).abs() < 1e-12);
        let none = LossConfig { eta: 0.0, ..cfg };
        assert_eq!(arch_loss(0.3, &uniform, &none).unwrap(), 0.3);
    }

    #[test]
    fn psnr_closed_forms() {
        let f = procedural_sequence("p", 16, 16, 1, 1).unwrap().frame(0).clone();
        assert_eq!(psnr(&f, &f).unwrap(), f64::INFINITY);
        let a = Frame::filled(16, 16, [0.5; 3]).unwrap();
        let b = Frame::filled(16, 16, [0.5 + 16.0 / 255.0; 3]).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-3);
        assert_eq!(p, psnr(&b, &a).unwrap());
    }
}
