//! wasm-bindgen bindings for the static demo page in `www/`.
//! Every image crosses the boundary as row-major RGBA bytes.

use derain::alignment::{estimate_flow, warp, FlowConfig, FlowField};
use derain::data::{procedural_sequence, synthesize_rainy, Frame, StreakConfig};
use derain::losses::psnr;
use derain::rainmodel::{compose_rainy, make_kernel_bank, BankConfig, KernelBank};
use derain::Tensor;
use wasm_bindgen::prelude::*;

fn js_err(e: derain::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn rgba(f: &Frame) -> Vec<u8> {
    f.to_rgb8().chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn scene(size: usize, seed: u64, frames: usize) -> Result<Vec<Frame>, JsValue> {
    let seq = procedural_sequence("demo", size, size, frames, seed).map_err(js_err)?;
    Ok(seq.frames().to_vec())
}

/// A clean procedural frame and its rainy version.
#[wasm_bindgen]
pub struct RainPair {
    clean: Vec<u8>,
    rainy: Vec<u8>,
    rain: Vec<u8>,
}

#[wasm_bindgen]
impl RainPair {
    pub fn clean(&self) -> Vec<u8> {
        self.clean.clone()
    }

    pub fn rainy(&self) -> Vec<u8> {
        self.rainy.clone()
    }

    pub fn rain(&self) -> Vec<u8> {
        self.rain.clone()
    }
}

/// Renders anti-aliased streaks over a procedural scene.
#[wasm_bindgen]
pub fn render_rain(size: usize, seed: u32, count: usize, angle: f64, length: f64, opacity: f64) -> Result<RainPair, JsValue> {
    let clean = scene(size, seed as u64, 1)?;
    let cfg = StreakConfig {
        count: (count, count),
        angle_deg: (angle - 3.0, angle + 3.0),
        length: (length * 0.7, length),
        opacity: (opacity * 0.6, opacity),
        ..StreakConfig::default()
    };
    let seq = derain::data::VideoSequence::new("demo", clean).map_err(js_err)?;
    let (rainy, rain) = synthesize_rainy(&seq, &cfg, seed as u64 + 1).map_err(js_err)?;
    Ok(RainPair {
        clean: rgba(seq.frame(0)),
        rainy: rgba(rainy.frame(0)),
        rain: rgba(rain.frame(0)),
    })
}

/// `lam*(B+R) + (1-lam)*(B + bank(R))` with every bank weight set to `weight`.
#[wasm_bindgen]
pub fn compose(size: usize, seed: u32, lam: f64, short_size: usize, long_size: usize, weight: f64) -> Result<Vec<u8>, JsValue> {
    let clean = scene(size, seed as u64, 1)?;
    let seq = derain::data::VideoSequence::new("demo", clean).map_err(js_err)?;
    let (_, rain) = synthesize_rainy(&seq, &StreakConfig::default(), seed as u64 + 1).map_err(js_err)?;
    let mut bank: KernelBank = make_kernel_bank(&BankConfig::two_groups(3, short_size | 1, long_size | 1)).map_err(js_err)?;
    bank.set_weights(vec![weight; bank.len()]).map_err(js_err)?;
    let lam = Tensor::full(&[size, size], lam.clamp(0.0, 1.0));
    let out = compose_rainy(seq.frame(0), rain.frame(0), &lam, &bank).map_err(js_err)?;
    Ok(rgba(&out))
}

/// Outcome of aligning a shifted frame back onto the reference.
#[wasm_bindgen]
pub struct Alignment {
    warped: Vec<u8>,
    shifted: Vec<u8>,
    psnr_before: f64,
    psnr_after: f64,
    mean_u: f64,
    mean_v: f64,
}

#[wasm_bindgen]
impl Alignment {
    pub fn warped(&self) -> Vec<u8> {
        self.warped.clone()
    }

    pub fn shifted(&self) -> Vec<u8> {
        self.shifted.clone()
    }

    pub fn psnr_before(&self) -> f64 {
        self.psnr_before
    }

    pub fn psnr_after(&self) -> f64 {
        self.psnr_after
    }

    pub fn mean_u(&self) -> f64 {
        self.mean_u
    }

    pub fn mean_v(&self) -> f64 {
        self.mean_v
    }
}

/// Shifts a scene by `(dx, dy)`, estimates the flow back and warps with it.
#[wasm_bindgen]
pub fn align(size: usize, seed: u32, dx: f64, dy: f64, levels: usize, iterations: usize) -> Result<Alignment, JsValue> {
    let reference = scene(size, seed as u64, 1)?.remove(0);
    let shifted = warp(&reference, &FlowField::uniform(size, size, -dx, -dy)).map_err(js_err)?;
    let cfg = FlowConfig {
        levels: levels.max(1),
        iterations: iterations.max(1),
        ..FlowConfig::default()
    };
    let flow = estimate_flow(&reference, &shifted, &cfg).map_err(js_err)?;
    let warped = warp(&shifted, &flow).map_err(js_err)?;
    let n = (size * size) as f64;
    Ok(Alignment {
        psnr_before: psnr(&shifted, &reference).map_err(js_err)?,
        psnr_after: psnr(&warped, &reference).map_err(js_err)?,
        mean_u: flow.u().iter().sum::<f64>() / n,
        mean_v: flow.v().iter().sum::<f64>() / n,
        warped: rgba(&warped),
        shifted: rgba(&shifted),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_are_rgba_of_the_requested_size() {
        let p = render_rain(32, 3, 20, 90.0, 10.0, 0.5).ok().unwrap();
        assert_eq!(p.rainy().len(), 32 * 32 * 4);
        assert_ne!(p.rainy(), p.clean());
        assert_eq!(compose(32, 3, 0.5, 5, 9, 0.2).ok().unwrap().len(), 32 * 32 * 4);
    }

    #[test]
    fn alignment_recovers_a_small_shift() {
        let a = align(48, 1, 1.5, -1.0, 3, 5).ok().unwrap();
        assert!(a.psnr_after() > a.psnr_before());
        assert!((a.mean_u() - 1.5).abs() < 0.5, "u {}", a.mean_u());
    }
}
