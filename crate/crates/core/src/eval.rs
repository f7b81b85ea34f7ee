//! Sliding-window inference over sequences and luminance PSNR/SSIM reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::alignment::FlowEstimator;
use crate::data::{window, Frame, PairedDataset, VideoSequence};
use crate::error::{ensure, Error, Result};
use crate::losses::{psnr, ssim_luminance, LossConfig};
use crate::networks::{Architecture, MacroChoice, Model};
use crate::searchspace::{derive_cell, CellSpec, ALPHA};
use crate::trainer::Checkpoint;
use crate::alignment::BETA;

/// Report format tag written as the first machine-readable line.
pub const REPORT_FORMAT: &str = "derain-eval 1";

fn model_for(ckpt: &Checkpoint, w: usize) -> Result<Model> {
    let mc = ckpt.config.model_config();
    ensure!(
        mc.frames == w,
        Config,
        "checkpoint was trained with {}-frame windows, not {w}",
        mc.frames
    );
    let model = Model::new(mc, ckpt.arch.clone())?;
    model.check_params(&ckpt.params)?;
    Ok(model)
}

/// Restores every frame of `seq` from the window centered on it.
pub fn infer_sequence(ckpt: &Checkpoint, seq: &VideoSequence, w: usize, est: &dyn FlowEstimator) -> Result<VideoSequence> {
    let model = model_for(ckpt, w)?;
    let one = |t: usize| -> Result<Frame> {
        let win = window(seq, t, w)?;
        model.restore(&ckpt.params, &win, est)
    };
    #[cfg(feature = "parallel")]
    let frames: Vec<Result<Frame>> = {
        use rayon::prelude::*;
        (0..seq.len()).into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let frames: Vec<Result<Frame>> = (0..seq.len()).map(one).collect();
    VideoSequence::with_names(
        seq.identifier.clone(),
        frames.into_iter().collect::<Result<_>>()?,
        seq.names().to_vec(),
    )
}

/// The cell and alignment a checkpoint stands for; relaxed checkpoints are discretized.
pub fn derived_architecture(ckpt: &Checkpoint) -> Result<(CellSpec, MacroChoice)> {
    match &ckpt.arch {
        Architecture::Discrete { cell, align } => Ok((cell.clone(), *align)),
        Architecture::Relaxed => Ok((
            derive_cell(ckpt.params.get(ALPHA)?)?,
            MacroChoice::derive(ckpt.params.get(BETA)?)?,
        )),
    }
}

/// Mean luminance PSNR and SSIM over a set of frames. Frames with infinite PSNR
/// are left out of the PSNR mean and counted in `psnr_inf`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub frames: usize,
    pub psnr_inf: usize,
}

impl Scores {
    fn from_frames(pairs: &[(f64, f64)]) -> Self {
        let finite: Vec<f64> = pairs.iter().map(|p| p.0).filter(|p| p.is_finite()).collect();
        Scores {
            psnr: mean_or_inf(&finite),
            ssim: pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64,
            frames: pairs.len(),
            psnr_inf: pairs.len() - finite.len(),
        }
    }

    /// Frame-weighted combination; PSNR weights by finite frames only.
    fn combine(parts: &[Scores]) -> Self {
        let frames: usize = parts.iter().map(|s| s.frames).sum();
        let psnr_inf: usize = parts.iter().map(|s| s.psnr_inf).sum();
        let finite = frames - psnr_inf;
        let psnr = if finite == 0 {
            f64::INFINITY
        } else {
            parts
                .iter()
                .filter(|s| s.frames > s.psnr_inf)
                .map(|s| s.psnr * (s.frames - s.psnr_inf) as f64)
                .sum::<f64>()
                / finite as f64
        };
        Scores {
            psnr,
            ssim: parts.iter().map(|s| s.ssim * s.frames as f64).sum::<f64>() / frames as f64,
            frames,
            psnr_inf,
        }
    }
}

fn mean_or_inf(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::INFINITY
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReport {
    pub identifier: String,
    pub restored: Scores,
    pub input: Scores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sorted by identifier.
    pub sequences: Vec<SequenceReport>,
    pub restored: Scores,
    pub input: Scores,
    pub config_hash: String,
    pub wall_seconds: f64,
}

impl EvalReport {
    pub fn frames(&self) -> usize {
        self.restored.frames
    }

    /// Aligned text table, one row per sequence plus the aggregate and input rows.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let id_w = self.sequences.iter().map(|s| s.identifier.len()).max().unwrap_or(0).max(9);
        let _ = writeln!(
            out,
            "{:<id_w$}  {:>6}  {:>10}  {:>8}  {:>10}  {:>8}",
            "sequence", "frames", "PSNR(dB)", "SSIM", "in PSNR", "in SSIM"
        );
        let row = |out: &mut String, id: &str, r: &Scores, i: &Scores| {
            let _ = writeln!(
                out,
                "{:<id_w$}  {:>6}  {:>10}  {:>8.4}  {:>10}  {:>8.4}",
                id,
                r.frames,
                fmt_db(r.psnr),
                r.ssim,
                fmt_db(i.psnr),
                i.ssim
            );
        };
        for s in &self.sequences {
            row(&mut out, &s.identifier, &s.restored, &s.input);
        }
        row(&mut out, "average", &self.restored, &self.input);
        if self.restored.psnr_inf + self.input.psnr_inf > 0 {
            let _ = writeln!(
                out,
                "note: {} restored and {} input frame(s) matched exactly (PSNR inf) and are left out of PSNR means",
                self.restored.psnr_inf, self.input.psnr_inf
            );
        }
        let _ = writeln!(out, "config {}  wall {:.2}s", self.config_hash, self.wall_seconds);
        out
    }

    /// One `key = value` per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format = {REPORT_FORMAT}");
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "wall_seconds = {:.3}", self.wall_seconds);
        let mut put = |prefix: &str, s: &Scores| {
            let _ = writeln!(out, "{prefix}.frames = {}", s.frames);
            let _ = writeln!(out, "{prefix}.psnr = {}", fmt_db(s.psnr));
            let _ = writeln!(out, "{prefix}.psnr_inf_frames = {}", s.psnr_inf);
            let _ = writeln!(out, "{prefix}.ssim = {:.6}", s.ssim);
        };
        put("restored", &self.restored);
        put("input", &self.input);
        for s in &self.sequences {
            put(&format!("sequence.{}.restored", s.identifier), &s.restored);
            put(&format!("sequence.{}.input", s.identifier), &s.input);
        }
        out
    }
}

/// Parses the output of [`EvalReport::to_key_values`].
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(" = ")
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad report line `{l}`")))
        })
        .collect()
}

/// Scores restored sequences against the clean frames of `data`, and the rainy
/// inputs against the same frames as a baseline.
pub fn score(restored: &[VideoSequence], data: &PairedDataset, loss: &LossConfig, config_hash: &str) -> Result<EvalReport> {
    let start = Instant::now();
    ensure!(
        restored.len() == data.len(),
        Format,
        "{} restored sequence(s) for {} ground-truth sequence(s)",
        restored.len(),
        data.len()
    );
    let mut sequences = Vec::with_capacity(restored.len());
    for ((r, rainy), clean) in restored.iter().zip(&data.rainy).zip(&data.clean) {
        ensure!(
            r.identifier == clean.identifier && r.names() == clean.names(),
            Format,
            "restored sequence `{}` is not paired with ground truth `{}`",
            r.identifier,
            clean.identifier
        );
        let pairs = |xs: &VideoSequence| -> Result<Vec<(f64, f64)>> {
            xs.frames()
                .iter()
                .zip(clean.frames())
                .map(|(x, y)| {
                    ensure!(x.same_size(y), Format, "frame size mismatch in `{}`", clean.identifier);
                    Ok((psnr(x, y)?, ssim_luminance(x, y, loss)?))
                })
                .collect()
        };
        sequences.push(SequenceReport {
            identifier: r.identifier.clone(),
            restored: Scores::from_frames(&pairs(r)?),
            input: Scores::from_frames(&pairs(rainy)?),
        });
    }
    sequences.sort_by(|a, b| a.identifier.cmp(&b.identifier));
    let rs: Vec<Scores> = sequences.iter().map(|s| s.restored).collect();
    let is: Vec<Scores> = sequences.iter().map(|s| s.input).collect();
    Ok(EvalReport {
        restored: Scores::combine(&rs),
        input: Scores::combine(&is),
        sequences,
        config_hash: config_hash.to_string(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs the checkpoint over every rainy sequence and scores the result.
pub fn evaluate(ckpt: &Checkpoint, data: &PairedDataset, est: &dyn FlowEstimator) -> Result<EvalReport> {
    let start = Instant::now();
    let w = ckpt.config.data.frames;
    let restored = data
        .rainy
        .iter()
        .map(|seq| infer_sequence(ckpt, seq, w, est))
        .collect::<Result<Vec<_>>>()?;
    let mut report = score(&restored, data, &ckpt.config.loss, &ckpt.config.hash())?;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::PyramidalFlow;
    use crate::data::{procedural_sequence, synthesize_dataset, StreakConfig};
    use crate::params::ParamStore;
    use crate::trainer::{Config, Stage};

    fn identity_ckpt(w: usize) -> Checkpoint {
        let mut config = Config::toy();
        config.data.frames = w;
        let model = config.derived_model().unwrap();
        Checkpoint {
            params: model.identity_params(1).unwrap(),
            arch: model.arch.clone(),
            config,
            stage: Stage::Train,
            step: 0,
            epoch: 0,
            optimizers: Default::default(),
        }
    }

    #[test]
    fn identity_model_returns_its_input() {
        let ckpt = identity_ckpt(5);
        let seq = procedural_sequence("a", 16, 16, 5, 2).unwrap();
        let out = infer_sequence(&ckpt, &seq, 5, &PyramidalFlow::default()).unwrap();
        assert_eq!(out.len(), 5);
        for (a, b) in out.frames().iter().zip(seq.frames()) {
            assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-12);
        }
    }

    #[test]
    fn mismatched_window_or_params_are_config_errors() {
        let ckpt = identity_ckpt(3);
        let seq = procedural_sequence("a", 16, 16, 3, 2).unwrap();
        let est = PyramidalFlow::default();
        assert!(matches!(infer_sequence(&ckpt, &seq, 5, &est), Err(Error::Config(_))));
        let mut broken = ckpt.clone();
        broken.params = ParamStore::new();
        assert!(matches!(infer_sequence(&broken, &seq, 3, &est), Err(Error::Config(_))));
    }

    #[test]
    fn perfect_restoration_and_identity_baseline() {
        let (data, _, _) = synthesize_dataset(2, 3, 16, &StreakConfig::default(), 4).unwrap();
        let loss = LossConfig::default();
        let r = score(&data.clean, &data, &loss, "h").unwrap();
        assert_eq!(r.restored.ssim, 1.0);
        assert!(r.restored.psnr.is_infinite());
        assert_eq!(r.restored.psnr_inf, 6);
        let kv = parse_key_values(&r.to_key_values()).unwrap();
        assert_eq!(kv["restored.psnr"], "inf");
        assert_eq!(kv["restored.ssim"], "1.000000");

        let r = score(&data.rainy, &data, &loss, "h").unwrap();
        assert_eq!(r.restored, r.input);
        assert!(r.to_table().contains("average"));
    }

    #[test]
    fn unpaired_sequences_are_format_errors() {
        let (data, _, _) = synthesize_dataset(2, 3, 16, &StreakConfig::default(), 4).unwrap();
        let loss = LossConfig::default();
        assert!(matches!(score(&data.clean[..1], &data, &loss, "h"), Err(Error::Format(_))));
        let mut renamed = data.clean.clone();
        renamed[0].identifier = "zzz".into();
        assert!(matches!(score(&renamed, &data, &loss, "h"), Err(Error::Format(_))));
    }

    #[test]
    fn relaxed_checkpoints_discretize() {
        let config = Config::toy();
        let model = config.relaxed_model().unwrap();
        let mut params = model.init_params(0).unwrap();
        let mut alpha = params.get(ALPHA).unwrap().clone();
        alpha.data_mut()[2] = 1.0;
        params.insert(ALPHA, alpha);
        params.insert(BETA, crate::Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
        let ckpt = Checkpoint {
            config,
            arch: Architecture::Relaxed,
            stage: Stage::Search,
            step: 0,
            epoch: 0,
            params,
            optimizers: Default::default(),
        };
        let (cell, align) = derived_architecture(&ckpt).unwrap();
        assert_eq!(cell.to_string(), "dense3,res3,res3,res3");
        assert_eq!(align, MacroChoice::Tgm);
    }
}
