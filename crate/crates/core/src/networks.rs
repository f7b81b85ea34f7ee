//! Restoration branches, the shared residual block, fusion weights and the full forward pass.

use std::fmt;
use std::str::FromStr;

use crate::alignment::{
    align_mixed, align_ofm, align_tgm, init_ofm, init_tgm, window_flows, FlowConfig, FlowEstimator, FlowField, BETA,
};
use crate::autodiff::Var;
use crate::data::{Frame, FrameWindow};
use crate::error::{ensure, Error, Result};
use crate::params::{conv, conv_norm_relu, Initializer, ParamStore, Session, Trainable};
use crate::rainmodel::{augment, init_rain_model, BankConfig, KernelBank, COARSE_PREFIX};
use crate::searchspace::{
    cell_forward, discrete_forward, init_discrete_cell, init_relaxed_cell, node_weights, CellSpec, ALPHA, NUM_NODES,
    NUM_OPS,
};
use crate::tensor::Tensor;

pub fn init_residual_block(init: &mut Initializer, store: &mut ParamStore, prefix: &str, c: usize, f: usize, last_gamma: f64) {
    init.conv_norm(store, &format!("{prefix}.l0"), c, f, 3);
    init.conv_norm(store, &format!("{prefix}.l1"), f, f, 3);
    init.conv(store, &format!("{prefix}.l2"), f, c, 3);
    init.norm(store, &format!("{prefix}.l2"), c, last_gamma);
}

/// Three conv-norm-relu layers, without the skip.
pub fn residual_path(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let mut y = x;
    for l in ["l0", "l1", "l2"] {
        y = conv_norm_relu(s, y, &format!("{prefix}.{l}"), 1)?;
    }
    Ok(y)
}

pub fn residual_block(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let y = residual_path(s, x, prefix)?;
    Ok(s.g.add(x, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Dominant,
    Companion,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Dominant => "dna",
            Role::Companion => "cna",
        }
    }
}

/// Which alignment module a derived model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacroChoice {
    Ofm,
    Tgm,
}

impl MacroChoice {
    /// Argmax of the macro logits; ties go to flow alignment.
    pub fn derive(beta: &Tensor) -> Result<Self> {
        ensure!(beta.shape() == [2] && beta.all_finite(), Argument, "macro logits must be 2 finite values");
        Ok(if beta.data()[1] > beta.data()[0] {
            MacroChoice::Tgm
        } else {
            MacroChoice::Ofm
        })
    }
}

impl fmt::Display for MacroChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MacroChoice::Ofm => "ofm",
            MacroChoice::Tgm => "tgm",
        })
    }
}

impl FromStr for MacroChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ofm" => Ok(MacroChoice::Ofm),
            "tgm" => Ok(MacroChoice::Tgm),
            _ => Err(Error::Argument(format!("unknown alignment module `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    /// Every candidate op and both alignment modules, mixed by `alpha` / `beta`.
    Relaxed,
    Discrete { cell: CellSpec, align: MacroChoice },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub cells: usize,
    pub frames: usize,
    pub gars: bool,
    pub bank: BankConfig,
    pub flow: FlowConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            cells: 4,
            frames: 5,
            gars: true,
            bank: BankConfig::default(),
            flow: FlowConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.channels >= 8, Config, "model.channels must be at least 8, got {}", self.channels);
        ensure!(self.cells >= 1, Config, "model.cells must be at least 1");
        ensure!(
            matches!(self.frames, 3 | 5 | 7),
            Config,
            "window size must be 3, 5 or 7, got {}",
            self.frames
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
}

/// How the two branch outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Equal weights, used before the fusion weights are trained.
    Half,
    Learned,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Intermediates {
    pub aligned: Var,
    pub augmented: Var,
    pub dominant: Var,
    pub companion: Var,
    /// Per-channel `(dominant, companion)` weights when fusion is learned.
    pub lambda: Option<(Var, Var)>,
    pub fused: Var,
}

fn cell_prefix(role: Role, c: usize) -> String {
    format!("{}.cell{c}", role.prefix())
}

impl Model {
    pub fn new(config: ModelConfig, arch: Architecture) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, arch })
    }

    pub fn uses_flow(&self) -> bool {
        !matches!(
            self.arch,
            Architecture::Discrete {
                align: MacroChoice::Tgm,
                ..
            }
        )
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let cfg = &self.config;
        let f = cfg.channels;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        if cfg.gars {
            init_rain_model(&mut init, &mut store, &cfg.bank, f)?;
        }
        match &self.arch {
            Architecture::Relaxed => {
                init_ofm(&mut init, &mut store, cfg.frames, f);
                init_tgm(&mut init, &mut store, f);
                store.insert(BETA, Tensor::zeros(&[2]));
                store.insert(ALPHA, Tensor::zeros(&[NUM_NODES, NUM_OPS]));
            }
            Architecture::Discrete { align, .. } => match align {
                MacroChoice::Ofm => init_ofm(&mut init, &mut store, cfg.frames, f),
                MacroChoice::Tgm => init_tgm(&mut init, &mut store, f),
            },
        }
        for role in [Role::Dominant, Role::Companion] {
            let p = role.prefix();
            init.conv(&mut store, &format!("{p}.stem"), 3, f, 3);
            for c in 0..cfg.cells {
                match &self.arch {
                    Architecture::Relaxed => init_relaxed_cell(&mut init, &mut store, &cell_prefix(role, c), f),
                    Architecture::Discrete { cell, .. } => {
                        init_discrete_cell(&mut init, &mut store, &cell_prefix(role, c), cell, f)
                    }
                }
            }
            init.conv_zero(&mut store, &format!("{p}.head"), f, 3, 3);
        }
        init.conv(&mut store, "aas.conv0", 3, f, 3);
        init.conv(&mut store, "aas.conv1", f, f, 3);
        init.conv_zero(&mut store, "aas.head", f, 3, 1);
        Ok(store)
    }

    /// Fresh parameters whose forward pass returns the reference frame unchanged.
    pub fn identity_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = self.init_params(seed)?;
        if self.config.gars {
            Initializer::new(0).conv_zero(&mut store, &format!("{COARSE_PREFIX}.l2"), self.config.channels, 3, 3);
        }
        Ok(store)
    }

    /// Every array this model reads must exist with the expected shape.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let template = self.init_params(0)?;
        for (name, t) in template.iter() {
            let got = store
                .get(name)
                .map_err(|_| Error::Config(format!("checkpoint lacks `{name}` required by this model")))?;
            ensure!(
                got.shape() == t.shape(),
                Config,
                "`{name}` has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            );
        }
        Ok(())
    }

    pub fn flows(&self, win: &FrameWindow, est: &dyn FlowEstimator) -> Result<Vec<Option<FlowField>>> {
        ensure!(
            win.len() == self.config.frames,
            Argument,
            "model expects {}-frame windows, got {}",
            self.config.frames,
            win.len()
        );
        if self.uses_flow() {
            window_flows(win, est)
        } else {
            Ok(Vec::new())
        }
    }

    pub fn align(&self, s: &mut Session, win: &FrameWindow, flows: &[Option<FlowField>]) -> Result<Var> {
        match &self.arch {
            Architecture::Relaxed => align_mixed(s, win, flows),
            Architecture::Discrete { align: MacroChoice::Ofm, .. } => align_ofm(s, win, flows),
            Architecture::Discrete { align: MacroChoice::Tgm, .. } => align_tgm(s, win),
        }
    }

    /// Stem, cascaded cells, head; the output is `input - head`.
    pub fn branch_forward(&self, s: &mut Session, role: Role, x: Var, weights: Option<&[Var]>) -> Result<Var> {
        let p = role.prefix();
        let mut y = conv(s, x, &format!("{p}.stem"), 1)?;
        for c in 0..self.config.cells {
            y = match (&self.arch, weights) {
                (Architecture::Relaxed, Some(w)) => cell_forward(s, y, w, &cell_prefix(role, c))?,
                (Architecture::Discrete { cell, .. }, None) => discrete_forward(s, y, cell, &cell_prefix(role, c))?,
                _ => return Err(Error::Config("branch mode does not match the architecture".into())),
            };
        }
        let h = conv(s, y, &format!("{p}.head"), 1)?;
        Ok(s.g.sub(x, h))
    }

    pub fn full_forward(
        &self,
        s: &mut Session,
        win: &FrameWindow,
        flows: &[Option<FlowField>],
        fusion: Fusion,
    ) -> Result<Intermediates> {
        let aligned = self.align(s, win, flows)?;
        let augmented = if self.config.gars {
            let bank = KernelBank::from_store(s.store())?;
            augment(s, aligned, &bank)?
        } else {
            aligned
        };
        let weights = match self.arch {
            Architecture::Relaxed => {
                let a = s.param(ALPHA)?;
                Some(node_weights(s, a))
            }
            Architecture::Discrete { .. } => None,
        };
        let dominant = self.branch_forward(s, Role::Dominant, augmented, weights.as_deref())?;
        let companion = self.branch_forward(s, Role::Companion, aligned, weights.as_deref())?;
        let (lambda, fused) = match fusion {
            Fusion::Half => {
                let sum = s.g.add(dominant, companion);
                (None, s.g.scale(sum, 0.5))
            }
            Fusion::Learned => {
                let lam = aas_weights(s, dominant, companion)?;
                (Some(lam), fuse(s, dominant, companion, lam))
            }
        };
        Ok(Intermediates {
            aligned,
            augmented,
            dominant,
            companion,
            lambda,
            fused,
        })
    }

    /// Inference on one window with learned fusion, clipped to `[0, 1]`.
    pub fn restore(&self, store: &ParamStore, win: &FrameWindow, est: &dyn FlowEstimator) -> Result<Frame> {
        let flows = self.flows(win, est)?;
        let mut s = Session::new(store, Trainable::None);
        let out = self.full_forward(&mut s, win, &flows, Fusion::Learned)?;
        Frame::from_tensor_clipped(s.g.value(out.fused))
    }
}

fn aas_score(s: &mut Session, x: Var) -> Result<Var> {
    let y = conv(s, x, "aas.conv0", 1)?;
    let y = s.g.relu(y);
    let y = conv(s, y, "aas.conv1", 1)?;
    let y = s.g.relu(y);
    let y = conv(s, y, "aas.head", 1)?;
    Ok(s.g.global_avg_pool(y))
}

/// Per-channel softmax across the two branches of scores from one shared stack.
/// Returns `(dominant, companion)` weights, each `[3]`.
pub fn aas_weights(s: &mut Session, dominant: Var, companion: Var) -> Result<(Var, Var)> {
    ensure!(
        s.g.shape(dominant) == s.g.shape(companion),
        Argument,
        "branch outputs differ in shape"
    );
    let sd = aas_score(s, dominant)?;
    let sc = aas_score(s, companion)?;
    let both = s.g.concat(&[sd, sc]);
    let both = s.g.reshape(both, &[2, 3]);
    let pairs = s.g.transpose(both);
    let p = s.g.softmax_rows(pairs);
    Ok((s.g.pick(p, &[0, 2, 4]), s.g.pick(p, &[1, 3, 5])))
}

pub fn fuse(s: &mut Session, dominant: Var, companion: Var, (ld, lc): (Var, Var)) -> Var {
    let a = s.g.channel_scale(dominant, ld);
    let b = s.g.channel_scale(companion, lc);
    s.g.add(a, b)
}

/// Per-channel fusion weights of a branch pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub dominant: [f64; 3],
    pub companion: [f64; 3],
}

impl FusionWeights {
    pub fn uniform(l: f64) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&l), Argument, "fusion weight must lie in [0, 1]");
        Ok(FusionWeights {
            dominant: [l; 3],
            companion: [1.0 - l; 3],
        })
    }
}

pub fn fusion_weights(store: &ParamStore, dominant: &Frame, companion: &Frame) -> Result<FusionWeights> {
    let mut s = Session::new(store, Trainable::None);
    let d = s.constant(dominant.tensor().clone());
    let c = s.constant(companion.tensor().clone());
    let (ld, lc) = aas_weights(&mut s, d, c)?;
    let arr = |v: Var| -> [f64; 3] { s.g.value(v).data().try_into().unwrap() };
    Ok(FusionWeights {
        dominant: arr(ld),
        companion: arr(lc),
    })
}

/// `out_c = l_c * dominant_c + (1 - l_c) * companion_c`.
pub fn fuse_frames(dominant: &Frame, companion: &Frame, lam: &FusionWeights) -> Result<Frame> {
    ensure!(dominant.same_size(companion), Argument, "branch outputs differ in size");
    let hw = dominant.height() * dominant.width();
    let (a, b) = (dominant.tensor().data(), companion.tensor().data());
    let out = (0..3 * hw)
        .map(|i| {
            let c = i / hw;
            (lam.dominant[c] * a[i] + lam.companion[c] * b[i]).clamp(a[i].min(b[i]), a[i].max(b[i]))
        })
        .collect();
    Frame::new(Tensor::new(dominant.tensor().shape(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::PyramidalFlow;
    use crate::data::procedural_sequence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(arch: Architecture) -> Model {
        Model::new(
            ModelConfig {
                channels: 8,
                cells: 1,
                frames: 3,
                gars: true,
                bank: BankConfig::two_groups(1, 3, 5),
                flow: FlowConfig::default(),
            },
            arch,
        )
        .unwrap()
    }

    fn light() -> Architecture {
        Architecture::Discrete {
            cell: CellSpec::light(),
            align: MacroChoice::Ofm,
        }
    }

    fn win(seed: u64) -> FrameWindow {
        let seq = procedural_sequence("n", 16, 16, 3, seed).unwrap();
        FrameWindow::new(seq.frames().to_vec(), Some(seq.frame(1).clone())).unwrap()
    }

    fn perturbed(store: &ParamStore, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = store.clone();
        for name in store.names().cloned().collect::<Vec<_>>() {
            if name.starts_with("buffer.") {
                continue;
            }
            let t = out.get_mut(&name).unwrap();
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        out
    }

    #[test]
    fn residual_block_properties() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(1);
        init_residual_block(&mut init, &mut store, "r", 3, 8, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(&[3, 9, 10], (0..270).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut s = Session::new(&store, Trainable::None);
        let xv = s.constant(x.clone());
        let y = residual_block(&mut s, xv, "r").unwrap();
        assert_eq!(s.g.shape(y), x.shape());
        let x2 = s.constant(x.map(|v| 2.0 * v));
        let y2 = residual_block(&mut s, x2, "r").unwrap();
        assert!(s.g.value(y2).max_abs_diff(&s.g.value(y).map(|v| 2.0 * v)) > 1e-6);
        init.conv_zero(&mut store, "r.l2", 8, 3, 3);
        let mut s = Session::new(&store, Trainable::None);
        let xv = s.constant(x.clone());
        let y = residual_block(&mut s, xv, "r").unwrap();
        assert_eq!(s.g.value(y), &x);
    }

    #[test]
    fn zero_head_branch_is_identity_and_modes_must_match() {
        let m = small(light());
        let store = m.init_params(3).unwrap();
        let f = win(1).reference().clone();
        let mut s = Session::new(&store, Trainable::None);
        let x = s.constant(f.tensor().clone());
        let y = m.branch_forward(&mut s, Role::Dominant, x, None).unwrap();
        assert_eq!(s.g.value(y), f.tensor());
        let a = s.constant(Tensor::zeros(&[NUM_NODES, NUM_OPS]));
        let w = node_weights(&mut s, a);
        assert!(matches!(
            m.branch_forward(&mut s, Role::Dominant, x, Some(&w)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identity_model_restores_the_input() {
        for arch in [
            light(),
            Architecture::Discrete {
                cell: CellSpec::heavy(),
                align: MacroChoice::Tgm,
            },
            Architecture::Relaxed,
        ] {
            let m = small(arch);
            let store = m.identity_params(4).unwrap();
            let w = win(2);
            let out = m.restore(&store, &w, &PyramidalFlow::default()).unwrap();
            assert_eq!(&out, w.reference());
        }
    }

    #[test]
    fn fusion_weights_symmetry_and_endpoints() {
        let m = small(light());
        let store = perturbed(&m.init_params(5).unwrap(), 6);
        let w = win(3);
        let a = w.frames[0].clone();
        let b = w.frames[2].clone();
        let same = fusion_weights(&store, &a, &a).unwrap();
        assert_eq!(same.dominant, [0.5; 3]);
        let ab = fusion_weights(&store, &a, &b).unwrap();
        let ba = fusion_weights(&store, &b, &a).unwrap();
        assert_eq!(ab.dominant, ba.companion);
        assert_eq!(ab.companion, ba.dominant);
        for c in 0..3 {
            assert!((ab.dominant[c] + ab.companion[c] - 1.0).abs() < 1e-12);
            assert!(ab.dominant[c] > 0.0 && ab.dominant[c] < 1.0);
        }
        assert_eq!(fuse_frames(&a, &b, &FusionWeights::uniform(1.0).unwrap()).unwrap(), a);
        assert_eq!(fuse_frames(&a, &b, &FusionWeights::uniform(0.0).unwrap()).unwrap(), b);
        let mid = fuse_frames(&a, &b, &ab).unwrap();
        for ((m, x), y) in mid.tensor().data().iter().zip(a.tensor().data()).zip(b.tensor().data()) {
            assert!(*m >= x.min(*y) && *m <= x.max(*y));
        }
    }

    #[test]
    fn gars_off_feeds_both_branches_the_same_frame() {
        let mut m = small(light());
        m.config.gars = false;
        let store = m.init_params(7).unwrap();
        let w = win(4);
        let flows = m.flows(&w, &PyramidalFlow::default()).unwrap();
        let mut s = Session::new(&store, Trainable::None);
        let out = m.full_forward(&mut s, &w, &flows, Fusion::Half).unwrap();
        assert_eq!(s.g.value(out.aligned), s.g.value(out.augmented));
    }

    #[test]
    fn forward_is_deterministic_and_fused_is_convex() {
        let m = small(Architecture::Relaxed);
        let store = perturbed(&m.init_params(8).unwrap(), 9);
        let w = win(5);
        let flows = m.flows(&w, &PyramidalFlow::default()).unwrap();
        let run = || {
            let mut s = Session::new(&store, Trainable::None);
            let o = m.full_forward(&mut s, &w, &flows, Fusion::Learned).unwrap();
            (
                s.g.value(o.fused).clone(),
                s.g.value(o.dominant).clone(),
                s.g.value(o.companion).clone(),
            )
        };
        let (f, d, c) = run();
        assert_eq!(run().0, f);
        for ((v, a), b) in f.data().iter().zip(d.data()).zip(c.data()) {
            assert!(*v >= a.min(*b) - 1e-12 && *v <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn missing_parameters_are_reported() {
        let m = small(light());
        let mut store = m.init_params(1).unwrap();
        m.check_params(&store).unwrap();
        let heavy = small(Architecture::Discrete {
            cell: CellSpec::heavy(),
            align: MacroChoice::Ofm,
        });
        assert!(matches!(heavy.check_params(&store), Err(Error::Config(_))));
        store.insert("aas.head.w", Tensor::zeros(&[1]));
        assert!(m.check_params(&store).is_err());
    }
}
