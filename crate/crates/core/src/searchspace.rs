//! Candidate operations, softmax-relaxed mixed layers, cells and genotype derivation.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{ensure, Error, Result};
use crate::params::{conv, conv_norm_relu, Initializer, ParamStore, Session};
use crate::tensor::Tensor;

pub const NUM_OPS: usize = 8;
pub const NUM_NODES: usize = 4;
/// Micro architecture logits, `[NUM_NODES, NUM_OPS]`, shared by every cell of both branches.
pub const ALPHA: &str = "arch.alpha";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Res3,
    Res5,
    Dense3,
    Dense5,
    AttnSpatial,
    AttnChannel,
    Dil3,
    Dil5,
}

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::Res3,
        OpKind::Res5,
        OpKind::Dense3,
        OpKind::Dense5,
        OpKind::AttnSpatial,
        OpKind::AttnChannel,
        OpKind::Dil3,
        OpKind::Dil5,
    ];

    pub fn id(self) -> &'static str {
        match self {
            OpKind::Res3 => "res3",
            OpKind::Res5 => "res5",
            OpKind::Dense3 => "dense3",
            OpKind::Dense5 => "dense5",
            OpKind::AttnSpatial => "attn_spatial",
            OpKind::AttnChannel => "attn_channel",
            OpKind::Dil3 => "dil3",
            OpKind::Dil5 => "dil5",
        }
    }

    pub fn index(self) -> usize {
        OpKind::ALL.iter().position(|&o| o == self).unwrap()
    }

    pub fn from_index(i: usize) -> Result<Self> {
        OpKind::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Argument(format!("operation index {i} out of range")))
    }

    /// Spatial kernel size of the op's convolutions.
    pub fn kernel(self) -> usize {
        match self {
            OpKind::Res5 | OpKind::Dense5 | OpKind::Dil5 => 5,
            _ => 3,
        }
    }

    pub fn dilation(self) -> usize {
        match self {
            OpKind::Dil3 | OpKind::Dil5 => 2,
            _ => 1,
        }
    }

    pub fn init(self, init: &mut Initializer, store: &mut ParamStore, prefix: &str, f: usize) {
        let k = self.kernel();
        let p = |l: &str| format!("{prefix}.{}.{l}", self.id());
        match self {
            OpKind::Res3 | OpKind::Res5 | OpKind::Dil3 | OpKind::Dil5 => {
                for l in ["l0", "l1", "l2"] {
                    init.conv_norm(store, &p(l), f, f, k);
                }
            }
            OpKind::Dense3 | OpKind::Dense5 => {
                for (i, l) in ["l0", "l1", "l2"].into_iter().enumerate() {
                    init.conv_norm(store, &p(l), (i + 1) * f, f, k);
                }
                init.conv(store, &p("proj"), 4 * f, f, 1);
            }
            OpKind::AttnSpatial => {
                init.conv_norm(store, &p("l0"), f, f, 3);
                init.conv_norm(store, &p("l1"), f, f, 3);
                init.conv(store, &p("l2"), f, 1, 3);
            }
            OpKind::AttnChannel => {
                init.conv_norm(store, &p("l0"), f, f, 3);
                init.conv_norm(store, &p("l1"), f, f, 3);
                init.conv(store, &p("l2"), f, f, 1);
            }
        }
    }

    /// Parameter names (relative to the node prefix) and shapes for width `f`.
    pub fn param_shapes(self, f: usize) -> Vec<(String, Vec<usize>)> {
        let mut store = ParamStore::new();
        self.init(&mut Initializer::new(0), &mut store, "", f);
        store
            .iter()
            .map(|(n, t)| (n.trim_start_matches('.').to_string(), t.shape().to_vec()))
            .collect()
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|o| o.id() == s)
            .ok_or_else(|| Error::Argument(format!("unknown operation `{s}`")))
    }
}

/// Applies one candidate to `x` (`[F, H, W]`); parameters live under `{prefix}.{op}`.
pub fn apply_candidate(s: &mut Session, op: OpKind, x: Var, prefix: &str) -> Result<Var> {
    let p = |l: &str| format!("{prefix}.{}.{l}", op.id());
    let dil = op.dilation();
    match op {
        OpKind::Res3 | OpKind::Res5 => {
            let mut y = x;
            for l in ["l0", "l1", "l2"] {
                y = conv_norm_relu(s, y, &p(l), 1)?;
            }
            Ok(s.g.add(x, y))
        }
        OpKind::Dil3 | OpKind::Dil5 => {
            let mut y = x;
            for l in ["l0", "l1", "l2"] {
                y = conv_norm_relu(s, y, &p(l), dil)?;
            }
            Ok(y)
        }
        OpKind::Dense3 | OpKind::Dense5 => {
            let mut feats = vec![x];
            for l in ["l0", "l1", "l2"] {
                let input = if feats.len() == 1 { x } else { s.g.concat(&feats) };
                let y = conv_norm_relu(s, input, &p(l), 1)?;
                feats.push(y);
            }
            let all = s.g.concat(&feats);
            conv(s, all, &p("proj"), 1)
        }
        OpKind::AttnSpatial => {
            let y = conv_norm_relu(s, x, &p("l0"), 1)?;
            let y = conv_norm_relu(s, y, &p("l1"), 1)?;
            let m = conv(s, y, &p("l2"), 1)?;
            let m = s.g.sigmoid(m);
            Ok(s.g.spatial_scale(x, m))
        }
        OpKind::AttnChannel => {
            let y = conv_norm_relu(s, x, &p("l0"), 1)?;
            let y = conv_norm_relu(s, y, &p("l1"), 1)?;
            let pooled = s.g.global_avg_pool(y);
            let c = s.g.shape(pooled)[0];
            let pooled = s.g.reshape(pooled, &[c, 1, 1]);
            let gate = conv(s, pooled, &p("l2"), 1)?;
            let gate = s.g.reshape(gate, &[c]);
            let gate = s.g.sigmoid(gate);
            Ok(s.g.channel_scale(x, gate))
        }
    }
}

/// Per-node softmax weights of the `[NUM_NODES, NUM_OPS]` logits, one `[NUM_OPS]` var per node.
pub fn node_weights(s: &mut Session, alpha: Var) -> Vec<Var> {
    let p = s.g.softmax_rows(alpha);
    (0..NUM_NODES)
        .map(|l| {
            let idx: Vec<usize> = (l * NUM_OPS..(l + 1) * NUM_OPS).collect();
            s.g.pick(p, &idx)
        })
        .collect()
}

/// `sum_i w_i * op_i(x)` over all candidates.
pub fn mixed_layer(s: &mut Session, x: Var, weights: Var, prefix: &str) -> Result<Var> {
    let outs = OpKind::ALL
        .iter()
        .map(|&op| apply_candidate(s, op, x, prefix))
        .collect::<Result<Vec<_>>>()?;
    Ok(s.g.weighted_sum(&outs, weights))
}

pub fn node_prefix(cell_prefix: &str, node: usize) -> String {
    format!("{cell_prefix}.node{node}")
}

/// Chain of mixed layers plus an identity skip from the cell input.
pub fn cell_forward(s: &mut Session, x: Var, weights: &[Var], prefix: &str) -> Result<Var> {
    ensure!(weights.len() == NUM_NODES, Argument, "expected {NUM_NODES} node weight vectors");
    let mut y = x;
    for (l, &w) in weights.iter().enumerate() {
        y = mixed_layer(s, y, w, &node_prefix(prefix, l))?;
    }
    Ok(s.g.add(x, y))
}

/// The derived cell: the named op at each node, same skip as [`cell_forward`].
pub fn discrete_forward(s: &mut Session, x: Var, spec: &CellSpec, prefix: &str) -> Result<Var> {
    let mut y = x;
    for (l, &op) in spec.ops().iter().enumerate() {
        y = apply_candidate(s, op, y, &node_prefix(prefix, l))?;
    }
    Ok(s.g.add(x, y))
}

pub fn init_relaxed_cell(init: &mut Initializer, store: &mut ParamStore, prefix: &str, f: usize) {
    for l in 0..NUM_NODES {
        for op in OpKind::ALL {
            op.init(init, store, &node_prefix(prefix, l), f);
        }
    }
}

pub fn init_discrete_cell(init: &mut Initializer, store: &mut ParamStore, prefix: &str, spec: &CellSpec, f: usize) {
    for (l, &op) in spec.ops().iter().enumerate() {
        op.init(init, store, &node_prefix(prefix, l), f);
    }
}

/// An ordered list of one operation per node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellSpec {
    ops: [OpKind; NUM_NODES],
}

impl CellSpec {
    pub fn new(ops: [OpKind; NUM_NODES]) -> Self {
        CellSpec { ops }
    }

    pub fn ops(&self) -> &[OpKind; NUM_NODES] {
        &self.ops
    }

    /// Genotype preferred for light rain.
    pub fn light() -> Self {
        CellSpec::new([OpKind::Res3, OpKind::AttnSpatial, OpKind::Dil3, OpKind::AttnChannel])
    }

    /// Genotype preferred for heavy rain.
    pub fn heavy() -> Self {
        CellSpec::new([OpKind::Res5, OpKind::AttnSpatial, OpKind::AttnChannel, OpKind::Res3])
    }

    /// Saturated logits that select exactly this genotype.
    pub fn one_hot_logits(&self, magnitude: f64) -> Tensor {
        let mut t = Tensor::zeros(&[NUM_NODES, NUM_OPS]);
        for (l, op) in self.ops.iter().enumerate() {
            t.data_mut()[l * NUM_OPS + op.index()] = magnitude;
        }
        t
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<&str> = self.ops.iter().map(|o| o.id()).collect();
        f.write_str(&ids.join(","))
    }
}

impl FromStr for CellSpec {
    type Err = Error;

    /// Accepts a comma-separated list of four op ids, or `light` / `heavy`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "light" => return Ok(CellSpec::light()),
            "heavy" => return Ok(CellSpec::heavy()),
            _ => {}
        }
        let ops = s
            .trim()
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<Vec<OpKind>>>()?;
        let ops: [OpKind; NUM_NODES] = ops
            .try_into()
            .map_err(|v: Vec<OpKind>| Error::Argument(format!("a cell has {NUM_NODES} ops, got {}", v.len())))?;
        Ok(CellSpec { ops })
    }
}

/// Per-node argmax of the softmax weights; ties go to the lowest op index.
pub fn derive_cell(alpha: &Tensor) -> Result<CellSpec> {
    ensure!(
        alpha.shape() == [NUM_NODES, NUM_OPS],
        Argument,
        "architecture logits must be [{NUM_NODES}, {NUM_OPS}], got {:?}",
        alpha.shape()
    );
    ensure!(alpha.all_finite(), Argument, "architecture logits must be finite");
    let p = crate::autodiff::softmax_rows(alpha.data(), NUM_OPS);
    let mut ops = [OpKind::Res3; NUM_NODES];
    for (l, row) in p.chunks(NUM_OPS).enumerate() {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        ops[l] = OpKind::from_index(best)?;
    }
    Ok(CellSpec { ops })
}
