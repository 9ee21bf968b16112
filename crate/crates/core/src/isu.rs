//! Iterative update operators.
//!
//! Every operator maps `(cf, mf, h_prev)` to a new hidden state of the same
//! shape. The registry mirrors the ablation ladder from a pointwise
//! convolutional GRU up to the full ordered, gated SSM update.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fio::{score_points, FioScorer, Permutation};
use crate::mamba::{stack_blocks, BiMambaParams, MambaConfig};
use crate::nn::{Bindings, Init, LayerNormParams, Linear, Mlp, ParamStore};
use crate::pointcloud::{warp, CostVolume};
use crate::ssm::ScanKernel;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// Selectable update operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateKind {
    ConvGru,
    MambaUni,
    BiMamba,
    Isu,
    IsuFio,
}

impl UpdateKind {
    pub const ALL: [UpdateKind; 5] = [
        UpdateKind::ConvGru,
        UpdateKind::MambaUni,
        UpdateKind::BiMamba,
        UpdateKind::Isu,
        UpdateKind::IsuFio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UpdateKind::ConvGru => "conv-gru",
            UpdateKind::MambaUni => "mamba-uni",
            UpdateKind::BiMamba => "bimamba",
            UpdateKind::Isu => "isu",
            UpdateKind::IsuFio => "isu-fio",
        }
    }

    fn uses_ssm(self) -> bool {
        self != UpdateKind::ConvGru
    }

    fn gated(self) -> bool {
        matches!(self, UpdateKind::Isu | UpdateKind::IsuFio)
    }

    fn ordered(self) -> bool {
        self == UpdateKind::IsuFio
    }
}

impl fmt::Display for UpdateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UpdateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-gru" => Ok(UpdateKind::ConvGru),
            "mamba-uni" => Ok(UpdateKind::MambaUni),
            "bimamba" => Ok(UpdateKind::BiMamba),
            "isu" => Ok(UpdateKind::Isu),
            "isu-fio" | "isu+fio" => Ok(UpdateKind::IsuFio),
            other => Err(Error::Config(alloc::format!(
                "unknown update operator `{other}` (expected conv-gru, mamba-uni, bimamba, isu or isu-fio)"
            ))),
        }
    }
}

/// Widths shared by the update operators of one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateConfig {
    pub kind: UpdateKind,
    /// Context and hidden width `C`.
    pub channels: usize,
    /// Motion feature width `C₂`.
    pub motion_channels: usize,
    pub blocks: usize,
    pub mamba: MambaConfig,
    pub scan: ScanKernel,
}

/// `LN(Conv1d_{1×1}([cf, mf, h_prev]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub conv: Linear,
    pub norm: LayerNormParams,
}

impl FusionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, c2: usize, rng: &mut R) -> Self {
        FusionParams {
            conv: Linear::new(
                store,
                &alloc::format!("{name}.conv"),
                2 * c + c2,
                c,
                true,
                Init::FanIn,
                rng,
            ),
            norm: LayerNormParams::new(store, &alloc::format!("{name}.norm"), c),
        }
    }
}

fn check_rows(op: &'static str, tape: &Tape, vars: &[Var]) -> Result<()> {
    let n = tape.value(vars[0]).rows();
    for &v in &vars[1..] {
        if tape.value(v).rows() != n {
            return Err(Error::dim(op, tape.value(vars[0]).shape(), tape.value(v).shape()));
        }
    }
    Ok(())
}

/// Fuses context, motion and hidden features into the block input `u`.
pub fn fuse_inputs(tape: &mut Tape, p: &Bindings, fusion: &FusionParams, cf: Var, mf: Var, h_prev: Var) -> Result<Var> {
    check_rows("fuse_inputs", tape, &[cf, mf, h_prev])?;
    let x = tape.concat_cols(&[cf, mf, h_prev])?;
    let y = fusion.conv.forward(tape, p, x)?;
    fusion.norm.forward(tape, p, y)
}

/// Produces the attentive weight `w = sigmoid(Conv1d([cf, mf, h_prev]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub conv: Linear,
}

impl GateParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, c2: usize, rng: &mut R) -> Self {
        GateParams {
            conv: Linear::new(
                store,
                &alloc::format!("{name}.conv"),
                2 * c + c2,
                c,
                true,
                Init::FanIn,
                rng,
            ),
        }
    }
}

/// `ĥ = (1 - w) ⊙ h_prev + w ⊙ h_opt`.
pub fn adaptive_fuse(
    tape: &mut Tape,
    p: &Bindings,
    gate: &GateParams,
    cf: Var,
    mf: Var,
    h_prev: Var,
    h_opt: Var,
) -> Result<Var> {
    check_rows("adaptive_fuse", tape, &[cf, mf, h_prev, h_opt])?;
    let x = tape.concat_cols(&[cf, mf, h_prev])?;
    let pre = gate.conv.forward(tape, p, x)?;
    let w = tape.activation(pre, Activation::Sigmoid);
    let diff = tape.sub(h_opt, h_prev)?;
    let step = tape.mul(w, diff)?;
    tape.add(h_prev, step)
}

/// Permutes `u` and `h_prev` into sequence order, runs the block stack and
/// restores the original point order.
pub fn optimize_hidden(
    tape: &mut Tape,
    p: &Bindings,
    blocks: &[BiMambaParams],
    u: Var,
    h_prev: Var,
    order: &Permutation,
    kernel: ScanKernel,
) -> Result<Var> {
    if order.len() != tape.value(u).rows() {
        return Err(Error::dim("optimize_hidden", tape.value(u).shape(), &[order.len()]));
    }
    let us = order.apply(tape, u)?;
    let hs = order.apply(tape, h_prev)?;
    let out = stack_blocks(tape, p, blocks, us, hs, kernel)?;
    order.restore(tape, out)
}

/// Pointwise convolutional GRU over `x = [cf, mf]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// Update gate over `[x, h]`.
    pub z: Linear,
    /// Reset gate over `[x, h]`.
    pub r: Linear,
    /// Candidate over `[x, r ⊙ h]`.
    pub q: Linear,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, c2: usize, rng: &mut R) -> Self {
        let inputs = 2 * c + c2;
        GruParams {
            z: Linear::new(store, &alloc::format!("{name}.z"), inputs, c, true, Init::FanIn, rng),
            r: Linear::new(store, &alloc::format!("{name}.r"), inputs, c, true, Init::FanIn, rng),
            q: Linear::new(store, &alloc::format!("{name}.q"), inputs, c, true, Init::FanIn, rng),
        }
    }
}

/// `z = σ(W_z[x,h])`, `r = σ(W_r[x,h])`, `q = tanh(W_q[x, r⊙h])`,
/// `h' = (1 - z) ⊙ h + z ⊙ q`.
pub fn gru_update(tape: &mut Tape, p: &Bindings, gru: &GruParams, cf: Var, mf: Var, h_prev: Var) -> Result<Var> {
    check_rows("gru_update", tape, &[cf, mf, h_prev])?;
    let xh = tape.concat_cols(&[cf, mf, h_prev])?;
    let zp = gru.z.forward(tape, p, xh)?;
    let z = tape.activation(zp, Activation::Sigmoid);
    let rp = gru.r.forward(tape, p, xh)?;
    let r = tape.activation(rp, Activation::Sigmoid);
    let rh = tape.mul(r, h_prev)?;
    let xrh = tape.concat_cols(&[cf, mf, rh])?;
    let qp = gru.q.forward(tape, p, xrh)?;
    let q = tape.activation(qp, Activation::Tanh);
    let diff = tape.sub(q, h_prev)?;
    let step = tape.mul(z, diff)?;
    tape.add(h_prev, step)
}

/// Parameters of one update operator.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOperator {
    ConvGru(GruParams),
    Ssm {
        fusion: FusionParams,
        blocks: Vec<BiMambaParams>,
        gate: Option<GateParams>,
        scorer: Option<FioScorer>,
    },
}

/// Hidden update together with the ordering it used, if any.
#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub h: Var,
    pub order: Option<Permutation>,
}

impl UpdateOperator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &UpdateConfig, rng: &mut R) -> Result<Self> {
        let (c, c2) = (cfg.channels, cfg.motion_channels);
        if !cfg.kind.uses_ssm() {
            return Ok(UpdateOperator::ConvGru(GruParams::new(
                store,
                &alloc::format!("{name}.gru"),
                c,
                c2,
                rng,
            )));
        }
        if cfg.blocks == 0 {
            return Err(Error::Config("update operator needs at least one Mamba block".into()));
        }
        let fusion = FusionParams::new(store, &alloc::format!("{name}.fuse"), c, c2, rng);
        let mamba = MambaConfig {
            channels: c,
            bidirectional: cfg.kind != UpdateKind::MambaUni,
            ..cfg.mamba
        };
        let blocks = (0..cfg.blocks)
            .map(|i| BiMambaParams::new(store, &alloc::format!("{name}.block{i}"), mamba, rng))
            .collect::<Result<Vec<_>>>()?;
        let gate = cfg
            .kind
            .gated()
            .then(|| GateParams::new(store, &alloc::format!("{name}.gate"), c, c2, rng));
        let scorer = cfg
            .kind
            .ordered()
            .then(|| FioScorer::new(store, &alloc::format!("{name}.fio"), c, c2, c, rng));
        Ok(UpdateOperator::Ssm {
            fusion,
            blocks,
            gate,
            scorer,
        })
    }

    pub fn update(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        cf: Var,
        mf: Var,
        h_prev: Var,
        kernel: ScanKernel,
    ) -> Result<UpdateResult> {
        match self {
            UpdateOperator::ConvGru(gru) => Ok(UpdateResult {
                h: gru_update(tape, p, gru, cf, mf, h_prev)?,
                order: None,
            }),
            UpdateOperator::Ssm {
                fusion,
                blocks,
                gate,
                scorer,
            } => {
                let n = tape.value(h_prev).rows();
                let order = match scorer {
                    Some(s) => Permutation::from_scores(&score_points(tape, p, s, cf, mf, h_prev)?),
                    None => Permutation::identity(n),
                };
                let u = fuse_inputs(tape, p, fusion, cf, mf, h_prev)?;
                let h_opt = optimize_hidden(tape, p, blocks, u, h_prev, &order, kernel)?;
                let h = match gate {
                    Some(g) => adaptive_fuse(tape, p, g, cf, mf, h_prev, h_opt)?,
                    None => h_opt,
                };
                Ok(UpdateResult {
                    h,
                    order: scorer.as_ref().map(|_| order),
                })
            }
        }
    }
}

/// Reads a residual flow out of the hidden state: a two-layer head whose
/// last layer starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowHead {
    pub mlp: Mlp,
}

impl FlowHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, zero_init: bool, rng: &mut R) -> Self {
        let last = if zero_init { Init::Zeros } else { Init::FanIn };
        FlowHead {
            mlp: Mlp::new(store, name, &[c, c, 3], Some(Activation::Silu), false, last, rng),
        }
    }
}

pub fn decode_flow(tape: &mut Tape, p: &Bindings, head: &FlowHead, h: Var) -> Result<Var> {
    head.mlp.forward(tape, p, h)
}

/// `mf = SiLU(W [cost volume, sf, ‖sf‖] + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionEncoder {
    pub proj: Linear,
}

impl MotionEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c2: usize, rng: &mut R) -> Self {
        MotionEncoder {
            proj: Linear::new(store, name, c2 + 4, c2, true, Init::FanIn, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, corr: Var, sf: Var) -> Result<Var> {
        let norm = tape.row_norm(sf)?;
        let x = tape.concat_cols(&[corr, sf, norm])?;
        let y = self.proj.forward(tape, p, x)?;
        Ok(tape.activation(y, Activation::Silu))
    }
}

/// All learnable pieces of one level's iterative update.
#[derive(Debug, Clone, PartialEq)]
pub struct IsuParams {
    pub config: UpdateConfig,
    pub cost_volume: CostVolume,
    pub motion: MotionEncoder,
    pub update: UpdateOperator,
    pub head: FlowHead,
}

impl IsuParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: UpdateConfig,
        k: usize,
        zero_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, c2) = (config.channels, config.motion_channels);
        Ok(IsuParams {
            config,
            cost_volume: CostVolume::new(store, &alloc::format!("{name}.corr"), c, c2, k, rng),
            motion: MotionEncoder::new(store, &alloc::format!("{name}.motion"), c2, rng),
            update: UpdateOperator::new(store, &alloc::format!("{name}.update"), &config, rng)?,
            head: FlowHead::new(store, &alloc::format!("{name}.head"), c, zero_head, rng),
        })
    }
}

/// Inputs of one pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct LevelInputs {
    /// Source coordinates `N₁×3` (constant).
    pub p: Var,
    /// Target coordinates `N₂×3` (constant).
    pub q: Var,
    pub f: Var,
    pub g: Var,
    pub cf: Var,
    pub sf0: Var,
    pub h0: Var,
}

#[derive(Debug, Clone)]
pub struct IsuOutput {
    pub f: Var,
    pub g: Var,
    pub sf: Var,
    pub h: Var,
    /// Flow after every iteration.
    pub flows: Vec<Var>,
    /// Orderings used per iteration (ordered operators only).
    pub orders: Vec<Permutation>,
}

/// Runs `n_iters` rounds of warp → cost volume → motion features → hidden
/// update → residual flow.
pub fn isu_iterate(
    tape: &mut Tape,
    p: &Bindings,
    level: &IsuParams,
    inputs: LevelInputs,
    n_iters: usize,
) -> Result<IsuOutput> {
    if n_iters == 0 {
        return Err(Error::Config("at least one update iteration is required".into()));
    }
    let mut sf = inputs.sf0;
    let mut h = inputs.h0;
    let mut flows = Vec::with_capacity(n_iters);
    let mut orders = Vec::new();
    for _ in 0..n_iters {
        let warped = warp(tape, inputs.p, sf)?;
        let corr = level
            .cost_volume
            .forward(tape, p, warped, inputs.f, inputs.q, inputs.g)?;
        let mf = level.motion.forward(tape, p, corr, sf)?;
        let res = level.update.update(tape, p, inputs.cf, mf, h, level.config.scan)?;
        h = res.h;
        orders.extend(res.order);
        let delta = decode_flow(tape, p, &level.head, h)?;
        sf = tape.add(sf, delta)?;
        flows.push(sf);
    }
    Ok(IsuOutput {
        f: inputs.f,
        g: inputs.g,
        sf,
        h,
        flows,
        orders,
    })
}

/// Zero flow of `n` points as a constant.
pub fn zero_flow(tape: &mut Tape, n: usize) -> Var {
    tape.constant(Tensor::zeros(&[n, 3]))
}
