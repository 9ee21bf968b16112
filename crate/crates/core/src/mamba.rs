//! Gated (bi)directional Mamba block.
//!
//! For an input sequence `u` (`L×C`) and residual source `h_prev`:
//!
//! ```text
//! s   = SiLU(DW(u W₁))
//! g   = SiLU(u W₂)
//! out = (SSM(s) ⊙ g) W₃ + h_prev
//! ```
//!
//! where `SSM` is a selective scan, run in both directions and summed when
//! the block is bidirectional.

use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::{init_tensor, Bindings, Init, Linear, ParamId, ParamStore};
use crate::ssm::ScanKernel;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MambaConfig {
    pub channels: usize,
    /// Inner width is `expand · channels`.
    pub expand: usize,
    pub state: usize,
    /// Depthwise kernel width (odd).
    pub conv_width: usize,
    pub bidirectional: bool,
    /// Range of the initial timescales `Δ` (log-uniform).
    pub delta_min: f64,
    pub delta_max: f64,
    /// Zero-initialize `W₃` so a fresh block is the identity on `h_prev`.
    pub zero_output: bool,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            channels: 32,
            expand: 2,
            state: 8,
            conv_width: 3,
            bidirectional: true,
            delta_min: 1e-3,
            delta_max: 1e-1,
            zero_output: false,
        }
    }
}

impl MambaConfig {
    pub fn inner(&self) -> usize {
        self.channels * self.expand
    }
}

/// Selective projection and state matrix of one scan direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionParams {
    /// `E×E`.
    pub w_delta: ParamId,
    /// `E`.
    pub b_delta: ParamId,
    /// `E×S`.
    pub w_b: ParamId,
    /// `E×S`.
    pub w_c: ParamId,
    /// `E×S`; the state matrix is `A = -exp(a_log)`.
    pub a_log: ParamId,
}

impl DirectionParams {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &MambaConfig, rng: &mut R) -> Self {
        let (e, s) = (cfg.inner(), cfg.state);
        let w_delta = store.add(
            alloc::format!("{name}.w_delta"),
            init_tensor(&[e, e], e, Init::FanIn, rng),
        );
        let (lo, hi) = (math::ln(cfg.delta_min), math::ln(cfg.delta_max));
        let b_delta = store.add(
            alloc::format!("{name}.b_delta"),
            Tensor::from_fn(&[e], |_| math::softplus_inv(math::exp(rng.random_range(lo..=hi)))),
        );
        let w_b = store.add(alloc::format!("{name}.w_b"), init_tensor(&[e, s], e, Init::FanIn, rng));
        let w_c = store.add(alloc::format!("{name}.w_c"), init_tensor(&[e, s], e, Init::FanIn, rng));
        // A = -(1..=S) on every channel.
        let a_log = store.add(
            alloc::format!("{name}.a_log"),
            Tensor::from_fn(&[e, s], |i| math::ln((i % s) as f64 + 1.0)),
        );
        DirectionParams {
            w_delta,
            b_delta,
            w_b,
            w_c,
            a_log,
        }
    }

    /// Scans `x` (`L×E`) left to right.
    fn scan(&self, tape: &mut Tape, p: &Bindings, x: Var, kernel: ScanKernel) -> Result<Var> {
        let pre = tape.linear(x, p[self.w_delta], Some(p[self.b_delta]))?;
        let delta = tape.activation(pre, Activation::Softplus);
        let b = tape.matmul(x, p[self.w_b])?;
        let c = tape.matmul(x, p[self.w_c])?;
        let a_pos = tape.exp(p[self.a_log]);
        let a = tape.scale(a_pos, -1.0);
        tape.selective_scan(kernel, x, delta, a, b, c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiMambaParams {
    pub config: MambaConfig,
    /// `W₁`: `C → E`, feeds the SSM branch.
    pub in_ssm: Linear,
    /// `W₂`: `C → E`, the gate branch.
    pub in_gate: Linear,
    /// `K×E` depthwise kernel.
    pub dw_kernel: ParamId,
    pub forward: DirectionParams,
    pub backward: Option<DirectionParams>,
    /// `W₃`: `E → C`.
    pub out: Linear,
}

impl BiMambaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: MambaConfig, rng: &mut R) -> Result<Self> {
        if config.conv_width.is_multiple_of(2) {
            return Err(Error::Config(alloc::format!(
                "depthwise kernel width must be odd, got {}",
                config.conv_width
            )));
        }
        if config.channels == 0 || config.state == 0 || config.expand == 0 {
            return Err(Error::Config("Mamba block widths must be positive".into()));
        }
        let (c, e, k) = (config.channels, config.inner(), config.conv_width);
        let in_ssm = Linear::new(store, &alloc::format!("{name}.in_ssm"), c, e, false, Init::FanIn, rng);
        let in_gate = Linear::new(store, &alloc::format!("{name}.in_gate"), c, e, false, Init::FanIn, rng);
        let dw_kernel = store.add(
            alloc::format!("{name}.dw_kernel"),
            init_tensor(&[k, e], k, Init::FanIn, rng),
        );
        let forward = DirectionParams::new(store, &alloc::format!("{name}.fwd"), &config, rng);
        let backward = config
            .bidirectional
            .then(|| DirectionParams::new(store, &alloc::format!("{name}.bwd"), &config, rng));
        let out_init = if config.zero_output { Init::Zeros } else { Init::FanIn };
        let out = Linear::new(store, &alloc::format!("{name}.out"), e, c, false, out_init, rng);
        Ok(BiMambaParams {
            config,
            in_ssm,
            in_gate,
            dw_kernel,
            forward,
            backward,
            out,
        })
    }

    /// Every parameter id owned by the block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.in_ssm.weight, self.in_gate.weight, self.dw_kernel];
        for d in core::iter::once(&self.forward).chain(self.backward.as_ref()) {
            ids.extend([d.w_delta, d.b_delta, d.w_b, d.w_c, d.a_log]);
        }
        ids.push(self.out.weight);
        ids
    }
}

/// Sum of the forward scan and the time-reversed scan of the reversed
/// sequence.
pub fn bidirectional_ssm(
    tape: &mut Tape,
    p: &Bindings,
    block: &BiMambaParams,
    x: Var,
    kernel: ScanKernel,
) -> Result<Var> {
    let yf = block.forward.scan(tape, p, x, kernel)?;
    let Some(bwd) = &block.backward else {
        return Ok(yf);
    };
    let len = tape.value(x).rows();
    let rev: Vec<usize> = (0..len).rev().collect();
    let xr = tape.gather_rows(x, &rev)?;
    let yr = bwd.scan(tape, p, xr, kernel)?;
    let yb = tape.gather_rows(yr, &rev)?;
    tape.add(yf, yb)
}

/// One block: `(SSM(SiLU(DW(u W₁))) ⊙ SiLU(u W₂)) W₃ + h_prev`.
pub fn bimamba_forward(
    tape: &mut Tape,
    p: &Bindings,
    block: &BiMambaParams,
    u: Var,
    h_prev: Var,
    kernel: ScanKernel,
) -> Result<Var> {
    let c = block.config.channels;
    for v in [u, h_prev] {
        let t = tape.value(v);
        if t.rank() != 2 || t.cols() != c {
            return Err(Error::dim("bimamba_forward", t.shape(), &[t.rows(), c]));
        }
    }
    if tape.value(u).shape() != tape.value(h_prev).shape() {
        return Err(Error::dim(
            "bimamba_forward",
            tape.value(u).shape(),
            tape.value(h_prev).shape(),
        ));
    }
    let xs = block.in_ssm.forward(tape, p, u)?;
    let xs = tape.depthwise_conv1d(xs, p[block.dw_kernel])?;
    let s = tape.activation(xs, Activation::Silu);
    let xg = block.in_gate.forward(tape, p, u)?;
    let g = tape.activation(xg, Activation::Silu);
    let y = bidirectional_ssm(tape, p, block, s, kernel)?;
    let yg = tape.mul(y, g)?;
    let out = block.out.forward(tape, p, yg)?;
    tape.add(out, h_prev)
}

/// Applies blocks in sequence; each block's output is the next block's
/// input and residual source.
pub fn stack_blocks(
    tape: &mut Tape,
    p: &Bindings,
    blocks: &[BiMambaParams],
    u: Var,
    h_prev: Var,
    kernel: ScanKernel,
) -> Result<Var> {
    let (first, rest) = blocks
        .split_first()
        .ok_or_else(|| Error::Config("a block stack needs at least one block".into()))?;
    let mut h = bimamba_forward(tape, p, first, u, h_prev, kernel)?;
    for block in rest {
        h = bimamba_forward(tape, p, block, h, h, kernel)?;
    }
    Ok(h)
}
