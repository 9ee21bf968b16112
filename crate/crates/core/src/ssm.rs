//! Discrete state-space sequence kernels.
//!
//! Every SSM here is diagonal: each of the `D` channels carries `S`
//! independent scalar states, so a model is a set of `D·S` "lanes" each
//! running `h_t = ā_t h_{t-1} + b̄_t x_t`. Lanes are stored channel-major
//! (`lane = d·S + s`) and time-major buffers are laid out `[t][lane]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// `|ΔA|` below which the input gain uses its Taylor expansion.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-4;

/// Block length of the blocked (parallel) scan.
pub const DEFAULT_SCAN_BLOCK: usize = 64;

/// Continuous diagonal SSM `h' = A h + B x`, `y = C h`, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSsm {
    pub channels: usize,
    pub state: usize,
    /// `D×S`, strictly negative.
    pub a: Vec<f64>,
    /// `D×S`.
    pub b: Vec<f64>,
    /// `D×S`.
    pub c: Vec<f64>,
}

impl ContinuousSsm {
    pub fn new(channels: usize, state: usize, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if state == 0 || channels == 0 {
            return Err(Error::Config("SSM needs at least one channel and one state".into()));
        }
        let n = channels * state;
        if a.len() != n || b.len() != n || c.len() != n {
            return Err(Error::dim(
                "ContinuousSsm::new",
                &[channels, state],
                &[a.len(), b.len(), c.len()],
            ));
        }
        if let Some(v) = a.iter().find(|v| !(**v < 0.0)) {
            return Err(Error::Domain(alloc::format!(
                "state matrix entries must be negative, got {v}"
            )));
        }
        Ok(ContinuousSsm {
            channels,
            state,
            a,
            b,
            c,
        })
    }

    /// `A = -(1..=S)` on every channel with the given `B`, `C` rows.
    pub fn ladder(channels: usize, state: usize, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let a = (0..channels * state).map(|i| -((i % state) as f64 + 1.0)).collect();
        ContinuousSsm::new(channels, state, a, b, c)
    }

    /// ZOH discretization with one timescale per channel.
    pub fn discretize(&self, delta: &[f64]) -> Result<DiscreteSsm> {
        if delta.len() != self.channels {
            return Err(Error::dim("discretize", &[self.channels], &[delta.len()]));
        }
        let n = self.channels * self.state;
        let mut a_bar = Vec::with_capacity(n);
        let mut b_bar = Vec::with_capacity(n);
        for lane in 0..n {
            let (ab, bb) = discretize_zoh(self.a[lane], self.b[lane], delta[lane / self.state])?;
            a_bar.push(ab);
            b_bar.push(bb);
        }
        Ok(DiscreteSsm {
            channels: self.channels,
            state: self.state,
            a_bar,
            b_bar,
            c: self.c.clone(),
            delta: delta.to_vec(),
        })
    }
}

/// Time-invariant discrete SSM.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub channels: usize,
    pub state: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
    /// Per-channel timescale that produced `a_bar` / `b_bar`.
    pub delta: Vec<f64>,
}

/// Per-timestep selective parameters: `Δ_t` per channel, `B_t`, `C_t`
/// shared across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveInputs {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    /// `L×D`, positive.
    pub delta: Vec<f64>,
    /// `L×S`.
    pub b: Vec<f64>,
    /// `L×S`.
    pub c: Vec<f64>,
}

/// Parameters accepted by the scans.
#[derive(Debug, Clone, Copy)]
pub enum ScanParams<'a> {
    TimeInvariant(&'a DiscreteSsm),
    /// Continuous diagonal `A` (`D×S`) discretized per step by the inputs.
    Selective {
        a: &'a [f64],
        inputs: &'a SelectiveInputs,
    },
}

impl ScanParams<'_> {
    fn dims(&self) -> (usize, usize) {
        match self {
            ScanParams::TimeInvariant(m) => (m.channels, m.state),
            ScanParams::Selective { inputs, .. } => (inputs.channels, inputs.state),
        }
    }
}

/// How a linear recurrence is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanKernel {
    Sequential,
    /// Three-phase blocked scan: local scans per block, a tree scan over
    /// block aggregates, then a fix-up pass.
    Blocked {
        block: usize,
    },
}

impl ScanKernel {
    pub fn parallel() -> Self {
        ScanKernel::Blocked {
            block: DEFAULT_SCAN_BLOCK,
        }
    }
}

/// ZOH input gain `φ` with `b̄ = φ·b`, i.e. `φ = (e^{Δa} - 1)/a`.
#[inline]
pub fn zoh_gain(a: f64, delta: f64) -> f64 {
    let z = delta * a;
    if z.abs() < ZOH_SERIES_THRESHOLD {
        delta * (1.0 + z / 2.0 + z * z / 6.0)
    } else {
        math::expm1(z) / a
    }
}

/// Partial derivatives `(∂φ/∂Δ, ∂φ/∂a)` of [`zoh_gain`].
#[inline]
pub fn zoh_gain_partials(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    let d_delta = if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + z + z * z / 2.0
    } else {
        math::exp(z)
    };
    let d_a = if z.abs() < 1e-2 {
        delta * delta * (0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0 + z * z * z * z / 144.0)
    } else {
        (z * math::exp(z) - math::expm1(z)) / (a * a)
    };
    (d_delta, d_a)
}

/// [`zoh_gain`] and its partials in one pass, reusing `a_bar = exp(Δa)`.
#[inline]
pub(crate) fn zoh_gain_with_partials(a: f64, delta: f64, a_bar: f64) -> (f64, f64, f64) {
    let z = delta * a;
    if z.abs() < ZOH_SERIES_THRESHOLD {
        let (phi, d_delta) = (delta * (1.0 + z / 2.0 + z * z / 6.0), 1.0 + z + z * z / 2.0);
        return (phi, d_delta, zoh_gain_partials(a, delta).1);
    }
    let em1 = math::expm1(z);
    let d_a = if z.abs() < 1e-2 {
        delta * delta * (0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0 + z * z * z * z / 144.0)
    } else {
        (z * a_bar - em1) / (a * a)
    };
    (em1 / a, a_bar, d_a)
}

/// Zero-order-hold discretization of one diagonal entry:
/// `ā = exp(Δa)`, `b̄ = (Δa)⁻¹(exp(Δa) - 1)·Δb`.
pub fn discretize_zoh(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::Domain(alloc::format!("timescale must be positive, got {delta}")));
    }
    Ok((math::exp(delta * a), zoh_gain(a, delta) * b))
}

/// Runs `h_t = a_t ⊙ h_{t-1} + b_t` over `len` steps of `lanes` lanes.
/// Returns every `h_t`, laid out `[t][lane]`.
pub fn linear_recurrence(kernel: ScanKernel, a: &[f64], b: &[f64], lanes: usize, h0: Option<&[f64]>) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    match kernel {
        ScanKernel::Sequential => recurrence_sequential(a, b, lanes, h0),
        ScanKernel::Blocked { block } => recurrence_blocked(a, b, lanes, h0, block.max(1)),
    }
}

fn recurrence_sequential(a: &[f64], b: &[f64], lanes: usize, h0: Option<&[f64]>) -> Vec<f64> {
    let len = if lanes == 0 { 0 } else { a.len() / lanes };
    let mut out = vec![0.0; a.len()];
    let mut h: Vec<f64> = h0.map_or_else(|| vec![0.0; lanes], |h| h.to_vec());
    for t in 0..len {
        let base = t * lanes;
        for l in 0..lanes {
            h[l] = a[base + l] * h[l] + b[base + l];
        }
        out[base..base + lanes].copy_from_slice(&h);
    }
    out
}

/// Affine map `h ↦ a·h + b` per lane; composing `first` then `second`
/// gives `(a₂a₁, a₂b₁ + b₂)`.
fn compose(first: (&[f64], &[f64]), second: (&[f64], &[f64]), out_a: &mut [f64], out_b: &mut [f64]) {
    for l in 0..out_a.len() {
        out_a[l] = second.0[l] * first.0[l];
        out_b[l] = second.0[l] * first.1[l] + second.1[l];
    }
}

fn recurrence_blocked(a: &[f64], b: &[f64], lanes: usize, h0: Option<&[f64]>, block: usize) -> Vec<f64> {
    let len = if lanes == 0 { 0 } else { a.len() / lanes };
    if len == 0 {
        return Vec::new();
    }
    let n_blocks = len.div_ceil(block);

    // Phase 1: local scans from zero with running products of `a`.
    let mut local = vec![0.0; a.len()];
    let mut prod = vec![0.0; a.len()];
    for blk in 0..n_blocks {
        let start = blk * block;
        let end = (start + block).min(len);
        for t in start..end {
            let base = t * lanes;
            if t == start {
                local[base..base + lanes].copy_from_slice(&b[base..base + lanes]);
                prod[base..base + lanes].copy_from_slice(&a[base..base + lanes]);
            } else {
                let prev = base - lanes;
                for l in 0..lanes {
                    local[base + l] = a[base + l] * local[prev + l] + b[base + l];
                    prod[base + l] = a[base + l] * prod[prev + l];
                }
            }
        }
    }

    // Phase 2: exclusive Blelloch scan over block aggregates, padded to a
    // power of two with identity maps.
    let padded = n_blocks.next_power_of_two();
    let mut agg_a = vec![1.0; padded * lanes];
    let mut agg_b = vec![0.0; padded * lanes];
    for blk in 0..n_blocks {
        let last = ((blk * block + block).min(len) - 1) * lanes;
        agg_a[blk * lanes..(blk + 1) * lanes].copy_from_slice(&prod[last..last + lanes]);
        agg_b[blk * lanes..(blk + 1) * lanes].copy_from_slice(&local[last..last + lanes]);
    }
    let mut tmp_a = vec![0.0; lanes];
    let mut tmp_b = vec![0.0; lanes];
    let mut stride = 1;
    while stride < padded {
        let mut i = 2 * stride - 1;
        while i < padded {
            let (l, r) = (i - stride, i);
            compose(
                (&agg_a[l * lanes..(l + 1) * lanes], &agg_b[l * lanes..(l + 1) * lanes]),
                (&agg_a[r * lanes..(r + 1) * lanes], &agg_b[r * lanes..(r + 1) * lanes]),
                &mut tmp_a,
                &mut tmp_b,
            );
            agg_a[r * lanes..(r + 1) * lanes].copy_from_slice(&tmp_a);
            agg_b[r * lanes..(r + 1) * lanes].copy_from_slice(&tmp_b);
            i += 2 * stride;
        }
        stride *= 2;
    }
    let root = padded - 1;
    agg_a[root * lanes..(root + 1) * lanes].fill(1.0);
    agg_b[root * lanes..(root + 1) * lanes].fill(0.0);
    stride = padded / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < padded {
            let (l, r) = (i - stride, i);
            // left child receives the parent's prefix; right child gets
            // parent prefix followed by the left subtree aggregate.
            let left_a = agg_a[l * lanes..(l + 1) * lanes].to_vec();
            let left_b = agg_b[l * lanes..(l + 1) * lanes].to_vec();
            let par_a = agg_a[r * lanes..(r + 1) * lanes].to_vec();
            let par_b = agg_b[r * lanes..(r + 1) * lanes].to_vec();
            agg_a[l * lanes..(l + 1) * lanes].copy_from_slice(&par_a);
            agg_b[l * lanes..(l + 1) * lanes].copy_from_slice(&par_b);
            compose((&par_a, &par_b), (&left_a, &left_b), &mut tmp_a, &mut tmp_b);
            agg_a[r * lanes..(r + 1) * lanes].copy_from_slice(&tmp_a);
            agg_b[r * lanes..(r + 1) * lanes].copy_from_slice(&tmp_b);
            i += 2 * stride;
        }
        stride /= 2;
    }

    // Phase 3: apply each block's incoming state.
    let zero = vec![0.0; lanes];
    let h0 = h0.unwrap_or(&zero);
    let mut out = local;
    for blk in 0..n_blocks {
        let pa = &agg_a[blk * lanes..(blk + 1) * lanes];
        let pb = &agg_b[blk * lanes..(blk + 1) * lanes];
        let start = blk * block;
        let end = (start + block).min(len);
        for t in start..end {
            let base = t * lanes;
            for l in 0..lanes {
                let h_in = pa[l] * h0[l] + pb[l];
                out[base + l] += prod[base + l] * h_in;
            }
        }
    }
    out
}

/// Per-step transition and input terms of a scan.
pub(crate) struct StepTerms {
    /// `ā_t` per lane, `[t][lane]`.
    pub a_bar: Vec<f64>,
    /// `b̄_t x_t` per lane, `[t][lane]`.
    pub bx: Vec<f64>,
}

fn check_input(params: &ScanParams<'_>, x: &Tensor) -> Result<(usize, usize, usize)> {
    let (d, s) = params.dims();
    if x.rank() != 2 || x.cols() != d {
        return Err(Error::dim("scan", x.shape(), &[x.rows().max(1), d]));
    }
    let len = x.rows();
    if let ScanParams::Selective { a, inputs } = params {
        if inputs.len != len {
            return Err(Error::dim("scan (selective length)", &[len], &[inputs.len]));
        }
        if a.len() != d * s || inputs.delta.len() != len * d || inputs.b.len() != len * s || inputs.c.len() != len * s {
            return Err(Error::dim(
                "scan (selective shapes)",
                &[len, d, s],
                &[a.len(), inputs.delta.len(), inputs.b.len()],
            ));
        }
    }
    Ok((len, d, s))
}

pub(crate) fn step_terms(params: &ScanParams<'_>, x: &[f64], len: usize) -> StepTerms {
    let (d, s) = params.dims();
    let lanes = d * s;
    let mut a_bar = vec![0.0; len * lanes];
    let mut bx = vec![0.0; len * lanes];
    for t in 0..len {
        for ch in 0..d {
            let xv = x[t * d + ch];
            for st in 0..s {
                let lane = ch * s + st;
                let idx = t * lanes + lane;
                match params {
                    ScanParams::TimeInvariant(m) => {
                        a_bar[idx] = m.a_bar[lane];
                        bx[idx] = m.b_bar[lane] * xv;
                    }
                    ScanParams::Selective { a, inputs } => {
                        let dt = inputs.delta[t * d + ch];
                        let z = dt * a[lane];
                        let (abar, phi) = if z.abs() < ZOH_SERIES_THRESHOLD {
                            (math::exp(z), zoh_gain(a[lane], dt))
                        } else {
                            let em1 = math::expm1(z);
                            (em1 + 1.0, em1 / a[lane])
                        };
                        a_bar[idx] = abar;
                        bx[idx] = phi * inputs.b[t * s + st] * xv;
                    }
                }
            }
        }
    }
    StepTerms { a_bar, bx }
}

pub(crate) fn readout(params: &ScanParams<'_>, h: &[f64], len: usize) -> Vec<f64> {
    let (d, s) = params.dims();
    let lanes = d * s;
    let mut y = vec![0.0; len * d];
    for t in 0..len {
        for ch in 0..d {
            let mut acc = 0.0;
            for st in 0..s {
                let c = match params {
                    ScanParams::TimeInvariant(m) => m.c[ch * s + st],
                    ScanParams::Selective { inputs, .. } => inputs.c[t * s + st],
                };
                acc += c * h[t * lanes + ch * s + st];
            }
            y[t * d + ch] = acc;
        }
    }
    y
}

/// Scan returning the outputs and every hidden state (`[t][lane]`).
pub fn scan_with_states(
    kernel: ScanKernel,
    params: ScanParams<'_>,
    x: &Tensor,
    h0: Option<&[f64]>,
) -> Result<(Tensor, Vec<f64>)> {
    let (len, d, s) = check_input(&params, x)?;
    if let Some(h0) = h0 {
        if h0.len() != d * s {
            return Err(Error::dim("scan (initial state)", &[d * s], &[h0.len()]));
        }
    }
    let terms = step_terms(&params, x.data(), len);
    let h = linear_recurrence(kernel, &terms.a_bar, &terms.bx, d * s, h0);
    let y = readout(&params, &h, len);
    Ok((Tensor::from_parts(vec![len, d], y), h))
}

/// `h_t = Ā h_{t-1} + B̄ x_t`, `y_t = C h_t`, evaluated left to right.
pub fn scan_sequential(params: ScanParams<'_>, x: &Tensor, h0: Option<&[f64]>) -> Result<Tensor> {
    scan_with_states(ScanKernel::Sequential, params, x, h0).map(|(y, _)| y)
}

/// Same output as [`scan_sequential`], computed with the blocked
/// associative scan.
pub fn scan_parallel(params: ScanParams<'_>, x: &Tensor, h0: Option<&[f64]>) -> Result<Tensor> {
    scan_with_states(ScanKernel::parallel(), params, x, h0).map(|(y, _)| y)
}

/// Convolution kernel `K_j = Σ_s C Ā^j B̄` per channel, as an `L×D` tensor.
pub fn materialize_kernel(params: ScanParams<'_>, len: usize) -> Result<Tensor> {
    let m = match params {
        ScanParams::TimeInvariant(m) => m,
        ScanParams::Selective { .. } => {
            return Err(Error::Contract(
                "convolution kernel is undefined for time-varying (selective) parameters".into(),
            ))
        }
    };
    let (d, s) = (m.channels, m.state);
    let mut k = vec![0.0; len * d];
    let mut power = vec![1.0; d * s];
    for j in 0..len {
        for ch in 0..d {
            let mut acc = 0.0;
            for st in 0..s {
                let lane = ch * s + st;
                acc += m.c[lane] * power[lane] * m.b_bar[lane];
            }
            k[j * d + ch] = acc;
        }
        for (p, a) in power.iter_mut().zip(&m.a_bar) {
            *p *= a;
        }
    }
    Ok(Tensor::from_parts(vec![len, d], k))
}

/// Causal per-channel convolution `y_t = Σ_{j≤t} K_j x_{t-j}`.
pub fn causal_convolve(kernel: &Tensor, x: &Tensor) -> Result<Tensor> {
    if kernel.cols() != x.cols() || kernel.rows() < x.rows() {
        return Err(Error::dim("causal_convolve", kernel.shape(), x.shape()));
    }
    let (len, d) = (x.rows(), x.cols());
    let mut y = vec![0.0; len * d];
    for t in 0..len {
        for j in 0..=t {
            let kr = kernel.row(j);
            let xr = x.row(t - j);
            for ch in 0..d {
                y[t * d + ch] += kr[ch] * xr[ch];
            }
        }
    }
    Ok(Tensor::from_parts(vec![len, d], y))
}

/// Linear maps producing the selective parameters from a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveProjection {
    /// `D×D`.
    pub w_delta: Tensor,
    /// `D`.
    pub b_delta: Tensor,
    /// `D×S`.
    pub w_b: Tensor,
    /// `D×S`.
    pub w_c: Tensor,
}

impl SelectiveProjection {
    /// `Δ_t = softplus(x_t W_Δ + b_Δ)`, `B_t = x_t W_B`, `C_t = x_t W_C`.
    pub fn project(&self, x: &Tensor) -> Result<SelectiveInputs> {
        let d = x.cols();
        let s = self.w_b.cols();
        if self.w_delta.shape() != [d, d]
            || self.b_delta.numel() != d
            || self.w_b.shape() != [d, s]
            || self.w_c.shape() != [d, s]
        {
            return Err(Error::dim("selective_project", x.shape(), self.w_delta.shape()));
        }
        let len = x.rows();
        let mut delta = vec![0.0; len * d];
        let mut b = vec![0.0; len * s];
        let mut c = vec![0.0; len * s];
        for t in 0..len {
            let xr = x.row(t);
            for j in 0..d {
                let mut acc = self.b_delta.data()[j];
                for i in 0..d {
                    acc += xr[i] * self.w_delta.at(i, j);
                }
                delta[t * d + j] = math::softplus(acc);
            }
            for j in 0..s {
                let (mut bb, mut cc) = (0.0, 0.0);
                for i in 0..d {
                    bb += xr[i] * self.w_b.at(i, j);
                    cc += xr[i] * self.w_c.at(i, j);
                }
                b[t * s + j] = bb;
                c[t * s + j] = cc;
            }
        }
        Ok(SelectiveInputs {
            len,
            channels: d,
            state: s,
            delta,
            b,
            c,
        })
    }
}

/// Reverses the row order of a sequence.
pub fn reverse_rows(x: &Tensor) -> Tensor {
    let idx: Vec<usize> = (0..x.rows()).rev().collect();
    x.gather_rows(&idx)
}

fn reverse_selective(inputs: &SelectiveInputs) -> SelectiveInputs {
    let rev = |v: &[f64], w: usize| -> Vec<f64> { v.chunks(w).rev().flatten().copied().collect() };
    SelectiveInputs {
        len: inputs.len,
        channels: inputs.channels,
        state: inputs.state,
        delta: rev(&inputs.delta, inputs.channels),
        b: rev(&inputs.b, inputs.state),
        c: rev(&inputs.c, inputs.state),
    }
}

/// `y = scan(fwd, x) + reverse(scan(bwd, reverse(x)))`.
///
/// Selective inputs of the backward direction are given in the original
/// time order; they are reversed together with `x`.
pub fn bidirectional_scan(kernel: ScanKernel, fwd: ScanParams<'_>, bwd: ScanParams<'_>, x: &Tensor) -> Result<Tensor> {
    let (yf, _) = scan_with_states(kernel, fwd, x, None)?;
    let xr = reverse_rows(x);
    let yb = match bwd {
        ScanParams::TimeInvariant(_) => scan_with_states(kernel, bwd, &xr, None)?.0,
        ScanParams::Selective { a, inputs } => {
            let rev = reverse_selective(inputs);
            scan_with_states(kernel, ScanParams::Selective { a, inputs: &rev }, &xr, None)?.0
        }
    };
    let yb = reverse_rows(&yb);
    let data = yf.data().iter().zip(yb.data()).map(|(a, b)| a + b).collect();
    Ok(Tensor::from_parts(yf.shape().to_vec(), data))
}
