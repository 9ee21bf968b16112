mod common;

use common::{concat_cols, eval, layer_norm, linear, project, rng, uniform, zip_with};
use flowmamba_core::fio::Permutation;
use flowmamba_core::gradcheck::{grad_check, GradCheckConfig};
use flowmamba_core::isu::{
    adaptive_fuse, decode_flow, fuse_inputs, gru_update, isu_iterate, optimize_hidden, FlowHead, FusionParams,
    GateParams, GruParams, IsuParams, LevelInputs, UpdateConfig, UpdateKind,
};
use flowmamba_core::mamba::{stack_blocks, BiMambaParams, MambaConfig};
use flowmamba_core::nn::{Bindings, ParamStore};
use flowmamba_core::ssm::ScanKernel;
use flowmamba_core::{Error, Tape, Tensor, Var};
use proptest::prelude::*;

const C: usize = 4;
const C2: usize = 3;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn features(n: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    (
        uniform(&[n, C], &mut r),
        uniform(&[n, C2], &mut r),
        uniform(&[n, C], &mut r),
    )
}

fn mamba(zero_output: bool) -> MambaConfig {
    MambaConfig {
        channels: C,
        expand: 2,
        state: 3,
        conv_width: 3,
        bidirectional: true,
        delta_min: 1e-2,
        delta_max: 0.5,
        zero_output,
    }
}

fn update_config(kind: UpdateKind, zero_output: bool) -> UpdateConfig {
    UpdateConfig {
        kind,
        channels: C,
        motion_channels: C2,
        blocks: 2,
        mamba: mamba(zero_output),
        scan: ScanKernel::Sequential,
    }
}

#[test]
fn update_kind_registry() {
    let names: Vec<&str> = UpdateKind::ALL.iter().map(|k| k.name()).collect();
    assert_eq!(names, ["conv-gru", "mamba-uni", "bimamba", "isu", "isu-fio"]);
    for k in UpdateKind::ALL {
        assert_eq!(k.name().parse::<UpdateKind>().unwrap(), k);
    }
    assert_eq!("isu+fio".parse::<UpdateKind>().unwrap(), UpdateKind::IsuFio);
    assert!(matches!("lstm".parse::<UpdateKind>(), Err(Error::Config(_))));
}

#[test]
fn fusion_of_zeros_is_zero() {
    let mut store = ParamStore::new();
    let fusion = FusionParams::new(&mut store, "f", C, C2, &mut rng(1));
    *store.get_mut(fusion.conv.bias.unwrap()) = Tensor::zeros(&[C]);
    let out = eval(&store, |t, p| {
        let (a, b, c) = (
            t.constant(Tensor::zeros(&[5, C])),
            t.constant(Tensor::zeros(&[5, C2])),
            t.constant(Tensor::zeros(&[5, C])),
        );
        fuse_inputs(t, p, &fusion, a, b, c)
    });
    assert_eq!(out.shape(), &[5, C]);
    assert_eq!(out.max_abs(), 0.0);
}

#[test]
fn fusion_matches_matmul_layer_norm_oracle() {
    let mut store = ParamStore::new();
    let fusion = FusionParams::new(&mut store, "f", C, C2, &mut rng(2));
    let mut r = rng(3);
    *store.get_mut(fusion.norm.gamma) = uniform(&[C], &mut r);
    *store.get_mut(fusion.norm.beta) = uniform(&[C], &mut r);
    let (cf, mf, h) = features(7, 4);
    let out = eval(&store, |t, p| {
        let (a, b, c) = (t.constant(cf.clone()), t.constant(mf.clone()), t.constant(h.clone()));
        fuse_inputs(t, p, &fusion, a, b, c)
    });
    let normed = layer_norm(
        &linear(&store, &fusion.conv, &concat_cols(&[&cf, &mf, &h])),
        fusion.norm.eps,
    );
    let (gamma, beta) = (store.get(fusion.norm.gamma).data(), store.get(fusion.norm.beta).data());
    for i in 0..7 {
        for j in 0..C {
            let expect = normed.at(i, j) * gamma[j] + beta[j];
            assert!((out.at(i, j) - expect).abs() < 1e-13);
        }
    }
}

fn gate_with(bias: f64, zero_weights: bool, seed: u64) -> (ParamStore, GateParams) {
    let mut store = ParamStore::new();
    let gate = GateParams::new(&mut store, "g", C, C2, &mut rng(seed));
    *store.get_mut(gate.conv.bias.unwrap()) = Tensor::full(&[C], bias);
    if zero_weights {
        *store.get_mut(gate.conv.weight) = Tensor::zeros(&[2 * C + C2, C]);
    }
    (store, gate)
}

fn run_gate(store: &ParamStore, gate: &GateParams, cf: &Tensor, mf: &Tensor, h: &Tensor, h_opt: &Tensor) -> Tensor {
    eval(store, |t, p| {
        let v: Vec<Var> = [cf, mf, h, h_opt].iter().map(|x| t.constant((*x).clone())).collect();
        adaptive_fuse(t, p, gate, v[0], v[1], v[2], v[3])
    })
}

#[test]
fn gate_limits_and_midpoint() {
    let (cf, mf, h) = features(6, 5);
    let h_opt = uniform(&[6, C], &mut rng(6));
    let (s, g) = gate_with(-30.0, true, 7);
    assert!(run_gate(&s, &g, &cf, &mf, &h, &h_opt).max_abs_diff(&h) < 1e-12);
    let (s, g) = gate_with(30.0, true, 7);
    assert!(run_gate(&s, &g, &cf, &mf, &h, &h_opt).max_abs_diff(&h_opt) < 1e-12);
    let (s, g) = gate_with(0.0, true, 7);
    let mid = zip_with(&h, &h_opt, |a, b| (a + b) / 2.0);
    assert!(run_gate(&s, &g, &cf, &mf, &h, &h_opt).max_abs_diff(&mid) < 1e-15);
}

#[test]
fn gate_matches_formula() {
    let (s, g) = gate_with(0.1, false, 8);
    let (cf, mf, h) = features(6, 9);
    let h_opt = uniform(&[6, C], &mut rng(10));
    let out = run_gate(&s, &g, &cf, &mf, &h, &h_opt);
    let w = linear(&s, &g.conv, &concat_cols(&[&cf, &mf, &h])).map(sigmoid);
    for i in 0..6 {
        for j in 0..C {
            let expect = (1.0 - w.at(i, j)) * h.at(i, j) + w.at(i, j) * h_opt.at(i, j);
            assert!((out.at(i, j) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn gate_rejects_row_mismatch() {
    let (s, g) = gate_with(0.0, false, 1);
    let mut tape = Tape::new();
    let p = s.bind(&mut tape);
    let a = tape.constant(Tensor::zeros(&[3, C]));
    let b = tape.constant(Tensor::zeros(&[3, C2]));
    let short = tape.constant(Tensor::zeros(&[2, C]));
    assert!(matches!(
        adaptive_fuse(&mut tape, &p, &g, a, b, a, short),
        Err(Error::Dimension { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gated_state_is_between_inputs(seed in any::<u64>(), bias in -5.0f64..5.0) {
        let (s, g) = gate_with(bias, false, seed);
        let (cf, mf, h) = features(5, seed ^ 1);
        let h_opt = uniform(&[5, C], &mut rng(seed ^ 2));
        let out = run_gate(&s, &g, &cf, &mf, &h, &h_opt);
        for i in 0..out.numel() {
            let (a, b) = (h.data()[i], h_opt.data()[i]);
            let v = out.data()[i];
            prop_assert!(v >= a.min(b) - 1e-15 && v <= a.max(b) + 1e-15);
        }
    }
}

fn blocks(zero_output: bool, count: usize, seed: u64) -> (ParamStore, Vec<BiMambaParams>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let b = (0..count)
        .map(|i| BiMambaParams::new(&mut store, &format!("b{i}"), mamba(zero_output), &mut r).unwrap())
        .collect();
    (store, b)
}

fn run_optimize(store: &ParamStore, b: &[BiMambaParams], u: &Tensor, h: &Tensor, order: &Permutation) -> Tensor {
    eval(store, |t, p| {
        let (uv, hv) = (t.constant(u.clone()), t.constant(h.clone()));
        optimize_hidden(t, p, b, uv, hv, order, ScanKernel::Sequential)
    })
}

#[test]
fn optimize_with_zero_blocks_restores_order() {
    let (store, b) = blocks(true, 2, 11);
    let mut r = rng(12);
    let (u, h) = (uniform(&[9, C], &mut r), uniform(&[9, C], &mut r));
    let order = Permutation::from_forward(vec![3, 1, 8, 0, 5, 2, 7, 4, 6]).unwrap();
    assert_eq!(run_optimize(&store, &b, &u, &h, &order), h);
}

#[test]
fn optimize_with_identity_order_is_plain_stack() {
    let (store, b) = blocks(false, 2, 13);
    let mut r = rng(14);
    let (u, h) = (uniform(&[9, C], &mut r), uniform(&[9, C], &mut r));
    let expect = eval(&store, |t, p| {
        let (uv, hv) = (t.constant(u.clone()), t.constant(h.clone()));
        stack_blocks(t, p, &b, uv, hv, ScanKernel::Sequential)
    });
    assert_eq!(run_optimize(&store, &b, &u, &h, &Permutation::identity(9)), expect);
}

#[test]
fn optimize_equals_permute_stack_unpermute() {
    let (store, b) = blocks(false, 2, 15);
    let mut r = rng(16);
    let (u, h) = (uniform(&[9, C], &mut r), uniform(&[9, C], &mut r));
    let order = Permutation::from_forward(vec![3, 1, 8, 0, 5, 2, 7, 4, 6]).unwrap();
    let sorted = eval(&store, |t, p| {
        let uv = t.constant(u.gather_rows(order.forward()));
        let hv = t.constant(h.gather_rows(order.forward()));
        stack_blocks(t, p, &b, uv, hv, ScanKernel::Sequential)
    });
    let mut expect = Tensor::zeros(&[9, C]);
    for (pos, &src) in order.forward().iter().enumerate() {
        expect.row_mut(src).copy_from_slice(sorted.row(pos));
    }
    assert_eq!(run_optimize(&store, &b, &u, &h, &order), expect);
    assert!(matches!(
        eval_err(&store, &b, &u, &h, &Permutation::identity(4)),
        Err(Error::Dimension { .. })
    ));
}

fn eval_err(
    store: &ParamStore,
    b: &[BiMambaParams],
    u: &Tensor,
    h: &Tensor,
    order: &Permutation,
) -> flowmamba_core::Result<Var> {
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let (uv, hv) = (t.constant(u.clone()), t.constant(h.clone()));
    optimize_hidden(&mut t, &p, b, uv, hv, order, ScanKernel::Sequential)
}

fn gru(seed: u64) -> (ParamStore, GruParams) {
    let mut store = ParamStore::new();
    let g = GruParams::new(&mut store, "gru", C, C2, &mut rng(seed));
    (store, g)
}

fn run_gru(store: &ParamStore, g: &GruParams, cf: &Tensor, mf: &Tensor, h: &Tensor) -> Tensor {
    eval(store, |t, p| {
        let (a, b, c) = (t.constant(cf.clone()), t.constant(mf.clone()), t.constant(h.clone()));
        gru_update(t, p, g, a, b, c)
    })
}

#[test]
fn gru_closed_gate_keeps_state() {
    let (mut s, g) = gru(17);
    *s.get_mut(g.z.weight) = Tensor::zeros(&[2 * C + C2, C]);
    *s.get_mut(g.z.bias.unwrap()) = Tensor::full(&[C], -30.0);
    let (cf, mf, h) = features(6, 18);
    assert!(run_gru(&s, &g, &cf, &mf, &h).max_abs_diff(&h) < 1e-12);
}

#[test]
fn gru_open_gate_is_bounded() {
    let (mut s, g) = gru(19);
    *s.get_mut(g.z.weight) = Tensor::zeros(&[2 * C + C2, C]);
    *s.get_mut(g.z.bias.unwrap()) = Tensor::full(&[C], 30.0);
    let (cf, mf, h) = features(6, 20);
    let h = h.map(|v| v * 50.0);
    assert!(run_gru(&s, &g, &cf, &mf, &h).max_abs() <= 1.0);
}

#[test]
fn gru_matches_gate_formulas() {
    let (s, g) = gru(21);
    let (cf, mf, h) = features(6, 22);
    let out = run_gru(&s, &g, &cf, &mf, &h);
    let xh = concat_cols(&[&cf, &mf, &h]);
    let z = linear(&s, &g.z, &xh).map(sigmoid);
    let r = linear(&s, &g.r, &xh).map(sigmoid);
    let q = linear(&s, &g.q, &concat_cols(&[&cf, &mf, &zip_with(&r, &h, |a, b| a * b)])).map(f64::tanh);
    for i in 0..6 {
        for j in 0..C {
            let expect = (1.0 - z.at(i, j)) * h.at(i, j) + z.at(i, j) * q.at(i, j);
            assert!((out.at(i, j) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn flow_head_zero_init_and_linearity() {
    let mut store = ParamStore::new();
    let head = FlowHead::new(&mut store, "head", C, true, &mut rng(23));
    let h = uniform(&[7, C], &mut rng(24));
    let out = eval(&store, |t, p| {
        let v = t.constant(h.clone());
        decode_flow(t, p, &head, v)
    });
    assert_eq!(out.shape(), &[7, 3]);
    assert_eq!(out.max_abs(), 0.0);

    let mut store = ParamStore::new();
    let mut head = FlowHead::new(&mut store, "head", C, false, &mut rng(25));
    head.mlp.activation = None;
    for l in &head.mlp.layers {
        let b = l.bias.unwrap();
        *store.get_mut(b) = Tensor::zeros(store.get(b).shape());
    }
    let run = |x: &Tensor| {
        eval(&store, |t, p| {
            let v = t.constant(x.clone());
            decode_flow(t, p, &head, v)
        })
    };
    let once = run(&h);
    let twice = run(&h.map(|v| 2.0 * v));
    assert!(once.max_abs() > 0.0);
    assert!(twice.max_abs_diff(&once.map(|v| 2.0 * v)) < 1e-14);
}

struct Level {
    store: ParamStore,
    params: IsuParams,
    p: Tensor,
    q: Tensor,
    f: Tensor,
    g: Tensor,
    cf: Tensor,
    h0: Tensor,
}

fn level(kind: UpdateKind, zero_head: bool, n: usize, seed: u64) -> Level {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let params = IsuParams::new(&mut store, "isu", update_config(kind, false), 4, zero_head, &mut r).unwrap();
    let p = uniform(&[n, 3], &mut r);
    let q = p.map(|v| v + 0.05);
    let q = zip_with(&q, &uniform(&[n, 3], &mut r), |a, b| a + 0.01 * b);
    Level {
        store,
        params,
        p,
        q,
        f: uniform(&[n, C], &mut r),
        g: uniform(&[n, C], &mut r),
        cf: uniform(&[n, C], &mut r),
        h0: uniform(&[n, C], &mut r).map(f64::tanh),
    }
}

fn inputs(t: &mut Tape, lv: &Level, sf0: &Tensor, h0: &Tensor) -> LevelInputs {
    LevelInputs {
        p: t.constant(lv.p.clone()),
        q: t.constant(lv.q.clone()),
        f: t.constant(lv.f.clone()),
        g: t.constant(lv.g.clone()),
        cf: t.constant(lv.cf.clone()),
        sf0: t.constant(sf0.clone()),
        h0: t.constant(h0.clone()),
    }
}

fn iterate(lv: &Level, sf0: &Tensor, h0: &Tensor, n_iters: usize) -> (Tensor, Tensor, Vec<Tensor>) {
    let mut t = Tape::new();
    let p = lv.store.bind(&mut t);
    let inp = inputs(&mut t, lv, sf0, h0);
    let out = isu_iterate(&mut t, &p, &lv.params, inp, n_iters).unwrap();
    let flows = out.flows.iter().map(|v| t.value(*v).clone()).collect();
    (t.value(out.sf).clone(), t.value(out.h).clone(), flows)
}

#[test]
fn zero_head_keeps_initial_flow() {
    let lv = level(UpdateKind::IsuFio, true, 10, 26);
    let sf0 = uniform(&[10, 3], &mut rng(27)).map(|v| 0.1 * v);
    for n in [1, 3] {
        let (sf, _, flows) = iterate(&lv, &sf0, &lv.h0, n);
        assert_eq!(sf, sf0);
        assert_eq!(flows.len(), n);
    }
}

#[test]
fn zero_iterations_is_config_error() {
    let lv = level(UpdateKind::Isu, true, 6, 28);
    let mut t = Tape::new();
    let p = lv.store.bind(&mut t);
    let inp = inputs(&mut t, &lv, &Tensor::zeros(&[6, 3]), &lv.h0);
    assert!(matches!(
        isu_iterate(&mut t, &p, &lv.params, inp, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn two_iterations_equal_manual_threading() {
    for kind in UpdateKind::ALL {
        let lv = level(kind, false, 12, 29);
        let sf0 = Tensor::zeros(&[12, 3]);
        let (sf2, h2, flows) = iterate(&lv, &sf0, &lv.h0, 2);
        let (sf1, h1, _) = iterate(&lv, &sf0, &lv.h0, 1);
        let (sf_b, h_b, _) = iterate(&lv, &sf1, &h1, 1);
        assert_eq!(flows.len(), 2);
        assert_eq!(flows[0], sf1, "{kind}");
        assert_eq!(sf2, sf_b, "{kind}");
        assert_eq!(h2, h_b, "{kind}");
        assert!(sf2.max_abs() > 0.0);
    }
}

#[test]
fn isu_gradients_match_finite_differences() {
    for kind in [UpdateKind::IsuFio, UpdateKind::ConvGru] {
        let lv = level(kind, false, 8, 30);
        let n = lv.store.len();
        let mut params = lv.store.tensors().to_vec();
        params.extend([lv.f.clone(), lv.g.clone(), lv.cf.clone(), lv.h0.clone()]);
        let f = |t: &mut Tape, v: &[Var]| {
            let p = Bindings::from_vars(&v[..n]);
            let inp = LevelInputs {
                p: t.constant(lv.p.clone()),
                q: t.constant(lv.q.clone()),
                f: v[n],
                g: v[n + 1],
                cf: v[n + 2],
                sf0: t.constant(Tensor::zeros(&[8, 3])),
                h0: v[n + 3],
            };
            let out = isu_iterate(t, &p, &lv.params, inp, 2)?;
            let a = project(t, out.sf, 1)?;
            let b = project(t, out.h, 2)?;
            t.add(a, b)
        };
        let report = grad_check(f, &params, GradCheckConfig::default()).unwrap();
        assert!(
            report.passed(),
            "{kind}: {:e} at {:?}",
            report.max_rel_error,
            report.worst()
        );
    }
}
