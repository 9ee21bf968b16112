#![allow(dead_code)]

use flowmamba_core::nn::{Linear, Mlp, ParamStore};
use flowmamba_core::tape::{Tape, Var};
use flowmamba_core::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Scalar `Σ x ⊙ w` with a fixed random `w`, so every output element gets a
/// distinct weight in the gradient.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.value(x).shape(), &mut rng(seed ^ 0x9e37_79b9));
    let w = tape.constant(w);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d < tol, "max abs diff {d:e} exceeds {tol:e}");
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.at(i, p);
            for j in 0..n {
                out.row_mut(i)[j] += av * b.at(p, j);
            }
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

/// Row-wise layer norm with unit gain and zero shift.
pub fn layer_norm(x: &Tensor, eps: f64) -> Tensor {
    let c = x.cols() as f64;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..parts[0].rows())
        .map(|i| parts.iter().flat_map(|p| p.row(i).to_vec()).collect())
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Tensor::from_rows(&refs).unwrap()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Tensor) -> Tensor {
    let mut y = matmul(x, store.get(l.weight));
    if let Some(b) = l.bias {
        let b = store.get(b).data();
        for i in 0..y.rows() {
            for (v, bv) in y.row_mut(i).iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    y
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &Tensor) -> Tensor {
    let mut h = x.clone();
    let n = m.layers.len();
    for (i, l) in m.layers.iter().enumerate() {
        h = linear(store, l, &h);
        if let Some(act) = m.activation {
            if i + 1 < n || m.activate_last {
                h = h.map(|v| act.apply(v));
            }
        }
    }
    h
}

/// Tensor value of a closure evaluated on a fresh tape with the store bound.
pub fn eval(store: &ParamStore, f: impl FnOnce(&mut Tape, &flowmamba_core::nn::Bindings) -> Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let v = f(&mut tape, &p).unwrap();
    tape.value(v).clone()
}
