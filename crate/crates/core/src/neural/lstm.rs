//! Single LSTM cell step and its reverse-mode derivative.

use super::params::{LstmBlock, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`.
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += W^T x` for a row-major `W` with `x.len()` rows of width `out.len()`.
pub(crate) fn accumulate_rows(out: &mut [f64], w: &[f64], x: &[f64]) {
    let width = out.len();
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            axpy(out, xj, &w[j * width..(j + 1) * width]);
        }
    }
}

/// Everything one step needs for its backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    /// Activated gates `[f, i, o, g]`, each of width q.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

fn block(params: &ModelParams, dir: Direction) -> LstmBlock {
    match dir {
        Direction::Forward => params.layout().forward,
        Direction::Backward => params.layout().backward,
    }
}

/// One cell update `(x, h_prev, c_prev) -> (h, c)`.
pub fn lstm_step(params: &ModelParams, dir: Direction, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
    let shape = params.shape();
    let (d, q) = (shape.input, shape.hidden);
    assert_eq!(x.len(), d, "LSTM input width");
    let blk = block(params, dir);
    let data = &params.data;
    let mut pre = data[blk.b..blk.b + 4 * q].to_vec();
    accumulate_rows(&mut pre, &data[blk.w..blk.u], x);
    accumulate_rows(&mut pre, &data[blk.u..blk.b], h_prev);
    for v in &mut pre[..3 * q] {
        *v = sigmoid(*v);
    }
    for v in &mut pre[3 * q..] {
        *v = v.tanh();
    }
    let gates = pre;
    let mut c = vec![0.0; q];
    let mut tanh_c = vec![0.0; q];
    let mut h = vec![0.0; q];
    for j in 0..q {
        let (f, i, o, g) = (gates[j], gates[q + j], gates[2 * q + j], gates[3 * q + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    StepCache { gates, c, tanh_c, h }
}

/// Back-propagates `dh`, `dc` through one step, accumulating parameter
/// gradients into `grads`; returns `(dh_prev, dc_prev)`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_step_backward(
    params: &ModelParams,
    grads: &mut ModelParams,
    dir: Direction,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    cache: &StepCache,
    dh: &[f64],
    dc: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let q = params.shape().hidden;
    let blk = block(params, dir);
    let gates = &cache.gates;
    let mut dpre = vec![0.0; 4 * q];
    let mut dc_prev = vec![0.0; q];
    for j in 0..q {
        let (f, i, o, g) = (gates[j], gates[q + j], gates[2 * q + j], gates[3 * q + j]);
        let tc = cache.tanh_c[j];
        let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
        dpre[j] = dct * c_prev[j] * f * (1.0 - f);
        dpre[q + j] = dct * g * i * (1.0 - i);
        dpre[2 * q + j] = dh[j] * tc * o * (1.0 - o);
        dpre[3 * q + j] = dct * i * (1.0 - g * g);
        dc_prev[j] = dct * f;
    }
    let width = 4 * q;
    let g = &mut grads.data;
    axpy(&mut g[blk.b..blk.b + width], 1.0, &dpre);
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            let at = blk.w + j * width;
            axpy(&mut g[at..at + width], xj, &dpre);
        }
    }
    let u = &params.data[blk.u..blk.b];
    let mut dh_prev = vec![0.0; q];
    for j in 0..q {
        let at = blk.u + j * width;
        if h_prev[j] != 0.0 {
            axpy(&mut g[at..at + width], h_prev[j], &dpre);
        }
        dh_prev[j] = dot(&u[j * width..(j + 1) * width], &dpre);
    }
    (dh_prev, dc_prev)
}
