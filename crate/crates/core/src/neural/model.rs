//! Full policy network: bidirectional LSTM over the UE chain followed by a
//! shared per-UE FC head with sigmoid outputs.

use nalgebra::DMatrix;

use super::inputs::ChainOrder;
use super::lstm::{accumulate_rows, axpy, dot, lstm_step, lstm_step_backward, sigmoid, Direction, StepCache};
use super::params::ModelParams;
use crate::error::{Error, Result};

/// Intermediate values of one forward pass, consumed by [`model_backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub chain: ChainOrder,
    /// Inputs in chain order.
    inputs: Vec<Vec<f64>>,
    fwd: Vec<StepCache>,
    /// Indexed by chain position (not by processing step).
    bwd: Vec<StepCache>,
    /// Post-activation values of every FC layer, per chain position;
    /// entry 0 is the LSTM sum `h_fwd + h_bwd`.
    acts: Vec<Vec<Vec<f64>>>,
    /// Activation probabilities, one row per UE in original order.
    pub probs: DMatrix<f64>,
}

/// Runs the network on `inputs` (one row per UE) in the given chain order.
pub fn model_forward(params: &ModelParams, inputs: &DMatrix<f64>, chain: &ChainOrder) -> Result<ForwardTrace> {
    let shape = params.shape();
    if inputs.ncols() != shape.input {
        return Err(Error::Shape(format!(
            "model expects {} input features, got {}",
            shape.input,
            inputs.ncols()
        )));
    }
    let n = chain.len();
    if n != inputs.nrows() || chain.order.iter().any(|&k| k >= inputs.nrows()) {
        return Err(Error::Shape(format!(
            "chain of length {n} does not index {} UE rows",
            inputs.nrows()
        )));
    }
    let q = shape.hidden;
    let xs: Vec<Vec<f64>> = chain.order.iter().map(|&k| inputs.row(k).iter().copied().collect()).collect();

    let zeros = vec![0.0; q];
    let mut fwd: Vec<StepCache> = Vec::with_capacity(n);
    for p in 0..n {
        let (h, c) = fwd.last().map_or((&zeros, &zeros), |s| (&s.h, &s.c));
        let step = lstm_step(params, Direction::Forward, &xs[p], h, c);
        fwd.push(step);
    }
    let mut bwd: Vec<Option<StepCache>> = vec![None; n];
    for p in (0..n).rev() {
        let step = {
            let (h, c) = bwd.get(p + 1).and_then(|s| s.as_ref()).map_or((&zeros, &zeros), |s| (&s.h, &s.c));
            lstm_step(params, Direction::Backward, &xs[p], h, c)
        };
        bwd[p] = Some(step);
    }
    let bwd: Vec<StepCache> = bwd.into_iter().map(|s| s.expect("every position visited")).collect();

    let layers = &params.layout().fc;
    let outputs = shape.outputs();
    let mut probs = DMatrix::zeros(n, outputs);
    let mut acts = Vec::with_capacity(n);
    for p in 0..n {
        let z: Vec<f64> = fwd[p].h.iter().zip(&bwd[p].h).map(|(a, b)| a + b).collect();
        let mut per_layer = vec![z];
        for (li, blk) in layers.iter().enumerate() {
            let prev = per_layer.last().expect("non-empty");
            let mut out = params.data[blk.b..blk.b + blk.outputs].to_vec();
            accumulate_rows(&mut out, &params.data[blk.w..blk.b], prev);
            if li + 1 == layers.len() {
                out.iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            per_layer.push(out);
        }
        if per_layer.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite activation at chain position {p}")));
        }
        let k = chain.order[p];
        for (l, v) in per_layer.last().expect("non-empty").iter().enumerate() {
            probs[(k, l)] = *v;
        }
        acts.push(per_layer);
    }
    Ok(ForwardTrace {
        chain: chain.clone(),
        inputs: xs,
        fwd,
        bwd,
        acts,
        probs,
    })
}

/// Gradient of `sum_{k,l} upstream[k,l] * probs[k,l]` with respect to all
/// parameters (back-propagation through time over the chain).
pub fn model_backward(params: &ModelParams, trace: &ForwardTrace, upstream: &DMatrix<f64>) -> Result<ModelParams> {
    if upstream.shape() != trace.probs.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?}, outputs are {:?}",
            upstream.shape(),
            trace.probs.shape()
        )));
    }
    let q = params.shape().hidden;
    let n = trace.chain.len();
    let layers = &params.layout().fc;
    let mut grads = params.zeros_like();

    // FC head, independently per position; collects dL/dz.
    let mut dz = Vec::with_capacity(n);
    for p in 0..n {
        let k = trace.chain.order[p];
        let acts = &trace.acts[p];
        let out = acts.last().expect("non-empty");
        let mut delta: Vec<f64> = out.iter().enumerate().map(|(l, y)| upstream[(k, l)] * y * (1.0 - y)).collect();
        for (li, blk) in layers.iter().enumerate().rev() {
            let input = &acts[li];
            axpy(&mut grads.data[blk.b..blk.b + blk.outputs], 1.0, &delta);
            for (j, &aj) in input.iter().enumerate() {
                if aj != 0.0 {
                    let at = blk.w + j * blk.outputs;
                    axpy(&mut grads.data[at..at + blk.outputs], aj, &delta);
                }
            }
            let w = &params.data[blk.w..blk.b];
            let mut d_in: Vec<f64> = (0..blk.inputs).map(|j| dot(&w[j * blk.outputs..(j + 1) * blk.outputs], &delta)).collect();
            if li > 0 {
                // ReLU: pass the gradient only where the activation was positive.
                for (d, a) in d_in.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = d_in;
        }
        dz.push(delta);
    }

    let zeros = vec![0.0; q];
    // Forward LSTM ran p = 0..n, so its BPTT walks p = n-1..0.
    let mut dh_next = vec![0.0; q];
    let mut dc_next = vec![0.0; q];
    for p in (0..n).rev() {
        let dh: Vec<f64> = dz[p].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let (h_prev, c_prev) = if p == 0 { (&zeros, &zeros) } else { (&trace.fwd[p - 1].h, &trace.fwd[p - 1].c) };
        let (dhp, dcp) = lstm_step_backward(
            params,
            &mut grads,
            Direction::Forward,
            &trace.inputs[p],
            h_prev,
            c_prev,
            &trace.fwd[p],
            &dh,
            &dc_next,
        );
        dh_next = dhp;
        dc_next = dcp;
    }
    // Backward LSTM ran p = n-1..0, so its BPTT walks p = 0..n.
    let mut dh_next = vec![0.0; q];
    let mut dc_next = vec![0.0; q];
    for p in 0..n {
        let dh: Vec<f64> = dz[p].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let (h_prev, c_prev) = if p + 1 == n { (&zeros, &zeros) } else { (&trace.bwd[p + 1].h, &trace.bwd[p + 1].c) };
        let (dhp, dcp) = lstm_step_backward(
            params,
            &mut grads,
            Direction::Backward,
            &trace.inputs[p],
            h_prev,
            c_prev,
            &trace.bwd[p],
            &dh,
            &dc_next,
        );
        dh_next = dhp;
        dc_next = dcp;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::inputs::order_chain_by;
    use crate::neural::params::ModelShape;
    use crate::rng;
    use rand::seq::index::sample;
    use rand::Rng;

    fn setup(seed: u64) -> (ModelParams, DMatrix<f64>, ChainOrder, DMatrix<f64>) {
        let shape = ModelShape {
            input: 6,
            hidden: 4,
            fc: vec![5, 3],
            pilot_input: false,
        };
        let mut r = rng::stream(seed, &[]);
        let mut params = ModelParams::init(&shape, &mut r).unwrap();
        // Non-zero biases so every block is exercised.
        for v in params.data.iter_mut() {
            if *v == 0.0 {
                *v = r.random_range(-0.3..0.3);
            }
        }
        let k = 5;
        let x = DMatrix::from_fn(k, 6, |_, _| r.random_range(-1.0..1.0));
        let chain = order_chain_by(&[2, 0, 2, 1, 0], &[0.3, 0.1, 0.5, 0.2, 0.4]);
        let up = DMatrix::from_fn(k, 3, |_, _| r.random_range(-1.0..1.0));
        (params, x, chain, up)
    }

    fn loss(p: &ModelParams, x: &DMatrix<f64>, chain: &ChainOrder, up: &DMatrix<f64>) -> f64 {
        model_forward(p, x, chain).unwrap().probs.component_mul(up).sum()
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let (mut p, x, chain, up) = setup(11);
        let trace = model_forward(&p, &x, &chain).unwrap();
        let g = model_backward(&p, &trace, &up).unwrap();
        let mut r = rng::stream(12, &[]);
        let coords = sample(&mut r, p.len(), 200);
        let h = 1e-6;
        for idx in coords.iter() {
            let orig = p.data[idx];
            p.data[idx] = orig + h;
            let a = loss(&p, &x, &chain, &up);
            p.data[idx] = orig - h;
            let b = loss(&p, &x, &chain, &up);
            p.data[idx] = orig;
            let fd = (a - b) / (2.0 * h);
            let err = (fd - g.data[idx]).abs() / fd.abs().max(g.data[idx].abs()).max(1e-3);
            assert!(err < 1e-4, "param {idx}: analytic {} vs fd {fd}", g.data[idx]);
        }
    }

    #[test]
    fn outputs_follow_ue_rows_not_chain_positions() {
        let (p, x, chain, _) = setup(13);
        let a = model_forward(&p, &x, &chain).unwrap();
        // Relabel the UEs: row r of the permuted input is old UE perm[r].
        let perm = [3, 0, 4, 1, 2];
        let mut inv = [0; 5];
        for (r, &k) in perm.iter().enumerate() {
            inv[k] = r;
        }
        let x2 = DMatrix::from_fn(5, x.ncols(), |r, c| x[(perm[r], c)]);
        let mut chain2 = chain.clone();
        chain2.order = chain.order.iter().map(|&k| inv[k]).collect();
        let b = model_forward(&p, &x2, &chain2).unwrap();
        for r in 0..5 {
            for l in 0..3 {
                assert_eq!(b.probs[(r, l)], a.probs[(perm[r], l)]);
            }
        }
    }

    #[test]
    fn reversing_the_chain_changes_outputs() {
        let (p, x, chain, _) = setup(14);
        let a = model_forward(&p, &x, &chain).unwrap();
        let mut rev = chain.clone();
        rev.order.reverse();
        let b = model_forward(&p, &x, &rev).unwrap();
        assert!((a.probs.clone() - b.probs).abs().max() > 1e-9);
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let (p, x, chain, up) = setup(16);
        let z = p.zeros_like();
        let t = model_forward(&z, &x, &chain).unwrap();
        assert!(t.probs.iter().all(|v| *v == 0.5));
        let g = model_backward(&p, &model_forward(&p, &x, &chain).unwrap(), &(up * 0.0)).unwrap();
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_ue_sees_both_directions_equally() {
        let (p, x, _, _) = setup(17);
        let row = x.rows(2, 1).into_owned();
        let t = model_forward(&p, &row, &order_chain_by(&[0], &[1.0])).unwrap();
        // With no neighbours both LSTMs start from zero state on the same input.
        let shape = p.shape();
        let fc_start = p.layout().fc[0].w;
        let mut mirrored = p.clone();
        let (f, b) = (p.layout().forward, p.layout().backward);
        mirrored.data[b.w..fc_start].copy_from_slice(&p.data[f.w..b.w]);
        let t2 = model_forward(&mirrored, &row, &order_chain_by(&[0], &[1.0])).unwrap();
        assert_eq!(t.probs.ncols(), shape.outputs());
        assert!(t2.acts[0][0].iter().zip(&t2.fwd[0].h).all(|(z, h)| *z == 2.0 * h));
    }

    #[test]
    fn reversed_chain_with_swapped_directions_is_symmetric() {
        let (p, x, chain, _) = setup(18);
        let (f, b) = (p.layout().forward, p.layout().backward);
        let fc_start = p.layout().fc[0].w;
        let mut swapped = p.clone();
        swapped.data[f.w..b.w].copy_from_slice(&p.data[b.w..fc_start]);
        swapped.data[b.w..fc_start].copy_from_slice(&p.data[f.w..b.w]);
        let mut rev = chain.clone();
        rev.order.reverse();
        let a = model_forward(&p, &x, &chain).unwrap();
        let c = model_forward(&swapped, &x, &rev).unwrap();
        assert_eq!(a.probs, c.probs);
    }

    #[test]
    fn non_finite_weights_are_reported() {
        let (mut p, x, chain, _) = setup(19);
        let last = p.layout().fc[1].b;
        p.data[last] = f64::NAN;
        assert!(matches!(model_forward(&p, &x, &chain), Err(Error::Numerical(_))));
    }

    #[test]
    fn shape_errors() {
        let (p, x, chain, _) = setup(15);
        let narrow = x.columns(0, 5).into_owned();
        assert!(matches!(model_forward(&p, &narrow, &chain), Err(Error::Shape(_))));
        let t = model_forward(&p, &x, &chain).unwrap();
        assert!(matches!(model_backward(&p, &t, &DMatrix::zeros(2, 2)), Err(Error::Shape(_))));
    }
}
