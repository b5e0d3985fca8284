//! Mini-batch training of the centralized policy with sampled activations.
//!
//! For every training drop, `R` shadowing realizations are drawn. Each one runs
//! the policy, samples a binary association from the output probabilities,
//! evaluates the relaxed-objective gradient at that binary point and uses it as
//! a constant coupling weight on the outputs: `C_r = sum_{k,l} l_kl * g_kl`.
//! The batch gradient `sum_r dC_r/dtheta` drives one Adam ascent step.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{apply_threshold, ClusterMatrix, MasterAssignment};
use crate::error::{Error, Result};
use crate::geometry::{ExperimentConfig, GainMatrix, Scenario, ShadowSampler};
use crate::metrics::{evaluate_clusters, grad_activations, objective_eval, ObjectiveSpec};
use crate::neural::{input_width, model_backward, AdamConfig, AdamState, ModelParams, ModelShape};
use crate::rng::{self, tag};
use crate::strategy::{evaluate_drop, policy_forward, DropContext, ResultRecord, Strategy, DEFAULT_MU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Shadowing realizations per drop, i.e. per Adam step.
    pub batch_size: usize,
    pub objective: ObjectiveSpec,
    pub lr: f64,
    pub master_forcing: bool,
    /// Epoch period of the checkpoint callback (0 disables it).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            objective: ObjectiveSpec::sum(),
            lr: 1e-5,
            master_forcing: true,
            eval_every: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.objective.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..Default::default()
        }
    }
}

/// Network widths; the output layer always has one neuron per AP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub fc_hidden: Vec<usize>,
    pub pilot_input: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            fc_hidden: vec![256, 128],
            pilot_input: false,
        }
    }
}

impl PolicyConfig {
    /// Shape of a network seeing `num_aps` gain slots and producing `num_aps` outputs.
    pub fn shape(&self, num_aps: usize, tau_p: usize) -> ModelShape {
        let mut fc = self.fc_hidden.clone();
        fc.push(num_aps);
        ModelShape {
            input: input_width(num_aps, self.pilot_input.then_some(tau_p)),
            hidden: self.hidden,
            fc,
            pilot_input: self.pilot_input,
        }
    }
}

/// Bernoulli activations: `a_kl = 1` iff `u_kl < l_kl`, uniforms drawn row by
/// row for every entry; master links are forced on afterwards when given.
pub fn sample_activations<R: Rng + ?Sized>(
    probs: &DMatrix<f64>,
    masters: Option<&MasterAssignment>,
    rng: &mut R,
) -> ClusterMatrix {
    let (k_total, l_total) = probs.shape();
    let mut out = ClusterMatrix::empty(k_total, l_total);
    for k in 0..k_total {
        for l in 0..l_total {
            let u: f64 = rng.random();
            out.set(k, l, u < probs[(k, l)]);
        }
    }
    if let Some(m) = masters {
        out.force_masters(m);
    }
    out
}

/// `C = sum l * g`; its derivative with respect to the outputs is `g` itself.
/// The sum runs row by row (UE, then AP) so that per-master partial sums
/// reproduce it exactly.
pub fn training_loss(outputs: &DMatrix<f64>, grad: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    if outputs.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "outputs {:?} vs gradient {:?}",
            outputs.shape(),
            grad.shape()
        )));
    }
    let mut loss = 0.0;
    for k in 0..outputs.nrows() {
        for l in 0..outputs.ncols() {
            loss += outputs[(k, l)] * grad[(k, l)];
        }
    }
    Ok((loss, grad.clone()))
}

/// Result of one realization, before reduction.
#[derive(Debug)]
pub struct RealizationOutcome {
    pub loss: f64,
    pub sampled_objective: f64,
    pub thresholded_objective: f64,
    pub thresholded_connections: usize,
    pub sampled: ClusterMatrix,
    pub grads: ModelParams,
}

/// Forward, sampling, gradient coupling and BPTT for one gain realization.
pub fn realization_step<R: Rng + ?Sized>(
    params: &ModelParams,
    beta: &GainMatrix,
    ue_xy: &[[f64; 2]],
    exp: &ExperimentConfig,
    cfg: &TrainConfig,
    sampling_rng: &mut R,
) -> Result<RealizationOutcome> {
    let ctx = DropContext::new(beta, ue_xy, exp)?;
    let trace = policy_forward(params, &ctx)?;
    let forcing = cfg.master_forcing.then_some(&ctx.masters);
    let sampled = sample_activations(&trace.probs, forcing, sampling_rng);
    let g = grad_activations(beta, &ctx.gamma, &sampled.to_f64(), &ctx.pilots, &cfg.objective, exp)?;
    let (loss, upstream) = training_loss(&trace.probs, &g)?;
    let grads = model_backward(params, &trace, &upstream)?;

    let eval = evaluate_clusters(beta, &ctx.gamma, &sampled, &ctx.pilots, exp);
    let sampled_objective = objective_eval(&eval.se, &sampled, &cfg.objective);
    let hard = if cfg.master_forcing {
        apply_threshold(&trace.probs, DEFAULT_MU, &ctx.masters)?
    } else {
        ClusterMatrix {
            a: trace.probs.map(|p| p > DEFAULT_MU),
        }
    };
    let eval = evaluate_clusters(beta, &ctx.gamma, &hard, &ctx.pilots, exp);
    Ok(RealizationOutcome {
        loss,
        sampled_objective,
        thresholded_objective: objective_eval(&eval.se, &hard, &cfg.objective),
        thresholded_connections: hard.connections(),
        sampled,
        grads,
    })
}

/// Statistics of one Adam step (one training drop).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub drop: usize,
    pub loss: f64,
    pub sampled_objective: f64,
    /// Objective as seen by the learners (the local views in distributed
    /// training; equal to `sampled_objective` when centralized).
    pub local_objective: f64,
    pub thresholded_objective: f64,
    pub connections: f64,
    /// Activation-exchange messages (distributed training only).
    pub messages: usize,
}

pub const STEP_LOG_HEADER: &str =
    "epoch,drop,loss,sampled_objective,local_objective,thresholded_objective,connections,messages";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.6},{}",
            self.epoch,
            self.drop,
            self.loss,
            self.sampled_objective,
            self.local_objective,
            self.thresholded_objective,
            self.connections,
            self.messages
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub sampled_objective: f64,
    pub thresholded_objective: f64,
    pub connections: f64,
}

pub fn epoch_summaries(log: &[StepLog]) -> Vec<EpochSummary> {
    let mut out: Vec<EpochSummary> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for s in log {
        if out.last().is_none_or(|e| e.epoch != s.epoch) {
            out.push(EpochSummary {
                epoch: s.epoch,
                sampled_objective: 0.0,
                thresholded_objective: 0.0,
                connections: 0.0,
            });
            counts.push(0.0);
        }
        let e = out.last_mut().expect("pushed above");
        e.sampled_objective += s.sampled_objective;
        e.thresholded_objective += s.thresholded_objective;
        e.connections += s.connections;
        *counts.last_mut().expect("pushed above") += 1.0;
    }
    for (e, n) in out.iter_mut().zip(counts) {
        e.sampled_objective /= n;
        e.thresholded_objective /= n;
        e.connections /= n;
    }
    out
}

/// Training-drop visiting order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n_drops: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_drops).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64]));
    order
}

/// Shadowing stream of realization `r` of drop `drop` in `epoch`.
pub fn shadow_stream(seed: u64, epoch: usize, drop: usize, r: usize) -> rng::SimRng {
    rng::stream(seed, &[tag::TRAIN_SHADOW, epoch as u64, drop as u64, r as u64])
}

/// Bernoulli sampling stream of realization `r`; `owner` distinguishes the
/// per-master streams of the distributed variant.
pub fn sampling_stream(seed: u64, epoch: usize, drop: usize, r: usize, owner: u64) -> rng::SimRng {
    rng::stream(seed, &[tag::SAMPLING, epoch as u64, drop as u64, r as u64, owner])
}

/// Owner key used by the centralized trainer.
pub const CENTRAL_OWNER: u64 = u64::MAX;

/// Mutable training state: parameters, optimizer and the step log. After a
/// divergence error the parameters are those of the last finite step.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub exp: ExperimentConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub log: Vec<StepLog>,
    /// Owner key of the Bernoulli sampling streams.
    pub sampling_owner: u64,
}

impl Trainer {
    pub fn new(exp: ExperimentConfig, cfg: TrainConfig, params: ModelParams) -> Result<Self> {
        exp.validate()?;
        cfg.validate()?;
        if params.shape().outputs() != exp.num_aps {
            return Err(Error::Shape(format!(
                "policy has {} outputs for {} APs",
                params.shape().outputs(),
                exp.num_aps
            )));
        }
        let adam = AdamState::new(params.len());
        Ok(Self {
            exp,
            cfg,
            params,
            adam,
            log: Vec::new(),
            sampling_owner: CENTRAL_OWNER,
        })
    }

    /// One Adam step on one drop: reduction over the batch in realization order.
    pub fn step(&mut self, sampler: &ShadowSampler, ue_xy: &[[f64; 2]], epoch: usize, drop: usize) -> Result<StepLog> {
        let r_total = self.cfg.batch_size;
        let wave = rayon::current_num_threads().max(1);
        let mut total = self.params.zeros_like();
        let (mut loss, mut sampled, mut hard, mut conns) = (0.0, 0.0, 0.0, 0.0);
        let mut start = 0;
        while start < r_total {
            let end = (start + wave).min(r_total);
            let outcomes: Vec<Result<RealizationOutcome>> = (start..end)
                .into_par_iter()
                .map(|r| {
                    let beta = sampler.sample(&mut shadow_stream(self.cfg.seed, epoch, drop, r));
                    let mut srng = sampling_stream(self.cfg.seed, epoch, drop, r, self.sampling_owner);
                    realization_step(&self.params, &beta, ue_xy, &self.exp, &self.cfg, &mut srng)
                })
                .collect();
            for o in outcomes {
                let o = o.map_err(|e| match e {
                    Error::Numerical(reason) => Error::Diverged { epoch, drop, reason },
                    other => other,
                })?;
                loss += o.loss;
                sampled += o.sampled_objective;
                hard += o.thresholded_objective;
                conns += o.thresholded_connections as f64;
                total.add_assign(&o.grads);
            }
            start = end;
        }
        if !loss.is_finite() || !total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                drop,
                reason: format!("non-finite loss or gradient (loss {loss})"),
            });
        }
        let mut next = self.params.data.clone();
        self.adam.ascend(&mut next, &total.data, &self.cfg.adam());
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                drop,
                reason: "non-finite parameters after the update".into(),
            });
        }
        self.params.data = next;
        let n = r_total as f64;
        let entry = StepLog {
            epoch,
            drop,
            loss,
            sampled_objective: sampled / n,
            local_objective: sampled / n,
            thresholded_objective: hard / n,
            connections: conns / n,
            messages: 0,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Runs all epochs; `on_epoch(epoch, params)` is called every
    /// `eval_every` epochs and after the last one.
    pub fn run<F>(&mut self, scenario: &Scenario, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(usize, &ModelParams) -> Result<()>,
    {
        if scenario.train.is_empty() {
            return Err(Error::Config("scenario has no training drops".into()));
        }
        let samplers: Vec<ShadowSampler> = (0..scenario.train.len())
            .map(|i| ShadowSampler::new(&self.exp, &scenario.train_placement(i)))
            .collect::<Result<_>>()?;
        for epoch in 0..self.cfg.epochs {
            let started = Instant::now();
            for drop in epoch_order(self.cfg.seed, epoch, samplers.len()) {
                self.step(&samplers[drop], &scenario.train[drop], epoch, drop)?;
            }
            if let Some(s) = epoch_summaries(&self.log).last() {
                log::info!(
                    "epoch {epoch}: sampled {:.4}, thresholded {:.4}, connections {:.2} ({:.1?})",
                    s.sampled_objective,
                    s.thresholded_objective,
                    s.connections,
                    started.elapsed()
                );
            }
            let last = epoch + 1 == self.cfg.epochs;
            if last || (self.cfg.eval_every > 0 && (epoch + 1) % self.cfg.eval_every == 0) {
                on_epoch(epoch, &self.params)?;
            }
        }
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from(STEP_LOG_HEADER);
        s.push('\n');
        for e in &self.log {
            s.push_str(&e.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Aggregate of a strategy over the test drops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub strategy: String,
    pub drops: usize,
    pub mean_se_sum: f64,
    pub mean_se_min: f64,
    pub mean_connections: f64,
    pub mean_objective: f64,
}

impl EvalSummary {
    pub fn from_records(strategy: &str, records: &[ResultRecord]) -> Self {
        let n = records.len().max(1) as f64;
        Self {
            strategy: strategy.to_string(),
            drops: records.len(),
            mean_se_sum: records.iter().map(|r| r.se_sum).sum::<f64>() / n,
            mean_se_min: records.iter().map(|r| r.se_min).sum::<f64>() / n,
            mean_connections: records.iter().map(|r| r.connections as f64).sum::<f64>() / n,
            mean_objective: records.iter().map(|r| r.objective).sum::<f64>() / n,
        }
    }
}

/// Evaluates `strategy` on the first `n_drops` test drops (each with its fixed
/// shadowing realization). Drops run in parallel; records keep drop order.
pub fn evaluate_policy(
    strategy: &dyn Strategy,
    scenario: &Scenario,
    exp: &ExperimentConfig,
    objective: &ObjectiveSpec,
    n_drops: usize,
) -> Result<(EvalSummary, Vec<ResultRecord>)> {
    let n = n_drops.min(scenario.test.len());
    let records: Vec<ResultRecord> = (0..n)
        .into_par_iter()
        .map(|i| {
            let beta = scenario.test_gains(exp, i)?;
            let ctx = DropContext::new(&beta, &scenario.test[i], exp)?;
            evaluate_drop(strategy, &ctx, objective, i, scenario.seed).map(|(r, _)| r)
        })
        .collect::<Result<_>>()?;
    Ok((EvalSummary::from_records(&strategy.name(), &records), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::{Learned, MasterOnly, TopM};

    #[test]
    fn bernoulli_frequency() {
        let probs = DMatrix::from_element(1, 1, 0.3);
        let mut r = rng::stream(5, &[]);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_activations(&probs, None, &mut r).get(0, 0)).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.3).abs() < 0.005, "{freq}");
    }

    #[test]
    fn certain_probabilities_and_master_forcing() {
        let probs = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let masters = MasterAssignment { master_of: vec![1, 0] };
        let mut r = rng::stream(6, &[]);
        for _ in 0..100 {
            let a = sample_activations(&probs, Some(&masters), &mut r);
            assert!(a.get(0, 0) && a.get(0, 1) && !a.get(0, 2));
            assert!(a.get(1, 0) && !a.get(1, 1) && a.get(1, 2));
        }
    }

    #[test]
    fn loss_is_bilinear() {
        let l = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let g = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        let (c, dl) = training_loss(&l, &g).unwrap();
        assert!((c - (0.1 - 0.2 + 0.15 + 0.8)).abs() < 1e-15);
        assert_eq!(dl, g);
        let (c2, _) = training_loss(&(l * 2.0), &g).unwrap();
        assert!((c2 - 2.0 * c).abs() < 1e-15);
        let (z, _) = training_loss(&DMatrix::from_element(2, 2, 0.5), &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(z, 0.0);
        assert!(training_loss(&DMatrix::zeros(1, 2), &g).is_err());
    }

    fn tiny() -> (ExperimentConfig, Scenario, ModelParams, TrainConfig) {
        let exp = ExperimentConfig {
            num_aps: 9,
            num_ues: 4,
            tau_p: 2,
            area_side: 300.0,
            seed: 3,
            ..Default::default()
        };
        let sc = Scenario::generate(&exp, 3, 4).unwrap();
        let pc = PolicyConfig {
            hidden: 8,
            fc_hidden: vec![6],
            pilot_input: false,
        };
        let params = ModelParams::init(&pc.shape(9, 2), &mut rng::stream(1, &[tag::INIT])).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 3,
            lr: 1e-3,
            ..Default::default()
        };
        (exp, sc, params, tc)
    }

    #[test]
    fn zero_coupling_leaves_parameters_unchanged() {
        let (exp, sc, params, mut tc) = tiny();
        // Zero SE weights make the coupling gradient vanish.
        tc.objective = ObjectiveSpec::Sum {
            weights: Some(vec![0.0; 4]),
        };
        let mut t = Trainer::new(exp.clone(), tc, params.clone()).unwrap();
        let sampler = ShadowSampler::new(&exp, &sc.train_placement(0)).unwrap();
        let s = t.step(&sampler, &sc.train[0], 0, 0).unwrap();
        assert_eq!(s.loss, 0.0);
        assert_eq!(t.params, params);
    }

    #[test]
    fn single_positive_coupling_raises_that_output() {
        let (exp, sc, params, _) = tiny();
        let beta = ShadowSampler::new(&exp, &sc.train_placement(0)).unwrap().sample(&mut rng::stream(1, &[]));
        let ctx = DropContext::new(&beta, &sc.train[0], &exp).unwrap();
        let before = policy_forward(&params, &ctx).unwrap();
        let mut g = DMatrix::zeros(4, 9);
        g[(2, 5)] = 1.0;
        let grads = model_backward(&params, &before, &g).unwrap();
        let mut p = params.clone();
        let mut adam = AdamState::new(p.len());
        adam.ascend(&mut p.data, &grads.data, &AdamConfig { lr: 1e-3, ..Default::default() });
        let after = policy_forward(&p, &ctx).unwrap();
        assert!(after.probs[(2, 5)] > before.probs[(2, 5)]);
    }

    #[test]
    fn batch_update_is_sum_of_realization_gradients() {
        let (exp, sc, params, tc) = tiny();
        let sampler = ShadowSampler::new(&exp, &sc.train_placement(1)).unwrap();
        let mut expected = params.zeros_like();
        for r in 0..tc.batch_size {
            let beta = sampler.sample(&mut shadow_stream(tc.seed, 0, 1, r));
            let mut srng = sampling_stream(tc.seed, 0, 1, r, CENTRAL_OWNER);
            let o = realization_step(&params, &beta, &sc.train[1], &exp, &tc, &mut srng).unwrap();
            expected.add_assign(&o.grads);
        }
        let mut manual = params.data.clone();
        AdamState::new(params.len()).ascend(&mut manual, &expected.data, &tc.adam());
        let mut t = Trainer::new(exp, tc, params).unwrap();
        t.step(&sampler, &sc.train[1], 0, 1).unwrap();
        assert_eq!(t.params.data, manual);
    }

    #[test]
    fn training_is_deterministic() {
        let (exp, sc, params, tc) = tiny();
        let mut a = Trainer::new(exp.clone(), tc.clone(), params.clone()).unwrap();
        let mut b = Trainer::new(exp, tc, params).unwrap();
        let mut calls = 0;
        a.run(&sc, |_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        b.run(&sc, |_, _| Ok(())).unwrap();
        assert_eq!(calls, 1);
        assert_eq!(a.log_csv(), b.log_csv());
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), 6);
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let (exp, sc, mut params, tc) = tiny();
        let fc = params.layout().fc[0];
        params.data[fc.w] = f64::INFINITY;
        let mut t = Trainer::new(exp, tc, params.clone()).unwrap();
        let err = t.run(&sc, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, .. }), "{err}");
        assert_eq!(t.params.data[fc.w], f64::INFINITY);
        assert!(t.log.is_empty());
    }

    #[test]
    fn evaluation_counts() {
        let (exp, sc, params, _) = tiny();
        let obj = ObjectiveSpec::sum();
        let (s, recs) = evaluate_policy(&TopM(4), &sc, &exp, &obj, 4).unwrap();
        assert_eq!(s.mean_connections, 16.0);
        assert_eq!(recs.len(), 4);
        let (m, _) = evaluate_policy(&MasterOnly, &sc, &exp, &obj, 4).unwrap();
        assert_eq!(m.mean_connections, 4.0);
        let (l, recs) = evaluate_policy(&Learned::new(params, "learned"), &sc, &exp, &obj, 4).unwrap();
        assert!(l.mean_connections >= 4.0);
        assert!(recs.iter().all(|r| r.se.iter().all(|v| *v >= 0.0)));
    }
}
