//! Neighborhood-restricted association: every master AP runs its own policy
//! over the UEs whose masters lie in its neighborhood and decides only for its
//! own UEs. Training exchanges sampled activation rows between APs through a
//! simulated one-round broadcast.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{ClusterMatrix, MasterAssignment, PilotAssignment};
use crate::error::{Error, Result};
use crate::geometry::{grid_side, ExperimentConfig, GainMatrix, Scenario, ShadowSampler};
use crate::metrics::{evaluate_clusters, gamma_matrix, grad_activations, objective_eval, ObjectiveSpec};
use crate::neural::{
    encode_gain, input_width, model_backward, model_forward, order_chain_by, AdamState, ForwardTrace, ModelParams,
    MASKED_INPUT,
};
use crate::rng::{self, tag};
use crate::strategy::{DropContext, Strategy, DEFAULT_MU};
use crate::training::{epoch_order, sampling_stream, shadow_stream, PolicyConfig, StepLog, TrainConfig};

/// Geometric pattern of neighbor slots around an AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    /// Square `w x w` window centered on the AP (`w` odd); off-grid slots are masked.
    Window(usize),
    /// Every AP in global order, with absolute UE positions.
    Full,
}

impl Template {
    pub fn slots(&self, num_aps: usize) -> usize {
        match self {
            Template::Window(w) => w * w,
            Template::Full => num_aps,
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Template::Window(w) => write!(f, "{w}x{w}"),
            Template::Full => write!(f, "full"),
        }
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Template::Full);
        }
        let parsed = s
            .split_once('x')
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
        match parsed {
            Some((a, b)) if a == b && a % 2 == 1 => Ok(Template::Window(a)),
            _ => Err(Error::Config(format!(
                "template must be 'full' or an odd square window like '3x3', got '{s}'"
            ))),
        }
    }
}

impl Serialize for NeighborhoodMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Entry<'a> {
            ap: usize,
            slots: &'a [Option<usize>],
            masked: Vec<usize>,
            group: Vec<usize>,
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            template: String,
            grid_side: usize,
            aps: Vec<Entry<'a>>,
        }
        Dump {
            template: self.template.to_string(),
            grid_side: self.side,
            aps: (0..self.num_aps())
                .map(|l| Entry {
                    ap: l,
                    slots: &self.slots[l],
                    masked: self.slots[l]
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| s.is_none())
                        .map(|(i, _)| i)
                        .collect(),
                    group: self.group(l),
                })
                .collect(),
        }
        .serialize(s)
    }
}

/// Per-AP slot tables for one template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodMap {
    pub template: Template,
    side: usize,
    /// `slots[l][s]` is the AP in slot `s` of AP `l`'s neighborhood, `None` if masked.
    slots: Vec<Vec<Option<usize>>>,
}

/// Grid neighborhoods; AP `l` sits at row `l / side`, column `l % side`.
pub fn build_neighborhoods(num_aps: usize, template: Template) -> Result<NeighborhoodMap> {
    let side = grid_side(num_aps)?;
    let slots = match template {
        Template::Full => vec![(0..num_aps).map(Some).collect(); num_aps],
        Template::Window(w) => {
            if w % 2 == 0 || w == 0 {
                return Err(Error::Config(format!("window width must be odd, got {w}")));
            }
            if w > side {
                return Err(Error::Config(format!(
                    "{w}x{w} template is larger than the {side}x{side} AP grid"
                )));
            }
            let half = (w / 2) as isize;
            (0..num_aps)
                .map(|l| {
                    let (r, c) = ((l / side) as isize, (l % side) as isize);
                    let mut v = Vec::with_capacity(w * w);
                    for dr in -half..=half {
                        for dc in -half..=half {
                            let (rr, cc) = (r + dr, c + dc);
                            let inside = (0..side as isize).contains(&rr) && (0..side as isize).contains(&cc);
                            v.push(inside.then(|| rr as usize * side + cc as usize));
                        }
                    }
                    v
                })
                .collect()
        }
    };
    Ok(NeighborhoodMap { template, side, slots })
}

impl NeighborhoodMap {
    pub fn num_aps(&self) -> usize {
        self.slots.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.first().map_or(0, |s| s.len())
    }

    pub fn slots(&self, l: usize) -> &[Option<usize>] {
        &self.slots[l]
    }

    pub fn live(&self, l: usize) -> usize {
        self.slots[l].iter().filter(|s| s.is_some()).count()
    }

    pub fn contains(&self, l: usize, other: usize) -> bool {
        self.slots[l].contains(&Some(other))
    }

    /// APs whose neighborhood contains AP `m`: the receivers of rows decided by `m`.
    pub fn group(&self, m: usize) -> Vec<usize> {
        (0..self.num_aps()).filter(|&l| self.contains(l, m)).collect()
    }

    pub fn topology_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// What master `master` can see: UEs whose master is in its neighborhood,
/// restricted to the neighborhood's APs.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalView {
    pub master: usize,
    /// Global indices of the UEs in view, ascending.
    pub ues: Vec<usize>,
    /// Global master of every UE in view.
    pub ue_master: Vec<usize>,
    /// Slot table of the neighborhood (global AP or masked).
    pub slots: Vec<Option<usize>>,
    /// Gains of the in-view UEs to the live slots (columns in slot order).
    pub beta: GainMatrix,
    /// Slot index of every column of `beta`.
    pub live_slots: Vec<usize>,
    pub inputs: DMatrix<f64>,
    pub pilots: PilotAssignment,
}

impl LocalView {
    pub fn own_rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ues
            .iter()
            .enumerate()
            .filter(move |(i, _)| self.ue_master[*i] == self.master)
            .map(|(i, &k)| (i, k))
    }

    pub fn global_ap(&self, col: usize) -> usize {
        self.slots[self.live_slots[col]].expect("live slot")
    }
}

/// A UE index with its decided activation row over all APs.
pub type OwnRow = (usize, Vec<bool>);

/// Builds the local view of `master` for one gain realization.
#[allow(clippy::too_many_arguments)]
pub fn local_view(
    map: &NeighborhoodMap,
    master: usize,
    beta: &GainMatrix,
    ue_xy: &[[f64; 2]],
    ap_xy: &[[f64; 2]],
    masters: &MasterAssignment,
    pilots: &PilotAssignment,
    pilot_input: bool,
    cfg: &ExperimentConfig,
) -> LocalView {
    let slots = map.slots(master).to_vec();
    let ues: Vec<usize> = (0..beta.num_ues())
        .filter(|&k| map.contains(master, masters.master_of[k]))
        .collect();
    let ue_master: Vec<usize> = ues.iter().map(|&k| masters.master_of[k]).collect();
    let live_slots: Vec<usize> = (0..slots.len()).filter(|&s| slots[s].is_some()).collect();
    let local_beta = DMatrix::from_fn(ues.len(), live_slots.len(), |i, c| {
        beta.get(ues[i], slots[live_slots[c]].expect("live"))
    });
    let local_pilots = pilots.restrict(&ues);
    let n_slots = slots.len();
    let width = input_width(n_slots, pilot_input.then_some(pilots.tau_p()));
    let mut inputs = DMatrix::from_element(ues.len(), width, 0.0);
    let span = match map.template {
        Template::Window(w) => w as f64 * cfg.grid_spacing(),
        Template::Full => cfg.area_side,
    };
    for (i, &k) in ues.iter().enumerate() {
        for (s, slot) in slots.iter().enumerate() {
            inputs[(i, s)] = slot.map_or(MASKED_INPUT, |l| encode_gain(beta.get(k, l)));
        }
        let pos = match map.template {
            Template::Full => [ue_xy[k][0] / span, ue_xy[k][1] / span],
            Template::Window(_) => {
                let c = ap_xy[master];
                [(ue_xy[k][0] - c[0]) / span + 0.5, (ue_xy[k][1] - c[1]) / span + 0.5]
            }
        };
        inputs[(i, n_slots)] = pos[0];
        inputs[(i, n_slots + 1)] = pos[1];
        if pilot_input {
            inputs[(i, n_slots + 2 + pilots.pilot_of[k])] = 1.0;
        }
    }
    LocalView {
        master,
        ues,
        ue_master,
        slots,
        beta: GainMatrix { beta: local_beta },
        live_slots,
        inputs,
        pilots: local_pilots,
    }
}

/// Local forward pass over the whole view chain.
pub fn local_forward(view: &LocalView, params: &ModelParams) -> Result<ForwardTrace> {
    let gain_at_master: Vec<f64> = view
        .ues
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let slot = view
                .slots
                .iter()
                .position(|s| *s == Some(view.ue_master[i]))
                .expect("view UEs have their master in the neighborhood");
            let col = view.live_slots.iter().position(|&s| s == slot).expect("master slot is live");
            view.beta.get(i, col)
        })
        .collect();
    let chain = order_chain_by(&view.ue_master, &gain_at_master);
    model_forward(params, &view.inputs, &chain)
}

/// Thresholded decisions of `view.master` for its own UEs, as global rows
/// (`ue -> serving flags over all APs`). Masked slots never connect.
pub fn local_infer(view: &LocalView, params: &ModelParams, mu: f64, num_aps: usize) -> Result<Vec<(usize, Vec<bool>)>> {
    let trace = local_forward(view, params)?;
    Ok(threshold_own_rows(view, &trace.probs, mu, num_aps))
}

fn threshold_own_rows(view: &LocalView, probs: &DMatrix<f64>, mu: f64, num_aps: usize) -> Vec<(usize, Vec<bool>)> {
    view.own_rows()
        .map(|(i, k)| {
            let mut row = vec![false; num_aps];
            for (s, slot) in view.slots.iter().enumerate() {
                if let Some(l) = slot {
                    row[*l] = probs[(i, s)] > mu;
                }
            }
            row[view.master] = true;
            (k, row)
        })
        .collect()
}

/// Injected failure for the exchange simulator: the message carrying
/// `ue`'s row to AP `to` is lost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub ue: usize,
    pub to: usize,
}

/// State after one exchange round.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    /// `inbox[l]` holds every row AP `l` received or produced itself.
    pub inbox: Vec<BTreeMap<usize, Vec<bool>>>,
    pub messages: usize,
    pub rounds: usize,
}

/// Delivers every UE's sampled row from its master to all other APs whose
/// neighborhood contains that master, then checks that each AP holds the rows
/// of all UEs in its view.
pub fn exchange_activations(
    map: &NeighborhoodMap,
    masters: &MasterAssignment,
    rows: &BTreeMap<usize, Vec<bool>>,
    fault: Option<Fault>,
) -> Result<Exchange> {
    let l_total = map.num_aps();
    let mut inbox: Vec<BTreeMap<usize, Vec<bool>>> = vec![BTreeMap::new(); l_total];
    let mut messages = 0;
    let groups: Vec<Vec<usize>> = (0..l_total).map(|m| map.group(m)).collect();
    for (&k, row) in rows {
        let m = masters.master_of[k];
        for &to in &groups[m] {
            if to == m {
                inbox[to].insert(k, row.clone());
                continue;
            }
            messages += 1;
            if fault != Some(Fault { ue: k, to }) {
                inbox[to].insert(k, row.clone());
            }
        }
    }
    for (l, held) in inbox.iter().enumerate() {
        for (k, &m) in masters.master_of.iter().enumerate() {
            if map.contains(l, m) && !held.contains_key(&k) {
                return Err(Error::Protocol(format!(
                    "AP {l} is missing the activation row of UE {k} (master {m}) after the exchange round"
                )));
            }
        }
    }
    Ok(Exchange {
        inbox,
        messages,
        rounds: 1,
    })
}

/// Messages one exchange round needs: `sum_k (|group(m_k)| - 1)`.
pub fn expected_messages(map: &NeighborhoodMap, masters: &MasterAssignment) -> usize {
    masters.master_of.iter().map(|&m| map.group(m).len() - 1).sum()
}

/// Objective restricted to the in-view UEs.
fn local_spec(spec: &ObjectiveSpec, ues: &[usize]) -> ObjectiveSpec {
    match spec {
        ObjectiveSpec::Sum { weights: Some(w) } => ObjectiveSpec::Sum {
            weights: Some(ues.iter().map(|&k| w[k]).collect()),
        },
        other => other.clone(),
    }
}

/// One master's contribution to a realization.
#[derive(Debug)]
struct MasterOutcome {
    loss: f64,
    local_objective: f64,
    grads: ModelParams,
}

/// Per-realization statistics of a distributed step.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizationStats {
    pub loss: f64,
    pub sampled_objective: f64,
    pub local_objective: f64,
    pub thresholded_objective: f64,
    pub thresholded_connections: usize,
    pub messages: usize,
    pub sampled: ClusterMatrix,
}

/// Per-master models with their own optimizers.
#[derive(Debug, Clone)]
pub struct DistributedTrainer {
    pub exp: ExperimentConfig,
    pub cfg: TrainConfig,
    pub map: NeighborhoodMap,
    pub models: Vec<ModelParams>,
    pub adams: Vec<AdamState>,
    pub log: Vec<StepLog>,
    pub fault: Option<Fault>,
}

impl DistributedTrainer {
    /// Independent initialization per AP from the `(seed, INIT, ap)` streams.
    pub fn new(exp: ExperimentConfig, cfg: TrainConfig, map: NeighborhoodMap, policy: &PolicyConfig) -> Result<Self> {
        let shape = policy.shape(map.num_slots(), exp.tau_p);
        let models = (0..map.num_aps())
            .map(|l| ModelParams::init(&shape, &mut rng::stream(cfg.seed, &[tag::INIT, l as u64])))
            .collect::<Result<Vec<_>>>()?;
        Self::with_models(exp, cfg, map, models)
    }

    pub fn with_models(
        exp: ExperimentConfig,
        cfg: TrainConfig,
        map: NeighborhoodMap,
        models: Vec<ModelParams>,
    ) -> Result<Self> {
        exp.validate()?;
        cfg.validate()?;
        if map.num_aps() != exp.num_aps || models.len() != exp.num_aps {
            return Err(Error::Shape(format!(
                "{} models / {} neighborhoods for {} APs",
                models.len(),
                map.num_aps(),
                exp.num_aps
            )));
        }
        if let Some(m) = models.iter().find(|m| m.shape().outputs() != map.num_slots()) {
            return Err(Error::Shape(format!(
                "local model has {} outputs, template has {} slots",
                m.shape().outputs(),
                map.num_slots()
            )));
        }
        let adams = models.iter().map(|m| AdamState::new(m.len())).collect();
        Ok(Self {
            exp,
            cfg,
            map,
            models,
            adams,
            log: Vec::new(),
            fault: None,
        })
    }

    /// Forward, sampling, exchange and local gradients for one realization;
    /// per-master gradients are added into `acc`.
    #[allow(clippy::too_many_arguments)]
    pub fn realization(
        &self,
        beta: &GainMatrix,
        ue_xy: &[[f64; 2]],
        ap_xy: &[[f64; 2]],
        epoch: usize,
        drop: usize,
        r: usize,
        acc: &mut [Option<ModelParams>],
    ) -> Result<RealizationStats> {
        let exp = &self.exp;
        let l_total = exp.num_aps;
        let ctx = DropContext::new(beta, ue_xy, exp)?;
        let active: Vec<usize> = (0..l_total).filter(|&l| !ctx.masters.ues_of(l).is_empty()).collect();
        let pilot_input = self.models[0].shape().pilot_input;

        // Phase 1: every master runs its local model and samples its own rows.
        let phase1: Vec<Result<(LocalView, ForwardTrace, Vec<OwnRow>)>> = active
            .par_iter()
            .map(|&l| {
                let view = local_view(&self.map, l, beta, ue_xy, ap_xy, &ctx.masters, &ctx.pilots, pilot_input, exp);
                let trace = local_forward(&view, &self.models[l])?;
                let mut srng = sampling_stream(self.cfg.seed, epoch, drop, r, l as u64);
                let mut rows = Vec::new();
                for (i, k) in view.own_rows() {
                    let mut row = vec![false; l_total];
                    for (s, slot) in view.slots.iter().enumerate() {
                        let u: f64 = rand::Rng::random(&mut srng);
                        if let Some(ap) = slot {
                            row[*ap] = u < trace.probs[(i, s)];
                        }
                    }
                    if self.cfg.master_forcing {
                        row[l] = true;
                    }
                    rows.push((k, row));
                }
                Ok((view, trace, rows))
            })
            .collect();
        let phase1 = phase1.into_iter().collect::<Result<Vec<_>>>()?;

        // Phase 2: one broadcast round.
        let mut rows = BTreeMap::new();
        let mut hard = ClusterMatrix::empty(beta.num_ues(), l_total);
        for (view, trace, own) in &phase1 {
            rows.extend(own.iter().cloned());
            for (k, row) in threshold_own_rows(view, &trace.probs, DEFAULT_MU, l_total) {
                for (l, v) in row.into_iter().enumerate() {
                    hard.set(k, l, v);
                }
            }
        }
        let exchange = exchange_activations(&self.map, &ctx.masters, &rows, self.fault)?;
        let mut sampled = ClusterMatrix::empty(beta.num_ues(), l_total);
        for (&k, row) in &rows {
            for (l, &v) in row.iter().enumerate() {
                sampled.set(k, l, v);
            }
        }

        // Phase 3: local objective gradients and BPTT on own rows only.
        let phase3: Vec<Result<MasterOutcome>> = phase1
            .par_iter()
            .map(|(view, trace, _)| {
                let l = view.master;
                let held = &exchange.inbox[l];
                let mut a = DMatrix::zeros(view.ues.len(), view.live_slots.len());
                for (i, k) in view.ues.iter().enumerate() {
                    let row = held.get(k).ok_or_else(|| {
                        Error::Protocol(format!("AP {l} has no row for UE {k} in its view"))
                    })?;
                    for c in 0..view.live_slots.len() {
                        a[(i, c)] = if row[view.global_ap(c)] { 1.0 } else { 0.0 };
                    }
                }
                let gamma = gamma_matrix(&view.beta, &view.pilots, exp);
                let spec = local_spec(&self.cfg.objective, &view.ues);
                let g = grad_activations(&view.beta, &gamma, &a, &view.pilots, &spec, exp)?;
                let local_clusters = ClusterMatrix { a: a.map(|v| v > 0.5) };
                let eval = evaluate_clusters(&view.beta, &gamma, &local_clusters, &view.pilots, exp);
                let local_objective = objective_eval(&eval.se, &local_clusters, &spec);
                let mut upstream = DMatrix::zeros(trace.probs.nrows(), trace.probs.ncols());
                // Terms ordered by global (UE, AP) so the sum matches the centralized loss.
                let mut terms = Vec::new();
                for (i, k) in view.own_rows() {
                    for (c, &s) in view.live_slots.iter().enumerate() {
                        upstream[(i, s)] = g[(i, c)];
                        terms.push(((k, view.global_ap(c)), trace.probs[(i, s)] * g[(i, c)]));
                    }
                }
                terms.sort_by_key(|t| t.0);
                let loss = terms.iter().map(|t| t.1).fold(0.0, |a, b| a + b);
                let grads = model_backward(&self.models[l], trace, &upstream)?;
                Ok(MasterOutcome {
                    loss,
                    local_objective,
                    grads,
                })
            })
            .collect();

        let mut loss = 0.0;
        let mut local_objective = 0.0;
        for ((view, _, _), out) in phase1.iter().zip(phase3) {
            let out = out?;
            loss += out.loss;
            local_objective += out.local_objective;
            match &mut acc[view.master] {
                Some(total) => total.add_assign(&out.grads),
                slot @ None => *slot = Some(out.grads),
            }
        }
        let eval = evaluate_clusters(beta, &ctx.gamma, &sampled, &ctx.pilots, exp);
        let heval = evaluate_clusters(beta, &ctx.gamma, &hard, &ctx.pilots, exp);
        Ok(RealizationStats {
            loss,
            sampled_objective: objective_eval(&eval.se, &sampled, &self.cfg.objective),
            local_objective: local_objective / active.len().max(1) as f64,
            thresholded_objective: objective_eval(&heval.se, &hard, &self.cfg.objective),
            thresholded_connections: hard.connections(),
            messages: exchange.messages,
            sampled,
        })
    }

    /// One batch on one drop, then an Adam step for every master that owned
    /// UEs in at least one realization.
    pub fn step(
        &mut self,
        sampler: &ShadowSampler,
        ue_xy: &[[f64; 2]],
        ap_xy: &[[f64; 2]],
        epoch: usize,
        drop: usize,
    ) -> Result<StepLog> {
        let mut acc: Vec<Option<ModelParams>> = vec![None; self.exp.num_aps];
        let (mut loss, mut sampled, mut local, mut hard, mut conns, mut messages) = (0.0, 0.0, 0.0, 0.0, 0.0, 0);
        for r in 0..self.cfg.batch_size {
            let beta = sampler.sample(&mut shadow_stream(self.cfg.seed, epoch, drop, r));
            let s = self
                .realization(&beta, ue_xy, ap_xy, epoch, drop, r, &mut acc)
                .map_err(|e| match e {
                    Error::Numerical(reason) => Error::Diverged { epoch, drop, reason },
                    other => other,
                })?;
            loss += s.loss;
            sampled += s.sampled_objective;
            local += s.local_objective;
            hard += s.thresholded_objective;
            conns += s.thresholded_connections as f64;
            messages += s.messages;
        }
        if !loss.is_finite() || acc.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                drop,
                reason: format!("non-finite local loss or gradient (loss {loss})"),
            });
        }
        let adam_cfg = self.cfg.adam();
        let mut updated = Vec::new();
        for (l, g) in acc.iter().enumerate() {
            if let Some(g) = g {
                let mut next = self.models[l].data.clone();
                let mut state = self.adams[l].clone();
                state.ascend(&mut next, &g.data, &adam_cfg);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        drop,
                        reason: format!("non-finite parameters of master {l} after the update"),
                    });
                }
                updated.push((l, next, state));
            }
        }
        for (l, next, state) in updated {
            self.models[l].data = next;
            self.adams[l] = state;
        }
        let n = self.cfg.batch_size as f64;
        let entry = StepLog {
            epoch,
            drop,
            loss,
            sampled_objective: sampled / n,
            local_objective: local / n,
            thresholded_objective: hard / n,
            connections: conns / n,
            messages,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn run<F>(&mut self, scenario: &Scenario, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(usize, &[ModelParams]) -> Result<()>,
    {
        if scenario.train.is_empty() {
            return Err(Error::Config("scenario has no training drops".into()));
        }
        let samplers: Vec<ShadowSampler> = (0..scenario.train.len())
            .map(|i| ShadowSampler::new(&self.exp, &scenario.train_placement(i)))
            .collect::<Result<_>>()?;
        for epoch in 0..self.cfg.epochs {
            for drop in epoch_order(self.cfg.seed, epoch, samplers.len()) {
                self.step(&samplers[drop], &scenario.train[drop], &scenario.ap_xy, epoch, drop)?;
            }
            let last = epoch + 1 == self.cfg.epochs;
            if last || (self.cfg.eval_every > 0 && (epoch + 1) % self.cfg.eval_every == 0) {
                on_epoch(epoch, &self.models)?;
            }
        }
        Ok(())
    }
}

/// Distributed inference: every master decides its own UEs independently
/// (no messages needed).
#[derive(Debug, Clone)]
pub struct DistributedPolicy {
    pub map: NeighborhoodMap,
    pub models: Vec<ModelParams>,
    pub ap_xy: Vec<[f64; 2]>,
    pub mu: f64,
    pub label: String,
}

impl DistributedPolicy {
    pub fn infer(&self, ctx: &DropContext<'_>) -> Result<ClusterMatrix> {
        let l_total = ctx.beta.num_aps();
        let pilot_input = self.models[0].shape().pilot_input;
        let mut out = ClusterMatrix::empty(ctx.beta.num_ues(), l_total);
        let active: Vec<usize> = (0..l_total).filter(|&l| !ctx.masters.ues_of(l).is_empty()).collect();
        let decided: Vec<Result<Vec<OwnRow>>> = active
            .par_iter()
            .map(|&l| {
                let view = local_view(
                    &self.map,
                    l,
                    ctx.beta,
                    ctx.ue_xy,
                    &self.ap_xy,
                    &ctx.masters,
                    &ctx.pilots,
                    pilot_input,
                    ctx.cfg,
                );
                local_infer(&view, &self.models[l], self.mu, l_total)
            })
            .collect();
        for rows in decided {
            for (k, row) in rows? {
                for (l, v) in row.into_iter().enumerate() {
                    out.set(k, l, v);
                }
            }
        }
        Ok(out)
    }
}

impl Strategy for DistributedPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn clusters(&self, ctx: &DropContext<'_>) -> Result<ClusterMatrix> {
        self.infer(ctx)
    }
}
