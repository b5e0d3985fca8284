//! Association strategies behind one trait, and the per-drop evaluator shared
//! by baselines and learned policies.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::association::{
    apply_threshold, assign_pilots, pilot_strategy_clusters, select_masters, top_m_clusters, ClusterMatrix,
    MasterAssignment, PilotAssignment,
};
use crate::error::Result;
use crate::geometry::{ExperimentConfig, GainMatrix};
use crate::metrics::{evaluate_clusters, gamma_matrix, objective_eval, ObjectiveSpec};
use crate::neural::{build_inputs, model_forward, order_chain, ForwardTrace, ModelParams};

/// Heaviside threshold applied to policy outputs at inference.
pub const DEFAULT_MU: f64 = 0.5;

/// Everything a strategy may look at for one drop.
#[derive(Debug, Clone)]
pub struct DropContext<'a> {
    pub beta: &'a GainMatrix,
    pub ue_xy: &'a [[f64; 2]],
    pub masters: MasterAssignment,
    pub pilots: PilotAssignment,
    pub gamma: DMatrix<f64>,
    pub cfg: &'a ExperimentConfig,
}

impl<'a> DropContext<'a> {
    pub fn new(beta: &'a GainMatrix, ue_xy: &'a [[f64; 2]], cfg: &'a ExperimentConfig) -> Result<Self> {
        let masters = select_masters(beta);
        let pilots = assign_pilots(beta, &masters, cfg.tau_p)?;
        let gamma = gamma_matrix(beta, &pilots, cfg);
        Ok(Self {
            beta,
            ue_xy,
            masters,
            pilots,
            gamma,
            cfg,
        })
    }
}

pub trait Strategy: Sync {
    fn name(&self) -> String;
    fn clusters(&self, ctx: &DropContext<'_>) -> Result<ClusterMatrix>;
}

/// Each UE connects to its `m` strongest APs.
#[derive(Debug, Clone, Copy)]
pub struct TopM(pub usize);

impl Strategy for TopM {
    fn name(&self) -> String {
        format!("top{}", self.0)
    }

    fn clusters(&self, ctx: &DropContext<'_>) -> Result<ClusterMatrix> {
        top_m_clusters(ctx.beta, self.0)
    }
}

/// Each AP serves its strongest UE on every pilot.
#[derive(Debug, Clone, Copy)]
pub struct PilotBased;

impl Strategy for PilotBased {
    fn name(&self) -> String {
        "pilot".into()
    }

    fn clusters(&self, ctx: &DropContext<'_>) -> Result<ClusterMatrix> {
        Ok(pilot_strategy_clusters(ctx.beta, &ctx.pilots))
    }
}

/// Only the master link of every UE.
#[derive(Debug, Clone, Copy)]
pub struct MasterOnly;

impl Strategy for MasterOnly {
    fn name(&self) -> String {
        "master".into()
    }

    fn clusters(&self, ctx: &DropContext<'_>) -> Result<ClusterMatrix> {
        let mut c = ClusterMatrix::empty(ctx.beta.num_ues(), ctx.beta.num_aps());
        c.force_masters(&ctx.masters);
        Ok(c)
    }
}

/// Centralized BiLSTM policy, thresholded with master forcing.
#[derive(Debug, Clone)]
pub struct Learned {
    pub params: ModelParams,
    pub mu: f64,
    pub label: String,
}

impl Learned {
    pub fn new(params: ModelParams, label: impl Into<String>) -> Self {
        Self {
            params,
            mu: DEFAULT_MU,
            label: label.into(),
        }
    }
}

/// Forward pass of a centralized policy on one drop.
pub fn policy_forward(params: &ModelParams, ctx: &DropContext<'_>) -> Result<ForwardTrace> {
    let pilots = params.shape().pilot_input.then_some(&ctx.pilots);
    let inputs = build_inputs(ctx.beta, ctx.ue_xy, pilots, ctx.cfg.area_side);
    let chain = order_chain(ctx.beta, &ctx.masters.master_of);
    model_forward(params, &inputs, &chain)
}

impl Strategy for Learned {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn clusters(&self, ctx: &DropContext<'_>) -> Result<ClusterMatrix> {
        let trace = policy_forward(&self.params, ctx)?;
        apply_threshold(&trace.probs, self.mu, &ctx.masters)
    }
}

/// One evaluated (drop, strategy) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub drop: usize,
    pub strategy: String,
    pub se_sum: f64,
    pub se_min: f64,
    pub connections: usize,
    pub objective: f64,
    pub se: Vec<f64>,
    pub seed: u64,
}

pub fn evaluate_drop(
    strategy: &dyn Strategy,
    ctx: &DropContext<'_>,
    objective: &ObjectiveSpec,
    drop: usize,
    seed: u64,
) -> Result<(ResultRecord, ClusterMatrix)> {
    let clusters = strategy.clusters(ctx)?;
    let eval = evaluate_clusters(ctx.beta, &ctx.gamma, &clusters, &ctx.pilots, ctx.cfg);
    let record = ResultRecord {
        drop,
        strategy: strategy.name(),
        se_sum: eval.se_sum(),
        se_min: eval.se_min(),
        connections: clusters.connections(),
        objective: objective_eval(&eval.se, &clusters, objective),
        se: eval.se.iter().copied().collect(),
        seed,
    };
    Ok((record, clusters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Placement, Scenario};

    fn default_drop(i: usize) -> (ExperimentConfig, GainMatrix, Placement) {
        let cfg = ExperimentConfig::default();
        let sc = Scenario::generate(&cfg, 0, i + 1).unwrap();
        let g = sc.test_gains(&cfg, i).unwrap();
        (cfg, g, sc.test_placement(i))
    }

    #[test]
    fn baseline_connection_counts() {
        let (mut cfg, g, p) = default_drop(0);
        let ctx = DropContext::new(&g, &p.ue_xy, &cfg).unwrap();
        let obj = ObjectiveSpec::sum();
        assert_eq!(evaluate_drop(&TopM(4), &ctx, &obj, 0, 0).unwrap().0.connections, 40);
        assert_eq!(evaluate_drop(&TopM(3), &ctx, &obj, 0, 0).unwrap().0.connections, 30);
        assert_eq!(evaluate_drop(&MasterOnly, &ctx, &obj, 0, 0).unwrap().0.connections, 10);
        assert_eq!(evaluate_drop(&PilotBased, &ctx, &obj, 0, 0).unwrap().0.connections, 250);
        cfg.tau_p = 4;
        let ctx = DropContext::new(&g, &p.ue_xy, &cfg).unwrap();
        assert_eq!(evaluate_drop(&PilotBased, &ctx, &obj, 0, 0).unwrap().0.connections, 100);
    }

    #[test]
    fn evaluator_is_strategy_agnostic() {
        struct Fixed(ClusterMatrix);
        impl Strategy for Fixed {
            fn name(&self) -> String {
                "fixed".into()
            }
            fn clusters(&self, _: &DropContext<'_>) -> Result<ClusterMatrix> {
                Ok(self.0.clone())
            }
        }
        let (cfg, g, p) = default_drop(1);
        let ctx = DropContext::new(&g, &p.ue_xy, &cfg).unwrap();
        let obj = ObjectiveSpec::sum();
        let (a, c) = evaluate_drop(&PilotBased, &ctx, &obj, 1, 0).unwrap();
        let (b, _) = evaluate_drop(&Fixed(c), &ctx, &obj, 1, 0).unwrap();
        assert_eq!(a.se, b.se);
        assert_eq!(a.se_sum, b.se_sum);
    }
}
