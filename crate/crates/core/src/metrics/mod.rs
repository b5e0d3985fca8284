//! Performance model: MMSE estimation quality, power allocation, closed-form
//! MR downlink SINR/SE and the association objectives.

mod montecarlo;
mod relaxed;

pub use montecarlo::{mc_validate_sinr, McReport, MIN_TRIALS};
pub use relaxed::{fd_grad_oracle, grad_activations, relaxed_objective, RelaxedState};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::association::{ClusterMatrix, PilotAssignment};
use crate::error::{Error, Result};
use crate::geometry::{ExperimentConfig, GainMatrix};

/// Downlink power per (UE, AP) pair, watts.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerMatrix {
    pub rho: DMatrix<f64>,
}

impl PowerMatrix {
    pub fn ap_totals(&self) -> Vec<f64> {
        self.rho.column_iter().map(|c| c.sum()).collect()
    }
}

/// Which network utility to maximize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectiveSpec {
    /// Weighted sum of SEs; `None` means unit weights.
    Sum { weights: Option<Vec<f64>> },
    /// Sum of SEs minus `lambda` per active connection.
    Balance { lambda: f64 },
    /// Smallest per-UE SE.
    Min,
}

impl ObjectiveSpec {
    pub fn sum() -> Self {
        ObjectiveSpec::Sum { weights: None }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ObjectiveSpec::Sum { weights: Some(w) } if w.iter().any(|a| !(*a >= 0.0)) => {
                Err(Error::Config("SUM weights must be >= 0".into()))
            }
            ObjectiveSpec::Balance { lambda } if !(*lambda > 0.0) => {
                Err(Error::Config(format!("BALANCE lambda must be > 0, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveSpec::Sum { .. } => "sum",
            ObjectiveSpec::Balance { .. } => "balance",
            ObjectiveSpec::Min => "min",
        }
    }

    pub(crate) fn weight(&self, k: usize) -> f64 {
        match self {
            ObjectiveSpec::Sum { weights: Some(w) } => w[k],
            _ => 1.0,
        }
    }
}

/// MMSE estimation quality `gamma[k, l]`, with `0 <= gamma <= beta`.
pub fn gamma_matrix(beta: &GainMatrix, pilots: &PilotAssignment, cfg: &ExperimentConfig) -> DMatrix<f64> {
    let (k_total, l_total) = (beta.num_ues(), beta.num_aps());
    let tau_p = cfg.tau_p as f64;
    let sigma2 = cfg.noise_power_w();
    let eta = cfg.eta;
    // Received pilot power per (pilot, AP).
    let mut pilot_power = DMatrix::zeros(pilots.tau_p(), l_total);
    for (t, set) in pilots.pilot_sets.iter().enumerate() {
        for l in 0..l_total {
            pilot_power[(t, l)] = set.iter().map(|&i| eta * beta.get(i, l)).sum::<f64>();
        }
    }
    DMatrix::from_fn(k_total, l_total, |k, l| {
        let b = beta.get(k, l);
        tau_p * eta * b * b / (tau_p * pilot_power[(pilots.pilot_of[k], l)] + sigma2)
    })
}

/// Square-root-gain proportional power split at every serving AP. APs that
/// serve nobody stay silent.
pub fn allocate_power(beta: &GainMatrix, clusters: &ClusterMatrix, rho_max: f64) -> PowerMatrix {
    let (k_total, l_total) = (beta.num_ues(), beta.num_aps());
    let mut rho = DMatrix::zeros(k_total, l_total);
    for l in 0..l_total {
        let denom: f64 = (0..k_total)
            .filter(|&i| clusters.get(i, l))
            .map(|i| beta.get(i, l).sqrt())
            .sum();
        if denom > 0.0 {
            for k in (0..k_total).filter(|&k| clusters.get(k, l)) {
                rho[(k, l)] = rho_max * beta.get(k, l).sqrt() / denom;
            }
        }
    }
    PowerMatrix { rho }
}

/// Closed-form downlink SINR with MR precoding and the resulting SE per UE.
pub fn sinr_se(
    beta: &GainMatrix,
    gamma: &DMatrix<f64>,
    power: &PowerMatrix,
    clusters: &ClusterMatrix,
    pilots: &PilotAssignment,
    cfg: &ExperimentConfig,
) -> (DVector<f64>, DVector<f64>) {
    let (k_total, l_total) = (beta.num_ues(), beta.num_aps());
    let m = cfg.antennas as f64;
    let sigma2 = cfg.noise_power_w();
    let rho = &power.rho;
    let ap_power: Vec<f64> = (0..l_total)
        .map(|l| (0..k_total).filter(|&i| clusters.get(i, l)).map(|i| rho[(i, l)]).sum())
        .collect();
    let coherent = |i: usize, k: usize| -> f64 {
        (0..l_total)
            .filter(|&l| clusters.get(i, l))
            .map(|l| (rho[(i, l)] * gamma[(k, l)]).sqrt())
            .sum()
    };
    let mut sinr = DVector::zeros(k_total);
    for k in 0..k_total {
        let signal = coherent(k, k);
        if signal == 0.0 {
            continue;
        }
        let leakage: f64 = (0..l_total).map(|l| ap_power[l] * beta.get(k, l)).sum();
        let contamination: f64 = pilots
            .co_pilot(k)
            .iter()
            .filter(|&&i| i != k)
            .map(|&i| coherent(i, k).powi(2))
            .sum();
        sinr[k] = m * signal * signal / (leakage + m * contamination + sigma2);
    }
    let prelog = cfg.prelog();
    let se = sinr.map(|s| prelog * (1.0 + s).log2());
    (sinr, se)
}

/// Evaluates the objective on per-UE SEs of a binary association.
pub fn objective_eval(se: &DVector<f64>, clusters: &ClusterMatrix, spec: &ObjectiveSpec) -> f64 {
    match spec {
        ObjectiveSpec::Sum { .. } => se.iter().enumerate().map(|(k, s)| spec.weight(k) * s).sum(),
        ObjectiveSpec::Balance { lambda } => {
            let sizes = clusters.row_sizes();
            se.iter().zip(sizes).map(|(s, n)| s - lambda * n as f64).sum()
        }
        ObjectiveSpec::Min => se.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Everything a downstream report needs about one evaluated association.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub sinr: DVector<f64>,
    pub se: DVector<f64>,
    pub power: PowerMatrix,
}

impl Evaluation {
    pub fn se_sum(&self) -> f64 {
        self.se.sum()
    }

    pub fn se_min(&self) -> f64 {
        self.se.min()
    }
}

/// Power allocation followed by SINR/SE for a binary association.
pub fn evaluate_clusters(
    beta: &GainMatrix,
    gamma: &DMatrix<f64>,
    clusters: &ClusterMatrix,
    pilots: &PilotAssignment,
    cfg: &ExperimentConfig,
) -> Evaluation {
    let power = allocate_power(beta, clusters, cfg.rho_max);
    let (sinr, se) = sinr_se(beta, gamma, &power, clusters, pilots, cfg);
    Evaluation { sinr, se, power }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Unit-scale radio constants so hand-computed examples stay readable:
    /// eta = 1 W, noise = 1 W (0 dBm = 1 mW, so 30 dBm), rho_max = 0.2 W.
    pub fn unit_cfg(tau_p: usize, antennas: usize) -> ExperimentConfig {
        ExperimentConfig {
            num_aps: 1,
            num_ues: 1,
            antennas,
            tau_c: 200,
            tau_p,
            eta: 1.0,
            noise_power_dbm: 30.0,
            rho_max: 0.2,
            ..Default::default()
        }
    }
}
