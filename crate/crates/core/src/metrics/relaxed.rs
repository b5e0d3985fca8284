//! Continuous relaxation of the objectives over activations `a in [0,1]^{KxL}`
//! and its exact gradient.
//!
//! The activation enters the power rule both as a numerator weight and through
//! the AP load, `rho[i,l] = rho_max * a[i,l] * sqrt(beta[i,l]) / D_l` with
//! `D_l = sum_i a[i,l] sqrt(beta[i,l])`, and every serving-set sum becomes an
//! `a`-weighted sum. Writing `c = a * sqrt(rho)` and `E_l = sum_i a * rho`:
//!
//! ```text
//! S_k  = sum_l c[k,l] sqrt(gamma[k,l])
//! I_k  = sum_l beta[k,l] E_l
//! Q_ik = sum_l c[i,l] sqrt(gamma[k,l])            (i shares k's pilot)
//! SINR = M S_k^2 / (I_k + M sum_{i != k} Q_ik^2 + sigma^2)
//! ```
//!
//! On binary matrices this is exactly the closed-form model.

use nalgebra::{DMatrix, DVector};

use super::ObjectiveSpec;
use crate::association::PilotAssignment;
use crate::error::{Error, Result};
use crate::geometry::{ExperimentConfig, GainMatrix};

/// Loads below this are treated as a silent AP.
const EMPTY_AP: f64 = 1e-30;

/// Forward quantities of the relaxed model, kept for the gradient pass.
#[derive(Debug, Clone)]
pub struct RelaxedState {
    pub rho: DMatrix<f64>,
    pub sinr: DVector<f64>,
    pub se: DVector<f64>,
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    sqrt_beta: DMatrix<f64>,
    sqrt_gamma: DMatrix<f64>,
    load: Vec<f64>,
    signal: Vec<f64>,
    denom: Vec<f64>,
    /// Q[i, k] for co-pilot pairs, zero elsewhere.
    cross: DMatrix<f64>,
    row_mass: Vec<f64>,
}

fn check_unit_box(a: &DMatrix<f64>) -> Result<()> {
    match a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Domain(format!("activation {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

impl RelaxedState {
    pub fn new(
        beta: &GainMatrix,
        gamma: &DMatrix<f64>,
        a: &DMatrix<f64>,
        pilots: &PilotAssignment,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let (k_total, l_total) = (beta.num_ues(), beta.num_aps());
        if a.shape() != (k_total, l_total) || gamma.shape() != (k_total, l_total) {
            return Err(Error::Shape(format!(
                "beta is {k_total}x{l_total}, activations {:?}, gamma {:?}",
                a.shape(),
                gamma.shape()
            )));
        }
        check_unit_box(a)?;
        let m = cfg.antennas as f64;
        let sigma2 = cfg.noise_power_w();
        let rho_max = cfg.rho_max;

        let sqrt_beta = beta.beta.map(f64::sqrt);
        let sqrt_gamma = gamma.map(f64::sqrt);
        let mut rho = DMatrix::zeros(k_total, l_total);
        let mut c = DMatrix::zeros(k_total, l_total);
        let mut load = vec![0.0; l_total];
        let mut ap_power = vec![0.0; l_total];
        for l in 0..l_total {
            let d: f64 = (0..k_total).map(|i| a[(i, l)] * sqrt_beta[(i, l)]).sum();
            load[l] = d;
            if d < EMPTY_AP {
                continue;
            }
            for i in 0..k_total {
                let r = rho_max * a[(i, l)] * sqrt_beta[(i, l)] / d;
                rho[(i, l)] = r;
                c[(i, l)] = a[(i, l)] * r.sqrt();
                ap_power[l] += a[(i, l)] * r;
            }
        }

        let mut signal = vec![0.0; k_total];
        let mut denom = vec![0.0; k_total];
        let mut cross = DMatrix::zeros(k_total, k_total);
        let mut sinr = DVector::zeros(k_total);
        for k in 0..k_total {
            let s: f64 = (0..l_total).map(|l| c[(k, l)] * sqrt_gamma[(k, l)]).sum();
            let leak: f64 = (0..l_total).map(|l| beta.get(k, l) * ap_power[l]).sum();
            let mut contam = 0.0;
            for &i in pilots.co_pilot(k).iter().filter(|&&i| i != k) {
                let q: f64 = (0..l_total).map(|l| c[(i, l)] * sqrt_gamma[(k, l)]).sum();
                cross[(i, k)] = q;
                contam += q * q;
            }
            signal[k] = s;
            denom[k] = leak + m * contam + sigma2;
            sinr[k] = m * s * s / denom[k];
        }
        let prelog = cfg.prelog();
        let se = sinr.map(|s| prelog * (1.0 + s).log2());
        let row_mass = (0..k_total).map(|k| a.row(k).sum()).collect();
        Ok(Self {
            rho,
            sinr,
            se,
            a: a.clone(),
            c,
            sqrt_beta,
            sqrt_gamma,
            load,
            signal,
            denom,
            cross,
            row_mass,
        })
    }

    pub fn value(&self, spec: &ObjectiveSpec) -> f64 {
        match spec {
            ObjectiveSpec::Sum { .. } => self.se.iter().enumerate().map(|(k, s)| spec.weight(k) * s).sum(),
            ObjectiveSpec::Balance { lambda } => self
                .se
                .iter()
                .zip(&self.row_mass)
                .map(|(s, n)| s - lambda * n)
                .sum(),
            ObjectiveSpec::Min => self.se.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// d(objective)/d(SE_k). The MIN subgradient picks the lowest-index argmin.
    fn se_weights(&self, spec: &ObjectiveSpec) -> Vec<f64> {
        let k_total = self.se.len();
        match spec {
            ObjectiveSpec::Min => {
                let mut w = vec![0.0; k_total];
                if k_total > 0 {
                    let mut arg = 0;
                    for k in 1..k_total {
                        if self.se[k] < self.se[arg] {
                            arg = k;
                        }
                    }
                    w[arg] = 1.0;
                }
                w
            }
            _ => (0..k_total).map(|k| spec.weight(k)).collect(),
        }
    }

    /// Gradient of `value(spec)` with respect to every activation.
    pub fn gradient(&self, beta: &GainMatrix, spec: &ObjectiveSpec, cfg: &ExperimentConfig) -> DMatrix<f64> {
        let (k_total, l_total) = self.c.shape();
        let m = cfg.antennas as f64;
        let rho_max = cfg.rho_max;
        let dse_dsinr = cfg.prelog() / std::f64::consts::LN_2;
        let w = self.se_weights(spec);

        // Upstream sensitivities of the objective to the per-UE aggregates.
        let mut g_c = DMatrix::<f64>::zeros(k_total, l_total);
        let mut g_load_power = vec![0.0; l_total];
        for k in 0..k_total {
            if w[k] == 0.0 {
                continue;
            }
            let g_sinr = w[k] * dse_dsinr / (1.0 + self.sinr[k]);
            let g_signal = g_sinr * 2.0 * m * self.signal[k] / self.denom[k];
            let g_interf = -g_sinr * self.sinr[k] / self.denom[k];
            for l in 0..l_total {
                g_c[(k, l)] += g_signal * self.sqrt_gamma[(k, l)];
                g_load_power[l] += g_interf * beta.get(k, l);
            }
            for i in 0..k_total {
                let q = self.cross[(i, k)];
                if q == 0.0 {
                    continue;
                }
                let g_q = g_interf * m * 2.0 * q;
                for l in 0..l_total {
                    g_c[(i, l)] += g_q * self.sqrt_gamma[(k, l)];
                }
            }
        }

        let mut grad = DMatrix::zeros(k_total, l_total);
        for l in 0..l_total {
            let d = self.load[l];
            if d < EMPTY_AP {
                // One-sided limit from a silent AP: the first user to join gets rho_max.
                let sqrt_rho_max = rho_max.sqrt();
                for k in 0..k_total {
                    grad[(k, l)] = g_c[(k, l)] * sqrt_rho_max + g_load_power[l] * rho_max;
                }
                continue;
            }
            // Through D_l: dc/dD = -c/(2D), d(a rho)/dD = -a rho / D.
            let mut g_d = 0.0;
            for i in 0..k_total {
                let c = self.c[(i, l)];
                let e = self.a[(i, l)] * self.rho[(i, l)];
                g_d -= (g_c[(i, l)] * 0.5 * c + g_load_power[l] * e) / d;
            }
            for k in 0..k_total {
                let r = self.rho[(k, l)];
                grad[(k, l)] = g_c[(k, l)] * 1.5 * r.sqrt() + g_load_power[l] * 2.0 * r + g_d * self.sqrt_beta[(k, l)];
            }
        }
        if let ObjectiveSpec::Balance { lambda } = spec {
            grad.apply(|g| *g -= lambda);
        }
        grad
    }
}

/// Objective evaluated on a continuous activation matrix.
pub fn relaxed_objective(
    beta: &GainMatrix,
    gamma: &DMatrix<f64>,
    a: &DMatrix<f64>,
    pilots: &PilotAssignment,
    spec: &ObjectiveSpec,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    Ok(RelaxedState::new(beta, gamma, a, pilots, cfg)?.value(spec))
}

/// Analytic gradient of [`relaxed_objective`] with respect to `a`.
pub fn grad_activations(
    beta: &GainMatrix,
    gamma: &DMatrix<f64>,
    a: &DMatrix<f64>,
    pilots: &PilotAssignment,
    spec: &ObjectiveSpec,
    cfg: &ExperimentConfig,
) -> Result<DMatrix<f64>> {
    Ok(RelaxedState::new(beta, gamma, a, pilots, cfg)?.gradient(beta, spec, cfg))
}

/// Finite-difference gradient of [`relaxed_objective`]. Central differences
/// in the interior; one-sided differences that stay inside [0, 1] at the edges.
pub fn fd_grad_oracle(
    beta: &GainMatrix,
    gamma: &DMatrix<f64>,
    a: &DMatrix<f64>,
    pilots: &PilotAssignment,
    spec: &ObjectiveSpec,
    cfg: &ExperimentConfig,
    eps: f64,
) -> Result<DMatrix<f64>> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("finite-difference step must be in (0, 1e-3], got {eps}")));
    }
    check_unit_box(a)?;
    let f = |x: &DMatrix<f64>| relaxed_objective(beta, gamma, x, pilots, spec, cfg);
    let base = f(a)?;
    let mut grad = DMatrix::zeros(a.nrows(), a.ncols());
    let mut probe = a.clone();
    for k in 0..a.nrows() {
        for l in 0..a.ncols() {
            let x = a[(k, l)];
            let up = x + eps <= 1.0;
            let down = x - eps >= 0.0;
            grad[(k, l)] = if up && down {
                probe[(k, l)] = x + eps;
                let fp = f(&probe)?;
                probe[(k, l)] = x - eps;
                let fm = f(&probe)?;
                (fp - fm) / (2.0 * eps)
            } else if up {
                probe[(k, l)] = x + eps;
                (f(&probe)? - base) / eps
            } else {
                probe[(k, l)] = x - eps;
                (base - f(&probe)?) / eps
            };
            probe[(k, l)] = x;
        }
    }
    Ok(grad)
}
