//! Monte-Carlo check of the closed-form MR SINR.
//!
//! Draws Rayleigh small-scale fading, transmits orthogonal pilots, forms MMSE
//! estimates and normalized MR precoders, and estimates the SINR expectations
//! from sample averages.

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{sinr_se, PowerMatrix};
use crate::association::{ClusterMatrix, PilotAssignment};
use crate::error::{Error, Result};
use crate::geometry::{ExperimentConfig, GainMatrix};

type C64 = Complex<f64>;

pub const MIN_TRIALS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct McReport {
    pub empirical: Vec<f64>,
    pub closed_form: Vec<f64>,
    pub rel_error: Vec<f64>,
}

impl McReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Circularly-symmetric complex Gaussian with the given variance.
fn cn<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    C64::new(s * rng.sample::<f64, _>(StandardNormal), s * rng.sample::<f64, _>(StandardNormal))
}

#[allow(clippy::too_many_arguments)]
pub fn mc_validate_sinr<R: Rng + ?Sized>(
    beta: &GainMatrix,
    gamma: &DMatrix<f64>,
    power: &PowerMatrix,
    clusters: &ClusterMatrix,
    pilots: &PilotAssignment,
    cfg: &ExperimentConfig,
    n_trials: usize,
    rng: &mut R,
) -> Result<McReport> {
    if n_trials < MIN_TRIALS {
        return Err(Error::Config(format!(
            "Monte-Carlo validation needs at least {MIN_TRIALS} trials, got {n_trials}"
        )));
    }
    let (k_total, l_total) = (beta.num_ues(), beta.num_aps());
    let m = cfg.antennas;
    let tau_p = pilots.tau_p();
    let sigma2 = cfg.noise_power_w();
    let eta = cfg.eta;
    let rho = &power.rho;

    // Orthogonal unit-modulus pilots (DFT columns), |phi_t|^2 = tau_p.
    let phi: Vec<Vec<C64>> = (0..tau_p)
        .map(|t| {
            (0..tau_p)
                .map(|s| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * (t * s) as f64 / tau_p as f64))
                .collect()
        })
        .collect();

    let idx = |k: usize, l: usize, a: usize| (k * l_total + l) * m + a;
    let mut h = vec![C64::new(0.0, 0.0); k_total * l_total * m];
    let mut w = vec![C64::new(0.0, 0.0); k_total * l_total * m];
    let mut rx = vec![C64::new(0.0, 0.0); m * tau_p];
    let mut despread = vec![C64::new(0.0, 0.0); tau_p * m];

    let mut mean_gain = vec![C64::new(0.0, 0.0); k_total];
    let mut mean_power = DMatrix::<f64>::zeros(k_total, k_total);

    for _ in 0..n_trials {
        for k in 0..k_total {
            for l in 0..l_total {
                for a in 0..m {
                    h[idx(k, l, a)] = cn(rng, beta.get(k, l));
                }
            }
        }
        for l in 0..l_total {
            // Y_l = sum_i sqrt(eta) h_il phi_{t_i}^T + N_l  (M x tau_p)
            for a in 0..m {
                for s in 0..tau_p {
                    let mut v = cn(rng, sigma2);
                    for i in 0..k_total {
                        v += h[idx(i, l, a)] * phi[pilots.pilot_of[i]][s] * eta.sqrt();
                    }
                    rx[a * tau_p + s] = v;
                }
            }
            // y_tl = Y_l phi_t^* / sqrt(tau_p)
            for t in 0..tau_p {
                for a in 0..m {
                    let mut v = C64::new(0.0, 0.0);
                    for s in 0..tau_p {
                        v += rx[a * tau_p + s] * phi[t][s].conj();
                    }
                    despread[t * m + a] = v / (tau_p as f64).sqrt();
                }
            }
            for k in 0..k_total {
                let t = pilots.pilot_of[k];
                let g = gamma[(k, l)];
                let serve = clusters.get(k, l) && g > 0.0 && rho[(k, l)] > 0.0;
                let scale = if serve {
                    // MMSE estimate, then normalization by sqrt(E|h_hat|^2) = sqrt(M gamma).
                    let est = g / ((tau_p as f64 * eta).sqrt() * beta.get(k, l));
                    est * rho[(k, l)].sqrt() / (m as f64 * g).sqrt()
                } else {
                    0.0
                };
                for a in 0..m {
                    w[idx(k, l, a)] = despread[t * m + a] * scale;
                }
            }
        }
        for k in 0..k_total {
            for i in 0..k_total {
                let mut g = C64::new(0.0, 0.0);
                for l in 0..l_total {
                    for a in 0..m {
                        g += h[idx(k, l, a)].conj() * w[idx(i, l, a)];
                    }
                }
                if i == k {
                    mean_gain[k] += g;
                }
                mean_power[(k, i)] += g.norm_sqr();
            }
        }
    }

    let n = n_trials as f64;
    let (closed, _) = sinr_se(beta, gamma, power, clusters, pilots, cfg);
    let mut empirical = Vec::with_capacity(k_total);
    let mut rel_error = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let desired = (mean_gain[k] / n).norm_sqr();
        let total: f64 = (0..k_total).map(|i| mean_power[(k, i)] / n).sum();
        let emp = desired / (total - desired + sigma2);
        let cf = closed[k];
        empirical.push(emp);
        rel_error.push(if cf > 0.0 { (emp - cf).abs() / cf } else { emp.abs() });
    }
    Ok(McReport {
        empirical,
        closed_form: closed.iter().copied().collect(),
        rel_error,
    })
}
