//! Self-checks against independent oracles: finite differences, Monte-Carlo
//! simulation, exhaustive enumeration and sample statistics. Shared by the
//! `validate` command and the test suites.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::association::{ClusterMatrix, PilotAssignment};
use crate::error::Result;
use crate::geometry::{linear_to_db, ExperimentConfig, GainMatrix, Placement, ShadowSampler};
use crate::metrics::{
    allocate_power, evaluate_clusters, fd_grad_oracle, gamma_matrix, grad_activations, mc_validate_sinr,
    objective_eval, relaxed_objective, ObjectiveSpec,
};
use crate::neural::{model_backward, model_forward, order_chain_by, ModelParams, ModelShape};
use crate::rng::{self, tag};

/// Outcome of one check: `value` is compared against `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {:.3e} (tolerance {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

/// Small synthetic instance with unit-ish powers for oracle checks.
#[derive(Debug, Clone)]
pub struct Instance {
    pub beta: GainMatrix,
    pub gamma: DMatrix<f64>,
    pub pilots: PilotAssignment,
    pub cfg: ExperimentConfig,
}

pub fn random_instance(k: usize, l: usize, tau_p: usize, seed: u64) -> Instance {
    let mut r = rng::stream(seed, &[tag::VALIDATE]);
    let cfg = ExperimentConfig {
        num_aps: l,
        num_ues: k,
        antennas: 4,
        tau_p,
        eta: 1.0,
        rho_max: 0.2,
        noise_power_dbm: 30.0 + 10.0 * 0.05f64.log10(),
        ..Default::default()
    };
    let beta = GainMatrix {
        beta: DMatrix::from_fn(k, l, |_, _| 10f64.powf(r.random_range(-2.0..0.0))),
    };
    let pilots = PilotAssignment::from_pilots((0..k).map(|i| i % tau_p).collect(), tau_p).expect("valid pilots");
    let gamma = gamma_matrix(&beta, &pilots, &cfg);
    Instance {
        beta,
        gamma,
        pilots,
        cfg,
    }
}

/// `|x - y| / max(|x|, |y|, floor)`, with the floor relative to the largest
/// reference magnitude so that entries that are numerically zero do not blow up.
pub fn max_rel_error(x: &[f64], y: &[f64]) -> f64 {
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

/// Analytic relaxed gradient vs central differences at interior points of
/// random 4 x 5 instances, all three objectives.
pub fn check_relaxed_gradient(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let tau_p = 1 + i % 4;
        let inst = random_instance(4, 5, tau_p, seed.wrapping_add(i as u64));
        let mut r = rng::stream(seed, &[tag::VALIDATE, i as u64]);
        let a = DMatrix::from_fn(4, 5, |_, _| r.random_range(0.05..0.95));
        for spec in [ObjectiveSpec::sum(), ObjectiveSpec::Balance { lambda: 0.04 }, ObjectiveSpec::Min] {
            let g = grad_activations(&inst.beta, &inst.gamma, &a, &inst.pilots, &spec, &inst.cfg)?;
            let fd = fd_grad_oracle(&inst.beta, &inst.gamma, &a, &inst.pilots, &spec, &inst.cfg, 1e-6)?;
            worst = worst.max(max_rel_error(g.as_slice(), fd.as_slice()));
        }
    }
    Ok(CheckResult::new("relaxed gradient vs finite differences", worst, 1e-5))
}

/// BPTT vs central differences on randomly chosen parameters of a q = 4 model.
pub fn check_bptt(coords: usize, seed: u64) -> Result<CheckResult> {
    let shape = ModelShape {
        input: 5,
        hidden: 4,
        fc: vec![4, 3],
        pilot_input: false,
    };
    let mut r = rng::stream(seed, &[tag::VALIDATE]);
    let mut params = ModelParams::init(&shape, &mut r)?;
    for v in params.data.iter_mut().filter(|v| **v == 0.0) {
        *v = r.random_range(-0.3..0.3);
    }
    let x = DMatrix::from_fn(3, 5, |_, _| r.random_range(-1.0..1.0));
    let chain = order_chain_by(&[1, 0, 1], &[0.2, 0.7, 0.9]);
    let up = DMatrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0));
    let trace = model_forward(&params, &x, &chain)?;
    let grads = model_backward(&params, &trace, &up)?;
    let picks = rand::seq::index::sample(&mut r, params.len(), coords.min(params.len()));
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for idx in picks.iter() {
        let orig = params.data[idx];
        params.data[idx] = orig + h;
        let fp = model_forward(&params, &x, &chain)?.probs.component_mul(&up).sum();
        params.data[idx] = orig - h;
        let fm = model_forward(&params, &x, &chain)?.probs.component_mul(&up).sum();
        params.data[idx] = orig;
        analytic.push(grads.data[idx]);
        numeric.push((fp - fm) / (2.0 * h));
    }
    Ok(CheckResult::new(
        "BPTT vs finite differences",
        max_rel_error(&analytic, &numeric),
        1e-4,
    ))
}

/// Closed-form SINR against a small-scale fading simulation on a 3-AP / 2-UE
/// instance with a shared pilot and partially overlapping clusters.
pub fn check_monte_carlo(trials: usize, seed: u64) -> Result<CheckResult> {
    let cfg = ExperimentConfig {
        num_aps: 3,
        num_ues: 2,
        antennas: 4,
        tau_p: 1,
        eta: 1.0,
        rho_max: 0.2,
        noise_power_dbm: 30.0 + 10.0 * 0.1f64.log10(),
        ..Default::default()
    };
    let beta = GainMatrix {
        beta: DMatrix::from_row_slice(2, 3, &[1.0, 0.3, 0.05, 0.2, 0.8, 0.4]),
    };
    let pilots = PilotAssignment::from_pilots(vec![0, 0], 1)?;
    let mut c = ClusterMatrix::empty(2, 3);
    c.set(0, 0, true);
    c.set(0, 1, true);
    c.set(1, 1, true);
    c.set(1, 2, true);
    let gamma = gamma_matrix(&beta, &pilots, &cfg);
    let power = allocate_power(&beta, &c, cfg.rho_max);
    let report = mc_validate_sinr(
        &beta,
        &gamma,
        &power,
        &c,
        &pilots,
        &cfg,
        trials,
        &mut rng::stream(seed, &[tag::VALIDATE]),
    )?;
    Ok(CheckResult::new(
        "closed-form SINR vs Monte-Carlo",
        report.max_rel_error(),
        0.02,
    ))
}

/// Relaxed objective on every binary K = 2, L = 3 matrix vs the closed form.
pub fn check_exhaustive_relaxation(seed: u64) -> Result<CheckResult> {
    let (k, l) = (2, 3);
    let mut worst = 0.0f64;
    for tau_p in [1, 2] {
        let inst = random_instance(k, l, tau_p, seed + tau_p as u64);
        for bits in 0u32..(1 << (k * l)) {
            let c = ClusterMatrix {
                a: DMatrix::from_fn(k, l, |i, j| bits >> (i * l + j) & 1 == 1),
            };
            let eval = evaluate_clusters(&inst.beta, &inst.gamma, &c, &inst.pilots, &inst.cfg);
            for spec in [ObjectiveSpec::sum(), ObjectiveSpec::Balance { lambda: 0.04 }, ObjectiveSpec::Min] {
                let exact = objective_eval(&eval.se, &c, &spec);
                let relaxed = relaxed_objective(&inst.beta, &inst.gamma, &c.to_f64(), &inst.pilots, &spec, &inst.cfg)?;
                worst = worst.max((exact - relaxed).abs());
            }
        }
    }
    Ok(CheckResult::new("relaxation vs closed form (all binary 2x3)", worst, 1e-12))
}

/// Shadowing covariance at UE separations 0, 9 and 18 m; `value` is the
/// largest deviation in standard errors (tolerance 3).
pub fn check_shadow_correlation(draws: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = ExperimentConfig {
        num_aps: 1,
        num_ues: 3,
        ..Default::default()
    };
    let placement = Placement {
        ap_xy: vec![[350.0, 350.0]],
        ue_xy: vec![[100.0, 100.0], [109.0, 100.0], [118.0, 100.0]],
    };
    let sampler = ShadowSampler::new(&cfg, &placement)?;
    let pl: Vec<f64> = (0..3).map(|k| sampler.path_loss_db()[(k, 0)]).collect();
    let mut r = rng::stream(seed, &[tag::VALIDATE]);
    let mut sums = [0.0f64; 3];
    let mut prods = [0.0f64; 3];
    for _ in 0..draws {
        let g = sampler.sample(&mut r);
        let sf: Vec<f64> = (0..3).map(|k| linear_to_db(g.get(k, 0)) + pl[k]).collect();
        for j in 0..3 {
            sums[j] += sf[j];
            prods[j] += sf[0] * sf[j];
        }
    }
    let n = draws as f64;
    let var = cfg.sigma_sf_db * cfg.sigma_sf_db;
    let mut out = Vec::new();
    for (j, delta) in [0.0, 9.0, 18.0].iter().enumerate() {
        let cov = prods[j] / n - (sums[0] / n) * (sums[j] / n);
        let expected = var * 2f64.powf(-delta / cfg.delta_sf);
        // Gaussian sampling error of a covariance estimate.
        let se = ((var * var + expected * expected) / n).sqrt();
        out.push(CheckResult::new(
            &format!("shadow covariance at {delta} m (standard errors)"),
            (cov - expected).abs() / se,
            3.0,
        ));
    }
    Ok(out)
}

/// Every check with its default size.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        check_relaxed_gradient(20, seed)?,
        check_bptt(200, seed)?,
        check_monte_carlo(100_000, seed)?,
        check_exhaustive_relaxation(seed)?,
    ];
    out.extend(check_shadow_correlation(100_000, seed)?);
    Ok(out)
}
