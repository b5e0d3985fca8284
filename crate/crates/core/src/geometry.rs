//! Network drops: AP/UE placement, path loss, correlated shadow fading and the
//! large-scale gain matrix.
//!
//! All powers are in watts and all gains are linear inside the crate; dB only
//! appears at the configuration boundary and in the path-loss model itself.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Radio and geometry constants of one experiment. Defaults reproduce the
/// reference 700 m x 700 m, 25-AP, 10-UE scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Side of the square coverage area, meters.
    pub area_side: f64,
    /// Number of APs; must be a perfect square (grid layout).
    pub num_aps: usize,
    pub num_ues: usize,
    /// Antennas per AP.
    pub antennas: usize,
    pub carrier_ghz: f64,
    pub bandwidth_hz: f64,
    pub tau_c: usize,
    pub tau_p: usize,
    pub sigma_sf_db: f64,
    /// Shadow-fading correlation length, meters.
    pub delta_sf: f64,
    /// AP-UE height difference, meters.
    pub height_diff: f64,
    /// Uplink and downlink noise power.
    pub noise_power_dbm: f64,
    /// Per-UE uplink (pilot) power, watts.
    pub eta: f64,
    /// Per-AP maximum downlink power, watts.
    pub rho_max: f64,
    /// Maximum AP displacement from its grid node, as a fraction of the
    /// inter-AP spacing, per axis.
    pub grid_jitter_frac: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            area_side: 700.0,
            num_aps: 25,
            num_ues: 10,
            antennas: 4,
            carrier_ghz: 2.0,
            bandwidth_hz: 20e6,
            tau_c: 200,
            tau_p: 10,
            sigma_sf_db: 4.0,
            delta_sf: 9.0,
            height_diff: 10.0,
            noise_power_dbm: -94.0,
            eta: 0.1,
            rho_max: 0.2,
            grid_jitter_frac: 0.5,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_aps == 0 || self.num_ues == 0 || self.antennas == 0 {
            return fail("num_aps, num_ues and antennas must all be >= 1".into());
        }
        if self.tau_p == 0 || self.tau_p > self.tau_c {
            return fail(format!(
                "need 1 <= tau_p <= tau_c, got tau_p={} tau_c={}",
                self.tau_p, self.tau_c
            ));
        }
        if !(self.eta > 0.0 && self.rho_max > 0.0 && self.noise_power_dbm.is_finite()) {
            return fail("eta, rho_max must be > 0 and noise power finite".into());
        }
        if !(0.0..=1.0).contains(&self.grid_jitter_frac) {
            return fail(format!(
                "grid_jitter_frac must lie in [0, 1], got {}",
                self.grid_jitter_frac
            ));
        }
        if !(self.area_side > 0.0) || !(self.delta_sf > 0.0) || self.sigma_sf_db < 0.0 {
            return fail("area_side and delta_sf must be > 0, sigma_sf_db >= 0".into());
        }
        if self.height_diff < 0.0 {
            return fail("height_diff must be >= 0".into());
        }
        grid_side(self.num_aps)?;
        Ok(())
    }

    pub fn noise_power_w(&self) -> f64 {
        dbm_to_watt(self.noise_power_dbm)
    }

    /// Fraction of the coherence block used for downlink data (no uplink data phase).
    pub fn prelog(&self) -> f64 {
        (self.tau_c - self.tau_p) as f64 / self.tau_c as f64
    }

    pub fn grid_spacing(&self) -> f64 {
        self.area_side / (self.num_aps as f64).sqrt().round()
    }
}

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Side of the AP grid, or an error when `num_aps` is not a perfect square.
pub fn grid_side(num_aps: usize) -> Result<usize> {
    let side = (num_aps as f64).sqrt().round() as usize;
    if side * side != num_aps {
        return Err(Error::Config(format!(
            "num_aps must be a perfect square for the grid layout, got {num_aps}"
        )));
    }
    Ok(side)
}

/// AP and UE coordinates in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub ap_xy: Vec<[f64; 2]>,
    pub ue_xy: Vec<[f64; 2]>,
}

impl Placement {
    pub fn num_aps(&self) -> usize {
        self.ap_xy.len()
    }

    pub fn num_ues(&self) -> usize {
        self.ue_xy.len()
    }
}

/// K x L matrix of linear large-scale fading coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    pub beta: DMatrix<f64>,
}

impl GainMatrix {
    pub fn new(beta: DMatrix<f64>) -> Result<Self> {
        if let Some(bad) = beta.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::Domain(format!(
                "gain entries must be finite and > 0, found {bad}"
            )));
        }
        Ok(Self { beta })
    }

    pub fn num_ues(&self) -> usize {
        self.beta.nrows()
    }

    pub fn num_aps(&self) -> usize {
        self.beta.ncols()
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.beta[(k, l)]
    }
}

/// Places APs on a regular sqrt(L) x sqrt(L) grid with independent uniform
/// per-axis jitter. AP `l` sits at grid row `l / side`, column `l % side`.
pub fn place_aps<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<Vec<[f64; 2]>> {
    let side = grid_side(cfg.num_aps)?;
    let spacing = cfg.area_side / side as f64;
    let max_shift = cfg.grid_jitter_frac * spacing;
    let mut out = Vec::with_capacity(cfg.num_aps);
    for l in 0..cfg.num_aps {
        let (row, col) = (l / side, l % side);
        let mut p = [(col as f64 + 0.5) * spacing, (row as f64 + 0.5) * spacing];
        for c in &mut p {
            // Always consume two draws so the stream layout is independent of the jitter size.
            let u: f64 = rng.random_range(-1.0..=1.0);
            *c = (*c + u * max_shift).clamp(0.0, cfg.area_side);
        }
        out.push(p);
    }
    Ok(out)
}

/// Uniform i.i.d. UE positions over the square.
pub fn place_ues<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Vec<[f64; 2]> {
    (0..cfg.num_ues)
        .map(|_| {
            [
                rng.random_range(0.0..=cfg.area_side),
                rng.random_range(0.0..=cfg.area_side),
            ]
        })
        .collect()
}

/// Microcell path loss in dB for distance `d` (meters) and carrier `f_c` (GHz).
/// The model is valid for 2-6 GHz; outside that range a warning is logged.
pub fn path_loss_db(d: f64, f_c: f64) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::Domain(format!("distance must be > 0, got {d}")));
    }
    if !(2.0..=6.0).contains(&f_c) {
        log::warn!("carrier {f_c} GHz is outside the 2-6 GHz validity range of the path-loss model");
    }
    Ok(36.7 * d.log10() + 22.7 + 26.0 * f_c.log10())
}

fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// 3-D AP-UE distance including the height difference.
pub fn ap_ue_distance(ap: [f64; 2], ue: [f64; 2], height_diff: f64) -> f64 {
    planar_distance(ap, ue).hypot(height_diff)
}

/// K x K shadow-fading covariance in dB^2: `sigma^2 * 2^(-dist/delta)`.
pub fn shadow_covariance(ue_xy: &[[f64; 2]], sigma_sf_db: f64, delta_sf: f64) -> Result<DMatrix<f64>> {
    if !(delta_sf > 0.0) {
        return Err(Error::Domain(format!("correlation length must be > 0, got {delta_sf}")));
    }
    let k = ue_xy.len();
    let var = sigma_sf_db * sigma_sf_db;
    Ok(DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            var
        } else {
            var * 2f64.powf(-planar_distance(ue_xy[i], ue_xy[j]) / delta_sf)
        }
    }))
}

/// Path-loss matrix plus a factor of the shadow covariance for one UE layout.
/// Drawing many shadowing realizations for the same positions reuses it.
#[derive(Debug, Clone)]
pub struct ShadowSampler {
    path_loss_db: DMatrix<f64>,
    factor: Option<DMatrix<f64>>,
}

impl ShadowSampler {
    pub fn new(cfg: &ExperimentConfig, placement: &Placement) -> Result<Self> {
        let (k, l) = (placement.num_ues(), placement.num_aps());
        let mut pl = DMatrix::zeros(k, l);
        for (ki, ue) in placement.ue_xy.iter().enumerate() {
            for (li, ap) in placement.ap_xy.iter().enumerate() {
                pl[(ki, li)] = path_loss_db(ap_ue_distance(*ap, *ue, cfg.height_diff), cfg.carrier_ghz)?;
            }
        }
        let factor = if cfg.sigma_sf_db > 0.0 {
            let mut cov = shadow_covariance(&placement.ue_xy, cfg.sigma_sf_db, cfg.delta_sf)?;
            let jitter = 1e-9 * cfg.sigma_sf_db * cfg.sigma_sf_db;
            for i in 0..k {
                cov[(i, i)] += jitter;
            }
            match cov.clone().cholesky() {
                Some(ch) => Some(ch.unpack()),
                None => {
                    let min_eig = cov.symmetric_eigenvalues().min();
                    return Err(Error::Numerical(format!(
                        "shadow covariance is not positive definite after regularization \
                         (smallest eigenvalue {min_eig:e})"
                    )));
                }
            }
        } else {
            None
        };
        Ok(Self { path_loss_db: pl, factor })
    }

    pub fn path_loss_db(&self) -> &DMatrix<f64> {
        &self.path_loss_db
    }

    /// One shadowing realization, independent across APs and correlated across UEs.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GainMatrix {
        let (k, l) = self.path_loss_db.shape();
        let mut beta = self.path_loss_db.map(|pl| -pl);
        if let Some(factor) = &self.factor {
            for li in 0..l {
                let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                let sf = factor * z;
                for ki in 0..k {
                    beta[(ki, li)] += sf[ki];
                }
            }
        }
        beta.apply(|b| *b = db_to_linear(*b));
        GainMatrix { beta }
    }
}

/// Convenience: a single gain realization for a placement.
pub fn sample_gains<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    placement: &Placement,
    rng: &mut R,
) -> Result<GainMatrix> {
    Ok(ShadowSampler::new(cfg, placement)?.sample(rng))
}

/// AP layout plus training and test UE drops. Each drop is one set of K UE
/// positions; shadowing is drawn on demand from seeded streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub ap_xy: Vec<[f64; 2]>,
    pub train: Vec<Vec<[f64; 2]>>,
    pub test: Vec<Vec<[f64; 2]>>,
}

impl Scenario {
    pub fn generate(cfg: &ExperimentConfig, n_train: usize, n_test: usize) -> Result<Self> {
        cfg.validate()?;
        let ap_xy = place_aps(cfg, &mut rng::stream(cfg.seed, &[tag::AP_PLACEMENT]))?;
        let train = (0..n_train)
            .map(|i| place_ues(cfg, &mut rng::stream(cfg.seed, &[tag::TRAIN_POSITIONS, i as u64])))
            .collect();
        let test = (0..n_test)
            .map(|i| place_ues(cfg, &mut rng::stream(cfg.seed, &[tag::TEST_POSITIONS, i as u64])))
            .collect();
        Ok(Self {
            seed: cfg.seed,
            ap_xy,
            train,
            test,
        })
    }

    pub fn train_placement(&self, i: usize) -> Placement {
        Placement {
            ap_xy: self.ap_xy.clone(),
            ue_xy: self.train[i].clone(),
        }
    }

    pub fn test_placement(&self, i: usize) -> Placement {
        Placement {
            ap_xy: self.ap_xy.clone(),
            ue_xy: self.test[i].clone(),
        }
    }

    /// The single fixed shadowing realization used to evaluate test drop `i`.
    pub fn test_gains(&self, cfg: &ExperimentConfig, i: usize) -> Result<GainMatrix> {
        let placement = self.test_placement(i);
        sample_gains(cfg, &placement, &mut rng::stream(self.seed, &[tag::TEST_SHADOW, i as u64]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_jitter_grid_is_exact() {
        let cfg = ExperimentConfig {
            grid_jitter_frac: 0.0,
            ..Default::default()
        };
        let aps = place_aps(&cfg, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(aps.len(), 25);
        assert_eq!(aps[0], [70.0, 70.0]);
        assert_eq!(aps[1], [210.0, 70.0]);
        assert_eq!(aps[5], [70.0, 210.0]);
        assert_eq!(aps[24], [630.0, 630.0]);
    }

    #[test]
    fn jitter_is_bounded_by_half_spacing() {
        let cfg = ExperimentConfig::default();
        for seed in 0..20 {
            let aps = place_aps(&cfg, &mut rng::stream(seed, &[])).unwrap();
            for (l, p) in aps.iter().enumerate() {
                let node = [(l % 5) as f64 * 140.0 + 70.0, (l / 5) as f64 * 140.0 + 70.0];
                for a in 0..2 {
                    assert!((p[a] - node[a]).abs() <= 70.0 + 1e-9);
                    assert!((0.0..=700.0).contains(&p[a]));
                }
            }
        }
    }

    #[test]
    fn non_square_ap_count_is_rejected() {
        let cfg = ExperimentConfig {
            num_aps: 10,
            ..Default::default()
        };
        let err = place_aps(&cfg, &mut rng::stream(1, &[])).unwrap_err();
        assert!(err.to_string().contains("perfect square"), "{err}");
    }

    #[test]
    fn path_loss_reference_values() {
        assert_abs_diff_eq!(path_loss_db(1.0, 2.0).unwrap(), 30.526, epsilon = 1e-3);
        assert_abs_diff_eq!(path_loss_db(100.0, 2.0).unwrap(), 103.926, epsilon = 1e-3);
        let decade = path_loss_db(1000.0, 2.0).unwrap() - path_loss_db(100.0, 2.0).unwrap();
        assert_abs_diff_eq!(decade, 36.7, epsilon = 1e-12);
        assert!(path_loss_db(0.0, 2.0).is_err());
        assert!(path_loss_db(-3.0, 2.0).is_err());
        // out-of-range carrier still evaluates
        assert!(path_loss_db(10.0, 28.0).unwrap().is_finite());
    }

    #[test]
    fn covariance_follows_exponential_decay() {
        let ue = [[0.0, 0.0], [9.0, 0.0], [18.0, 0.0]];
        let cov = shadow_covariance(&ue, 4.0, 9.0).unwrap();
        assert_abs_diff_eq!(cov[(0, 0)], 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(0, 1)], 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(0, 2)], 4.0, epsilon = 1e-12);
        assert_eq!(cov, cov.transpose());
        assert!(shadow_covariance(&ue, 4.0, 0.0).is_err());
    }

    #[test]
    fn no_shadowing_gives_pure_path_loss() {
        let cfg = ExperimentConfig {
            sigma_sf_db: 0.0,
            ..Default::default()
        };
        let placement = Placement {
            ap_xy: vec![[100.0, 100.0], [400.0, 100.0]],
            ue_xy: vec![[100.0, 100.0], [250.0, 300.0]],
        };
        let g = sample_gains(&cfg, &placement, &mut rng::stream(3, &[])).unwrap();
        // UE directly under the AP: only the height difference remains.
        let pl = path_loss_db(10.0, 2.0).unwrap();
        assert_abs_diff_eq!(pl, 67.227, epsilon = 0.001);
        assert_abs_diff_eq!(g.get(0, 0), 10f64.powf(-pl / 10.0), epsilon = 1e-18);
        let d = ap_ue_distance([400.0, 100.0], [250.0, 300.0], 10.0);
        assert_abs_diff_eq!(
            linear_to_db(g.get(1, 1)),
            -path_loss_db(d, 2.0).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn colocated_ues_are_tolerated() {
        let cfg = ExperimentConfig::default();
        let placement = Placement {
            ap_xy: vec![[100.0, 100.0]],
            ue_xy: vec![[50.0, 50.0], [50.0, 50.0], [50.0, 50.0]],
        };
        let g = sample_gains(&cfg, &placement, &mut rng::stream(3, &[])).unwrap();
        assert!(g.beta.iter().all(|b| *b > 0.0 && b.is_finite()));
    }

    #[test]
    fn same_seed_same_scenario() {
        let cfg = ExperimentConfig::default();
        let a = Scenario::generate(&cfg, 3, 2).unwrap();
        let b = Scenario::generate(&cfg, 3, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.test_gains(&cfg, 1).unwrap(), b.test_gains(&cfg, 1).unwrap());
    }
}
