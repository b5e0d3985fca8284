//! Master selection, pilot assignment, heuristic clusterings and the binary
//! AP-UE activation matrix.
//!
//! Indices are 0-based here; files and printed reports use 1-based APs/UEs.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::GainMatrix;

/// Master AP per UE: the AP with the largest gain, lowest index on ties.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterAssignment {
    pub master_of: Vec<usize>,
}

impl MasterAssignment {
    pub fn num_ues(&self) -> usize {
        self.master_of.len()
    }

    /// UEs mastered by AP `l`, ascending.
    pub fn ues_of(&self, l: usize) -> Vec<usize> {
        (0..self.master_of.len()).filter(|&k| self.master_of[k] == l).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotAssignment {
    pub pilot_of: Vec<usize>,
    pub pilot_sets: Vec<Vec<usize>>,
}

impl PilotAssignment {
    pub fn tau_p(&self) -> usize {
        self.pilot_sets.len()
    }

    /// UEs sharing UE `k`'s pilot, `k` included.
    pub fn co_pilot(&self, k: usize) -> &[usize] {
        &self.pilot_sets[self.pilot_of[k]]
    }

    /// Builds the assignment from a per-UE pilot vector.
    pub fn from_pilots(pilot_of: Vec<usize>, tau_p: usize) -> Result<Self> {
        let mut pilot_sets = vec![Vec::new(); tau_p];
        for (k, &t) in pilot_of.iter().enumerate() {
            if t >= tau_p {
                return Err(Error::Domain(format!("UE {k} has pilot {t} >= tau_p {tau_p}")));
            }
            pilot_sets[t].push(k);
        }
        Ok(Self { pilot_of, pilot_sets })
    }

    /// The same pilots restricted to a subset of UEs, renumbered 0..ues.len().
    pub fn restrict(&self, ues: &[usize]) -> Self {
        let pilot_of: Vec<usize> = ues.iter().map(|&k| self.pilot_of[k]).collect();
        Self::from_pilots(pilot_of, self.tau_p()).expect("pilots already validated")
    }
}

/// K x L binary activation matrix. Row k is the serving set of UE k, column l
/// the set of UEs served by AP l.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMatrix {
    pub a: DMatrix<bool>,
}

impl ClusterMatrix {
    pub fn empty(k: usize, l: usize) -> Self {
        Self {
            a: DMatrix::from_element(k, l, false),
        }
    }

    pub fn num_ues(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_aps(&self) -> usize {
        self.a.ncols()
    }

    pub fn get(&self, k: usize, l: usize) -> bool {
        self.a[(k, l)]
    }

    pub fn set(&mut self, k: usize, l: usize, v: bool) {
        self.a[(k, l)] = v;
    }

    pub fn connections(&self) -> usize {
        self.a.iter().filter(|v| **v).count()
    }

    /// |L_k| for every UE.
    pub fn row_sizes(&self) -> Vec<usize> {
        self.a.row_iter().map(|r| r.iter().filter(|v| **v).count()).collect()
    }

    /// |K_l| for every AP.
    pub fn column_loads(&self) -> Vec<usize> {
        self.a.column_iter().map(|c| c.iter().filter(|v| **v).count()).collect()
    }

    pub fn has_empty_row(&self) -> bool {
        self.row_sizes().contains(&0)
    }

    pub fn force_masters(&mut self, masters: &MasterAssignment) {
        for (k, &m) in masters.master_of.iter().enumerate() {
            self.a[(k, m)] = true;
        }
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.a.map(|v| if v { 1.0 } else { 0.0 })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.a.row_iter() {
            let cells: Vec<&str> = row.iter().map(|v| if *v { "1" } else { "0" }).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<bool>> = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(i, line)| {
                line.split(',')
                    .map(|c| match c.trim() {
                        "0" => Ok(false),
                        "1" => Ok(true),
                        other => Err(Error::Parse(format!("row {}: expected 0/1, got {other:?}", i + 1))),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let k = rows.len();
        let l = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::Parse("ragged cluster matrix".into()));
        }
        Ok(Self {
            a: DMatrix::from_fn(k, l, |i, j| rows[i][j]),
        })
    }

    pub fn summary(&self) -> ClusterSummary {
        ClusterSummary {
            connections: self.connections(),
            row_sizes: self.row_sizes(),
            column_loads: self.column_loads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterSummary {
    pub connections: usize,
    pub row_sizes: Vec<usize>,
    pub column_loads: Vec<usize>,
}

fn argmax_lowest(row: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub fn select_masters(beta: &GainMatrix) -> MasterAssignment {
    let master_of = beta
        .beta
        .row_iter()
        .map(|row| argmax_lowest(row.iter().copied()))
        .collect();
    MasterAssignment { master_of }
}

/// Greedy pilot assignment in ascending UE order: each UE takes the pilot whose
/// already-assigned users have the least total gain at its master.
pub fn assign_pilots(beta: &GainMatrix, masters: &MasterAssignment, tau_p: usize) -> Result<PilotAssignment> {
    if tau_p == 0 {
        return Err(Error::Config("tau_p must be >= 1".into()));
    }
    let k_total = beta.num_ues();
    let mut pilot_of = Vec::with_capacity(k_total);
    let mut pilot_sets: Vec<Vec<usize>> = vec![Vec::new(); tau_p];
    for k in 0..k_total {
        let m = masters.master_of[k];
        let mut best = 0;
        let mut best_load = f64::INFINITY;
        for (t, set) in pilot_sets.iter().enumerate() {
            let load: f64 = set.iter().map(|&i| beta.get(i, m)).sum();
            if load < best_load {
                best = t;
                best_load = load;
            }
        }
        pilot_sets[best].push(k);
        pilot_of.push(best);
    }
    Ok(PilotAssignment { pilot_of, pilot_sets })
}

/// Each UE connects to its `m` strongest APs (lower index wins ties).
pub fn top_m_clusters(beta: &GainMatrix, m: usize) -> Result<ClusterMatrix> {
    let l = beta.num_aps();
    if m == 0 || m > l {
        return Err(Error::Config(format!("top-m needs 1 <= m <= {l}, got {m}")));
    }
    let mut out = ClusterMatrix::empty(beta.num_ues(), l);
    for k in 0..beta.num_ues() {
        let mut idx: Vec<usize> = (0..l).collect();
        // stable sort keeps lower indices first among equal gains
        idx.sort_by(|&x, &y| beta.get(k, y).total_cmp(&beta.get(k, x)));
        for &ap in &idx[..m] {
            out.set(k, ap, true);
        }
    }
    Ok(out)
}

/// Every AP serves, per pilot, the co-pilot UE it sees strongest.
///
/// The rule is applied literally: a UE that is never the strongest on its
/// pilot at any AP stays unserved (empty row, zero SE).
pub fn pilot_strategy_clusters(beta: &GainMatrix, pilots: &PilotAssignment) -> ClusterMatrix {
    let (k_total, l_total) = (beta.num_ues(), beta.num_aps());
    let mut out = ClusterMatrix::empty(k_total, l_total);
    for l in 0..l_total {
        for set in pilots.pilot_sets.iter().filter(|s| !s.is_empty()) {
            let best = set[argmax_lowest(set.iter().map(|&k| beta.get(k, l)))];
            out.set(best, l, true);
        }
    }
    out
}

/// Hard decisions from connection probabilities: strict `prob > mu`, then the
/// master link of every UE is switched on.
pub fn apply_threshold(probs: &DMatrix<f64>, mu: f64, masters: &MasterAssignment) -> Result<ClusterMatrix> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let mut out = ClusterMatrix {
        a: probs.map(|p| p > mu),
    };
    out.force_masters(masters);
    Ok(out)
}
