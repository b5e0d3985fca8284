//! Per-UE feature vectors and the master-centric chain order.

use nalgebra::DMatrix;

use crate::association::PilotAssignment;
use crate::geometry::{linear_to_db, GainMatrix};

/// Offset and scale mapping gains in dB to roughly `[0, 1]`.
pub const GAIN_SHIFT_DB: f64 = 110.0;
pub const GAIN_SCALE_DB: f64 = 40.0;
/// Value written into input slots that do not exist for this UE (masked APs).
pub const MASKED_INPUT: f64 = -1.0;

pub fn encode_gain(beta_linear: f64) -> f64 {
    (linear_to_db(beta_linear) + GAIN_SHIFT_DB) / GAIN_SCALE_DB
}

/// Input width for `num_aps` gain slots plus position and optional pilot one-hot.
pub fn input_width(num_aps: usize, pilot_one_hot: Option<usize>) -> usize {
    num_aps + 2 + pilot_one_hot.unwrap_or(0)
}

/// Per-UE features: encoded gains to every AP, normalized position and
/// (optionally) the pilot index one-hot.
pub fn build_inputs(
    beta: &GainMatrix,
    ue_xy: &[[f64; 2]],
    pilots: Option<&PilotAssignment>,
    area_side: f64,
) -> DMatrix<f64> {
    let (k_total, l_total) = (beta.num_ues(), beta.num_aps());
    assert_eq!(ue_xy.len(), k_total, "positions and gain rows disagree");
    let width = input_width(l_total, pilots.map(|p| p.tau_p()));
    let mut x = DMatrix::zeros(k_total, width);
    for k in 0..k_total {
        for l in 0..l_total {
            x[(k, l)] = encode_gain(beta.get(k, l));
        }
        x[(k, l_total)] = ue_xy[k][0] / area_side;
        x[(k, l_total + 1)] = ue_xy[k][1] / area_side;
        if let Some(p) = pilots {
            x[(k, l_total + 2 + p.pilot_of[k])] = 1.0;
        }
    }
    x
}

/// Contiguous run of chain positions that share a master AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub master: usize,
    pub start: usize,
    pub len: usize,
}

/// Processing order of the UEs through the recurrent layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainOrder {
    /// `order[pos]` is the UE (row index) at chain position `pos`.
    pub order: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl ChainOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Groups UEs by master AP (ascending AP index); inside a group UEs are sorted
/// by decreasing gain to their master, ties broken by ascending UE index.
pub fn order_chain(beta: &GainMatrix, master_of: &[usize]) -> ChainOrder {
    let gain_at_master: Vec<f64> = master_of.iter().enumerate().map(|(k, &m)| beta.get(k, m)).collect();
    order_chain_by(master_of, &gain_at_master)
}

/// [`order_chain`] on explicit per-UE master indices and master gains.
pub fn order_chain_by(master_of: &[usize], gain_at_master: &[f64]) -> ChainOrder {
    assert_eq!(master_of.len(), gain_at_master.len());
    let mut order: Vec<usize> = (0..master_of.len()).collect();
    order.sort_by(|&a, &b| {
        master_of[a]
            .cmp(&master_of[b])
            .then(gain_at_master[b].total_cmp(&gain_at_master[a]))
            .then(a.cmp(&b))
    });
    let mut segments: Vec<Segment> = Vec::new();
    for (pos, &k) in order.iter().enumerate() {
        match segments.last_mut() {
            Some(s) if s.master == master_of[k] => s.len += 1,
            _ => segments.push(Segment {
                master: master_of[k],
                start: pos,
                len: 1,
            }),
        }
    }
    ChainOrder { order, segments }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_encoding_maps_typical_range() {
        assert!((encode_gain(1e-11) - 0.0).abs() < 1e-12);
        assert!((encode_gain(1e-7) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chain_groups_by_master_then_gain() {
        let beta = GainMatrix::new(DMatrix::from_row_slice(
            5,
            2,
            &[0.1, 0.9, 0.5, 0.1, 0.3, 0.2, 0.3, 0.1, 0.05, 0.7],
        ))
        .unwrap();
        let masters = vec![1, 0, 0, 0, 1];
        let c = order_chain(&beta, &masters);
        // AP0: UE1 (0.5), then UE2 and UE3 tied at 0.3 in index order; AP1: UE0 (0.9), UE4 (0.7).
        assert_eq!(c.order, vec![1, 2, 3, 0, 4]);
        assert_eq!(
            c.segments,
            vec![
                Segment { master: 0, start: 0, len: 3 },
                Segment { master: 1, start: 3, len: 2 }
            ]
        );
    }

    #[test]
    fn inputs_layout() {
        let beta = GainMatrix::new(DMatrix::from_row_slice(2, 2, &[1e-9, 1e-10, 1e-8, 1e-11])).unwrap();
        let pilots = PilotAssignment::from_pilots(vec![1, 0], 3).unwrap();
        let x = build_inputs(&beta, &[[70.0, 140.0], [0.0, 700.0]], Some(&pilots), 700.0);
        assert_eq!(x.ncols(), input_width(2, Some(3)));
        assert!((x[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((x[(0, 2)] - 0.1).abs() < 1e-12);
        assert!((x[(1, 3)] - 1.0).abs() < 1e-12);
        assert_eq!(x[(0, 5)], 1.0);
        assert_eq!(x[(1, 4)], 1.0);
        assert_eq!(x.row(0).iter().filter(|v| **v == 1.0).count(), 1);
    }
}
