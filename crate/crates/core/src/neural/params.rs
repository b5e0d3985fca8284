//! Parameter storage, initialization and the checkpoint file format.
//!
//! All trainable weights live in one flat `Vec<f64>`; [`Layout`] records where
//! each block starts. Order in the buffer (and in checkpoints):
//!
//! 1. forward LSTM: `W` (d x 4q, input-major), `U` (q x 4q, input-major), `b` (4q)
//! 2. backward LSTM: same blocks
//! 3. each FC layer: `W` (in x out, input-major), `b` (out)
//!
//! Gate order inside every 4q block is forget, input, output, candidate.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "CFBL" | version u32 | input u32 | hidden u32 | n_fc u32 | fc widths u32 x n_fc
//! | flags u32 (bit 0: pilot one-hot input) | config hash [u8; 32] | count u64 | f64 x count
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFBL";
pub const CHECKPOINT_VERSION: u32 = 1;
const FLAG_PILOT_INPUT: u32 = 1;

/// Structural description of a policy network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Per-UE input width d.
    pub input: usize,
    /// LSTM hidden width q.
    pub hidden: usize,
    /// FC layer widths; the last one is the number of AP outputs.
    pub fc: Vec<usize>,
    pub pilot_input: bool,
}

impl ModelShape {
    pub fn outputs(&self) -> usize {
        *self.fc.last().expect("validated shape has an FC head")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.fc.is_empty() || self.fc.contains(&0) {
            return Err(Error::Config(format!("degenerate model shape {self:?}")));
        }
        Ok(())
    }

    /// `2 * 4q(d + q + 1) + sum_layers (in * out + out)`.
    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmBlock {
    pub w: usize,
    pub u: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcBlock {
    pub w: usize,
    pub b: usize,
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub forward: LstmBlock,
    pub backward: LstmBlock,
    pub fc: Vec<FcBlock>,
    pub total: usize,
}

impl Layout {
    pub fn new(shape: &ModelShape) -> Self {
        let (d, q) = (shape.input, shape.hidden);
        let mut at = 0;
        let mut lstm = || {
            let w = at;
            let u = w + d * 4 * q;
            let b = u + q * 4 * q;
            at = b + 4 * q;
            LstmBlock { w, u, b }
        };
        let forward = lstm();
        let backward = lstm();
        let mut fc = Vec::with_capacity(shape.fc.len());
        let mut inputs = q;
        for &outputs in &shape.fc {
            let w = at;
            let b = w + inputs * outputs;
            at = b + outputs;
            fc.push(FcBlock { w, b, inputs, outputs });
            inputs = outputs;
        }
        Self {
            forward,
            backward,
            fc,
            total: at,
        }
    }
}

/// All trainable weights of one policy network (also used for gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    layout: Layout,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: &ModelShape) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::new(shape);
        let data = vec![0.0; layout.total];
        Ok(Self {
            shape: shape.clone(),
            layout,
            data,
        })
    }

    /// Weights uniform in `[-1/sqrt(q), 1/sqrt(q)]`, biases zero.
    pub fn init<R: Rng + ?Sized>(shape: &ModelShape, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let bound = 1.0 / (shape.hidden as f64).sqrt();
        let mut weight_ranges = vec![
            p.layout.forward.w..p.layout.forward.b,
            p.layout.backward.w..p.layout.backward.b,
        ];
        weight_ranges.extend(p.layout.fc.iter().map(|f| f.w..f.b));
        for r in weight_ranges {
            for v in &mut p.data[r] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn encode(&self, config_hash: &[u8; 32]) -> Vec<u8> {
        let s = &self.shape;
        let mut out = Vec::with_capacity(64 + 8 * self.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let put = |v: u32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
        put(CHECKPOINT_VERSION, &mut out);
        put(s.input as u32, &mut out);
        put(s.hidden as u32, &mut out);
        put(s.fc.len() as u32, &mut out);
        for &w in &s.fc {
            put(w as u32, &mut out);
        }
        put(if s.pilot_input { FLAG_PILOT_INPUT } else { 0 }, &mut out);
        out.extend_from_slice(config_hash);
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`encode`](Self::encode); returns the parameters and the
    /// config hash stored in the header.
    pub fn decode(bytes: &[u8]) -> Result<(Self, [u8; 32])> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error_at(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error_at(4, &format!("unsupported version {version}")));
        }
        let input = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let n_fc_at = r.pos;
        let n_fc = r.u32()? as usize;
        if n_fc == 0 || n_fc > 64 {
            return Err(r.error_at(n_fc_at, &format!("implausible FC depth {n_fc}")));
        }
        let fc = (0..n_fc).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let flags_at = r.pos;
        let flags = r.u32()?;
        if flags & !FLAG_PILOT_INPUT != 0 {
            return Err(r.error_at(flags_at, &format!("unknown flags {flags:#x}")));
        }
        let shape = ModelShape {
            input,
            hidden,
            fc,
            pilot_input: flags & FLAG_PILOT_INPUT != 0,
        };
        shape.validate().map_err(|e| r.error_at(8, &e.to_string()))?;
        let mut hash = [0u8; 32];
        hash.copy_from_slice(r.take(32)?);
        let count_at = r.pos;
        let count = r.u64()? as usize;
        let mut params = Self::zeros(&shape)?;
        if count != params.len() {
            return Err(r.error_at(
                count_at,
                &format!("header implies {} parameters, file declares {count}", params.len()),
            ));
        }
        for v in params.data.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes"));
        }
        Ok((params, hash))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error_at(self.pos, &format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn error_at(&self, offset: usize, reason: &str) -> Error {
        Error::Checkpoint {
            offset,
            reason: reason.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn shape(input: usize, hidden: usize, fc: &[usize]) -> ModelShape {
        ModelShape {
            input,
            hidden,
            fc: fc.to_vec(),
            pilot_input: false,
        }
    }

    #[test]
    fn reference_parameter_counts() {
        // Independent formula: 2 LSTMs with 4 gates of (d + q + 1) q weights each.
        let count = |d: usize, q: usize, fc: &[usize]| {
            let mut n = 2 * 4 * q * (d + q + 1);
            let mut prev = q;
            for &w in fc {
                n += prev * w + w;
                prev = w;
            }
            n
        };
        let full = shape(27, 512, &[256, 128, 25]);
        assert_eq!(full.param_count(), count(27, 512, &[256, 128, 25]));
        assert_eq!(full.param_count(), 2_379_289);
        let compressed = shape(11, 256, &[128, 64, 9]);
        assert_eq!(compressed.param_count(), count(11, 256, &[128, 64, 9]));
        assert!(ModelParams::zeros(&compressed).is_ok());
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let s = shape(5, 16, &[8, 3]);
        let p = ModelParams::init(&s, &mut rng::stream(1, &[])).unwrap();
        let bound = 0.25;
        assert!(p.data.iter().all(|v| v.abs() <= bound));
        let l = p.layout();
        assert!(p.data[l.forward.b..l.forward.b + 64].iter().all(|v| *v == 0.0));
        assert!(p.data[l.fc[1].b..].iter().all(|v| *v == 0.0));
        assert!(p.data[l.fc[1].w..l.fc[1].b].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let mut s = shape(6, 4, &[5, 3]);
        s.pilot_input = true;
        let p = ModelParams::init(&s, &mut rng::stream(2, &[])).unwrap();
        let hash = [7u8; 32];
        let bytes = p.encode(&hash);
        let (q, h) = ModelParams::decode(&bytes).unwrap();
        assert_eq!(h, hash);
        assert_eq!(q, p);
        assert_eq!(q.encode(&h), bytes);
    }

    #[test]
    fn corrupt_checkpoints_report_offsets() {
        let p = ModelParams::init(&shape(3, 2, &[2]), &mut rng::stream(3, &[])).unwrap();
        let bytes = p.encode(&[0; 32]);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelParams::decode(&bad), Err(Error::Checkpoint { offset: 0, .. })));

        let truncated = &bytes[..bytes.len() - 3];
        match ModelParams::decode(truncated) {
            Err(Error::Checkpoint { offset, .. }) => assert_eq!(offset, bytes.len() - 8),
            other => panic!("{other:?}"),
        }

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(ModelParams::decode(&extra), Err(Error::Checkpoint { .. })));
    }
}
