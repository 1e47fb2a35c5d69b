//! Named parameters with RMSProp state, plus the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "LGCK" | u32 version | u64 fingerprint | u64 seed | u32 entry count
//! entry: u8 kind (0 param, 1 rmsprop state, 2 buffer) | u32 name len | name
//!        | u32 rank | u64 dims... | f64 values...
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::array::Array;
use super::tensor::{Gradients, Tensor};
use super::AutodiffError;

const MAGIC: &[u8; 4] = b"LGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Array,
    sq_avg: Array,
}

/// Trainable parameters keyed by name, each with one RMSProp state slot, and
/// non-trainable buffers (running normalization statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Slot>,
    buffers: BTreeMap<String, Array>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            decay: 0.9,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<(), AutodiffError> {
        if !(self.lr > 0.0 && self.decay > 0.0 && self.decay < 1.0 && self.eps > 0.0) {
            return Err(AutodiffError::InvalidHyperparameter(format!(
                "rmsprop needs lr > 0, 0 < decay < 1, eps > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// What an optimizer step touched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepSummary {
    pub updated: usize,
    /// Parameters that received no gradient and were left untouched.
    pub missing: Vec<String>,
}

/// Parameters bound as graph leaves for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    tensors: BTreeMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Tensor, AutodiffError> {
        self.tensors
            .get(name)
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Extracts the gradient value of every bound parameter that has one.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.tensors
            .iter()
            .filter_map(|(name, t)| grads.get(t).map(|g| (name.clone(), g.value().clone())))
            .collect()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let sq_avg = Array::zeros(value.shape());
        self.params.insert(name.into(), Slot { value, sq_avg });
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Array) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name).map(|s| &mut s.value)
    }

    pub fn optimizer_state(&self, name: &str) -> Option<&Array> {
        self.params.get(name).map(|s| &s.sq_avg)
    }

    pub fn buffer(&self, name: &str) -> Option<&Array> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.buffers.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|s| s.value.len()).sum()
    }

    /// Wraps every parameter as a fresh requires-grad leaf.
    pub fn bind(&self) -> BoundParams {
        BoundParams {
            tensors: self
                .params
                .iter()
                .map(|(k, s)| (k.clone(), Tensor::leaf(s.value.clone())))
                .collect(),
        }
    }

    /// Wraps every parameter as a constant (inference).
    pub fn bind_frozen(&self) -> BoundParams {
        BoundParams {
            tensors: self
                .params
                .iter()
                .map(|(k, s)| (k.clone(), Tensor::constant(s.value.clone())))
                .collect(),
        }
    }

    /// One RMSProp update per element:
    /// `s <- decay*s + (1-decay)*g^2`, `p <- p - lr*g/(sqrt(s) + eps)`.
    pub fn rmsprop_step(
        &mut self,
        grads: &BTreeMap<String, Array>,
        opt: RmsProp,
    ) -> Result<StepSummary, AutodiffError> {
        opt.validate()?;
        let mut summary = StepSummary::default();
        for (name, slot) in self.params.iter_mut() {
            let Some(g) = grads.get(name) else {
                summary.missing.push(name.clone());
                continue;
            };
            if g.shape() != slot.value.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "rmsprop_step",
                    lhs: slot.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let s = slot.sq_avg.data_mut();
            let p = slot.value.data_mut();
            for ((p, s), &g) in p.iter_mut().zip(s.iter_mut()).zip(g.data()) {
                *s = opt.decay * *s + (1.0 - opt.decay) * g * g;
                *p -= opt.lr * g / (s.sqrt() + opt.eps);
            }
            summary.updated += 1;
        }
        Ok(summary)
    }

    /// Clamps every parameter into `[-clip, clip]`.
    pub fn clamp_all(&mut self, clip: f64) {
        for slot in self.params.values_mut() {
            for v in slot.value.data_mut() {
                *v = v.clamp(-clip, clip);
            }
        }
    }

    pub fn to_bytes(&self, header: CheckpointHeader) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header.version.to_le_bytes());
        out.extend_from_slice(&header.fingerprint.to_le_bytes());
        out.extend_from_slice(&header.seed.to_le_bytes());
        let count = 2 * self.params.len() + self.buffers.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let mut entry = |kind: u8, name: &str, a: &Array| {
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, slot) in &self.params {
            entry(0, name, &slot.value);
            entry(1, name, &slot.sq_avg);
        }
        for (name, buf) in &self.buffers {
            entry(2, name, buf);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, Self), AutodiffError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(AutodiffError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let header = CheckpointHeader {
            version,
            fingerprint: r.u64()?,
            seed: r.u64()?,
        };
        let count = r.u32()? as usize;
        let mut store = ParameterStore::new();
        let mut states = BTreeMap::new();
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| AutodiffError::Checkpoint("name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let a = Array::new(shape, data)?;
            match kind {
                0 => store.insert(name, a),
                1 => {
                    states.insert(name, a);
                }
                2 => store.insert_buffer(name, a),
                k => return Err(AutodiffError::Checkpoint(format!("unknown entry kind {k}"))),
            }
        }
        for (name, state) in states {
            let slot = store
                .params
                .get_mut(&name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("state without parameter {name}")))?;
            if state.shape() != slot.value.shape() {
                return Err(AutodiffError::Checkpoint(format!("state shape mismatch for {name}")));
            }
            slot.sq_avg = state;
        }
        if r.pos != bytes.len() {
            return Err(AutodiffError::Checkpoint("trailing bytes".into()));
        }
        Ok((header, store))
    }

    pub fn save(&self, path: &Path, header: CheckpointHeader) -> Result<(), AutodiffError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(header))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(CheckpointHeader, Self), AutodiffError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub fingerprint: u64,
    pub seed: u64,
}

impl CheckpointHeader {
    pub fn new(fingerprint: u64, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            fingerprint,
            seed,
        }
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AutodiffError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| AutodiffError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, AutodiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, AutodiffError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, AutodiffError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Array::from_vec(vec![p]));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = ParameterStore::new();
        s.insert("w", Array::from_vec(vec![0.3, -1.2, 4.0]));
        let before = s.clone();
        let grads = BTreeMap::from([("w".to_string(), Array::zeros(&[3]))]);
        s.rmsprop_step(&grads, RmsProp::new(0.1)).unwrap();
        assert_eq!(s.get("w"), before.get("w"));
    }

    #[test]
    fn single_scalar_step_matches_hand_arithmetic() {
        // Independent scalar simulation of the update rule.
        let (mut p, mut sq) = (1.0f64, 0.0f64);
        let (lr, decay, eps, g) = (0.1, 0.9, 1e-8, 1.0);
        sq = decay * sq + (1.0 - decay) * g * g;
        p -= lr * g / (sq.sqrt() + eps);
        assert!((sq - 0.1).abs() < 1e-15);
        assert!((p - 0.683772).abs() < 1e-6);

        let mut s = scalar_store(1.0);
        let grads = BTreeMap::from([("p".to_string(), Array::from_vec(vec![1.0]))]);
        s.rmsprop_step(&grads, RmsProp { lr, decay, eps }).unwrap();
        assert!((s.optimizer_state("p").unwrap().item() - 0.1).abs() < 1e-15);
        assert!((s.get("p").unwrap().item() - p).abs() < 1e-15);
    }

    #[test]
    fn repeated_identical_steps_shrink() {
        let mut s = scalar_store(1.0);
        let grads = BTreeMap::from([("p".to_string(), Array::from_vec(vec![1.0]))]);
        let opt = RmsProp::new(0.1);
        let p0 = s.get("p").unwrap().item();
        s.rmsprop_step(&grads, opt).unwrap();
        let p1 = s.get("p").unwrap().item();
        s.rmsprop_step(&grads, opt).unwrap();
        let p2 = s.get("p").unwrap().item();
        assert!((p2 - p1).abs() < (p1 - p0).abs());
    }

    #[test]
    fn missing_gradient_is_reported_and_untouched() {
        let mut s = scalar_store(2.0);
        s.insert("q", Array::from_vec(vec![5.0]));
        let grads = BTreeMap::from([("p".to_string(), Array::from_vec(vec![1.0]))]);
        let summary = s.rmsprop_step(&grads, RmsProp::new(0.1)).unwrap();
        assert_eq!(summary.updated, 1);
        assert_eq!(summary.missing, vec!["q".to_string()]);
        assert_eq!(s.get("q").unwrap().item(), 5.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut s = scalar_store(1.0);
        let g = BTreeMap::new();
        for opt in [
            RmsProp { lr: 0.0, decay: 0.9, eps: 1e-8 },
            RmsProp { lr: 0.1, decay: 1.0, eps: 1e-8 },
            RmsProp { lr: 0.1, decay: 0.9, eps: 0.0 },
        ] {
            assert!(s.rmsprop_step(&g, opt).is_err());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = ParameterStore::new();
        s.insert("a.w", Array::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        s.insert("b", Array::scalar(std::f64::consts::PI));
        s.insert_buffer("a.running_mean", Array::from_vec(vec![1.0, 2.0]));
        let grads = BTreeMap::from([("b".to_string(), Array::scalar(0.5))]);
        s.rmsprop_step(&grads, RmsProp::new(0.01)).unwrap();
        let header = CheckpointHeader::new(0xdead_beef, 42);
        let bytes = s.to_bytes(header);
        let (h2, s2) = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(h2, header);
        assert_eq!(s2.to_bytes(h2), bytes);
        let bits = |a: &Array| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(s2.get("a.w").unwrap()), bits(s.get("a.w").unwrap()));
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let s = scalar_store(1.0);
        let bytes = s.to_bytes(CheckpointHeader::new(1, 2));
        assert!(ParameterStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ParameterStore::from_bytes(b"NOPE").is_err());
    }
}
