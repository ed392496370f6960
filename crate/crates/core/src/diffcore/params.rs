//! Named parameter collections and their on-disk encoding.
//!
//! A serialized `ParamSet` is a JSON object mapping each parameter name to
//! `{"shape": [..], "data": "<base64>"}`, where `data` holds the row-major
//! values as little-endian IEEE-754 `f64` bytes (standard base64 alphabet
//! with padding). The encoding round-trips bit-exactly, including signed
//! zeros.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::array::DenseArray;
use crate::error::{Error, Result};

/// Parameters of one network, keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, DenseArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&DenseArray> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseArray)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(DenseArray::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), DenseArray::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Config(format!(
                "parameter sets differ in size: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (name, a) in &self.entries {
            match other.entries.get(name) {
                Some(b) if a.shape() == b.shape() => {}
                Some(b) => {
                    return Err(Error::Config(format!(
                        "shape mismatch for {name:?}: {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name:?}"))),
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(DenseArray::is_finite)
    }

    /// Euclidean norm over every scalar.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|a| a.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.entries.values_mut() {
            for v in a.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `target' = (1 - rho) * target + rho * online`, elementwise.
pub fn ema_update(target: &ParamSet, online: &ParamSet, rho: f64) -> Result<ParamSet> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("EMA coefficient must lie in (0, 1], got {rho}")));
    }
    target.check_compatible(online)?;
    let mut out = target.clone();
    for (name, t) in out.entries.iter_mut() {
        let o = &online.entries[name];
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = (1.0 - rho) * *tv + rho * ov;
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct EncodedArray {
    shape: Vec<usize>,
    data: String,
}

impl Serialize for ParamSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let encoded: BTreeMap<&String, EncodedArray> = self
            .entries
            .iter()
            .map(|(k, v)| {
                let bytes: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
                (k, EncodedArray { shape: v.shape().to_vec(), data: STANDARD.encode(bytes) })
            })
            .collect();
        encoded.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParamSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let encoded = BTreeMap::<String, EncodedArray>::deserialize(deserializer)?;
        let mut entries = BTreeMap::new();
        for (name, enc) in encoded {
            let bytes = STANDARD.decode(enc.data.as_bytes()).map_err(D::Error::custom)?;
            if bytes.len() % 8 != 0 {
                return Err(D::Error::custom(format!("{name}: byte length not a multiple of 8")));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let arr = DenseArray::new(enc.shape, data).map_err(D::Error::custom)?;
            entries.insert(name, arr);
        }
        Ok(ParamSet { entries })
    }
}
