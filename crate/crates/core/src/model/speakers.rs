use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Embedding, ParamBuilder};

/// Speaker id → stable row index. Indices are handed out in registration
/// order and never reassigned.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerRegistry {
    ids: BTreeMap<String, u32>,
}

impl SpeakerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Returns the existing index or assigns the next free one.
    pub fn register(&mut self, id: &str, capacity: usize) -> Result<u32> {
        if let Some(&i) = self.ids.get(id) {
            return Ok(i);
        }
        let next = self.ids.len();
        if next >= capacity {
            return Err(Error::Config(format!(
                "speaker table is full ({capacity} entries); cannot add `{id}`"
            )));
        }
        self.ids.insert(id.to_string(), next as u32);
        Ok(next as u32)
    }

    pub fn index(&self, id: &str) -> Result<u32> {
        self.ids
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownSpeaker(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains_key(id)
    }

    /// `(id, index)` pairs in index order.
    pub fn entries(&self) -> Vec<(String, u32)> {
        let mut v: Vec<_> = self.ids.iter().map(|(k, &i)| (k.clone(), i)).collect();
        v.sort_by_key(|(_, i)| *i);
        v
    }
}

/// Fixed-capacity embedding table for the speaker condition.
#[derive(Debug, Clone)]
pub struct SpeakerTable {
    pub embedding: Embedding,
    capacity: usize,
}

impl SpeakerTable {
    pub fn new(b: &ParamBuilder<'_>, capacity: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            embedding: Embedding::new(b, capacity, dim, 1.0)?,
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `(B, E, 1)` embeddings for the given row indices.
    pub fn forward(&self, indices: &[u32]) -> Result<Tensor> {
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= self.capacity) {
            return Err(Error::Contract(format!("speaker index {bad} beyond table capacity {}", self.capacity)));
        }
        Ok(self.embedding.forward(indices)?.unsqueeze(2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_is_stable_and_strict() {
        let mut r = SpeakerRegistry::new();
        assert_eq!(r.register("IDM1", 4).unwrap(), 0);
        assert_eq!(r.register("CDF1", 4).unwrap(), 1);
        assert_eq!(r.register("IDM1", 4).unwrap(), 0);
        assert_eq!(r.index("CDF1").unwrap(), 1);
        assert_eq!(r.index("nobody").unwrap_err().kind(), "unknown_speaker");
        r.register("a", 4).unwrap();
        r.register("b", 4).unwrap();
        assert!(r.register("c", 4).is_err());
        let json = serde_json::to_string(&r).unwrap();
        let back: SpeakerRegistry = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.entries()[1], ("CDF1".to_string(), 1));
    }
}
