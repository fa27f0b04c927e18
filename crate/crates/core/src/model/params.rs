use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Gradient buffers keyed by entry name. Only trainable entries get one.
pub type GradStore = BTreeMap<String, Mat>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub trainable: bool,
    pub value: Mat,
}

/// Named parameter matrices in insertion order, each with a trainable flag.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ParamEntry>", into = "Vec<ParamEntry>")]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl TryFrom<Vec<ParamEntry>> for ParamStore {
    type Error = Error;

    fn try_from(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut store = ParamStore::default();
        for e in entries {
            store.insert(e.name, e.value, e.trainable)?;
        }
        Ok(store)
    }
}

impl From<ParamStore> for Vec<ParamEntry> {
    fn from(s: ParamStore) -> Self {
        s.entries
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(
                "parameter store",
                format!("duplicate entry '{name}'"),
            ));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            trainable,
            value,
        });
        Ok(())
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        Ok(&self.entries[self.position(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        let i = self.position(name)?;
        Ok(&mut self.entries[i].value)
    }

    /// Replaces an entry's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Mat) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "'{name}' is {:?}, new value {:?}",
                    slot.shape(),
                    value.shape()
                ),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.entries[self.position(name)?].trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = self.position(name)?;
        self.entries[i].trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars, optionally restricted to trainable entries.
    pub fn scalar_count(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable || !trainable_only)
            .map(|e| e.value.rows() * e.value.cols())
            .sum()
    }

    /// Checks that every buffer in `grads` names a trainable entry of the
    /// same shape.
    pub fn check_grads(&self, grads: &GradStore) -> Result<()> {
        for (name, g) in grads {
            let i = self.position(name)?;
            let e = &self.entries[i];
            if !e.trainable {
                return Err(Error::invalid("gradient", format!("'{name}' is frozen")));
            }
            if e.value.shape() != g.shape() {
                return Err(Error::shape(
                    "gradient",
                    format!(
                        "'{name}' is {:?}, gradient {:?}",
                        e.value.shape(),
                        g.shape()
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_get_and_duplicates() {
        let mut s = ParamStore::new();
        s.insert("w", Mat::identity(2), true).unwrap();
        s.insert("b", Mat::zeros(2, 1), false).unwrap();
        assert!(s.insert("w", Mat::zeros(1, 1), true).is_err());
        assert_eq!(s.get("w").unwrap(), &Mat::identity(2));
        assert!(matches!(s.get("nope"), Err(Error::UnknownLayer(_))));
        assert_eq!(s.trainable_names(), vec!["w".to_string()]);
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["w", "b"]);
        assert!(s.set("w", Mat::zeros(3, 3)).is_err());
    }

    #[test]
    fn grads_must_match_trainable_entries() {
        let mut s = ParamStore::new();
        s.insert("w", Mat::identity(2), true).unwrap();
        s.insert("b", Mat::zeros(2, 1), false).unwrap();
        let mut g = GradStore::new();
        g.insert("w".into(), Mat::zeros(2, 2));
        assert!(s.check_grads(&g).is_ok());
        g.insert("b".into(), Mat::zeros(2, 1));
        assert!(s.check_grads(&g).is_err());
        let mut g = GradStore::new();
        g.insert("w".into(), Mat::zeros(2, 1));
        assert!(s.check_grads(&g).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut s = ParamStore::new();
        s.insert(
            "a",
            Mat::from_vec(1, 3, vec![0.1, -1e-300, 7.0 / 3.0]).unwrap(),
            true,
        )
        .unwrap();
        s.insert("b", Mat::zeros(2, 1), false).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: ParamStore = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let dup = r#"[{"name":"a","trainable":true,"value":{"shape":[1,1],"values":[1.0]}},
                      {"name":"a","trainable":true,"value":{"shape":[1,1],"values":[1.0]}}]"#;
        assert!(serde_json::from_str::<ParamStore>(dup).is_err());
    }
}
