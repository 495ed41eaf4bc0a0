//! Named parameters with ownership tags, roles and trainable flags.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Owner, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormWeight,
    NormBias,
    RelPosBias,
    Scale,
}

impl ParamRole {
    /// Counted as a bias term by BitFit.
    pub fn is_bias(self) -> bool {
        matches!(self, ParamRole::Bias | ParamRole::NormBias | ParamRole::RelPosBias)
    }

    pub fn is_norm(self) -> bool {
        matches!(self, ParamRole::NormWeight | ParamRole::NormBias)
    }
}

/// Where in the network a parameter lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "site")]
pub enum Site {
    PatchEmbed,
    Block { stage: usize, block: usize },
    Merge { stage: usize },
    HighwayMerge { stage: usize },
    FpnNorm { stage: usize },
    Lateral { stage: usize },
    Classifier,
}

/// φ_F (frozen), φ_A (trainable inside the backbone, inserted or selected) and
/// φ_O (trainable outside the backbone).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Frozen,
    Adapter,
    Outside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub owner: Owner,
    pub role: ParamRole,
    pub site: Site,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn group(&self) -> Group {
        match (self.trainable, self.owner) {
            (false, _) => Group::Frozen,
            (true, Owner::Backbone | Owner::Adapter) => Group::Adapter,
            (true, Owner::Neck | Owner::Head) => Group::Outside,
        }
    }

    /// Table scope: everything in or inserted into the backbone plus the FPN
    /// norms, but not the lateral layers or classifier.
    pub fn in_table_scope(&self) -> bool {
        !matches!(self.site, Site::Lateral { .. } | Site::Classifier)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
}

impl ParamRegistry {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).group() == group).collect()
    }

    pub fn count(&self, pred: impl Fn(&ParamEntry) -> bool) -> u64 {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.numel() as u64).sum()
    }

    pub fn trainable_count(&self) -> u64 {
        self.count(|e| e.trainable)
    }

    pub fn total_count(&self) -> u64 {
        self.count(|_| true)
    }

    fn push(&mut self, entry: ParamEntry) -> Result<ParamId> {
        if self.find(&entry.name).is_some() {
            return Err(Error::Config(format!("duplicate parameter `{}`", entry.name)));
        }
        self.entries.push(entry);
        Ok(ParamId(self.entries.len() - 1))
    }
}

/// Parameter values alongside their registry.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    pub registry: ParamRegistry,
    values: Vec<Vec<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            registry: ParamRegistry::default(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        owner: Owner,
        role: ParamRole,
        site: Site,
        value: Vec<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if value.len() != expected {
            return Err(Error::ShapeData {
                shape: shape.to_vec(),
                expected,
                got: value.len(),
            });
        }
        let id = self.registry.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            owner,
            role,
            site,
            trainable: false,
        })?;
        self.values.push(value);
        Ok(id)
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Vec<T>] {
        &self.values
    }

    /// Records every parameter as a leaf on `tape`, tagged with its owner.
    /// Each parameter is bound exactly once, so shared uses share a node.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let prev = tape.owner();
        let mut tensors = Vec::with_capacity(self.values.len());
        for (entry, value) in self.registry.entries.iter().zip(&self.values) {
            tape.set_owner(entry.owner);
            tensors.push(tape.param(&entry.shape, value.clone(), entry.trainable)?);
        }
        tape.set_owner(prev);
        Ok(Bound { tensors })
    }

    /// Order-sensitive FNV-1a digest over the bit patterns of the selected values.
    pub fn checksum(&self, pred: impl Fn(&ParamEntry) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (entry, value) in self.registry.entries.iter().zip(&self.values) {
            if !pred(entry) {
                continue;
            }
            for v in value {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Tape tensors for every parameter of one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Parameter whose tape node is `id`, if any.
    pub fn param_of(&self, id: crate::tape::NodeId) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.id() == id).map(ParamId)
    }
}

impl Index<ParamId> for Bound {
    type Output = Tensor;

    fn index(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.add("a.w", &[2, 3], Owner::Backbone, ParamRole::Weight, Site::PatchEmbed, vec![0.5; 6])
            .unwrap();
        s.add("b.b", &[3], Owner::Head, ParamRole::Bias, Site::Classifier, vec![1.0; 3])
            .unwrap();
        s
    }

    #[test]
    fn duplicate_and_misshaped_entries_rejected() {
        let mut s = store();
        assert!(s
            .add("a.w", &[1], Owner::Backbone, ParamRole::Weight, Site::PatchEmbed, vec![0.0])
            .is_err());
        assert!(matches!(
            s.add("c", &[2, 2], Owner::Neck, ParamRole::Weight, Site::Classifier, vec![0.0; 3]),
            Err(Error::ShapeData { expected: 4, got: 3, .. })
        ));
        assert_eq!(s.registry.len(), 2);
    }

    #[test]
    fn groups_follow_flag_and_owner() {
        let mut s = store();
        assert_eq!(s.registry.group_ids(Group::Frozen).len(), 2);
        s.registry.get_mut(ParamId(0)).trainable = true;
        s.registry.get_mut(ParamId(1)).trainable = true;
        assert_eq!(s.registry.get(ParamId(0)).group(), Group::Adapter);
        assert_eq!(s.registry.get(ParamId(1)).group(), Group::Outside);
        assert_eq!(s.registry.trainable_count(), 9);
    }

    #[test]
    fn checksum_sees_only_selected_values() {
        let mut s = store();
        let frozen = |e: &ParamEntry| e.owner == Owner::Backbone;
        let before = s.checksum(frozen);
        s.value_mut(ParamId(1))[0] = 2.0;
        assert_eq!(s.checksum(frozen), before);
        s.value_mut(ParamId(0))[5] = -0.5;
        assert_ne!(s.checksum(frozen), before);
    }

    #[test]
    fn bind_tags_owners_and_restores() {
        let s = store();
        let mut tape = Tape::<f64>::new();
        tape.set_owner(Owner::Neck);
        let b = s.bind(&mut tape).unwrap();
        assert_eq!(tape.owner(), Owner::Neck);
        assert_eq!(tape.node(b[ParamId(1)].id()).unwrap().owner(), Owner::Head);
        assert_eq!(b.param_of(b[ParamId(0)].id()), Some(ParamId(0)));
    }
}
