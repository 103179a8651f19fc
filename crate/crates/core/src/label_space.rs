//! Label-set algebra for the source and target domains.
//!
//! A [`LabelSpace`] partitions the source and target label sets into the
//! shared part and the two private parts. A [`NegativeClassTable`] maps
//! unordered pairs of positive source classes to the synthetic negative
//! class indices appended after the positive ones, so a classifier head
//! has `|Cs| + |Cn|` outputs.

use std::collections::BTreeSet;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense class identifier. Source classes occupy `0..num_positive`.
pub type ClassId = usize;

/// Source/target label sets with their derived partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    source: Vec<ClassId>,
    target: Vec<ClassId>,
    shared: Vec<ClassId>,
    source_private: Vec<ClassId>,
    target_private: Vec<ClassId>,
}

impl LabelSpace {
    /// Builds the label space from the two label sets and derives the
    /// shared/private partitions by set algebra. The intersection may be
    /// empty (the universal extreme).
    pub fn new<I, J>(source_labels: I, target_labels: J) -> Result<Self>
    where
        I: IntoIterator<Item = ClassId>,
        J: IntoIterator<Item = ClassId>,
    {
        let source: BTreeSet<ClassId> = source_labels.into_iter().collect();
        let target: BTreeSet<ClassId> = target_labels.into_iter().collect();
        if source.is_empty() {
            return Err(Error::InvalidConfig("source label set is empty".into()));
        }
        if target.is_empty() {
            return Err(Error::InvalidConfig("target label set is empty".into()));
        }
        let shared: Vec<ClassId> = source.intersection(&target).copied().collect();
        let source_private: Vec<ClassId> = source.difference(&target).copied().collect();
        let target_private: Vec<ClassId> = target.difference(&source).copied().collect();
        Ok(Self {
            source: source.into_iter().collect(),
            target: target.into_iter().collect(),
            shared,
            source_private,
            target_private,
        })
    }

    pub fn source_labels(&self) -> &[ClassId] {
        &self.source
    }

    pub fn target_labels(&self) -> &[ClassId] {
        &self.target
    }

    /// Shared labels `C = Cs ∩ Ct`.
    pub fn shared(&self) -> &[ClassId] {
        &self.shared
    }

    /// Source-private labels `Cs \ Ct`.
    pub fn source_private(&self) -> &[ClassId] {
        &self.source_private
    }

    /// Target-private labels `Ct \ Cs`.
    pub fn target_private(&self) -> &[ClassId] {
        &self.target_private
    }

    pub fn is_closed_set(&self) -> bool {
        self.source_private.is_empty() && self.target_private.is_empty()
    }

    pub fn contains_source(&self, label: ClassId) -> bool {
        self.source.binary_search(&label).is_ok()
    }

    pub fn contains_target(&self, label: ClassId) -> bool {
        self.target.binary_search(&label).is_ok()
    }

    pub fn is_target_private(&self, label: ClassId) -> bool {
        self.target_private.binary_search(&label).is_ok()
    }
}

/// Number of unordered pairs over `n` items, saturating at `usize::MAX`.
pub fn pair_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        n.checked_mul(n - 1).map(|x| x / 2).unwrap_or(usize::MAX)
    }
}

/// Bijection between unordered positive-class pairs and negative-class
/// output indices `num_positive .. num_positive + num_negative`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeClassTable {
    num_positive: usize,
    entries: Vec<(ClassId, ClassId)>,
}

impl NegativeClassTable {
    /// Builds the table. If `num_negative_requested` covers all
    /// `C(num_positive, 2)` pairs the full lexicographic enumeration is
    /// returned; otherwise a seeded uniform subset of that size, re-sorted
    /// lexicographically so indices do not depend on sampling order.
    pub fn build(num_positive: usize, num_negative_requested: usize, seed: u64) -> Result<Self> {
        if num_positive < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 positive classes to form pairs, got {num_positive}"
            )));
        }
        let mut pairs: Vec<(ClassId, ClassId)> = Vec::with_capacity(pair_count(num_positive));
        for i in 0..num_positive {
            for j in (i + 1)..num_positive {
                pairs.push((i, j));
            }
        }
        if num_negative_requested < pairs.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            pairs.shuffle(&mut rng);
            pairs.truncate(num_negative_requested);
            pairs.sort_unstable();
        }
        Ok(Self {
            num_positive,
            entries: pairs,
        })
    }

    pub fn num_positive(&self) -> usize {
        self.num_positive
    }

    pub fn num_negative(&self) -> usize {
        self.entries.len()
    }

    /// Total classifier width `K = |Cs| + |Cn|`.
    pub fn total_classes(&self) -> usize {
        self.num_positive + self.entries.len()
    }

    /// Pairs in index order; entry `r` owns output index `num_positive + r`.
    pub fn entries(&self) -> &[(ClassId, ClassId)] {
        &self.entries
    }

    /// Output index of the unordered pair `{a, b}`, if present.
    pub fn negative_index(&self, a: ClassId, b: ClassId) -> Option<usize> {
        let key = if a < b { (a, b) } else { (b, a) };
        self.entries
            .binary_search(&key)
            .ok()
            .map(|rank| self.num_positive + rank)
    }

    /// The pair owning `output_index`, if it is a negative index.
    pub fn pair_of(&self, output_index: usize) -> Option<(ClassId, ClassId)> {
        output_index
            .checked_sub(self.num_positive)
            .and_then(|rank| self.entries.get(rank))
            .copied()
    }

    fn from_entries(num_positive: usize, entries: Vec<(ClassId, ClassId)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &(i, j) in &entries {
            if i >= j || j >= num_positive {
                return Err(Error::InvalidConfig(format!(
                    "invalid negative pair ({i}, {j}) for {num_positive} positive classes"
                )));
            }
            if !seen.insert((i, j)) {
                return Err(Error::InvalidConfig(format!("duplicate negative pair ({i}, {j})")));
            }
        }
        let mut sorted = entries.clone();
        sorted.sort_unstable();
        if sorted != entries {
            return Err(Error::InvalidConfig(
                "negative table entries are not in lexicographic order".into(),
            ));
        }
        Ok(Self {
            num_positive,
            entries,
        })
    }
}

/// Which population a sample batch belongs to when diagnosing the
/// source-similarity ordering. Source roles are the only labeled ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleRole {
    SourceShared,
    SourcePrivate,
    NegativeSource,
    TargetShared,
    TargetPrivate,
    TargetAll,
}

impl SampleRole {
    pub fn is_source(self) -> bool {
        matches!(
            self,
            SampleRole::SourceShared | SampleRole::SourcePrivate | SampleRole::NegativeSource
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            SampleRole::SourceShared => "source-shared",
            SampleRole::SourcePrivate => "source-private",
            SampleRole::NegativeSource => "negative-source",
            SampleRole::TargetShared => "target-shared",
            SampleRole::TargetPrivate => "target-private",
            SampleRole::TargetAll => "target-all",
        }
    }
}

/// One image with an optional label. Pixels are `(channels, height, width)`
/// in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f64>,
    pub label: Option<ClassId>,
}

/// A collection of samples sharing one [`SampleRole`].
#[derive(Debug, Clone)]
pub struct SamplePopulation {
    role: SampleRole,
    samples: Vec<Sample>,
}

impl SamplePopulation {
    /// Labels must be present exactly on source-role samples.
    pub fn new(role: SampleRole, samples: Vec<Sample>) -> Result<Self> {
        for sample in &samples {
            if role.is_source() && sample.label.is_none() {
                return Err(Error::InvalidInput(format!(
                    "sample {} in a {} population is missing its label",
                    sample.id,
                    role.name()
                )));
            }
            if !role.is_source() && sample.label.is_some() {
                return Err(Error::InvalidInput(format!(
                    "sample {} in a {} population carries a label",
                    sample.id,
                    role.name()
                )));
            }
        }
        Ok(Self { role, samples })
    }

    pub fn role(&self) -> SampleRole {
        self.role
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// On-disk description of a label space and its negative table.
///
/// Class names map to dense ids by position: `source_classes[i]` has id
/// `i`. Entries are `(i, j, output_index)` triples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpaceManifest {
    pub version: u32,
    pub source_classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_classes: Option<Vec<String>>,
    pub negative_entries: Vec<(usize, usize, usize)>,
    pub seed: u64,
}

pub const MANIFEST_VERSION: u32 = 1;

impl LabelSpaceManifest {
    pub fn new(
        source_classes: Vec<String>,
        target_classes: Option<Vec<String>>,
        table: &NegativeClassTable,
        seed: u64,
    ) -> Self {
        let negative_entries = table
            .entries()
            .iter()
            .enumerate()
            .map(|(rank, &(i, j))| (i, j, table.num_positive() + rank))
            .collect();
        Self {
            version: MANIFEST_VERSION,
            source_classes,
            target_classes,
            negative_entries,
            seed,
        }
    }

    pub fn table(&self) -> Result<NegativeClassTable> {
        let num_positive = self.source_classes.len();
        for (rank, &(_, _, index)) in self.negative_entries.iter().enumerate() {
            if index != num_positive + rank {
                return Err(Error::InvalidConfig(format!(
                    "negative entry {rank} maps to non-contiguous index {index}"
                )));
            }
        }
        let entries = self.negative_entries.iter().map(|&(i, j, _)| (i, j)).collect();
        NegativeClassTable::from_entries(num_positive, entries)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("manifest parse failed: {e}")))
    }
}
