//! Attribute spaces: loading, grid enumeration, label encoding and modelset
//! sampling.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub short: String,
    pub values: Vec<String>,
}

/// Ordered list of attributes; the value order inside each attribute is the
/// canonical label order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        let s = Self { attributes };
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Schema("schema has no attributes".into()));
        }
        let mut names = HashSet::new();
        let mut shorts = HashSet::new();
        for a in &self.attributes {
            if !names.insert(a.name.as_str()) {
                return Err(Error::Schema(format!("duplicate attribute name {:?}", a.name)));
            }
            if !shorts.insert(a.short.as_str()) {
                return Err(Error::Schema(format!("duplicate short name {:?}", a.short)));
            }
            if a.values.len() < 2 {
                return Err(Error::Schema(format!(
                    "attribute {:?} needs at least two values",
                    a.name
                )));
            }
            let distinct: HashSet<_> = a.values.iter().collect();
            if distinct.len() != a.values.len() {
                return Err(Error::Schema(format!("attribute {:?} repeats a value", a.name)));
            }
        }
        Ok(())
    }

    /// Number of attributes (K).
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Cardinality of every attribute (N^k), in schema order.
    pub fn cardinalities(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.values.len()).collect()
    }

    /// Product of cardinalities, saturating on overflow.
    pub fn grid_size(&self) -> u128 {
        self.attributes
            .iter()
            .fold(1u128, |acc, a| acc.saturating_mul(a.values.len() as u128))
    }

    pub fn shorts(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.short.as_str()).collect()
    }

    pub fn index_of(&self, short: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.short == short)
    }

    /// Stable content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("schema serializes"))
    }

    pub fn check(&self, a: &AttributeAssignment) -> Result<()> {
        if a.0.len() != self.len() {
            return Err(Error::Assignment(format!(
                "assignment has {} entries, schema has {} attributes",
                a.0.len(),
                self.len()
            )));
        }
        for (attr, &v) in self.attributes.iter().zip(&a.0) {
            if v >= attr.values.len() {
                return Err(Error::Assignment(format!(
                    "index {v} out of range for {:?} ({} values)",
                    attr.name,
                    attr.values.len()
                )));
            }
        }
        Ok(())
    }

    /// Value string of attribute `short` in `a`, if the schema has it.
    pub fn value_of<'a>(&'a self, a: &AttributeAssignment, short: &str) -> Option<&'a str> {
        let k = self.index_of(short)?;
        self.attributes[k].values.get(*a.0.get(k)?).map(String::as_str)
    }

    /// Human-readable `act=ReLU,opt=SGD,...` rendering.
    pub fn describe(&self, a: &AttributeAssignment) -> String {
        self.attributes
            .iter()
            .zip(&a.0)
            .map(|(attr, &v)| format!("{}={}", attr.short, attr.values.get(v).map_or("?", String::as_str)))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// One point of the attribute grid: a value index per attribute, aligned to
/// schema order. Doubles as the ground-truth label of a white-box model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeAssignment(pub Vec<usize>);

impl AttributeAssignment {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    /// Compact identifier such as `0.1.2`.
    pub fn key(&self) -> String {
        self.0.iter().map(usize::to_string).collect::<Vec<_>>().join(".")
    }
}

/// Cartesian product of all value indices in lexicographic order (first
/// attribute most significant).
pub fn enumerate_grid(schema: &AttributeSchema) -> Result<Vec<AttributeAssignment>> {
    if schema.is_empty() {
        return Err(Error::Schema("cannot enumerate an empty schema".into()));
    }
    let cards = schema.cardinalities();
    let total = schema.grid_size();
    if total > usize::MAX as u128 / cards.len() as u128 {
        return Err(Error::Schema(format!(
            "grid of {total} assignments is too large to enumerate"
        )));
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut current = vec![0usize; cards.len()];
    loop {
        out.push(AttributeAssignment(current.clone()));
        let mut k = cards.len();
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            current[k] += 1;
            if current[k] < cards[k] {
                break;
            }
            current[k] = 0;
        }
    }
}

/// One one-hot vector per attribute.
pub fn encode_labels(a: &AttributeAssignment, schema: &AttributeSchema) -> Result<Vec<Vec<f32>>> {
    schema.check(a)?;
    Ok(schema
        .cardinalities()
        .iter()
        .zip(&a.0)
        .map(|(&n, &v)| {
            let mut h = vec![0.0; n];
            h[v] = 1.0;
            h
        })
        .collect())
}

/// Inverse of `encode_labels`; each vector must be exactly one-hot.
pub fn decode_labels(labels: &[Vec<f32>], schema: &AttributeSchema) -> Result<AttributeAssignment> {
    if labels.len() != schema.len() {
        return Err(Error::Assignment(format!(
            "{} label vectors for {} attributes",
            labels.len(),
            schema.len()
        )));
    }
    let mut idx = Vec::with_capacity(labels.len());
    for (v, n) in labels.iter().zip(schema.cardinalities()) {
        if v.len() != n {
            return Err(Error::Assignment(format!(
                "label vector of width {} for {} values",
                v.len(),
                n
            )));
        }
        let ones: Vec<usize> = v
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == 1.0)
            .map(|(i, _)| i)
            .collect();
        let zeros = v.iter().filter(|&&x| x == 0.0).count();
        if ones.len() != 1 || zeros != n - 1 {
            return Err(Error::Assignment("label vector is not one-hot".into()));
        }
        idx.push(ones[0]);
    }
    Ok(AttributeAssignment(idx))
}

/// A white-box model identity within a split: attribute combination, seed
/// and the domain its training data comes from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelEntry {
    pub assignment: AttributeAssignment,
    pub seed: u64,
    pub domain: String,
}

/// Which part of a modelset a white-box model belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelsetSplit {
    pub train: Vec<ModelEntry>,
    pub val: Vec<ModelEntry>,
    pub test: Vec<ModelEntry>,
}

impl ModelsetSplit {
    pub fn all(&self) -> impl Iterator<Item = &ModelEntry> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Every entry tagged with its role, in train, val, test order.
    pub fn with_roles(&self) -> impl Iterator<Item = (SplitRole, &ModelEntry)> {
        let train = self.train.iter().map(|e| (SplitRole::Train, e));
        let val = self.val.iter().map(|e| (SplitRole::Val, e));
        train.chain(val).chain(self.test.iter().map(|e| (SplitRole::Test, e)))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates per-domain splits.
    pub fn merge(parts: impl IntoIterator<Item = ModelsetSplit>) -> Self {
        let mut out = Self::default();
        for p in parts {
            out.train.extend(p.train);
            out.val.extend(p.val);
            out.test.extend(p.test);
        }
        out
    }
}

/// Samples train/val/test models for `domain` uniformly without replacement
/// from the `grid × {0..n_seeds}` pool.
///
/// With `disjoint_combos`, the grid is first partitioned between the splits
/// (proportionally to the requested counts) so no attribute combination
/// appears in more than one split.
pub fn sample_modelset(
    grid: &[AttributeAssignment],
    n_seeds: u32,
    counts: SplitCounts,
    rng_seed: u64,
    domain: &str,
    disjoint_combos: bool,
) -> Result<ModelsetSplit> {
    let pool = grid.len() as u128 * n_seeds as u128;
    if counts.total() as u128 > pool {
        return Err(Error::Schema(format!(
            "requested {} models but the pool only has {pool}",
            counts.total()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let entry = |combo: usize, seed: u64| ModelEntry {
        assignment: grid[combo].clone(),
        seed,
        domain: domain.to_string(),
    };
    let wanted = [counts.train, counts.val, counts.test];
    let mut lists: [Vec<ModelEntry>; 3] = Default::default();

    if !disjoint_combos {
        let picks = rand::seq::index::sample(&mut rng, pool as usize, counts.total());
        let mut it = picks.into_iter();
        for (list, &n) in lists.iter_mut().zip(&wanted) {
            for i in it.by_ref().take(n) {
                list.push(entry(i / n_seeds as usize, (i % n_seeds as usize) as u64));
            }
        }
    } else {
        let seeds = n_seeds as usize;
        let mut combos: Vec<usize> = (0..grid.len()).collect();
        combos.shuffle(&mut rng);
        let total = counts.total().max(1);
        let mut share: Vec<usize> = wanted
            .iter()
            .map(|&n| {
                if n == 0 {
                    0
                } else {
                    (grid.len() * n / total).max(n.div_ceil(seeds))
                }
            })
            .collect();
        while share.iter().sum::<usize>() > grid.len() {
            // Shrink the largest share that still has slack.
            let k = (0..3)
                .filter(|&k| share[k] > wanted[k].div_ceil(seeds))
                .max_by_key(|&k| share[k])
                .ok_or_else(|| {
                    Error::Schema(format!(
                        "cannot place {total} models on disjoint combinations of {}",
                        grid.len()
                    ))
                })?;
            share[k] -= 1;
        }
        let mut offset = 0;
        for ((list, &n), &m) in lists.iter_mut().zip(&wanted).zip(&share) {
            let own = &combos[offset..offset + m];
            offset += m;
            if n == 0 {
                continue;
            }
            for i in rand::seq::index::sample(&mut rng, m * seeds, n) {
                list.push(entry(own[i / seeds], (i % seeds) as u64));
            }
        }
    }
    let [train, val, test] = lists;
    Ok(ModelsetSplit { train, val, test })
}
