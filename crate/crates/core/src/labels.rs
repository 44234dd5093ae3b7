//! Body-part attribute schemas and part-wise label perturbation.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_stream;

/// A named contiguous index range `start..end` of the attribute list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeGroup {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl AttributeGroup {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Ordered attribute names partitioned into body-part groups.
///
/// Groups are contiguous, disjoint, in order, and cover every attribute.
/// The first group (gender) is non-empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct AttributeSchema {
    names: Vec<String>,
    groups: Vec<AttributeGroup>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    attributes: Vec<String>,
    groups: Vec<AttributeGroup>,
}

impl TryFrom<SchemaFile> for AttributeSchema {
    type Error = Error;

    fn try_from(f: SchemaFile) -> Result<Self> {
        AttributeSchema::new(f.attributes, f.groups)
    }
}

impl From<AttributeSchema> for SchemaFile {
    fn from(s: AttributeSchema) -> Self {
        SchemaFile {
            attributes: s.names,
            groups: s.groups,
        }
    }
}

impl AttributeSchema {
    pub fn new(names: Vec<String>, groups: Vec<AttributeGroup>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Schema("no attributes".into()));
        }
        if groups.is_empty() || groups[0].is_empty() {
            return Err(Error::Schema("the leading gender group must be non-empty".into()));
        }
        let mut next = 0;
        for g in &groups {
            if g.start != next {
                return Err(Error::Schema(format!(
                    "group '{}' starts at {} but the previous group ends at {next} \
                     (groups must be contiguous and non-overlapping)",
                    g.name, g.start
                )));
            }
            if g.end <= g.start {
                return Err(Error::Schema(format!("group '{}' is empty or reversed", g.name)));
            }
            next = g.end;
        }
        if next != names.len() {
            return Err(Error::Schema(format!(
                "groups cover {next} attributes, schema lists {}",
                names.len()
            )));
        }
        Ok(AttributeSchema { names, groups })
    }

    /// Builds a schema from `(group name, attribute names)` pairs.
    pub fn from_groups(parts: &[(&str, &[&str])]) -> Result<Self> {
        let mut names = Vec::new();
        let mut groups = Vec::new();
        for (group, attrs) in parts {
            let start = names.len();
            names.extend(attrs.iter().map(|a| a.to_string()));
            groups.push(AttributeGroup {
                name: group.to_string(),
                start,
                end: names.len(),
            });
        }
        Self::new(names, groups)
    }

    /// Anonymous schema with the given group sizes; names are `attr_<i>`.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut groups = Vec::new();
        let mut start = 0;
        for (i, &s) in sizes.iter().enumerate() {
            groups.push(AttributeGroup {
                name: format!("group_{i}"),
                start,
                end: start + s,
            });
            start += s;
        }
        let names = (0..start).map(|i| format!("attr_{i}")).collect();
        Self::new(names, groups)
    }

    /// The 12-attribute schema rendered by the synthetic generator.
    pub fn desk_default() -> Self {
        Self::from_groups(&[
            ("gender", &["wide-body"]),
            ("head", &["red-hat", "blue-hat", "no-hat"]),
            ("upper", &["red-torso", "green-torso", "blue-torso"]),
            ("lower", &["dark-legs", "light-legs", "patterned-legs"]),
            ("foot", &["dark-shoes", "light-shoes"]),
        ])
        .expect("default schema is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[AttributeGroup] {
        &self.groups
    }

    pub fn group_of(&self, attribute: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.range().contains(&attribute))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("schema serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// A binary attribute vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector(Vec<u8>);

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        LabelVector::new(bits)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(l: LabelVector) -> Self {
        l.0
    }
}

impl LabelVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!("label bit {b} is not 0 or 1")));
        }
        Ok(LabelVector(bits))
    }

    pub fn zeros(n: usize) -> Self {
        LabelVector(vec![0; n])
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&b| b as f32).collect()
    }

    fn check(&self, schema: &AttributeSchema) -> Result<()> {
        if self.len() != schema.len() {
            return Err(Error::InvalidArgument(format!(
                "label vector has {} entries, schema has {}",
                self.len(),
                schema.len()
            )));
        }
        Ok(())
    }
}

/// Indices that moved within one group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupShift {
    pub group: usize,
    /// Positives switched off.
    pub cleared: Vec<usize>,
    /// Former zeros switched on.
    pub set: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbedLabels {
    pub labels: LabelVector,
    pub shifts: Vec<GroupShift>,
}

/// Positive and zero counts per group.
pub fn group_stats(y: &LabelVector, schema: &AttributeSchema) -> Result<Vec<(usize, usize)>> {
    y.check(schema)?;
    Ok(schema
        .groups()
        .iter()
        .map(|g| {
            let pos = y.bits()[g.range()].iter().filter(|&&b| b == 1).count();
            (pos, g.len() - pos)
        })
        .collect())
}

/// Moves present attributes onto absent ones inside each body-part group.
///
/// Per group with positives `P` and zeros `Z`:
/// a singleton group is negated; a group with no positives or no zeros is
/// left alone; if `|P| ≤ |Z|` every positive moves to a distinct random zero;
/// otherwise `|Z|` random positives move onto all zeros and the rest stay.
/// Group `g` draws from stream `g` of the generator keyed by `seed`.
pub fn perturb_labels(y: &LabelVector, schema: &AttributeSchema, seed: u64) -> Result<PerturbedLabels> {
    y.check(schema)?;
    let mut out = y.0.clone();
    let mut shifts = Vec::new();
    for (gi, g) in schema.groups().iter().enumerate() {
        let bits = &y.0[g.range()];
        if g.len() == 1 {
            out[g.start] = 1 - bits[0];
            let (cleared, set) = if bits[0] == 1 {
                (vec![g.start], vec![])
            } else {
                (vec![], vec![g.start])
            };
            shifts.push(GroupShift {
                group: gi,
                cleared,
                set,
            });
            continue;
        }
        let pos: Vec<usize> = g.range().filter(|&i| y.0[i] == 1).collect();
        let zero: Vec<usize> = g.range().filter(|&i| y.0[i] == 0).collect();
        if pos.is_empty() || zero.is_empty() {
            continue;
        }
        let mut rng = rng_stream(seed, gi as u64);
        let (cleared, set) = if pos.len() <= zero.len() {
            let targets = index::sample(&mut rng, zero.len(), pos.len());
            (pos.clone(), targets.iter().map(|k| zero[k]).collect::<Vec<_>>())
        } else {
            let movers = index::sample(&mut rng, pos.len(), zero.len());
            (movers.iter().map(|k| pos[k]).collect::<Vec<_>>(), zero.clone())
        };
        for &i in &cleared {
            out[i] = 0;
        }
        for &i in &set {
            out[i] = 1;
        }
        let (mut cleared, mut set) = (cleared, set);
        cleared.sort_unstable();
        set.sort_unstable();
        shifts.push(GroupShift {
            group: gi,
            cleared,
            set,
        });
    }
    Ok(PerturbedLabels {
        labels: LabelVector(out),
        shifts,
    })
}
