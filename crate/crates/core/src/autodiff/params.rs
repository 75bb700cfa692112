//! Named learnable leaves with gradient slots, constraints and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adtf;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Learning-rate group of a leaf.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    #[default]
    Physics,
    Network,
}

/// Post-update projection applied by the optimizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Constraint {
    #[default]
    Free,
    /// Elementwise clamp into `[lo, hi]`.
    Range {
        #[serde(with = "lower")]
        lo: f64,
        #[serde(with = "upper")]
        hi: f64,
    },
    /// Clamp into `[lo, hi]` and zero the diagonal of every `K × K` plane.
    ZeroDiagonal {
        #[serde(with = "lower")]
        lo: f64,
        #[serde(with = "upper")]
        hi: f64,
    },
    /// Rescales each output channel of a `cout × cin × 9` weight block so
    /// that the L1 norm of its weights plus the matching bias does not
    /// exceed `max`. The bias of `net.w2` is the leaf `net.b2`.
    RowL1 { max: f64 },
}

// JSON has no infinities: an unbounded side is written as null.
mod lower {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

mod upper {
    use serde::{Deserialize, Deserializer};

    pub use super::lower::serialize;

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Registration options for a leaf. The default is a trainable,
/// unconstrained physics leaf.
#[derive(Clone, Debug)]
pub struct LeafSpec {
    pub trainable: bool,
    pub group: Group,
    pub constraint: Constraint,
    /// Stored as an ADTF payload in checkpoints rather than inline JSON.
    pub spatial: bool,
}

impl Default for LeafSpec {
    fn default() -> Self {
        LeafSpec::physics(Constraint::Free)
    }
}

impl LeafSpec {
    pub fn physics(constraint: Constraint) -> Self {
        LeafSpec {
            trainable: true,
            group: Group::Physics,
            constraint,
            spatial: false,
        }
    }

    pub fn network() -> Self {
        LeafSpec {
            trainable: true,
            group: Group::Network,
            constraint: Constraint::Free,
            spatial: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn spatial(mut self) -> Self {
        self.spatial = true;
        self
    }

    pub fn with_constraint(mut self, c: Constraint) -> Self {
        self.constraint = c;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Leaf {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub group: Group,
    pub constraint: Constraint,
    pub spatial: bool,
}

/// Ordered, uniquely named collection of leaves.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    leaves: Vec<Leaf>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, spec: LeafSpec) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidParams(format!("duplicate parameter `{name}`")));
        }
        if !value.all_finite() {
            return Err(Error::InvalidParams(format!("parameter `{name}` is not finite")));
        }
        let id = self.leaves.len();
        self.leaves.push(Leaf {
            name: name.to_string(),
            grad: Tensor::zeros(value.shape()),
            value,
            trainable: spec.trainable,
            group: spec.group,
            constraint: spec.constraint,
            spatial: spec.spatial,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn leaves_mut(&mut self) -> &mut [Leaf] {
        &mut self.leaves
    }

    pub fn value_by_id(&self, id: usize) -> &Tensor {
        &self.leaves[id].value
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.leaves[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.leaves[i].grad)
    }

    pub fn leaf(&self, name: &str) -> Option<&Leaf> {
        self.id(name).map(|i| &self.leaves[i])
    }

    /// Replaces a value; the shape is fixed at registration.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidParams(format!("unknown parameter `{name}`")))?;
        let leaf = &mut self.leaves[id];
        if leaf.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` has shape {}, got {}",
                leaf.value.shape(),
                value.shape()
            )));
        }
        leaf.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidParams(format!("unknown parameter `{name}`")))?;
        self.leaves[id].trainable = trainable;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for leaf in &mut self.leaves {
            leaf.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: usize, g: &Tensor) {
        let leaf = &mut self.leaves[id];
        if leaf.trainable {
            leaf.grad.add_assign(g);
        }
    }

    /// Squared Euclidean norm of all trainable values.
    pub fn squared_norm(&self) -> f64 {
        self.leaves
            .iter()
            .filter(|l| l.trainable)
            .map(|l| crate::tensor::pairwise_dot(l.value.data(), l.value.data()))
            .sum()
    }

    /// Applies every leaf's constraint in place.
    pub fn apply_constraints(&mut self) {
        for i in 0..self.leaves.len() {
            match self.leaves[i].constraint {
                Constraint::Free => {}
                Constraint::Range { lo, hi } => {
                    for v in self.leaves[i].value.data_mut() {
                        *v = v.clamp(lo, hi);
                    }
                }
                Constraint::ZeroDiagonal { lo, hi } => {
                    let value = &mut self.leaves[i].value;
                    let s = value.shape();
                    for v in value.data_mut() {
                        *v = v.clamp(lo, hi);
                    }
                    for c in 0..s.channels {
                        for d in 0..s.height.min(s.width) {
                            value.set(c, d, d, 0.0);
                        }
                    }
                }
                Constraint::RowL1 { max } => {
                    let bias_name = bias_partner(&self.leaves[i].name);
                    let bias_id = bias_name.as_deref().and_then(|n| self.id(n));
                    let s = self.leaves[i].value.shape();
                    let row = s.height * s.width;
                    for c in 0..s.channels {
                        let w = &self.leaves[i].value.data()[c * row..(c + 1) * row];
                        let mut norm: f64 = w.iter().map(|v| v.abs()).sum();
                        if let Some(b) = bias_id {
                            norm += self.leaves[b].value.data()[c].abs();
                        }
                        if norm > max {
                            let f = max / norm;
                            for v in &mut self.leaves[i].value.data_mut()[c * row..(c + 1) * row] {
                                *v *= f;
                            }
                            if let Some(b) = bias_id {
                                self.leaves[b].value.data_mut()[c] *= f;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Writes `params.json` plus one ADTF file per spatial leaf into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.leaves.len());
        for leaf in &self.leaves {
            let (values, file) = if leaf.spatial {
                let file = format!("{}.adtf", leaf.name);
                adtf::write_tensor(&dir.join(&file), &leaf.value, 1.0)?;
                (None, Some(file))
            } else {
                (Some(leaf.value.data().to_vec()), None)
            };
            entries.push(LeafRecord {
                name: leaf.name.clone(),
                shape: leaf.value.shape(),
                trainable: leaf.trainable,
                group: leaf.group,
                constraint: leaf.constraint,
                values,
                file,
            });
        }
        let doc = Checkpoint {
            version: 1,
            leaves: entries,
        };
        let path = dir.join(CHECKPOINT_FILE);
        let text = serde_json::to_string_pretty(&doc)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a checkpoint written by [`ParamSet::save`]. Spatial leaves come
    /// back at `f32` precision.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: Checkpoint = serde_json::from_str(&text)?;
        if doc.version != 1 {
            return Err(Error::Version {
                path,
                found: doc.version,
            });
        }
        let mut set = ParamSet::new();
        for rec in doc.leaves {
            let spatial = rec.file.is_some();
            let value = match (rec.values, rec.file) {
                (Some(v), _) => {
                    if v.len() != rec.shape.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "checkpoint leaf `{}` holds {} values for shape {}",
                            rec.name,
                            v.len(),
                            rec.shape
                        )));
                    }
                    Tensor::from_vec(rec.shape, v)
                }
                (None, Some(file)) => {
                    let (t, _) = adtf::read_tensor(&dir.join(file))?;
                    if t.shape() != rec.shape {
                        return Err(Error::ShapeMismatch(format!(
                            "checkpoint leaf `{}` payload has shape {}, manifest says {}",
                            rec.name,
                            t.shape(),
                            rec.shape
                        )));
                    }
                    t
                }
                (None, None) => {
                    return Err(Error::InvalidParams(format!(
                        "checkpoint leaf `{}` has no values",
                        rec.name
                    )))
                }
            };
            set.register(
                &rec.name,
                value,
                LeafSpec {
                    trainable: rec.trainable,
                    group: rec.group,
                    constraint: rec.constraint,
                    spatial,
                },
            )?;
        }
        Ok(set)
    }
}

pub const CHECKPOINT_FILE: &str = "params.json";

/// `res.w2` pairs with `res.b2`, `foo.w` with `foo.b`.
fn bias_partner(name: &str) -> Option<String> {
    let (prefix, last) = name.rsplit_once('.')?;
    let rest = last.strip_prefix('w')?;
    Some(format!("{prefix}.b{rest}"))
}

#[derive(Serialize, Deserialize)]
struct LeafRecord {
    name: String,
    shape: Shape,
    trainable: bool,
    group: Group,
    constraint: Constraint,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    file: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u64,
    leaves: Vec<LeafRecord>,
}
