//! Two-level labels: an instance id nested inside a class id.

use alloc::collections::BTreeMap;

use crate::error::{Error, Result};

/// Instance and class label of one sample. Both augmented views of a
/// sample carry the same pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelPair {
    pub instance_id: usize,
    pub class_id: usize,
}

impl LabelPair {
    pub const fn new(instance_id: usize, class_id: usize) -> Self {
        LabelPair {
            instance_id,
            class_id,
        }
    }
}

/// Which label space a pair is judged in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    /// Instance ids (self supervision).
    Instance,
    /// Class ids (full supervision).
    Class,
}

/// Indicator values for a pair of samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairRelation {
    same_instance: bool,
    same_class: bool,
}

impl PairRelation {
    pub const SAME_INSTANCE: PairRelation = PairRelation {
        same_instance: true,
        same_class: true,
    };
    pub const SAME_CLASS: PairRelation = PairRelation {
        same_instance: false,
        same_class: true,
    };
    pub const CROSS_CLASS: PairRelation = PairRelation {
        same_instance: false,
        same_class: false,
    };

    /// Fails on `(true, false)`, which the hierarchy rules out.
    pub fn new(same_instance: bool, same_class: bool) -> Result<Self> {
        if same_instance && !same_class {
            return Err(Error::Domain(
                "a same-instance pair must also be a same-class pair".into(),
            ));
        }
        Ok(PairRelation {
            same_instance,
            same_class,
        })
    }

    pub fn same_instance(&self) -> bool {
        self.same_instance
    }

    pub fn same_class(&self) -> bool {
        self.same_class
    }

    /// Indicator at `level`.
    pub fn is_positive(&self, level: Level) -> bool {
        match level {
            Level::Instance => self.same_instance,
            Level::Class => self.same_class,
        }
    }

    /// Same class but different instance: the pair on which the two
    /// supervision signals disagree.
    pub fn is_conflicting(&self) -> bool {
        self.same_class && !self.same_instance
    }
}

/// Componentwise id equality.
pub fn relate(a: LabelPair, b: LabelPair) -> Result<PairRelation> {
    let same_instance = a.instance_id == b.instance_id;
    let same_class = a.class_id == b.class_id;
    if same_instance && !same_class {
        return Err(Error::Hierarchy {
            instance_id: a.instance_id,
            first_class: a.class_id,
            second_class: b.class_id,
        });
    }
    Ok(PairRelation {
        same_instance,
        same_class,
    })
}

/// Two sample indices whose labels share an instance id but not a class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HierarchyViolation {
    pub first: usize,
    pub second: usize,
    pub instance_id: usize,
}

/// Checks that no instance id maps to two class ids. Reports the first
/// offending pair of indices in scan order.
pub fn validate_dataset(labels: &[LabelPair]) -> core::result::Result<(), HierarchyViolation> {
    let mut seen: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (idx, label) in labels.iter().enumerate() {
        match seen.get(&label.instance_id) {
            Some(&(first, class)) if class != label.class_id => {
                return Err(HierarchyViolation {
                    first,
                    second: idx,
                    instance_id: label.instance_id,
                });
            }
            Some(_) => {}
            None => {
                seen.insert(label.instance_id, (idx, label.class_id));
            }
        }
    }
    Ok(())
}

impl From<(HierarchyViolation, &[LabelPair])> for Error {
    fn from((v, labels): (HierarchyViolation, &[LabelPair])) -> Self {
        Error::Hierarchy {
            instance_id: v.instance_id,
            first_class: labels[v.first].class_id,
            second_class: labels[v.second].class_id,
        }
    }
}
