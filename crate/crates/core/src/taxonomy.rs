//! Class universe, stage-specific label remapping and inverse-frequency weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Identifier of a training class (not a raw dataset id).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-element class label; `None` is the ignore marker.
pub type Label = Option<ClassId>;

/// Frequency floor used when a class is absent from the counted frames.
pub const DEFAULT_FREQUENCY_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Background,
    Base,
    Novel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDef {
    pub id: ClassId,
    pub name: String,
    pub role: Role,
    #[serde(default)]
    pub raw_ids: Vec<u32>,
}

/// `C = {u} ∪ C_b ∪ C_n` plus the mapping from dataset ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    background: ClassId,
    base: Vec<ClassId>,
    novel: Vec<ClassId>,
    raw_to_class: BTreeMap<u32, Label>,
    names: BTreeMap<ClassId, String>,
}

impl Taxonomy {
    /// Builds a taxonomy from class definitions. Base and novel sets keep the
    /// order in which they are listed.
    pub fn new(classes: &[ClassDef], ignore_raw_ids: &[u32]) -> Result<Self> {
        let mut background = None;
        let mut base = Vec::new();
        let mut novel = Vec::new();
        let mut names = BTreeMap::new();
        let mut raw_to_class = BTreeMap::new();
        let mut seen_names = BTreeSet::new();

        for &raw in ignore_raw_ids {
            if raw_to_class.insert(raw, None).is_some() {
                return Err(Error::Taxonomy(format!("raw id {raw} listed twice")));
            }
        }
        for c in classes {
            if names.insert(c.id, c.name.clone()).is_some() {
                return Err(Error::Taxonomy(format!("duplicate class id {}", c.id)));
            }
            if !seen_names.insert(c.name.clone()) {
                return Err(Error::Taxonomy(format!(
                    "duplicate class name {:?}",
                    c.name
                )));
            }
            match c.role {
                Role::Background => {
                    if background.replace(c.id).is_some() {
                        return Err(Error::Taxonomy("more than one background class".into()));
                    }
                }
                Role::Base => base.push(c.id),
                Role::Novel => novel.push(c.id),
            }
            for &raw in &c.raw_ids {
                if raw_to_class.insert(raw, Some(c.id)).is_some() {
                    return Err(Error::Taxonomy(format!(
                        "raw id {raw} mapped more than once"
                    )));
                }
            }
        }
        let background =
            background.ok_or_else(|| Error::Taxonomy("no background class defined".into()))?;
        Ok(Taxonomy {
            background,
            base,
            novel,
            raw_to_class,
            names,
        })
    }

    pub fn background(&self) -> ClassId {
        self.background
    }

    pub fn base(&self) -> &[ClassId] {
        &self.base
    }

    pub fn novel(&self) -> &[ClassId] {
        &self.novel
    }

    pub fn is_base(&self, c: ClassId) -> bool {
        self.base.contains(&c)
    }

    pub fn is_novel(&self, c: ClassId) -> bool {
        self.novel.contains(&c)
    }

    pub fn contains(&self, c: ClassId) -> bool {
        self.names.contains_key(&c)
    }

    /// `{u} ∪ C_b`, background first.
    pub fn base_stage_classes(&self) -> Vec<ClassId> {
        std::iter::once(self.background)
            .chain(self.base.iter().copied())
            .collect()
    }

    /// `{u} ∪ C_n`, background first.
    pub fn novel_stage_classes(&self) -> Vec<ClassId> {
        std::iter::once(self.background)
            .chain(self.novel.iter().copied())
            .collect()
    }

    /// Column order of an extended model: `{u}`, then `C_b`, then `C_n`.
    pub fn all_classes(&self) -> Vec<ClassId> {
        let mut v = self.base_stage_classes();
        v.extend_from_slice(&self.novel);
        v
    }

    pub fn name(&self, c: ClassId) -> &str {
        self.names.get(&c).map(String::as_str).unwrap_or("?")
    }

    pub fn class_by_name(&self, name: &str) -> Option<ClassId> {
        self.names
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(&c, _)| c)
    }

    pub fn is_known_raw(&self, raw: u32) -> bool {
        self.raw_to_class.contains_key(&raw)
    }

    /// Maps raw dataset ids to class labels.
    pub fn map_raw(&self, raw: &[u32]) -> Result<Vec<Label>> {
        raw.iter()
            .map(|r| {
                self.raw_to_class
                    .get(r)
                    .copied()
                    .ok_or_else(|| Error::UnknownRawId(vec![*r]))
            })
            .collect()
    }

    /// First raw id mapping to each class; used when writing label files.
    pub fn class_to_raw(&self, c: Label) -> Option<u32> {
        self.raw_to_class
            .iter()
            .find(|(_, &l)| l == c)
            .map(|(&r, _)| r)
    }

    fn check(&self, labels: &[Label]) -> Result<()> {
        for l in labels.iter().flatten() {
            if !self.contains(*l) {
                return Err(Error::UnknownClass(l.0));
            }
        }
        Ok(())
    }

    /// Novel classes become background; used before base training.
    pub fn remap_for_base(&self, labels: &[Label]) -> Result<Vec<Label>> {
        self.check(labels)?;
        Ok(labels
            .iter()
            .map(|l| l.map(|c| if self.is_novel(c) { self.background } else { c }))
            .collect())
    }

    /// Base classes become background; used before fine-tuning.
    pub fn remap_for_novel(&self, labels: &[Label]) -> Result<Vec<Label>> {
        self.check(labels)?;
        Ok(labels
            .iter()
            .map(|l| l.map(|c| if self.is_base(c) { self.background } else { c }))
            .collect())
    }

    /// Stable digest of the class structure, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("u={};", self.background));
        for c in &self.base {
            h.update(format!("b={}:{};", c, self.name(*c)));
        }
        for c in &self.novel {
            h.update(format!("n={}:{};", c, self.name(*c)));
        }
        hex::encode(h.finalize())
    }
}

/// Per-class loss weights `α_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(BTreeMap<ClassId, f64>);

impl ClassWeights {
    pub fn get(&self, c: ClassId) -> Option<f64> {
        self.0.get(&c).copied()
    }

    /// All-ones weights over the given classes.
    pub fn uniform(classes: &[ClassId]) -> Self {
        ClassWeights(classes.iter().map(|&c| (c, 1.0)).collect())
    }

    pub fn from_map(map: BTreeMap<ClassId, f64>) -> Result<Self> {
        if let Some((c, w)) = map.iter().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Config(format!(
                "class weight for {c} must be positive, got {w}"
            )));
        }
        Ok(ClassWeights(map))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, f64)> + '_ {
        self.0.iter().map(|(&c, &w)| (c, w))
    }
}

/// Counts labels of the given classes; ignored and out-of-set labels are skipped.
pub fn count_labels<'a>(
    classes: &[ClassId],
    labels: impl IntoIterator<Item = &'a Label>,
) -> BTreeMap<ClassId, f64> {
    let mut counts: BTreeMap<ClassId, f64> = classes.iter().map(|&c| (c, 0.0)).collect();
    for c in labels.into_iter().flatten() {
        if let Some(n) = counts.get_mut(c) {
            *n += 1.0;
        }
    }
    counts
}

/// Inverse-frequency weights `α_k = 1 / max(count_k / total, floor)`.
pub fn class_weights(counts: &BTreeMap<ClassId, f64>, floor: f64) -> Result<ClassWeights> {
    if !(floor > 0.0) {
        return Err(Error::Config(format!(
            "frequency floor must be positive, got {floor}"
        )));
    }
    if let Some((c, n)) = counts.iter().find(|(_, n)| !(**n >= 0.0)) {
        return Err(Error::Config(format!("negative count {n} for class {c}")));
    }
    let total: f64 = counts.values().sum();
    if !(total > 0.0) {
        return Err(Error::Empty("class counts"));
    }
    ClassWeights::from_map(
        counts
            .iter()
            .map(|(&c, &n)| (c, 1.0 / (n / total).max(floor)))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const U: ClassId = ClassId(0);
    const ROAD: ClassId = ClassId(1);
    const WALL: ClassId = ClassId(2);
    const CAR: ClassId = ClassId(3);
    const PERSON: ClassId = ClassId(4);

    fn tax() -> Taxonomy {
        let def = |id, name: &str, role, raw: &[u32]| ClassDef {
            id: ClassId(id),
            name: name.into(),
            role,
            raw_ids: raw.to_vec(),
        };
        Taxonomy::new(
            &[
                def(0, "background", Role::Background, &[99]),
                def(1, "road", Role::Base, &[40, 60]),
                def(2, "wall", Role::Base, &[50]),
                def(3, "car", Role::Novel, &[10]),
                def(4, "person", Role::Novel, &[30]),
            ],
            &[0],
        )
        .unwrap()
    }

    #[test]
    fn remaps() {
        let t = tax();
        let labels = [Some(CAR), Some(ROAD), Some(U), None];
        assert_eq!(
            t.remap_for_base(&labels).unwrap(),
            vec![Some(U), Some(ROAD), Some(U), None]
        );
        assert_eq!(
            t.remap_for_novel(&labels).unwrap(),
            vec![Some(CAR), Some(U), Some(U), None]
        );
        let bg = [Some(U); 3];
        assert_eq!(t.remap_for_base(&bg).unwrap(), bg.to_vec());
        let nov = [Some(CAR), Some(PERSON)];
        assert_eq!(t.remap_for_novel(&nov).unwrap(), nov.to_vec());
        assert!(matches!(
            t.remap_for_base(&[Some(ClassId(999))]),
            Err(Error::UnknownClass(999))
        ));
        assert!(matches!(
            t.remap_for_novel(&[Some(ClassId(999))]),
            Err(Error::UnknownClass(999))
        ));
    }

    #[test]
    fn class_orders() {
        let t = tax();
        assert_eq!(t.base_stage_classes(), vec![U, ROAD, WALL]);
        assert_eq!(t.novel_stage_classes(), vec![U, CAR, PERSON]);
        assert_eq!(t.all_classes(), vec![U, ROAD, WALL, CAR, PERSON]);
        assert_eq!(
            t.map_raw(&[60, 0, 10]).unwrap(),
            vec![Some(ROAD), None, Some(CAR)]
        );
        assert!(t.map_raw(&[7]).is_err());
    }

    #[test]
    fn invalid_taxonomies() {
        let d = |id, role| ClassDef {
            id: ClassId(id),
            name: format!("c{id}"),
            role,
            raw_ids: vec![id],
        };
        assert!(Taxonomy::new(&[d(1, Role::Base)], &[]).is_err());
        assert!(Taxonomy::new(&[d(0, Role::Background), d(0, Role::Base)], &[]).is_err());
        assert!(Taxonomy::new(&[d(0, Role::Background), d(1, Role::Background)], &[]).is_err());
        assert!(Taxonomy::new(&[d(0, Role::Background)], &[0]).is_err());
    }

    #[test]
    fn inverse_frequency() {
        let counts: BTreeMap<_, _> = [(U, 2.0), (ROAD, 1.0), (WALL, 1.0)].into();
        let w = class_weights(&counts, DEFAULT_FREQUENCY_FLOOR).unwrap();
        assert_eq!(w.get(U), Some(2.0));
        assert_eq!(w.get(ROAD), Some(4.0));
        assert_eq!(w.get(WALL), Some(4.0));

        let uniform: BTreeMap<_, _> = [(U, 7.0), (ROAD, 7.0), (WALL, 7.0), (CAR, 7.0)].into();
        let w = class_weights(&uniform, DEFAULT_FREQUENCY_FLOOR).unwrap();
        assert!(w.iter().all(|(_, a)| a == 4.0));

        let absent: BTreeMap<_, _> = [(U, 10.0), (ROAD, 0.0)].into();
        let w = class_weights(&absent, 1e-4).unwrap();
        assert!((w.get(ROAD).unwrap() - 1e4).abs() < 1e-6);

        let neg: BTreeMap<_, _> = [(U, 10.0), (ROAD, -1.0)].into();
        assert!(class_weights(&neg, 1e-4).is_err());
    }

    fn arb_labels() -> impl Strategy<Value = Vec<Label>> {
        prop::collection::vec(prop::option::of((0u32..5).prop_map(ClassId)), 0..50)
    }

    proptest! {
        #[test]
        fn remap_idempotent_and_closed(labels in arb_labels()) {
            let t = tax();
            let b = t.remap_for_base(&labels).unwrap();
            prop_assert_eq!(&t.remap_for_base(&b).unwrap(), &b);
            prop_assert!(b.iter().flatten().all(|&c| c == U || t.is_base(c)));
            let n = t.remap_for_novel(&labels).unwrap();
            prop_assert_eq!(&t.remap_for_novel(&n).unwrap(), &n);
            prop_assert!(n.iter().flatten().all(|&c| c == U || t.is_novel(c)));
        }

        #[test]
        fn weights_scale_invariant(counts in prop::collection::vec(1u32..1000, 1..6), scale in 1u32..50) {
            let a: BTreeMap<_, _> = counts.iter().enumerate().map(|(i, &n)| (ClassId(i as u32), n as f64)).collect();
            let b: BTreeMap<_, _> = a.iter().map(|(&c, &n)| (c, n * scale as f64)).collect();
            let wa = class_weights(&a, 1e-4).unwrap();
            let wb = class_weights(&b, 1e-4).unwrap();
            for ((_, x), (_, y)) in wa.iter().zip(wb.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * x);
            }
        }
    }
}
