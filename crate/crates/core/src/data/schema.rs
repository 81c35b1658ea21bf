use std::collections::HashSet;

use crate::error::{Error, Result};

/// Attribute names and their disjoint groups. Indices are 0-based in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSchema {
    names: Vec<String>,
    groups: Vec<Vec<usize>>,
    group_names: Vec<String>,
}

impl AttributeSchema {
    pub fn new(
        names: Vec<String>,
        groups: Vec<Vec<usize>>,
        group_names: Vec<String>,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidData("schema has no attributes".into()));
        }
        if groups.len() != group_names.len() {
            return Err(Error::InvalidData(format!(
                "{} groups but {} group names",
                groups.len(),
                group_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for (l, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::InvalidData(format!(
                    "attribute group {} is empty",
                    l + 1
                )));
            }
            for &a in group {
                if a >= names.len() {
                    return Err(Error::InvalidData(format!(
                        "group {} references attribute {} but K = {}",
                        l + 1,
                        a + 1,
                        names.len()
                    )));
                }
                if !seen.insert(a) {
                    return Err(Error::InvalidData(format!(
                        "attribute {} belongs to more than one group",
                        a + 1
                    )));
                }
            }
        }
        Ok(AttributeSchema {
            names,
            groups,
            group_names,
        })
    }

    /// Schema without groups: the decorrelation loss and zoom-in are unavailable.
    pub fn ungrouped(names: Vec<String>) -> Result<Self> {
        Self::new(names, Vec::new(), Vec::new())
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn l(&self) -> usize {
        self.groups.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn group_of(&self, attr: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&attr))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Seen,
    Unseen,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seen" => Some(Split::Seen),
            "unseen" => Some(Split::Unseen),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub id: u32,
    pub split: Split,
    /// Class-level attribute vector φ(y), one value per attribute.
    pub attrs: Vec<f32>,
}

/// Classes with their split tag and attribute vectors, kept sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTable {
    classes: Vec<ClassInfo>,
}

impl ClassTable {
    pub fn new(mut classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidData("class table is empty".into()));
        }
        classes.sort_by_key(|c| c.id);
        for pair in classes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::InvalidData(format!(
                    "duplicate class id {}",
                    pair[0].id
                )));
            }
        }
        let k = classes[0].attrs.len();
        for c in &classes {
            if c.attrs.len() != k {
                return Err(Error::InvalidData(format!(
                    "class {} has {} attributes, expected {k}",
                    c.id,
                    c.attrs.len()
                )));
            }
            if c.attrs.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "class {} has non-finite attributes",
                    c.id
                )));
            }
        }
        Ok(ClassTable { classes })
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn k(&self) -> usize {
        self.classes[0].attrs.len()
    }

    pub fn get(&self, id: u32) -> Option<&ClassInfo> {
        self.classes
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.classes[i])
    }

    /// Ids of the classes tagged `split`, ascending.
    pub fn ids(&self, split: Split) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }

    pub fn all_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }

    /// True when every attribute value already lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.classes
            .iter()
            .all(|c| c.attrs.iter().all(|&v| (0.0..=1.0).contains(&v)))
    }

    /// Min-max normalises every attribute column to `[0, 1]`. Constant columns
    /// become 0.
    pub fn minmax_normalize(&mut self) {
        let k = self.k();
        for a in 0..k {
            let (lo, hi) = self
                .classes
                .iter()
                .map(|c| c.attrs[a])
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            let range = hi - lo;
            for c in &mut self.classes {
                c.attrs[a] = if range > 0.0 {
                    (c.attrs[a] - lo) / range
                } else {
                    0.0
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("a{i}")).collect()
    }

    #[test]
    fn overlapping_groups_rejected() {
        let err = AttributeSchema::new(
            names(3),
            vec![vec![0, 1], vec![1, 2]],
            vec!["x".into(), "y".into()],
        );
        assert!(err.is_err());
    }

    #[test]
    fn group_free_schema() {
        let s = AttributeSchema::ungrouped(names(4)).unwrap();
        assert_eq!((s.k(), s.l()), (4, 0));
        assert_eq!(s.group_of(2), None);
    }

    #[test]
    fn minmax_normalisation() {
        let mut t = ClassTable::new(vec![
            ClassInfo {
                id: 2,
                split: Split::Seen,
                attrs: vec![10.0, 3.0],
            },
            ClassInfo {
                id: 1,
                split: Split::Unseen,
                attrs: vec![30.0, 3.0],
            },
        ])
        .unwrap();
        assert!(!t.is_normalized());
        t.minmax_normalize();
        assert_eq!(t.get(1).unwrap().attrs, vec![1.0, 0.0]);
        assert_eq!(t.get(2).unwrap().attrs, vec![0.0, 0.0]);
        assert_eq!(t.ids(Split::Seen), vec![2]);
    }
}
