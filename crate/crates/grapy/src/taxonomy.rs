//! Three-level label hierarchy shared by every dataset.
//!
//! Level 1 is `{Background, Foreground}`, Level 2 is
//! `{Background, Head, Torso, Arm, Leg}`, and Level 3 is the dataset's own
//! fine label list. Each dataset supplies only the Level 3 → Level 2 map; the
//! Level 2 → Level 1 map is fixed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::labels::LabelMap;

pub const LEVEL1_NAMES: [&str; 2] = ["Background", "Foreground"];
pub const LEVEL2_NAMES: [&str; 5] = ["Background", "Head", "Torso", "Arm", "Leg"];
/// Level 2 index → Level 1 index.
pub const LEVEL2_TO_LEVEL1: [usize; 5] = [0, 1, 1, 1, 1];

pub const HEAD: usize = 1;
pub const TORSO: usize = 2;
pub const ARM: usize = 3;
pub const LEG: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    One,
    Two,
    Three,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::One, Level::Two, Level::Three];

    pub fn number(self) -> usize {
        match self {
            Level::One => 1,
            Level::Two => 2,
            Level::Three => 3,
        }
    }

    pub fn from_number(n: usize) -> Option<Self> {
        match n {
            1 => Some(Level::One),
            2 => Some(Level::Two),
            3 => Some(Level::Three),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "level{}", self.number())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoFineLabels,
    BackgroundNotFirst(String),
    MissingParent(usize),
    UnknownFineIndex(usize),
    ParentOutOfRange { fine: usize, parent: usize },
    BackgroundParent(usize),
    ForegroundToBackground { fine: usize, name: String },
    Level1Map(Vec<usize>),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoFineLabels => write!(f, "no fine labels"),
            Violation::BackgroundNotFirst(name) => {
                write!(f, "fine label 0 must be Background, found `{name}`")
            }
            Violation::MissingParent(i) => write!(f, "fine label {i} has no Level-2 parent"),
            Violation::UnknownFineIndex(i) => {
                write!(f, "Level-2 map mentions unknown fine index {i}")
            }
            Violation::ParentOutOfRange { fine, parent } => {
                write!(f, "fine label {fine} maps to Level-2 index {parent}, outside 0..5")
            }
            Violation::BackgroundParent(p) => {
                write!(f, "Background must map to Background, maps to {p}")
            }
            Violation::ForegroundToBackground { fine, name } => {
                write!(f, "fine label {fine} (`{name}`) maps to Background at Level 2")
            }
            Violation::Level1Map(m) => write!(
                f,
                "Level-1 map must send Background to Background and body parts to Foreground, got {m:?}"
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy `{name}` is invalid: {}", list(.violations))]
    Invalid {
        name: String,
        violations: Vec<Violation>,
    },
    #[error("taxonomy config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("label map has {got} classes but taxonomy `{name}` has {expected} fine labels")]
    ClassCount {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("unknown taxonomy `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    name: String,
    fine_labels: Vec<String>,
    to_level2: BTreeMap<usize, usize>,
    to_level1: Vec<usize>,
}

impl Taxonomy {
    /// Builds a taxonomy without checking it; see [`Taxonomy::validate`].
    pub fn new(
        name: impl Into<String>,
        fine_labels: Vec<String>,
        to_level2: BTreeMap<usize, usize>,
    ) -> Self {
        Self {
            name: name.into(),
            fine_labels,
            to_level2,
            to_level1: LEVEL2_TO_LEVEL1.to_vec(),
        }
    }

    /// Builds from `(fine name, Level-2 name)` pairs and validates.
    pub fn from_pairs(name: &str, pairs: &[(&str, &str)]) -> Result<Self, TaxonomyError> {
        let mut to_level2 = BTreeMap::new();
        let mut labels = Vec::with_capacity(pairs.len());
        for (i, (fine, parent)) in pairs.iter().enumerate() {
            let p = level2_index(parent).ok_or_else(|| TaxonomyError::Parse {
                line: i + 1,
                msg: format!("unknown Level-2 name `{parent}`"),
            })?;
            labels.push(fine.to_string());
            to_level2.insert(i, p);
        }
        Self::new(name, labels, to_level2).validated()
    }

    #[doc(hidden)]
    pub fn with_level1_map(mut self, map: Vec<usize>) -> Self {
        self.to_level1 = map;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn fine_labels(&self) -> &[String] {
        &self.fine_labels
    }

    pub fn num_classes(&self, level: Level) -> usize {
        match level {
            Level::One => LEVEL1_NAMES.len(),
            Level::Two => LEVEL2_NAMES.len(),
            Level::Three => self.fine_labels.len(),
        }
    }

    pub fn class_names(&self, level: Level) -> Vec<&str> {
        match level {
            Level::One => LEVEL1_NAMES.to_vec(),
            Level::Two => LEVEL2_NAMES.to_vec(),
            Level::Three => self.fine_labels.iter().map(String::as_str).collect(),
        }
    }

    /// Ancestor of fine label `fine` at `level`.
    pub fn ancestor(&self, fine: usize, level: Level) -> Option<usize> {
        match level {
            Level::Three => (fine < self.fine_labels.len()).then_some(fine),
            Level::Two => self.to_level2.get(&fine).copied(),
            Level::One => self
                .to_level2
                .get(&fine)
                .and_then(|&p| self.to_level1.get(p).copied()),
        }
    }

    /// Fine labels whose Level-2 parent is `parent`, in index order.
    pub fn children(&self, parent: usize) -> Vec<usize> {
        self.to_level2
            .iter()
            .filter(|(_, &p)| p == parent)
            .map(|(&f, _)| f)
            .collect()
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        let k = self.fine_labels.len();
        if k == 0 {
            v.push(Violation::NoFineLabels);
        } else if self.fine_labels[0] != "Background" {
            v.push(Violation::BackgroundNotFirst(self.fine_labels[0].clone()));
        }
        for i in 0..k {
            match self.to_level2.get(&i) {
                None => v.push(Violation::MissingParent(i)),
                Some(&p) if p >= LEVEL2_NAMES.len() => {
                    v.push(Violation::ParentOutOfRange { fine: i, parent: p })
                }
                Some(&p) if i == 0 && p != 0 => v.push(Violation::BackgroundParent(p)),
                Some(&0) if i != 0 => v.push(Violation::ForegroundToBackground {
                    fine: i,
                    name: self.fine_labels[i].clone(),
                }),
                Some(_) => {}
            }
        }
        for &i in self.to_level2.keys().filter(|&&i| i >= k) {
            v.push(Violation::UnknownFineIndex(i));
        }
        if self.to_level1 != LEVEL2_TO_LEVEL1 {
            v.push(Violation::Level1Map(self.to_level1.clone()));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    pub fn validated(self) -> Result<Self, TaxonomyError> {
        match self.validate() {
            Ok(()) => Ok(self),
            Err(violations) => Err(TaxonomyError::Invalid {
                name: self.name,
                violations,
            }),
        }
    }

    /// Maps a fine (Level 3) label map to `level`.
    pub fn coarsen(&self, fine: &LabelMap, level: Level) -> Result<LabelMap, TaxonomyError> {
        self.coarsen_from(fine, Level::Three, level)
    }

    /// Maps a label map expressed at `from` to the coarser (or equal) level
    /// `to`.
    pub fn coarsen_from(
        &self,
        m: &LabelMap,
        from: Level,
        to: Level,
    ) -> Result<LabelMap, TaxonomyError> {
        let expected = self.num_classes(from);
        if m.classes() != expected || to > from {
            return Err(TaxonomyError::ClassCount {
                name: self.name.clone(),
                expected,
                got: m.classes(),
            });
        }
        let table = self.lookup_table(from, to)?;
        let values = m.values().iter().map(|&v| table[v]).collect();
        Ok(LabelMap::new(m.height(), m.width(), self.num_classes(to), values)
            .expect("taxonomy maps stay in range"))
    }

    /// `table[i]` is the `to`-level class of `from`-level class `i`.
    pub fn lookup_table(&self, from: Level, to: Level) -> Result<Vec<usize>, TaxonomyError> {
        let invalid = |violations| TaxonomyError::Invalid {
            name: self.name.clone(),
            violations,
        };
        match (from, to) {
            (a, b) if a == b => Ok((0..self.num_classes(a)).collect()),
            (Level::Two, Level::One) => Ok(self.to_level1.clone()),
            (Level::Three, to) => (0..self.fine_labels.len())
                .map(|f| {
                    self.ancestor(f, to)
                        .ok_or_else(|| invalid(vec![Violation::MissingParent(f)]))
                })
                .collect(),
            _ => Err(TaxonomyError::Parse {
                line: 0,
                msg: format!("cannot refine from {from} to {to}"),
            }),
        }
    }

    /// Parses the tab-separated config format
    /// `fine_index<TAB>fine_name<TAB>level2_name`, one line per fine label.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse_config(name: &str, text: &str) -> Result<Self, TaxonomyError> {
        let mut entries: BTreeMap<usize, (String, usize)> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| TaxonomyError::Parse {
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [idx, fine, parent] = fields[..] else {
                return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad fine index `{idx}`")))?;
            let parent_idx = level2_index(parent.trim())
                .ok_or_else(|| parse_err(format!("unknown Level-2 name `{parent}`")))?;
            if entries
                .insert(idx, (fine.trim().to_string(), parent_idx))
                .is_some()
            {
                return Err(parse_err(format!("fine index {idx} defined twice")));
            }
        }
        let k = entries.keys().next_back().map_or(0, |&m| m + 1);
        let mut labels = vec![String::new(); k];
        let mut to_level2 = BTreeMap::new();
        for (i, (fine, p)) in entries {
            labels[i] = fine;
            to_level2.insert(i, p);
        }
        Self::new(name, labels, to_level2).validated()
    }

    /// Loads a config file; the taxonomy is named after the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse_config(&name, &std::fs::read_to_string(path)?)
    }

    pub fn to_config(&self) -> String {
        let mut out = String::new();
        for (i, fine) in self.fine_labels.iter().enumerate() {
            let parent = self.to_level2.get(&i).map_or("?", |&p| LEVEL2_NAMES[p]);
            out.push_str(&format!("{i}\t{fine}\t{parent}\n"));
        }
        out
    }

    /// One of the built-in taxonomies `A`, `B` or `C`.
    pub fn builtin(name: &str) -> Result<Self, TaxonomyError> {
        let pairs: &[(&str, &str)] = match name {
            "A" => &BUILTIN_A,
            "B" => &BUILTIN_B,
            "C" => &BUILTIN_C,
            _ => return Err(TaxonomyError::Unknown(name.to_string())),
        };
        Self::from_pairs(name, pairs)
    }
}

fn level2_index(name: &str) -> Option<usize> {
    LEVEL2_NAMES.iter().position(|&n| n == name)
}

const BUILTIN_A: [(&str, &str); 7] = [
    ("Background", "Background"),
    ("Head", "Head"),
    ("Torso", "Torso"),
    ("UpperArm", "Arm"),
    ("LowerArm", "Arm"),
    ("UpperLeg", "Leg"),
    ("LowerLeg", "Leg"),
];

const BUILTIN_B: [(&str, &str); 12] = [
    ("Background", "Background"),
    ("Face", "Head"),
    ("Hair", "Head"),
    ("Hat", "Head"),
    ("TorsoSkin", "Torso"),
    ("UpperClothes", "Torso"),
    ("UpperArm", "Arm"),
    ("LowerArm", "Arm"),
    ("Pants", "Leg"),
    ("UpperLeg", "Leg"),
    ("LowerLeg", "Leg"),
    ("Shoe", "Leg"),
];

const BUILTIN_C: [(&str, &str); 10] = [
    ("Background", "Background"),
    ("Face", "Head"),
    ("Hair", "Head"),
    ("Torso", "Torso"),
    ("Arm", "Arm"),
    ("Hand", "Arm"),
    ("UpperLeg", "Leg"),
    ("LowerLeg", "Leg"),
    ("Shoe", "Leg"),
    ("Belt", "Torso"),
];

/// The three built-in synthetic taxonomies: `A` (7 fine labels), `B` (12)
/// and `C` (10).
pub fn builtin_taxonomies() -> [Taxonomy; 3] {
    ["A", "B", "C"].map(|n| Taxonomy::builtin(n).expect("built-in taxonomies are valid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upper_arm_climbs_to_foreground() {
        let a = Taxonomy::builtin("A").unwrap();
        let upper_arm = a.fine_labels().iter().position(|l| l == "UpperArm").unwrap();
        assert_eq!(LEVEL2_NAMES[a.ancestor(upper_arm, Level::Two).unwrap()], "Arm");
        assert_eq!(LEVEL1_NAMES[a.ancestor(upper_arm, Level::One).unwrap()], "Foreground");
    }

    #[test]
    fn builtin_sizes_and_shared_coarse_levels() {
        let [a, b, c] = builtin_taxonomies();
        assert_eq!(
            [a.num_classes(Level::Three), b.num_classes(Level::Three), c.num_classes(Level::Three)],
            [7, 12, 10]
        );
        for t in [&a, &b, &c] {
            assert!(t.validate().is_ok());
            assert_eq!(t.class_names(Level::Two), LEVEL2_NAMES);
            assert_eq!(t.class_names(Level::One), LEVEL1_NAMES);
        }
        // every pair splits at least one coarse class differently
        for (x, y) in [(&a, &b), (&a, &c), (&b, &c)] {
            assert!((1..5).any(|p| x.children(p).len() != y.children(p).len()
                || x.children(p).iter().zip(y.children(p)).any(|(&i, j)| x.fine_labels()[i] != y.fine_labels()[j])));
        }
    }

    #[test]
    fn foreground_to_background_is_a_violation() {
        let labels = vec!["Background".to_string(), "Head".to_string()];
        let t = Taxonomy::new("bad", labels, BTreeMap::from([(0, 0), (1, 0)]));
        let v = t.validate().unwrap_err();
        assert!(matches!(v[0], Violation::ForegroundToBackground { fine: 1, .. }));
    }

    #[test]
    fn missing_fine_index_is_a_violation() {
        let labels = vec!["Background".to_string(), "Head".to_string(), "Arm".to_string()];
        let t = Taxonomy::new("bad", labels, BTreeMap::from([(0, 0), (1, 1)]));
        assert_eq!(t.validate().unwrap_err(), vec![Violation::MissingParent(2)]);
    }

    #[test]
    fn level1_map_is_checked() {
        let t = Taxonomy::builtin("A").unwrap().with_level1_map(vec![0, 1, 1, 0, 1]);
        assert!(matches!(t.validate().unwrap_err()[0], Violation::Level1Map(_)));
    }

    #[test]
    fn all_background_stays_background() {
        let b = Taxonomy::builtin("B").unwrap();
        let m = LabelMap::filled(3, 4, 12, 0);
        for level in Level::ALL {
            let c = b.coarsen(&m, level).unwrap();
            assert!(c.values().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn config_round_trip_and_errors() {
        let c = Taxonomy::builtin("C").unwrap();
        let parsed = Taxonomy::parse_config("C", &c.to_config()).unwrap();
        assert_eq!(parsed, c);

        let err = Taxonomy::parse_config("x", "0\tBackground\tBackground\n1\tWing\tTail\n").unwrap_err();
        assert!(matches!(err, TaxonomyError::Parse { line: 2, .. }));

        let err = Taxonomy::parse_config("x", "0\tBackground\tBackground\n2\tFace\tHead\n").unwrap_err();
        match err {
            TaxonomyError::Invalid { violations, .. } => {
                assert!(violations.contains(&Violation::MissingParent(1)))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coarsen_rejects_wrong_level_input() {
        let a = Taxonomy::builtin("A").unwrap();
        let m = LabelMap::filled(2, 2, 12, 0);
        assert!(matches!(
            a.coarsen(&m, Level::Two),
            Err(TaxonomyError::ClassCount { .. })
        ));
    }
}
