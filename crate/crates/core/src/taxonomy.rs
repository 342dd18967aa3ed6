//! Unified label taxonomy for training on several datasets whose label sets
//! disagree.
//!
//! Text format, one directive per line (`#` starts a comment):
//!
//! ```text
//! class <id> <name> <A|B>
//! dataset <name> <standard|aux>
//! remap <dataset> <raw> <unified-id|ignore>
//! ```
//!
//! Class ids must be `0..K` without gaps. Exactly one dataset is standard:
//! its annotations are trusted for set-B classes. Set-A classes are ones
//! every dataset labels consistently.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{config, data, Error, Result};
use crate::labels::IGNORE_ID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassSet {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub set: ClassSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetInfo {
    pub name: String,
    pub standard: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTaxonomy {
    classes: Vec<ClassInfo>,
    datasets: Vec<DatasetInfo>,
    /// Raw label -> unified id or `IGNORE_ID`, per dataset.
    remaps: BTreeMap<String, BTreeMap<u32, u32>>,
}

impl LabelTaxonomy {
    pub fn new(
        classes: Vec<ClassInfo>,
        datasets: Vec<DatasetInfo>,
        remaps: BTreeMap<String, BTreeMap<u32, u32>>,
    ) -> Result<Self> {
        let t = Self {
            classes,
            datasets,
            remaps,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return config("taxonomy needs at least two classes");
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id as usize != i {
                return config(format!("class ids must run 0..K in order; found {} at position {i}", c.id));
            }
        }
        if self.classes.iter().any(|c| c.id == IGNORE_ID) {
            return config(format!("ignore id {IGNORE_ID} used as a class"));
        }
        match self.datasets.iter().filter(|d| d.standard).count() {
            1 => {}
            n => return config(format!("exactly one standard dataset required, found {n}")),
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if self.datasets[..i].iter().any(|e| e.name == d.name) {
                return config(format!("dataset {:?} declared twice", d.name));
            }
            if !self.remaps.contains_key(&d.name) {
                return config(format!("dataset {:?} has no remap table", d.name));
            }
        }
        for (ds, table) in &self.remaps {
            if !self.datasets.iter().any(|d| &d.name == ds) {
                return config(format!("remap for undeclared dataset {ds:?}"));
            }
            if let Some((raw, u)) = table
                .iter()
                .find(|(_, &u)| u != IGNORE_ID && u as usize >= self.classes.len())
            {
                return config(format!("{ds}: raw {raw} maps to unknown class {u}"));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn datasets(&self) -> &[DatasetInfo] {
        &self.datasets
    }

    pub fn class_set(&self, id: u32) -> Option<ClassSet> {
        self.classes.get(id as usize).map(|c| c.set)
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn class_id(&self, name: &str) -> Option<u32> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn standard_dataset(&self) -> &str {
        // validate() guarantees exactly one.
        &self.datasets.iter().find(|d| d.standard).expect("standard dataset").name
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetInfo> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Data(format!("unknown dataset {name:?}")))
    }

    pub fn remap_table(&self, dataset: &str) -> Result<&BTreeMap<u32, u32>> {
        self.dataset(dataset)?;
        Ok(&self.remaps[dataset])
    }

    /// The same label space with nothing masked: every class joins set A, and
    /// raw labels that were ignored become a new `background` class with
    /// id `K`. Raw labels that already had a class keep it.
    pub fn unmasked(&self) -> Result<Self> {
        let bg = self.classes.len() as u32;
        let mut classes: Vec<ClassInfo> = self
            .classes
            .iter()
            .map(|c| ClassInfo {
                set: ClassSet::A,
                ..c.clone()
            })
            .collect();
        classes.push(ClassInfo {
            id: bg,
            name: "background".into(),
            set: ClassSet::A,
        });
        let remaps = self
            .remaps
            .iter()
            .map(|(ds, t)| {
                let t = t
                    .iter()
                    .map(|(&raw, &u)| (raw, if u == IGNORE_ID { bg } else { u }))
                    .collect();
                (ds.clone(), t)
            })
            .collect();
        Self::new(classes, self.datasets.clone(), remaps)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = Vec::new();
        let mut datasets = Vec::new();
        let mut remaps: BTreeMap<String, BTreeMap<u32, u32>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("taxonomy line {}: {what}: {raw:?}", i + 1));
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad("expected an integer"));
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["class", id, name, set] => classes.push(ClassInfo {
                    id: num(id)?,
                    name: name.to_string(),
                    set: match *set {
                        "A" => ClassSet::A,
                        "B" => ClassSet::B,
                        _ => return Err(bad("class set must be A or B")),
                    },
                }),
                ["dataset", name, kind] => datasets.push(DatasetInfo {
                    name: name.to_string(),
                    standard: match *kind {
                        "standard" => true,
                        "aux" => false,
                        _ => return Err(bad("dataset kind must be standard or aux")),
                    },
                }),
                ["remap", ds, raw_id, target] => {
                    let unified = if *target == "ignore" { IGNORE_ID } else { num(target)? };
                    if remaps
                        .entry(ds.to_string())
                        .or_default()
                        .insert(num(raw_id)?, unified)
                        .is_some()
                    {
                        return Err(bad("duplicate remap"));
                    }
                }
                _ => return Err(bad("unrecognized directive")),
            }
        }
        Self::new(classes, datasets, remaps)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.classes {
            let set = if c.set == ClassSet::A { "A" } else { "B" };
            let _ = writeln!(s, "class {} {} {set}", c.id, c.name);
        }
        for d in &self.datasets {
            let kind = if d.standard { "standard" } else { "aux" };
            let _ = writeln!(s, "dataset {} {kind}", d.name);
        }
        for (ds, t) in &self.remaps {
            for (raw, &u) in t {
                if u == IGNORE_ID {
                    let _ = writeln!(s, "remap {ds} {raw} ignore");
                } else {
                    let _ = writeln!(s, "remap {ds} {raw} {u}");
                }
            }
        }
        s
    }

    /// Checks that `id` is a class of this taxonomy or the ignore id.
    pub fn check_label(&self, id: u32) -> Result<()> {
        if id == IGNORE_ID || (id as usize) < self.classes.len() {
            Ok(())
        } else {
            data(format!("label {id} outside the {}-class taxonomy", self.classes.len()))
        }
    }

    /// The 19 Cityscapes training classes plus the Lost and Found small
    /// obstacle, with road and obstacle in set A. Lost and Found raw ids:
    /// 0 background, 1 free space, 2 obstacle.
    pub fn cityscapes_lostfound() -> Self {
        const CITYSCAPES: [&str; 19] = [
            "road",
            "sidewalk",
            "building",
            "wall",
            "fence",
            "pole",
            "traffic_light",
            "traffic_sign",
            "vegetation",
            "terrain",
            "sky",
            "person",
            "rider",
            "car",
            "truck",
            "bus",
            "train",
            "motorcycle",
            "bicycle",
        ];
        let mut text = String::new();
        for (i, name) in CITYSCAPES.iter().enumerate() {
            let set = if i == 0 { "A" } else { "B" };
            let _ = writeln!(text, "class {i} {name} {set}");
            let _ = writeln!(text, "remap cityscapes {i} {i}");
        }
        text.push_str(
            "class 19 small_obstacle A\n\
             dataset cityscapes standard\n\
             dataset lostfound aux\n\
             remap lostfound 0 ignore\n\
             remap lostfound 1 0\n\
             remap lostfound 2 19\n",
        );
        Self::parse(&text).expect("built-in taxonomy")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
class 0 road A
class 1 sky B
class 2 obstacle A
dataset city standard
dataset lf aux   # auxiliary
remap city 0 0
remap city 1 1
remap lf 0 ignore
remap lf 1 0
remap lf 2 2
";

    #[test]
    fn parse_and_roundtrip() {
        let t = LabelTaxonomy::parse(SMALL).unwrap();
        assert_eq!(t.num_classes(), 3);
        assert_eq!(t.standard_dataset(), "city");
        assert_eq!(t.class_set(1), Some(ClassSet::B));
        assert_eq!(t.remap_table("lf").unwrap()[&0], IGNORE_ID);
        assert_eq!(LabelTaxonomy::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn rejects_malformed_taxonomies() {
        let cases = [
            SMALL.replace("class 2 obstacle A", "class 3 obstacle A"),
            SMALL.replace("dataset lf aux", "dataset lf standard"),
            SMALL.replace("remap lf 2 2", "remap lf 2 7"),
            SMALL.replace("class 1 sky B", "class 1 sky C"),
            format!("{SMALL}remap lf 1 1\n"),
            format!("{SMALL}remap other 1 1\n"),
            SMALL.replace("remap city 0 0\nremap city 1 1\n", ""),
            format!("{SMALL}frobnicate\n"),
        ];
        for c in &cases {
            assert!(LabelTaxonomy::parse(c).is_err(), "{c}");
        }
    }

    #[test]
    fn unmasked_adds_background_and_empties_set_b() {
        let t = LabelTaxonomy::parse(SMALL).unwrap().unmasked().unwrap();
        assert_eq!(t.num_classes(), 4);
        assert!(t.classes().iter().all(|c| c.set == ClassSet::A));
        assert_eq!(t.remap_table("lf").unwrap()[&0], 3);
        assert_eq!(t.remap_table("lf").unwrap()[&1], 0);
    }

    #[test]
    fn cityscapes_preset_has_twenty_classes() {
        let t = LabelTaxonomy::cityscapes_lostfound();
        assert_eq!(t.num_classes(), 20);
        assert_eq!(t.class_id("small_obstacle"), Some(19));
        let a: Vec<_> = t.classes().iter().filter(|c| c.set == ClassSet::A).map(|c| c.id).collect();
        assert_eq!(a, vec![0, 19]);
    }
}
