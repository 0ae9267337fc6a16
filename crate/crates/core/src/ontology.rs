//! WordNet-style taxonomy of synsets.
//!
//! The fixture format has one synset per line, four tab-separated fields:
//!
//! ```text
//! <synset_id> <TAB> <parent_id | ROOT:<category>> <TAB> <lemma>|<lemma>... <TAB> <definition>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Roots sit at depth 1;
//! two synsets under different roots share only the virtual super-root at
//! depth 0.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("parent chain of `{0}` contains a cycle")]
    CycleDetected(String),
    #[error("`{id}` references missing parent `{parent}`")]
    OrphanParent { id: String, parent: String },
    #[error("unknown synset `{0}`")]
    UnknownSynset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootCategory {
    Animals,
    FoodDrinks,
    Plants,
    Objects,
}

impl RootCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            RootCategory::Animals => "animals",
            RootCategory::FoodDrinks => "food_drinks",
            RootCategory::Plants => "plants",
            RootCategory::Objects => "objects",
        }
    }
}

impl fmt::Display for RootCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RootCategory {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "animals" => Ok(RootCategory::Animals),
            "food_drinks" => Ok(RootCategory::FoodDrinks),
            "plants" => Ok(RootCategory::Plants),
            "objects" => Ok(RootCategory::Objects),
            other => Err(format!("unknown root category `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Synset {
    pub synset_id: String,
    pub lemmas: Vec<String>,
    pub definition: String,
    pub parent: Option<String>,
    pub root_category: RootCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Closeness {
    TotallyWrong,
    Close,
    VeryClose,
    Correct,
}

impl Closeness {
    pub fn as_str(self) -> &'static str {
        match self {
            Closeness::TotallyWrong => "totally_wrong",
            Closeness::Close => "close",
            Closeness::VeryClose => "very_close",
            Closeness::Correct => "correct",
        }
    }
}

/// Buckets the depth of the deepest shared ancestor relative to the depth
/// of the predicted synset.
pub fn closeness_message(depth: usize, predicted_depth: usize) -> Closeness {
    if depth == 0 {
        Closeness::TotallyWrong
    } else if depth >= predicted_depth {
        Closeness::Correct
    } else if depth <= predicted_depth.div_ceil(2) {
        Closeness::Close
    } else {
        Closeness::VeryClose
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Taxonomy {
    synsets: BTreeMap<String, Synset>,
    by_lemma: BTreeMap<String, Vec<String>>,
    /// Fixture order, kept so the taxonomy can be written back unchanged.
    order: Vec<String>,
}

struct RawLine {
    line: usize,
    id: String,
    parent: Option<String>,
    category: Option<RootCategory>,
    lemmas: Vec<String>,
    definition: String,
}

impl Taxonomy {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OntologyError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, OntologyError> {
        let mut raw = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: String| OntologyError::ParseError { line: line_no, message };
            let fields: Vec<&str> = trimmed.splitn(4, '\t').collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            let id = fields[0].trim();
            if id.is_empty() {
                return Err(err("empty synset id".into()));
            }
            if !seen.insert(id.to_string()) {
                return Err(err(format!("duplicate synset `{id}`")));
            }
            let (parent, category) = match fields[1].trim().strip_prefix("ROOT:") {
                Some(cat) => (None, Some(cat.parse::<RootCategory>().map_err(err)?)),
                None if fields[1].trim() == "ROOT" => return Err(err("ROOT needs a category, e.g. ROOT:objects".into())),
                None => (Some(fields[1].trim().to_string()), None),
            };
            let lemmas: Vec<String> = fields[2]
                .split('|')
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect();
            if lemmas.is_empty() {
                return Err(err(format!("synset `{id}` has no lemmas")));
            }
            raw.push(RawLine {
                line: line_no,
                id: id.to_string(),
                parent,
                category,
                lemmas,
                definition: fields[3].trim().to_string(),
            });
        }
        Self::from_raw(raw)
    }

    fn from_raw(raw: Vec<RawLine>) -> Result<Self, OntologyError> {
        let parents: BTreeMap<&str, Option<&str>> = raw.iter().map(|r| (r.id.as_str(), r.parent.as_deref())).collect();
        for r in &raw {
            if let Some(p) = &r.parent {
                if !parents.contains_key(p.as_str()) {
                    return Err(OntologyError::OrphanParent {
                        id: r.id.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }
        let categories: BTreeMap<&str, RootCategory> = raw
            .iter()
            .filter_map(|r| r.category.map(|c| (r.id.as_str(), c)))
            .collect();
        let mut synsets = BTreeMap::new();
        for r in &raw {
            let mut visited = HashSet::new();
            let mut cur = r.id.as_str();
            let category = loop {
                if !visited.insert(cur) {
                    return Err(OntologyError::CycleDetected(r.id.clone()));
                }
                match parents[cur] {
                    Some(p) => cur = p,
                    None => break categories[cur],
                }
            };
            debug_assert!(r.line > 0);
            synsets.insert(
                r.id.clone(),
                Synset {
                    synset_id: r.id.clone(),
                    lemmas: r.lemmas.clone(),
                    definition: r.definition.clone(),
                    parent: r.parent.clone(),
                    root_category: category,
                },
            );
        }
        let mut by_lemma: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in synsets.values() {
            for l in &s.lemmas {
                let ids = by_lemma.entry(normalize_lemma(l)).or_default();
                if !ids.contains(&s.synset_id) {
                    ids.push(s.synset_id.clone());
                }
            }
        }
        by_lemma.values_mut().for_each(|ids| ids.sort());
        Ok(Self {
            synsets,
            by_lemma,
            order: raw.into_iter().map(|r| r.id).collect(),
        })
    }

    /// Writes the fixture format back out, in the original line order.
    pub fn to_fixture_string(&self) -> String {
        let mut out = String::from("# protorec taxonomy v1\n");
        for id in &self.order {
            let s = &self.synsets[id];
            let parent = match &s.parent {
                Some(p) => p.clone(),
                None => format!("ROOT:{}", s.root_category),
            };
            out.push_str(&format!("{}\t{}\t{}\t{}\n", s.synset_id, parent, s.lemmas.join("|"), s.definition));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.synsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synsets.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Synset> {
        self.synsets.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.synsets.contains_key(id)
    }

    pub fn synsets(&self) -> impl Iterator<Item = &Synset> {
        self.synsets.values()
    }

    pub fn roots(&self) -> impl Iterator<Item = &Synset> {
        self.synsets.values().filter(|s| s.parent.is_none())
    }

    fn require(&self, id: &str) -> Result<&Synset, OntologyError> {
        self.synsets
            .get(id)
            .ok_or_else(|| OntologyError::UnknownSynset(id.to_string()))
    }

    /// All synsets carrying the lemma, sorted by id. Matching ignores case
    /// and treats spaces and underscores alike.
    pub fn lookup_lemma(&self, lemma: &str) -> Vec<(&str, &str)> {
        self.by_lemma
            .get(&normalize_lemma(lemma))
            .map(|ids| {
                ids.iter()
                    .map(|id| {
                        let s = &self.synsets[id];
                        (s.synset_id.as_str(), s.definition.as_str())
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Chain from the synset itself up to its root.
    pub fn ancestors(&self, id: &str) -> Result<Vec<&str>, OntologyError> {
        let mut chain = vec![self.require(id)?.synset_id.as_str()];
        let mut cur = &self.synsets[id];
        while let Some(p) = &cur.parent {
            cur = &self.synsets[p];
            chain.push(cur.synset_id.as_str());
        }
        Ok(chain)
    }

    /// Root has depth 1.
    pub fn depth(&self, id: &str) -> Result<usize, OntologyError> {
        Ok(self.ancestors(id)?.len())
    }

    pub fn root_of(&self, id: &str) -> Result<&str, OntologyError> {
        Ok(self.ancestors(id)?.last().copied().expect("chain is nonempty"))
    }

    /// The ancestor at `depth` (clamped to the synset's own depth).
    pub fn ancestor_at_depth(&self, id: &str, depth: usize) -> Result<&str, OntologyError> {
        let chain = self.ancestors(id)?;
        let own = chain.len();
        let depth = depth.clamp(1, own);
        Ok(chain[own - depth])
    }

    pub fn common_ancestor_depth(&self, a: &str, b: &str) -> Result<usize, OntologyError> {
        let mut ca = self.ancestors(a)?;
        let mut cb = self.ancestors(b)?;
        ca.reverse();
        cb.reverse();
        Ok(ca.iter().zip(&cb).take_while(|(x, y)| x == y).count())
    }

    pub fn is_ancestor(&self, ancestor: &str, of: &str) -> Result<bool, OntologyError> {
        self.require(ancestor)?;
        Ok(self.ancestors(of)?.contains(&ancestor))
    }
}

fn normalize_lemma(l: &str) -> String {
    l.trim().to_lowercase().replace(' ', "_")
}

/// The small taxonomy shipped with the crate.
pub fn bundled() -> Taxonomy {
    Taxonomy::parse(BUNDLED_FIXTURE).expect("bundled taxonomy is valid")
}

pub const BUNDLED_FIXTURE: &str = include_str!("../data/taxonomy.txt");

#[cfg(test)]
pub(crate) const TOY_FIXTURE: &str = "\
# toy taxonomy
objects\tROOT:objects\tobject|physical object\ta tangible and visible entity
furniture\tobjects\tfurniture|article of furniture\tfurnishings that make a room ready for occupancy
chair\tfurniture\tchair\ta seat for one person, with a support for the back
animals\tROOT:animals\tanimal|beast\ta living organism characterized by voluntary movement
dog\tanimals\tdog|domestic dog\ta member of the genus Canis
";
