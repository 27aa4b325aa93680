//! Hierarchical code ontology: leaf codes with definitions, grouped into a
//! partition of the leaves at every level.
//!
//! Level 0 is a single root group holding every leaf, so code that iterates
//! "all levels containing a code" never needs a special case for it.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ONTOLOGY_NAME: &str = "ICD-9";
pub const ROOT_LABEL: &str = "root";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CodeId(String);

impl CodeId {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(Error::Invalid(format!("invalid code id `{text}`")));
        }
        Ok(CodeId(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for CodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub level: usize,
    pub index: usize,
    pub label: String,
}

impl GroupId {
    /// The `(level, index)` pair that identifies the group.
    pub fn key(&self) -> (usize, usize) {
        (self.level, self.index)
    }
}

#[derive(Debug, Clone)]
struct Group {
    id: GroupId,
    parent: Option<usize>,
    members: Arc<[usize]>,
}

/// One row of the ontology table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafRow {
    pub code: String,
    pub definition: String,
    /// Group labels for levels 1..=depth.
    pub groups: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Ontology {
    name: String,
    depth: usize,
    codes: Vec<CodeId>,
    definitions: Vec<String>,
    code_index: HashMap<String, usize>,
    def_index: HashMap<String, usize>,
    levels: Vec<Vec<Group>>,
    /// `leaf_groups[leaf][level]` is the index of the leaf's group at that level.
    leaf_groups: Vec<Vec<usize>>,
}

impl Ontology {
    /// Builds and validates an ontology from table rows.
    pub fn from_rows(name: impl Into<String>, depth: usize, rows: Vec<LeafRow>) -> Result<Self> {
        let name = name.into();
        if depth == 0 {
            return Err(Error::Invalid("ontology depth must be >= 1".into()));
        }
        if rows.is_empty() {
            return Err(Error::Invalid("ontology has no leaves".into()));
        }

        let mut code_index = HashMap::with_capacity(rows.len());
        let mut def_index = HashMap::with_capacity(rows.len());
        let mut codes = Vec::with_capacity(rows.len());
        let mut definitions = Vec::with_capacity(rows.len());

        for (i, row) in rows.iter().enumerate() {
            if row.groups.len() != depth {
                return Err(Error::Invalid(format!(
                    "code `{}` has {} group labels, expected {depth}",
                    row.code,
                    row.groups.len()
                )));
            }
            if let Some(&prev) = code_index.get(&row.code) {
                let prev_row: &LeafRow = &rows[prev];
                if let Some(level) = (0..depth).find(|&l| prev_row.groups[l] != row.groups[l]) {
                    return Err(Error::NotAPartition {
                        level: level + 1,
                        msg: format!(
                            "code `{}` appears in groups `{}` and `{}`",
                            row.code, prev_row.groups[level], row.groups[level]
                        ),
                    });
                }
                return Err(Error::DuplicateCode(row.code.clone()));
            }
            let code = CodeId::new(row.code.clone())?;
            if row.definition.trim().is_empty() {
                return Err(Error::Invalid(format!("code `{}` has an empty definition", row.code)));
            }
            if def_index.contains_key(&row.definition) {
                return Err(Error::DuplicateDefinition(row.definition.clone()));
            }
            code_index.insert(row.code.clone(), i);
            def_index.insert(row.definition.clone(), i);
            codes.push(code);
            definitions.push(row.definition.clone());
        }

        let root = Group {
            id: GroupId {
                level: 0,
                index: 0,
                label: ROOT_LABEL.to_string(),
            },
            parent: None,
            members: (0..rows.len()).collect(),
        };
        let mut levels = vec![vec![root]];
        let mut leaf_groups = vec![vec![0usize; depth + 1]; rows.len()];

        for level in 1..=depth {
            let mut groups: Vec<Group> = Vec::new();
            let mut members: Vec<Vec<usize>> = Vec::new();
            let mut by_label: HashMap<&str, usize> = HashMap::new();
            for (leaf, row) in rows.iter().enumerate() {
                let label = row.groups[level - 1].as_str();
                if label.trim().is_empty() {
                    return Err(Error::Invalid(format!(
                        "code `{}` has an empty level-{level} group label",
                        row.code
                    )));
                }
                let parent = leaf_groups[leaf][level - 1];
                let g = match by_label.get(label) {
                    Some(&g) => {
                        if groups[g].parent != Some(parent) {
                            return Err(Error::OrphanGroup {
                                level,
                                label: label.to_string(),
                            });
                        }
                        g
                    }
                    None => {
                        let g = groups.len();
                        groups.push(Group {
                            id: GroupId {
                                level,
                                index: g,
                                label: label.to_string(),
                            },
                            parent: Some(parent),
                            members: Arc::from(Vec::new()),
                        });
                        members.push(Vec::new());
                        by_label.insert(label, g);
                        g
                    }
                };
                members[g].push(leaf);
                leaf_groups[leaf][level] = g;
            }
            for (g, m) in groups.iter_mut().zip(members) {
                g.members = Arc::from(m);
            }
            levels.push(groups);
        }

        let ontology = Ontology {
            name,
            depth,
            codes,
            definitions,
            code_index,
            def_index,
            levels,
            leaf_groups,
        };
        ontology.check_partitions()?;
        Ok(ontology)
    }

    fn check_partitions(&self) -> Result<()> {
        let n = self.codes.len();
        for (level, groups) in self.levels.iter().enumerate() {
            let mut seen = vec![false; n];
            for g in groups {
                if g.members.is_empty() {
                    return Err(Error::NotAPartition {
                        level,
                        msg: format!("group `{}` is empty", g.id.label),
                    });
                }
                for &m in g.members.iter() {
                    if std::mem::replace(&mut seen[m], true) {
                        return Err(Error::NotAPartition {
                            level,
                            msg: format!("code `{}` is in two groups", self.codes[m]),
                        });
                    }
                }
                if let Some(p) = g.parent {
                    let parent = &self.levels[level - 1][p];
                    if !g.members.iter().all(|m| parent.members.binary_search(m).is_ok()) {
                        return Err(Error::OrphanGroup {
                            level,
                            label: g.id.label.clone(),
                        });
                    }
                }
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::NotAPartition {
                    level,
                    msg: format!("code `{}` is in no group", self.codes[missing]),
                });
            }
        }
        Ok(())
    }

    pub fn parse_table(text: &str, source: &str) -> Result<Self> {
        let malformed = |line: usize, msg: String| Error::Malformed {
            path: source.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| malformed(1, "empty file".into()))?;
        let mut depth = None;
        let mut name = DEFAULT_ONTOLOGY_NAME.to_string();
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| malformed(1, "expected header `#depth=<N>`".into()))?;
        for field in header.split('\t') {
            match field.split_once('=') {
                Some(("depth", v)) => {
                    depth = Some(
                        v.trim()
                            .parse::<usize>()
                            .map_err(|e| malformed(1, format!("bad depth `{v}`: {e}")))?,
                    )
                }
                Some(("name", v)) if !v.trim().is_empty() => name = v.trim().to_string(),
                _ => return Err(malformed(1, format!("unrecognized header field `{field}`"))),
            }
        }
        let depth = depth.ok_or_else(|| malformed(1, "header lacks depth".into()))?;
        if depth == 0 {
            return Err(malformed(1, "depth must be >= 1".into()));
        }

        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != depth + 2 {
                return Err(malformed(
                    i + 1,
                    format!("expected {} tab-separated fields, found {}", depth + 2, fields.len()),
                ));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(malformed(i + 1, "empty field".into()));
            }
            rows.push(LeafRow {
                code: fields[0].to_string(),
                definition: fields[1].to_string(),
                groups: fields[2..].iter().map(|s| s.to_string()).collect(),
            });
        }
        Ontology::from_rows(name, depth, rows)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("#depth={}", self.depth);
        if self.name != DEFAULT_ONTOLOGY_NAME {
            out.push_str(&format!("\tname={}", self.name));
        }
        out.push('\n');
        for leaf in 0..self.codes.len() {
            out.push_str(self.codes[leaf].as_str());
            out.push('\t');
            out.push_str(&self.definitions[leaf]);
            for level in 1..=self.depth {
                out.push('\t');
                out.push_str(&self.levels[level][self.leaf_groups[leaf][level]].id.label);
            }
            out.push('\n');
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Leaf codes in table order.
    pub fn codes(&self) -> &[CodeId] {
        &self.codes
    }

    pub fn code_at(&self, leaf: usize) -> &CodeId {
        &self.codes[leaf]
    }

    pub fn leaf_index(&self, code: &str) -> Result<usize> {
        self.code_index
            .get(code)
            .copied()
            .ok_or_else(|| Error::UnknownCode(code.to_string()))
    }

    pub fn definition_of(&self, code: &str) -> Result<&str> {
        Ok(&self.definitions[self.leaf_index(code)?])
    }

    pub fn definition_at(&self, leaf: usize) -> &str {
        &self.definitions[leaf]
    }

    pub fn code_of(&self, definition: &str) -> Result<&CodeId> {
        self.def_index
            .get(definition)
            .map(|&i| &self.codes[i])
            .ok_or_else(|| Error::UnknownDefinition(definition.to_string()))
    }

    /// One group per level `0..=depth`, root first.
    pub fn groups_of(&self, code: &str) -> Result<Vec<&GroupId>> {
        let leaf = self.leaf_index(code)?;
        Ok(self.leaf_groups[leaf]
            .iter()
            .enumerate()
            .map(|(level, &g)| &self.levels[level][g].id)
            .collect())
    }

    /// Group index of `leaf` at `level`.
    pub fn group_index_of(&self, leaf: usize, level: usize) -> usize {
        self.leaf_groups[leaf][level]
    }

    pub fn group(&self, level: usize, index: usize) -> Result<&GroupId> {
        self.levels
            .get(level)
            .and_then(|gs| gs.get(index))
            .map(|g| &g.id)
            .ok_or(Error::UnknownGroup { level, index })
    }

    pub fn parent_of(&self, level: usize, index: usize) -> Result<Option<&GroupId>> {
        let g = self
            .levels
            .get(level)
            .and_then(|gs| gs.get(index))
            .ok_or(Error::UnknownGroup { level, index })?;
        Ok(g.parent.map(|p| &self.levels[level - 1][p].id))
    }

    /// Sorted leaf indices of a group.
    pub fn member_indices(&self, level: usize, index: usize) -> Result<&[usize]> {
        self.levels
            .get(level)
            .and_then(|gs| gs.get(index))
            .map(|g| &g.members[..])
            .ok_or(Error::UnknownGroup { level, index })
    }

    /// Shared handle to a group's sorted leaf indices.
    pub fn members_shared(&self, level: usize, index: usize) -> Result<Arc<[usize]>> {
        self.levels
            .get(level)
            .and_then(|gs| gs.get(index))
            .map(|g| Arc::clone(&g.members))
            .ok_or(Error::UnknownGroup { level, index })
    }

    pub fn group_members(&self, group: &GroupId) -> Result<BTreeSet<CodeId>> {
        Ok(self
            .member_indices(group.level, group.index)?
            .iter()
            .map(|&i| self.codes[i].clone())
            .collect())
    }

    pub fn groups_at(&self, level: usize) -> impl Iterator<Item = &GroupId> {
        self.levels
            .get(level)
            .into_iter()
            .flat_map(|gs| gs.iter().map(|g| &g.id))
    }

    pub fn group_count(&self, level: usize) -> usize {
        self.levels.get(level).map_or(0, Vec::len)
    }

    /// Looks a group up by its label at a given level.
    pub fn find_group(&self, level: usize, label: &str) -> Option<&GroupId> {
        self.groups_at(level).find(|g| g.label == label)
    }
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ontology::parse_table(&text, &path.display().to_string())
}

pub fn save_ontology(ontology: &Ontology, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ontology.to_table()).map_err(|e| Error::io(path, e))
}
