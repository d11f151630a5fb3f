//! Observed paths and entity labels.
//!
//! A [`PathCorpus`] holds the raw sequences with dense entity ids assigned in
//! order of first appearance, so two loads of the same file always agree on
//! ids. Tokens may not contain the reserved characters `|` and `,`, which the
//! graph edge-list format uses as node delimiters.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Characters that may not appear inside an entity token.
pub const RESERVED_CHARS: [char; 4] = ['|', ',', '\t', '\n'];

/// Fraction of malformed sequence lines above which loading fails.
pub const MAX_REJECTED_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: token {token:?} contains a reserved character (one of | , tab newline)")]
    ReservedCharacter { line: usize, token: String },
    #[error("{rejected} of {total} sequence lines have fewer than 2 tokens (limit 10%); check --line-ids")]
    TooManyShortLines { rejected: usize, total: usize },
    #[error("corpus contains no paths")]
    Empty,
    #[error("line {line}: expected `entity<TAB>class`")]
    MalformedLabel { line: usize },
    #[error("line {line}: entity {entity:?} labeled both {first:?} and {second:?}")]
    ConflictingLabel {
        line: usize,
        entity: String,
        first: String,
        second: String,
    },
    #[error("unknown entity id {0}")]
    UnknownEntity(u32),
}

/// Dense id of an observed entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

impl EntityId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Returns true if `token` is usable as an entity name.
pub fn is_valid_token(token: &str) -> bool {
    !token.is_empty() && !token.contains(RESERVED_CHARS)
}

/// Bijection between entity tokens and dense ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntityIndex {
    tokens: Vec<String>,
    ids: HashMap<String, EntityId>,
}

impl EntityIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `token`, assigning the next dense id if unseen.
    /// The caller is responsible for token validity.
    pub fn intern(&mut self, token: &str) -> EntityId {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = EntityId(self.tokens.len() as u32);
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<EntityId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: EntityId) -> &str {
        &self.tokens[id.idx()]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.tokens.len() as u32).map(EntityId)
    }
}

/// The observed paths S.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathCorpus {
    paths: Vec<Vec<EntityId>>,
    index: EntityIndex,
    rejected_lines: usize,
}

impl PathCorpus {
    /// Builds a corpus from already-tokenized paths. Paths shorter than two
    /// tokens are dropped and counted.
    pub fn from_paths<P, T>(paths: P) -> Result<Self, CorpusError>
    where
        P: IntoIterator<Item = T>,
        T: IntoIterator,
        T::Item: AsRef<str>,
    {
        let mut index = EntityIndex::new();
        let mut out = Vec::new();
        let mut rejected = 0;
        for (i, path) in paths.into_iter().enumerate() {
            let tokens: Vec<T::Item> = path.into_iter().collect();
            if tokens.len() < 2 {
                rejected += 1;
                continue;
            }
            let mut ids = Vec::with_capacity(tokens.len());
            for t in &tokens {
                let t = t.as_ref();
                if !is_valid_token(t) {
                    return Err(CorpusError::ReservedCharacter {
                        line: i + 1,
                        token: t.to_string(),
                    });
                }
                ids.push(index.intern(t));
            }
            out.push(ids);
        }
        if out.is_empty() {
            return Err(CorpusError::Empty);
        }
        Ok(PathCorpus {
            paths: out,
            index,
            rejected_lines: rejected,
        })
    }

    /// Parses the sequence-file format: one path per line, whitespace
    /// separated, `#` comment lines and blank lines skipped. With
    /// `has_line_id` the first token of each line is discarded.
    pub fn parse(text: &str, has_line_id: bool) -> Result<Self, CorpusError> {
        let mut index = EntityIndex::new();
        let mut paths = Vec::new();
        let mut rejected = 0usize;
        let mut total = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            total += 1;
            let mut tokens = trimmed.split_whitespace();
            if has_line_id {
                tokens.next();
            }
            let tokens: Vec<&str> = tokens.collect();
            if let Some(bad) = tokens.iter().find(|t| !is_valid_token(t)) {
                return Err(CorpusError::ReservedCharacter {
                    line: lineno + 1,
                    token: bad.to_string(),
                });
            }
            if tokens.len() < 2 {
                rejected += 1;
                continue;
            }
            paths.push(tokens.iter().map(|t| index.intern(t)).collect());
        }
        if total > 0 && rejected as f64 > MAX_REJECTED_FRACTION * total as f64 {
            return Err(CorpusError::TooManyShortLines { rejected, total });
        }
        if paths.is_empty() {
            return Err(CorpusError::Empty);
        }
        Ok(PathCorpus {
            paths,
            index,
            rejected_lines: rejected,
        })
    }

    pub fn load(path: impl AsRef<Path>, has_line_id: bool) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, has_line_id)
    }

    /// Renders the corpus in the sequence-file format (without line ids).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for path in &self.paths {
            let line: Vec<&str> = path.iter().map(|&e| self.index.token(e)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn paths(&self) -> &[Vec<EntityId>] {
        &self.paths
    }

    pub fn index(&self) -> &EntityIndex {
        &self.index
    }

    pub fn n_entities(&self) -> usize {
        self.index.len()
    }

    /// Lines dropped for having fewer than two tokens.
    pub fn rejected_lines(&self) -> usize {
        self.rejected_lines
    }

    /// Total number of transitions, `Σ (len − 1)`.
    pub fn n_transitions(&self) -> usize {
        self.paths.iter().map(|p| p.len() - 1).sum()
    }
}

/// Class labels for (a subset of) entities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    labels: Vec<Option<u32>>,
    class_names: Vec<String>,
    skipped_unknown: usize,
}

impl LabelMap {
    /// Builds a label map directly from `(entity, class)` pairs. Class ids
    /// must be dense in `[0, n_classes)`.
    pub fn from_assignments(
        n_entities: usize,
        n_classes: usize,
        assignments: impl IntoIterator<Item = (EntityId, u32)>,
    ) -> Self {
        let mut labels = vec![None; n_entities];
        for (e, c) in assignments {
            assert!((c as usize) < n_classes, "class id {c} out of range");
            labels[e.idx()] = Some(c);
        }
        LabelMap {
            labels,
            class_names: (0..n_classes).map(|c| c.to_string()).collect(),
            skipped_unknown: 0,
        }
    }

    /// Parses `entity<TAB>class` lines against `index`. Labels for unknown
    /// entities are skipped and counted; class ids are dense in
    /// first-appearance order.
    pub fn parse(text: &str, index: &EntityIndex) -> Result<Self, CorpusError> {
        let mut labels: Vec<Option<u32>> = vec![None; index.len()];
        let mut class_names: Vec<String> = Vec::new();
        let mut class_ids: HashMap<String, u32> = HashMap::new();
        let mut skipped = 0;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(entity), Some(class), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(CorpusError::MalformedLabel { line: lineno + 1 });
            };
            let (entity, class) = (entity.trim(), class.trim());
            if entity.is_empty() || class.is_empty() {
                return Err(CorpusError::MalformedLabel { line: lineno + 1 });
            }
            let Some(id) = index.get(entity) else {
                skipped += 1;
                continue;
            };
            let next = class_names.len() as u32;
            let cid = *class_ids.entry(class.to_string()).or_insert_with(|| {
                class_names.push(class.to_string());
                next
            });
            match labels[id.idx()] {
                Some(prev) if prev != cid => {
                    return Err(CorpusError::ConflictingLabel {
                        line: lineno + 1,
                        entity: entity.to_string(),
                        first: class_names[prev as usize].clone(),
                        second: class.to_string(),
                    })
                }
                _ => labels[id.idx()] = Some(cid),
            }
        }
        Ok(LabelMap {
            labels,
            class_names,
            skipped_unknown: skipped,
        })
    }

    pub fn load(path: impl AsRef<Path>, index: &EntityIndex) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, index)
    }

    /// Renders `entity<TAB>class` lines in entity-id order.
    pub fn to_text(&self, index: &EntityIndex) -> String {
        let mut out = String::new();
        for (e, c) in self.iter() {
            out.push_str(index.token(e));
            out.push('\t');
            out.push_str(&self.class_names[c as usize]);
            out.push('\n');
        }
        out
    }

    pub fn get(&self, e: EntityId) -> Option<u32> {
        self.labels.get(e.idx()).copied().flatten()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_name(&self, c: u32) -> &str {
        &self.class_names[c as usize]
    }

    pub fn n_labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Label rows whose entity was not in the index.
    pub fn skipped_unknown(&self) -> usize {
        self.skipped_unknown
    }

    /// Labeled entities in id order.
    pub fn iter(&self) -> impl Iterator<Item = (EntityId, u32)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|c| (EntityId(i as u32), c)))
    }

    /// Most frequent class (lowest id on ties) and its share of labeled
    /// entities.
    pub fn majority_class(&self) -> Option<(u32, f64)> {
        let mut counts = vec![0usize; self.n_classes()];
        for (_, c) in self.iter() {
            counts[c as usize] += 1;
        }
        let total: usize = counts.iter().sum();
        let (best, &n) = counts
            .iter()
            .enumerate()
            .rev()
            .max_by_key(|(_, &n)| n)?;
        (total > 0).then(|| (best as u32, n as f64 / total as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_corpus() {
        let c = PathCorpus::parse("A C D\nB C E", false).unwrap();
        assert_eq!(c.n_entities(), 5);
        assert_eq!(c.paths().len(), 2);
        assert_eq!(c.index().token(EntityId(0)), "A");
        assert_eq!(c.index().token(EntityId(1)), "C");
    }

    #[test]
    fn line_id_is_stripped() {
        let c = PathCorpus::parse("1 A C D", true).unwrap();
        assert_eq!(c.paths().len(), 1);
        let tokens: Vec<&str> = c.paths()[0].iter().map(|&e| c.index().token(e)).collect();
        assert_eq!(tokens, ["A", "C", "D"]);
    }

    #[test]
    fn reserved_character_names_line() {
        let err = PathCorpus::parse("C|A D", false).unwrap_err();
        match err {
            CorpusError::ReservedCharacter { line, ref token } => {
                assert_eq!(line, 1);
                assert_eq!(token, "C|A");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("line 1"));
        assert!(PathCorpus::parse("A B\nA,B C", false).is_err());
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let c = PathCorpus::parse("# header\n\nA B\n  \n# x y\nB C\n", false).unwrap();
        assert_eq!(c.paths().len(), 2);
        assert_eq!(c.rejected_lines(), 0);
    }

    #[test]
    fn short_lines_tolerated_up_to_ten_percent() {
        let mut text = String::new();
        for _ in 0..10 {
            text.push_str("A B C\n");
        }
        text.push_str("X\n");
        let c = PathCorpus::parse(&text, false).unwrap();
        assert_eq!(c.rejected_lines(), 1);
        assert_eq!(c.paths().len(), 10);
        text.push_str("Y\n");
        assert!(matches!(
            PathCorpus::parse(&text, false),
            Err(CorpusError::TooManyShortLines { rejected: 2, total: 12 })
        ));
    }

    #[test]
    fn wrong_line_id_flag_fails_loudly() {
        // Every line becomes a single token once the "id" is stripped.
        let err = PathCorpus::parse("A B\nC D\nE F\n", true).unwrap_err();
        assert!(matches!(err, CorpusError::TooManyShortLines { .. }));
    }

    #[test]
    fn labels_basic() {
        let c = PathCorpus::parse("A B C", false).unwrap();
        let l = LabelMap::parse("A\tred\nB\tred\nC\tblue", c.index()).unwrap();
        assert_eq!(l.n_classes(), 2);
        assert_eq!(l.n_labeled(), 3);
        assert_eq!(l.get(EntityId(2)), Some(1));
    }

    #[test]
    fn labels_unknown_entity_skipped() {
        let c = PathCorpus::parse("A B C", false).unwrap();
        let l = LabelMap::parse("A\tred\nZ\tblue\n", c.index()).unwrap();
        assert_eq!(l.skipped_unknown(), 1);
        assert_eq!(l.n_labeled(), 1);
        assert_eq!(l.n_classes(), 1);
    }

    #[test]
    fn labels_empty_file() {
        let c = PathCorpus::parse("A B C", false).unwrap();
        let l = LabelMap::parse("", c.index()).unwrap();
        assert_eq!(l.n_classes(), 0);
        assert_eq!(l.majority_class(), None);
    }

    #[test]
    fn labels_conflict_is_error_but_repeat_is_fine() {
        let c = PathCorpus::parse("A B C", false).unwrap();
        assert!(LabelMap::parse("A\tred\nA\tred\n", c.index()).is_ok());
        let err = LabelMap::parse("A\tred\nA\tblue\n", c.index()).unwrap_err();
        assert!(matches!(err, CorpusError::ConflictingLabel { line: 2, .. }));
    }

    #[test]
    fn majority_ties_pick_lowest_class() {
        let l = LabelMap::from_assignments(
            4,
            2,
            [(EntityId(0), 1), (EntityId(1), 0), (EntityId(2), 1), (EntityId(3), 0)],
        );
        assert_eq!(l.majority_class(), Some((0, 0.5)));
    }
}
