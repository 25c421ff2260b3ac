//! The verb-object grid and its Known / Unknown / Invalid partition.
//!
//! Annotations are stored sparsely in `concepts.csv`:
//!
//! ```text
//! verb_id,object_id,status
//! 0,3,known
//! 4,1,unknown
//! ```
//!
//! Cells that do not appear in the table are Invalid.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CONCEPTS_HEADER: &str = "verb_id,object_id,status";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConceptStatus {
    Known,
    Unknown,
    Invalid,
}

impl ConceptStatus {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "known" => Some(ConceptStatus::Known),
            "unknown" => Some(ConceptStatus::Unknown),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConceptStatus::Known => "known",
            ConceptStatus::Unknown => "unknown",
            ConceptStatus::Invalid => "invalid",
        }
    }
}

/// Which concept set an evaluation targets. The pool is always the target set
/// plus the Invalid cells; the other non-Invalid set is masked out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Known,
    Unknown,
}

impl Target {
    pub fn status(self) -> ConceptStatus {
        match self {
            Target::Known => ConceptStatus::Known,
            Target::Unknown => ConceptStatus::Unknown,
        }
    }

    /// The status excluded from the evaluation pool.
    pub fn masked(self) -> ConceptStatus {
        match self {
            Target::Known => ConceptStatus::Unknown,
            Target::Unknown => ConceptStatus::Known,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.status().as_str())
    }
}

/// A grid of `n_verbs × n_objects` cells, row-major by verb.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptSpace {
    n_verbs: usize,
    n_objects: usize,
    status: Vec<ConceptStatus>,
}

impl ConceptSpace {
    /// An all-Invalid grid.
    pub fn new(n_verbs: usize, n_objects: usize) -> Result<Self> {
        if n_verbs == 0 || n_objects == 0 {
            return Err(Error::InvalidConfig(format!(
                "concept grid must be at least 1x1, got {n_verbs}x{n_objects}"
            )));
        }
        Ok(Self {
            n_verbs,
            n_objects,
            status: vec![ConceptStatus::Invalid; n_verbs * n_objects],
        })
    }

    pub fn from_statuses(
        n_verbs: usize,
        n_objects: usize,
        status: Vec<ConceptStatus>,
    ) -> Result<Self> {
        let mut space = Self::new(n_verbs, n_objects)?;
        if status.len() != n_verbs * n_objects {
            return Err(Error::Shape(format!(
                "{} statuses for a {n_verbs}x{n_objects} grid",
                status.len()
            )));
        }
        space.status = status;
        Ok(space)
    }

    pub fn n_verbs(&self) -> usize {
        self.n_verbs
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_cells(&self) -> usize {
        self.status.len()
    }

    #[inline]
    pub fn index(&self, verb: usize, object: usize) -> usize {
        debug_assert!(verb < self.n_verbs && object < self.n_objects);
        verb * self.n_objects + object
    }

    #[inline]
    pub fn status(&self, verb: usize, object: usize) -> ConceptStatus {
        self.status[self.index(verb, object)]
    }

    pub fn statuses(&self) -> &[ConceptStatus] {
        &self.status
    }

    pub fn set(&mut self, verb: usize, object: usize, status: ConceptStatus) -> Result<()> {
        self.check_ids(verb, object)?;
        let idx = self.index(verb, object);
        self.status[idx] = status;
        Ok(())
    }

    pub fn count(&self, status: ConceptStatus) -> usize {
        self.status.iter().filter(|&&s| s == status).count()
    }

    /// `(verb, object, status)` for every cell in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, ConceptStatus)> + '_ {
        let n_objects = self.n_objects;
        self.status
            .iter()
            .enumerate()
            .map(move |(i, &s)| (i / n_objects, i % n_objects, s))
    }

    fn check_ids(&self, verb: usize, object: usize) -> Result<()> {
        if verb >= self.n_verbs {
            return Err(Error::OutOfRange {
                what: "verb",
                id: verb,
                limit: self.n_verbs,
            });
        }
        if object >= self.n_objects {
            return Err(Error::OutOfRange {
                what: "object",
                id: object,
                limit: self.n_objects,
            });
        }
        Ok(())
    }

    /// Read a `concepts.csv` annotation table.
    pub fn load(path: &Path, n_verbs: usize, n_objects: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), n_verbs, n_objects)
    }

    /// Parse annotation text. `source` names the input in error messages.
    /// An empty input (no header either) is accepted as an all-Invalid grid.
    pub fn parse(text: &str, source: &str, n_verbs: usize, n_objects: usize) -> Result<Self> {
        let mut space = Self::new(n_verbs, n_objects)?;
        let mut seen = vec![false; space.n_cells()];
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if i == 0 && line == CONCEPTS_HEADER {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    source,
                    line_no,
                    format!("expected 3 fields, found {}", fields.len()),
                ));
            }
            let verb: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(source, line_no, format!("bad verb id {:?}", fields[0])))?;
            let object: usize = fields[1].parse().map_err(|_| {
                Error::parse(source, line_no, format!("bad object id {:?}", fields[1]))
            })?;
            let status = ConceptStatus::parse(fields[2]).ok_or_else(|| {
                Error::parse(source, line_no, format!("bad status {:?}", fields[2]))
            })?;
            space.check_ids(verb, object)?;
            let idx = space.index(verb, object);
            if seen[idx] {
                return Err(Error::DuplicateAnnotation {
                    file: source.to_string(),
                    line: line_no,
                    verb,
                    object,
                });
            }
            seen[idx] = true;
            space.status[idx] = status;
        }
        Ok(space)
    }

    /// Serialize to the sparse table: header plus one row per non-Invalid
    /// cell, row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(16 * (self.n_cells() - self.count(ConceptStatus::Invalid)) + 32);
        out.push_str(CONCEPTS_HEADER);
        out.push('\n');
        for (v, o, s) in self.cells() {
            if s != ConceptStatus::Invalid {
                out.push_str(&format!("{v},{o},{}\n", s.as_str()));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Positive fraction of the evaluation pool for `target`: the target set
    /// over the target set plus Invalid cells.
    pub fn prevalence(&self, target: Target) -> Result<f64> {
        let positives = self.count(target.status());
        let pool = positives + self.count(ConceptStatus::Invalid);
        if pool == 0 {
            return Err(Error::UndefinedPrevalence);
        }
        Ok(positives as f64 / pool as f64)
    }

    pub fn mask(&self, status: ConceptStatus) -> ConceptMask {
        ConceptMask {
            n_verbs: self.n_verbs,
            n_objects: self.n_objects,
            cells: self.status.iter().map(|&s| s == status).collect(),
        }
    }

    /// `(known, unknown, invalid)` membership masks.
    pub fn masks(&self) -> (ConceptMask, ConceptMask, ConceptMask) {
        (
            self.mask(ConceptStatus::Known),
            self.mask(ConceptStatus::Unknown),
            self.mask(ConceptStatus::Invalid),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMask {
    n_verbs: usize,
    n_objects: usize,
    cells: Vec<bool>,
}

impl ConceptMask {
    pub fn get(&self, verb: usize, object: usize) -> bool {
        self.cells[verb * self.n_objects + object]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_verbs, self.n_objects)
    }
}
