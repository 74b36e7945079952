//! On-disk formats for features, labels, attributes and splits.
//!
//! # Feature file (`JEF1`)
//!
//! ```text
//! "JEF1" | version u8 = 1 | rows u32 | cols u32 | rows·cols f64, row-major
//! ```
//!
//! All multi-byte values are little-endian. A CSV variant is accepted on read:
//! a first line `dim=<cols>` followed by one comma-separated row per line.
//!
//! # Text files
//!
//! * labels: one class id per line, one line per feature row
//! * split: `seen: <id> <id> …` and `unseen: <id> <id> …`
//! * assignment: one of `train`, `test_seen`, `test_unseen` per sample
//!
//! A dataset directory holds `visual.jef`, `sentences.jef`, `labels.txt`,
//! `attributes.jef`, `attribute_classes.txt`, `split.txt` and `assignment.txt`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::zsl::{AttributeTable, LabeledEmbeddings};
use crate::ClassId;

pub const FEATURE_MAGIC: &[u8; 4] = b"JEF1";
const FEATURE_VERSION: u8 = 1;
const HEADER_LEN: usize = 13;

pub const VISUAL_FILE: &str = "visual.jef";
pub const SENTENCES_FILE: &str = "sentences.jef";
pub const LABELS_FILE: &str = "labels.txt";
pub const ATTRIBUTES_FILE: &str = "attributes.jef";
pub const ATTRIBUTE_CLASSES_FILE: &str = "attribute_classes.txt";
pub const SPLIT_FILE: &str = "split.txt";
pub const ASSIGNMENT_FILE: &str = "assignment.txt";

pub fn encode_features(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::InvalidArgument("too many rows for JEF1".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::InvalidArgument("too many columns for JEF1".into()))?;
    let mut w = ByteWriter::new();
    w.bytes(FEATURE_MAGIC);
    w.u8(FEATURE_VERSION);
    w.u32(rows);
    w.u32(cols);
    w.f64s(m.data());
    Ok(w.into_inner())
}

pub fn decode_features(bytes: &[u8], origin: &Path) -> Result<Matrix> {
    if !bytes.starts_with(FEATURE_MAGIC) && bytes.starts_with(b"dim=") {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::format(origin, format!("CSV is not UTF-8: {e}")))?;
        return parse_csv(text, origin);
    }
    let mut r = ByteReader::new(bytes, origin);
    r.magic(FEATURE_MAGIC)?;
    r.version(FEATURE_VERSION)?;
    let rows = r.u32("rows")? as u64;
    let cols = r.u32("cols")? as u64;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::format(origin, format!("dimension overflow: {rows} x {cols}")))?;
    let actual = bytes.len() - HEADER_LEN;
    if actual < expected {
        return Err(Error::format(
            origin,
            format!("truncated payload: expected {expected} bytes after the {HEADER_LEN}-byte header, found {actual}"),
        ));
    }
    let data = r.f64s((rows * cols) as usize, "feature payload")?;
    r.finish()?;
    Matrix::from_vec(rows as usize, cols as usize, data)
}

fn parse_csv(text: &str, origin: &Path) -> Result<Matrix> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().trim();
    let cols: usize = header
        .strip_prefix("dim=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::format(origin, format!("bad CSV header {header:?}, expected dim=<cols>")))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(origin, format!("line {}: bad number {field:?}", n + 2)))?;
            if !v.is_finite() {
                return Err(Error::format(origin, format!("line {}: non-finite value", n + 2)));
            }
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::format(
                origin,
                format!("line {}: expected {cols} values, found {}", n + 2, data.len() - before),
            ));
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols, data)
}

/// CSV encoding with 17 significant digits per value.
pub fn encode_features_csv(m: &Matrix) -> String {
    let mut out = format!("dim={}\n", m.cols());
    for row in m.iter_rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    decode_features(&read_file(path)?, path)
}

pub fn write_features(m: &Matrix, path: &Path) -> Result<()> {
    write_file(path, &encode_features(m)?)
}

pub fn write_features_csv(m: &Matrix, path: &Path) -> Result<()> {
    write_file(path, encode_features_csv(m).as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|e| Error::format(path, format!("not UTF-8: {e}")))
}

fn parse_id(token: &str, path: &Path, line: usize) -> Result<ClassId> {
    token
        .parse()
        .map_err(|_| Error::format(path, format!("line {line}: bad class id {token:?}")))
}

pub fn read_labels(path: &Path) -> Result<Vec<ClassId>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_id(l.trim(), path, n + 1))
        .collect()
}

pub fn format_labels(labels: &[ClassId]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn write_labels(labels: &[ClassId], path: &Path) -> Result<()> {
    write_file(path, format_labels(labels).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub seen: BTreeSet<ClassId>,
    pub unseen: BTreeSet<ClassId>,
}

impl Split {
    pub fn new(seen: BTreeSet<ClassId>, unseen: BTreeSet<ClassId>) -> Result<Self> {
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::Split(format!("class {c} is both seen and unseen")));
        }
        Ok(Self { seen, unseen })
    }

    pub fn format(&self) -> String {
        let join = |s: &BTreeSet<ClassId>| s.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        format!("seen: {}\nunseen: {}\n", join(&self.seen), join(&self.unseen))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut seen = None;
        let mut unseen = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::format(path, format!("line {}: expected `seen:` or `unseen:`", n + 1)))?;
            let ids = rest
                .split_whitespace()
                .map(|t| parse_id(t, path, n + 1))
                .collect::<Result<BTreeSet<_>>>()?;
            let slot = match key.trim() {
                "seen" => &mut seen,
                "unseen" => &mut unseen,
                other => return Err(Error::format(path, format!("line {}: unknown key {other:?}", n + 1))),
            };
            if slot.replace(ids).is_some() {
                return Err(Error::format(path, format!("line {}: duplicate {key} line", n + 1)));
            }
        }
        let seen = seen.ok_or_else(|| Error::format(path, "missing `seen:` line"))?;
        let unseen = unseen.ok_or_else(|| Error::format(path, "missing `unseen:` line"))?;
        Self::new(seen, unseen)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.format().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Assignment {
    Train,
    TestSeen,
    TestUnseen,
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Assignment::Train => "train",
            Assignment::TestSeen => "test_seen",
            Assignment::TestUnseen => "test_unseen",
        })
    }
}

impl FromStr for Assignment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Assignment::Train),
            "test_seen" => Ok(Assignment::TestSeen),
            "test_unseen" => Ok(Assignment::TestUnseen),
            other => Err(format!("unknown assignment {other:?}")),
        }
    }
}

pub fn read_assignment(path: &Path) -> Result<Vec<Assignment>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn write_assignment(assignment: &[Assignment], path: &Path) -> Result<()> {
    let text: String = assignment.iter().map(|a| format!("{a}\n")).collect();
    write_file(path, text.as_bytes())
}

/// Paired visual/sentence features with labels, class attributes and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub visual: Matrix,
    pub sentences: Matrix,
    pub labels: Vec<ClassId>,
    pub attributes: AttributeTable,
    pub assignment: Vec<Assignment>,
}

impl Dataset {
    /// Checks row counts and the seen/unseen discipline of every sample.
    pub fn validate(&self) -> Result<()> {
        let n = self.visual.rows();
        if self.sentences.rows() != n || self.labels.len() != n || self.assignment.len() != n {
            return Err(Error::dims(
                "dataset rows",
                format!("{n} rows everywhere"),
                format!(
                    "sentences {} / labels {} / assignment {}",
                    self.sentences.rows(),
                    self.labels.len(),
                    self.assignment.len()
                ),
            ));
        }
        let table = &self.attributes;
        for (i, (&y, a)) in self.labels.iter().zip(&self.assignment).enumerate() {
            let ok = match a {
                Assignment::Train | Assignment::TestSeen => table.seen().contains(&y),
                Assignment::TestUnseen => table.unseen().contains(&y),
            };
            if !ok {
                return Err(Error::Split(format!("sample {i} of class {y} cannot be assigned to {a}")));
            }
        }
        Ok(())
    }

    pub fn indices(&self, which: Assignment) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == which).collect()
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<ClassId> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Visual features of one split paired with their labels.
    pub fn visual_split(&self, which: Assignment) -> LabeledEmbeddings {
        let idx = self.indices(which);
        LabeledEmbeddings {
            embeddings: self.visual.select_rows(&idx),
            labels: self.labels_at(&idx),
        }
    }

    pub fn split(&self) -> Split {
        Split {
            seen: self.attributes.seen().clone(),
            unseen: self.attributes.unseen().clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_features(&self.visual, &dir.join(VISUAL_FILE))?;
        write_features(&self.sentences, &dir.join(SENTENCES_FILE))?;
        write_labels(&self.labels, &dir.join(LABELS_FILE))?;
        write_features(self.attributes.attributes(), &dir.join(ATTRIBUTES_FILE))?;
        write_labels(self.attributes.class_ids(), &dir.join(ATTRIBUTE_CLASSES_FILE))?;
        self.split().write(&dir.join(SPLIT_FILE))?;
        write_assignment(&self.assignment, &dir.join(ASSIGNMENT_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let split = Split::read(&dir.join(SPLIT_FILE))?;
        let attributes = AttributeTable::new(
            read_labels(&dir.join(ATTRIBUTE_CLASSES_FILE))?,
            read_features(&dir.join(ATTRIBUTES_FILE))?,
            split.seen,
            split.unseen,
        )?;
        let ds = Self {
            visual: read_features(&dir.join(VISUAL_FILE))?,
            sentences: read_features(&dir.join(SENTENCES_FILE))?,
            labels: read_labels(&dir.join(LABELS_FILE))?,
            attributes,
            assignment: read_assignment(&dir.join(ASSIGNMENT_FILE))?,
        };
        ds.validate()?;
        Ok(ds)
    }
}
