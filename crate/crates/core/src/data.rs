//! Interaction logs, item catalogs, leave-one-out splits and persistence.
//!
//! Text formats are tab-separated with optional `#` comment lines:
//!
//! * interactions: `user_id  item_id  rating  timestamp`
//! * catalog: `item_id  title  year  genres` (genres pipe-separated)
//! * augmented edges: a header line, then `user_id  item_id  rrf_score  votes`
//!
//! Embeddings use a fixed-width little-endian binary layout, see
//! [`save_embeddings`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 5.0;

/// Bidirectional mapping between external string ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdTable {
    users: Vec<String>,
    items: Vec<String>,
    user_lookup: HashMap<String, usize>,
    item_lookup: HashMap<String, usize>,
}

impl IdTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern_user(&mut self, id: &str) -> usize {
        intern(&mut self.users, &mut self.user_lookup, id)
    }

    pub fn intern_item(&mut self, id: &str) -> usize {
        intern(&mut self.items, &mut self.item_lookup, id)
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_lookup.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_lookup.get(id).copied()
    }

    pub fn user_id(&self, index: usize) -> &str {
        &self.users[index]
    }

    pub fn item_id(&self, index: usize) -> &str {
        &self.items[index]
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    fn resolve_user(&self, id: &str) -> Result<usize> {
        self.user_index(id).ok_or_else(|| Error::UnknownId {
            kind: "user",
            id: id.to_string(),
        })
    }

    fn resolve_item(&self, id: &str) -> Result<usize> {
        self.item_index(id).ok_or_else(|| Error::UnknownId {
            kind: "item",
            id: id.to_string(),
        })
    }
}

fn intern(names: &mut Vec<String>, lookup: &mut HashMap<String, usize>, id: &str) -> usize {
    if let Some(&index) = lookup.get(id) {
        return index;
    }
    let index = names.len();
    names.push(id.to_string());
    lookup.insert(id.to_string(), index);
    index
}

/// One observed interaction. `order` is the position of the source line and
/// breaks timestamp ties (a later line counts as later).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f32,
    pub timestamp: i64,
    pub order: usize,
}

impl Interaction {
    fn chrono_key(&self) -> (i64, usize) {
        (self.timestamp, self.order)
    }
}

/// Deduplicated interaction records over an interned id table.
#[derive(Debug, Clone, Default)]
pub struct InteractionLog {
    pub ids: IdTable,
    /// Sorted by `order`; at most one record per (user, item).
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_interactions(path)
    }

    /// Parses interaction TSV text.
    pub fn parse(text: &str) -> Result<Self> {
        parse_interactions(BufReader::new(text.as_bytes()))
    }

    /// Builds a log from raw records, applying the dedup rule.
    pub fn from_records(ids: IdTable, records: impl IntoIterator<Item = Interaction>) -> Self {
        let mut latest: HashMap<(usize, usize), Interaction> = HashMap::new();
        for rec in records {
            latest
                .entry((rec.user, rec.item))
                .and_modify(|kept| {
                    if rec.chrono_key() >= kept.chrono_key() {
                        *kept = rec;
                    }
                })
                .or_insert(rec);
        }
        let mut records: Vec<Interaction> = latest.into_values().collect();
        records.sort_by_key(|r| (r.order, r.user, r.item));
        Self { ids, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-user records in chronological order (timestamp, then line order).
    pub fn user_histories(&self) -> Vec<Vec<Interaction>> {
        let mut histories = vec![Vec::new(); self.ids.n_users()];
        for rec in &self.records {
            histories[rec.user].push(*rec);
        }
        for h in &mut histories {
            h.sort_by_key(Interaction::chrono_key);
        }
        histories
    }

    /// Writes the log as interaction TSV using external ids.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = create(path)?;
        let mut records = self.records.clone();
        records.sort_by_key(|r| r.order);
        for r in &records {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                self.ids.user_id(r.user),
                self.ids.item_id(r.item),
                r.rating,
                r.timestamp
            )
            .map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionLog> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file))
}

fn parse_interactions(reader: impl BufRead) -> Result<InteractionLog> {
    let mut ids = IdTable::new();
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::MalformedLine {
                line: line_no,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let malformed = |what: &str| Error::MalformedLine {
            line: line_no,
            message: format!("invalid {what}"),
        };
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(malformed("id"));
        }
        let rating: f64 = fields[2].trim().parse().map_err(|_| malformed("rating"))?;
        if !(MIN_RATING..=MAX_RATING).contains(&rating) {
            return Err(Error::RatingOutOfRange {
                line: line_no,
                rating,
            });
        }
        let timestamp: i64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| malformed("timestamp"))?;
        if timestamp < 0 {
            return Err(Error::NegativeTimestamp {
                line: line_no,
                timestamp,
            });
        }
        records.push(Interaction {
            user: ids.intern_user(user),
            item: ids.intern_item(item),
            rating: rating as f32,
            timestamp,
            order: records.len(),
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyLog);
    }
    Ok(InteractionLog::from_records(ids, records))
}

/// Item metadata used to render prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub title: String,
    pub year: Option<i32>,
    pub genres: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub entries: HashMap<String, CatalogEntry>,
}

impl Catalog {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses catalog TSV. A year that is not an integer is kept as unknown.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::MalformedLine {
                    line: idx + 1,
                    message: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let genres = fields[3]
                .split('|')
                .map(str::trim)
                .filter(|g| !g.is_empty())
                .map(String::from)
                .collect();
            entries.insert(
                fields[0].trim().to_string(),
                CatalogEntry {
                    title: fields[1].trim().to_string(),
                    year: fields[2].trim().parse().ok(),
                    genres,
                },
            );
        }
        Ok(Self { entries })
    }

    pub fn get(&self, item_id: &str) -> Option<&CatalogEntry> {
        self.entries.get(item_id)
    }

    pub fn require(&self, item_id: &str) -> Result<&CatalogEntry> {
        self.get(item_id)
            .ok_or_else(|| Error::MissingCatalogEntry(item_id.to_string()))
    }
}

/// Chronological leave-one-out split.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: InteractionLog,
    pub validation: BTreeMap<usize, usize>,
    pub test: BTreeMap<usize, usize>,
    pub eval_users: BTreeSet<usize>,
}

pub const SPLIT_TRAIN_FILE: &str = "train.tsv";
pub const SPLIT_VALIDATION_FILE: &str = "validation.tsv";
pub const SPLIT_TEST_FILE: &str = "test.tsv";

/// Latest interaction to test, second latest to validation, the rest to
/// train. Users with fewer than three interactions keep everything in train
/// and are not evaluated.
pub fn leave_one_out_split(log: &InteractionLog) -> SplitDataset {
    let mut validation = BTreeMap::new();
    let mut test = BTreeMap::new();
    let mut held_out = BTreeSet::new();
    for history in log.user_histories() {
        if history.len() < 3 {
            continue;
        }
        let last = history[history.len() - 1];
        let second = history[history.len() - 2];
        test.insert(last.user, last.item);
        validation.insert(second.user, second.item);
        held_out.insert((last.user, last.item));
        held_out.insert((second.user, second.item));
    }
    let records = log
        .records
        .iter()
        .filter(|r| !held_out.contains(&(r.user, r.item)))
        .copied()
        .collect();
    let eval_users = test.keys().copied().collect();
    SplitDataset {
        train: InteractionLog {
            ids: log.ids.clone(),
            records,
        },
        validation,
        test,
        eval_users,
    }
}

impl SplitDataset {
    /// Writes `train.tsv`, `validation.tsv` and `test.tsv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_tsv(dir.join(SPLIT_TRAIN_FILE))?;
        write_pair_map(&self.train.ids, &self.validation, &dir.join(SPLIT_VALIDATION_FILE))?;
        write_pair_map(&self.train.ids, &self.test, &dir.join(SPLIT_TEST_FILE))
    }

    /// Reads a split written by [`SplitDataset::save`]. Ids are interned from
    /// the train file first, then validation, then test, so every loader sees
    /// the same index layout.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut train = load_interactions(dir.join(SPLIT_TRAIN_FILE))?;
        let validation = read_pair_map(&mut train.ids, &dir.join(SPLIT_VALIDATION_FILE))?;
        let test = read_pair_map(&mut train.ids, &dir.join(SPLIT_TEST_FILE))?;
        let eval_users = test.keys().copied().collect();
        Ok(Self {
            train,
            validation,
            test,
            eval_users,
        })
    }

    pub fn ids(&self) -> &IdTable {
        &self.train.ids
    }
}

fn write_pair_map(ids: &IdTable, map: &BTreeMap<usize, usize>, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for (&user, &item) in map {
        writeln!(out, "{}\t{}", ids.user_id(user), ids.item_id(item))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_pair_map(ids: &mut IdTable, path: &Path) -> Result<BTreeMap<usize, usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::MalformedLine {
                line: idx + 1,
                message: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        map.insert(ids.intern_user(fields[0].trim()), ids.intern_item(fields[1].trim()));
    }
    Ok(map)
}

const EMBEDDING_MAGIC: &[u8; 4] = b"VGCL";
const EMBEDDING_VERSION: u32 = 1;
const EMBEDDING_HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// Writes `VGCL`, version (u32), rows (u64), dim (u32), then row-major f32,
/// all little-endian.
pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(row) = matrix.first_non_finite_row() {
        return Err(Error::NonFinite { row });
    }
    let mut out = create(path)?;
    out.write_all(&encode_embeddings(matrix))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(EMBEDDING_HEADER_LEN + matrix.as_slice().len() * 4);
    bytes.extend_from_slice(EMBEDDING_MAGIC);
    bytes.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(matrix.dim() as u32).to_le_bytes());
    for v in matrix.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < EMBEDDING_HEADER_LEN {
        return Err(Error::Truncated {
            expected: EMBEDDING_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != EMBEDDING_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let payload = &bytes[EMBEDDING_HEADER_LEN..];
    let found = payload.len() as u64;
    let expected = rows
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or(Error::DimensionMismatch { rows, dim, found })?;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected || dim == 0 {
        return Err(Error::DimensionMismatch { rows, dim, found });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    EmbeddingMatrix::from_vec(rows as usize, dim as usize, data)
}

/// One synthesized user-item interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedEdge {
    pub user: usize,
    pub item: usize,
    pub rrf_score: f32,
    pub votes: u32,
}

/// The synthesized edge set, kept sorted by (user, item).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentedEdgeSet {
    pub edges: Vec<AugmentedEdge>,
}

impl AugmentedEdgeSet {
    pub fn new(mut edges: Vec<AugmentedEdge>) -> Self {
        edges.sort_by_key(|e| (e.user, e.item));
        Self { edges }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

pub const AUGMENTED_HEADER: &str = "user_id\titem_id\trrf_score\tvotes";

pub fn write_augmented_edges(
    edges: &AugmentedEdgeSet,
    ids: &IdTable,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    writeln!(out, "{AUGMENTED_HEADER}").map_err(|e| Error::io(path, e))?;
    for e in &edges.edges {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            ids.user_id(e.user),
            ids.item_id(e.item),
            format_significant(e.rrf_score as f64, 9),
            e.votes
        )
        .map_err(|err| Error::io(path, err))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_augmented_edges(path: impl AsRef<Path>, ids: &IdTable) -> Result<AugmentedEdgeSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_augmented_edges(&text, ids)
}

pub fn parse_augmented_edges(text: &str, ids: &IdTable) -> Result<AugmentedEdgeSet> {
    let mut edges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') || line == AUGMENTED_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let malformed = |message: String| Error::MalformedLine {
            line: line_no,
            message,
        };
        if fields.len() != 4 {
            return Err(malformed(format!(
                "expected 4 tab-separated fields, found {}",
                fields.len()
            )));
        }
        edges.push(AugmentedEdge {
            user: ids.resolve_user(fields[0].trim())?,
            item: ids.resolve_item(fields[1].trim())?,
            rrf_score: fields[2]
                .trim()
                .parse()
                .map_err(|_| malformed("invalid rrf_score".into()))?,
            votes: fields[3]
                .trim()
                .parse()
                .map_err(|_| malformed("invalid votes".into()))?,
        });
    }
    Ok(AugmentedEdgeSet::new(edges))
}

/// Writes the per-user skip report (`user_id  reason`).
pub fn write_skip_report(
    skips: &[(usize, String)],
    ids: &IdTable,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for (user, reason) in skips {
        let reason = reason.replace(['\t', '\n'], " ");
        writeln!(out, "{}\t{}", ids.user_id(*user), reason).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Formats `x` in positional notation with `digits` significant digits.
/// Nine digits round-trip any f32 exactly.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&magnitude) {
        return format!("{:.*e}", digits.saturating_sub(1), x);
    }
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}
