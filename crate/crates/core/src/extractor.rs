//! Schema-aware context extraction.
//!
//! Three channels feed the [`SchemaContext`]: structural metadata read from
//! the database, documentation segments retrieved by embedding similarity and
//! re-ranked, and evidence mappings from natural-language terms to stored
//! values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::warn;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{self, BackendSpec, GatewayError};

pub const EMBEDDING_CACHE_MAGIC: &[u8; 8] = b"NLSQEMB1";

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("cannot read database {path}: {message}")]
    Database { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Record { path: PathBuf, line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("embedding cache {path} is malformed: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("embedding dimension {got} does not match store dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub declared_type: String,
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableInfo {
    pub name: String,
    pub columns: Vec<ColumnInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub tables: Vec<TableInfo>,
    pub primary_keys: BTreeMap<String, Vec<String>>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl SchemaCatalog {
    /// Case-insensitive table lookup, matching the database's identifier rules.
    pub fn table(&self, name: &str) -> Option<&TableInfo> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn has_column(&self, table: &str, column: &str) -> bool {
        self.table(table)
            .is_some_and(|t| t.columns.iter().any(|c| c.name.eq_ignore_ascii_case(column)))
    }

    pub fn tables_with_column(&self, column: &str) -> Vec<&TableInfo> {
        self.tables
            .iter()
            .filter(|t| t.columns.iter().any(|c| c.name.eq_ignore_ascii_case(column)))
            .collect()
    }

    /// One line per table, used inside prompts.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            let pk = self.primary_keys.get(&t.name);
            let cols: Vec<String> = t
                .columns
                .iter()
                .map(|c| {
                    let mut s = format!("{} {}", c.name, c.declared_type);
                    if pk.is_some_and(|pk| pk.contains(&c.name)) {
                        s.push_str(" PK");
                    }
                    s
                })
                .collect();
            out.push_str(&format!("{}({})\n", t.name, cols.join(", ")));
        }
        for fk in &self.foreign_keys {
            out.push_str(&format!(
                "{}.{} -> {}.{}\n",
                fk.from_table, fk.from_column, fk.to_table, fk.to_column
            ));
        }
        out
    }
}

/// Open a database file read-only.
pub fn open_read_only(path: &Path) -> Result<Connection, ExtractionError> {
    if !path.is_file() {
        return Err(ExtractionError::Database {
            path: path.to_path_buf(),
            message: "file not found".into(),
        });
    }
    Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX).map_err(
        |e| ExtractionError::Database {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    )
}

/// Read table, column, primary-key and foreign-key metadata from a database file.
pub fn introspect_schema(path: &Path) -> Result<SchemaCatalog, ExtractionError> {
    let conn = open_read_only(path)?;
    introspect_connection(&conn).map_err(|e| ExtractionError::Database {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn introspect_connection(conn: &Connection) -> rusqlite::Result<SchemaCatalog> {
    let mut stmt = conn.prepare(
        "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
    )?;
    let names: Vec<String> = stmt.query_map([], |r| r.get(0))?.collect::<Result<_, _>>()?;

    let mut catalog = SchemaCatalog::default();
    let mut raw_fks = Vec::new();
    for name in names {
        let mut cols = conn.prepare("SELECT name, type, \"notnull\", pk FROM pragma_table_info(?1) ORDER BY cid")?;
        let rows: Vec<(String, String, bool, i64)> = cols
            .query_map([&name], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)))?
            .collect::<Result<_, _>>()?;
        let mut pk: Vec<(i64, String)> = rows
            .iter()
            .filter(|(_, _, _, pos)| *pos > 0)
            .map(|(c, _, _, pos)| (*pos, c.clone()))
            .collect();
        pk.sort();
        if !pk.is_empty() {
            catalog
                .primary_keys
                .insert(name.clone(), pk.into_iter().map(|(_, c)| c).collect());
        }
        let columns = rows
            .into_iter()
            .map(|(c, ty, notnull, _)| ColumnInfo {
                name: c,
                declared_type: ty,
                nullable: !notnull,
            })
            .collect();

        let mut fks = conn.prepare("SELECT \"from\", \"table\", \"to\" FROM pragma_foreign_key_list(?1) ORDER BY id, seq")?;
        let edges: Vec<(String, String, Option<String>)> = fks
            .query_map([&name], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?
            .collect::<Result<_, _>>()?;
        for (from, to_table, to) in edges {
            raw_fks.push((name.clone(), from, to_table, to));
        }
        catalog.tables.push(TableInfo { name, columns });
    }

    for (from_table, from_column, to_table, to_column) in raw_fks {
        // An omitted target column refers to the parent's primary key.
        let target = to_column.or_else(|| {
            catalog
                .table(&to_table)
                .and_then(|t| catalog.primary_keys.get(&t.name))
                .and_then(|pk| pk.first().cloned())
        });
        match target {
            Some(to_column) if catalog.has_column(&to_table, &to_column) => {
                let to_table = catalog.table(&to_table).map(|t| t.name.clone()).unwrap_or(to_table);
                catalog.foreign_keys.push(ForeignKey {
                    from_table,
                    from_column,
                    to_table,
                    to_column,
                });
            }
            other => warn!(
                "dropping dangling foreign key {from_table}.{from_column} -> {to_table}.{}",
                other.unwrap_or_default()
            ),
        }
    }
    Ok(catalog)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DocKind {
    #[serde(rename = "table")]
    TableMeaning,
    #[serde(rename = "column")]
    ColumnDefinition,
    #[serde(rename = "rule")]
    BusinessRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocSegment {
    pub id: String,
    pub kind: DocKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceEntry {
    pub nl_term: String,
    pub table: String,
    pub column: String,
    pub db_value: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceMap {
    pub entries: Vec<EvidenceEntry>,
}

impl EvidenceMap {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn for_column<'a>(&'a self, column: &'a str) -> impl Iterator<Item = &'a EvidenceEntry> + 'a {
        self.entries.iter().filter(move |e| e.column.eq_ignore_ascii_case(column))
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExtractionError> {
    let file = fs::File::open(path).map_err(|source| ExtractionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ExtractionError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ExtractionError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Load `<db_id>.docs.jsonl`. Embeddings are not part of the file.
pub fn load_docs(path: &Path) -> Result<Vec<DocSegment>, ExtractionError> {
    let docs: Vec<DocSegment> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for (i, d) in docs.iter().enumerate() {
        if !seen.insert(d.id.clone()) {
            return Err(ExtractionError::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("duplicate segment id {:?}", d.id),
            });
        }
    }
    Ok(docs)
}

pub fn load_evidence(path: &Path) -> Result<EvidenceMap, ExtractionError> {
    Ok(EvidenceMap {
        entries: read_jsonl(path)?,
    })
}

pub fn embed_text(embedder: &BackendSpec, text: &str) -> Result<Vec<f32>, ExtractionError> {
    Ok(gateway::embed(embedder, text)?)
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Lowercased alphanumeric words.
pub fn word_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// A segment with its retrieval similarity and, after re-ranking, its blended score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSegment {
    pub segment: DocSegment,
    pub cosine: f64,
    pub score: f64,
}

/// Exact nearest-neighbour store over precomputed segment embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    segments: Vec<DocSegment>,
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        VectorStore {
            dim,
            segments: Vec::new(),
        }
    }

    pub fn insert(&mut self, segment: DocSegment) -> Result<(), ExtractionError> {
        if segment.embedding.len() != self.dim {
            return Err(ExtractionError::Dimension {
                expected: self.dim,
                got: segment.embedding.len(),
            });
        }
        self.segments.push(segment);
        Ok(())
    }

    /// Embed every document and collect them into a store.
    pub fn build(docs: Vec<DocSegment>, embedder: &BackendSpec) -> Result<Self, ExtractionError> {
        let mut store: Option<VectorStore> = None;
        for mut doc in docs {
            doc.embedding = embed_text(embedder, &doc.text)?;
            store
                .get_or_insert_with(|| VectorStore::new(doc.embedding.len()))
                .insert(doc)?;
        }
        Ok(store.unwrap_or_else(|| VectorStore::new(gateway::DEFAULT_EMBEDDING_DIM)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[DocSegment] {
        &self.segments
    }

    /// The `k` segments most similar to `query`, descending, ties by id ascending.
    pub fn retrieve(&self, query: &[f32], k: usize) -> Vec<RankedSegment> {
        let mut scored: Vec<(f64, &DocSegment)> = self
            .segments
            .iter()
            .map(|s| (cosine_similarity(query, &s.embedding), s))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        scored
            .into_iter()
            .take(k.max(1))
            .map(|(cosine, s)| RankedSegment {
                segment: s.clone(),
                cosine,
                score: cosine,
            })
            .collect()
    }

    /// Serialize as the binary embedding cache.
    pub fn write_cache<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(EMBEDDING_CACHE_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.segments.len() as u32).to_le_bytes())?;
        for s in &self.segments {
            for x in &s.embedding {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for s in &self.segments {
            w.write_all(&(s.id.len() as u32).to_le_bytes())?;
            w.write_all(s.id.as_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ExtractionError> {
        let io_err = |source| ExtractionError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut buf = Vec::new();
        self.write_cache(&mut buf).map_err(io_err)?;
        fs::write(path, buf).map_err(io_err)
    }

    /// Reattach cached vectors to `docs` by id.
    pub fn load(path: &Path, docs: Vec<DocSegment>) -> Result<Self, ExtractionError> {
        let bytes = fs::read(path).map_err(|source| ExtractionError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cache = EmbeddingCache::read(&mut bytes.as_slice()).map_err(|e| ExtractionError::Cache {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut by_id: BTreeMap<String, Vec<f32>> = cache.ids.into_iter().zip(cache.vectors).collect();
        let mut store = VectorStore::new(cache.dim);
        for mut doc in docs {
            doc.embedding = by_id.remove(&doc.id).ok_or_else(|| ExtractionError::Cache {
                path: path.to_path_buf(),
                message: format!("segment {:?} missing from cache", doc.id),
            })?;
            store.insert(doc)?;
        }
        if !by_id.is_empty() {
            return Err(ExtractionError::Cache {
                path: path.to_path_buf(),
                message: format!("{} cached vectors have no matching document", by_id.len()),
            });
        }
        Ok(store)
    }
}

/// Decoded contents of an embedding cache file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
    pub ids: Vec<String>,
}

impl EmbeddingCache {
    pub fn read<R: Read>(r: &mut R) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != EMBEDDING_CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> io::Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let dim = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let mut vectors = Vec::with_capacity(count);
        let mut f = [0u8; 4];
        for _ in 0..count {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut f)?;
                v.push(f32::from_le_bytes(f));
            }
            vectors.push(v);
        }
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut s = vec![0u8; len];
            r.read_exact(&mut s)?;
            ids.push(String::from_utf8(s).map_err(|_| bad("id is not UTF-8"))?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(EmbeddingCache { dim, vectors, ids })
    }
}

/// Knobs for retrieval and re-ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub blend_weights: (f64, f64),
    pub score_threshold: f64,
    pub keep: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 10,
            blend_weights: (0.7, 0.3),
            score_threshold: 0.2,
            keep: 5,
        }
    }
}

/// Blend cosine with lexical overlap, drop weak segments, keep the best few.
pub fn rerank_filter(segments: &[RankedSegment], query_text: &str, cfg: &RetrievalConfig) -> Vec<RankedSegment> {
    let query_words = word_set(query_text);
    let (w_cos, w_lex) = cfg.blend_weights;
    let mut out: Vec<RankedSegment> = segments
        .iter()
        .map(|s| {
            let lexical = jaccard(&query_words, &word_set(&s.segment.text));
            RankedSegment {
                segment: s.segment.clone(),
                cosine: s.cosine,
                score: w_cos * s.cosine + w_lex * lexical,
            }
        })
        .filter(|s| s.score >= cfg.score_threshold)
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.segment.id.cmp(&b.segment.id)));
    out.truncate(cfg.keep);
    out
}

/// Everything downstream agents know about the database for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaContext {
    pub catalog: SchemaCatalog,
    pub segments: Vec<RankedSegment>,
    pub evidence: EvidenceMap,
    pub retrieval_latency: Duration,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SchemaContext {
    pub fn segments_text(&self) -> String {
        self.segments
            .iter()
            .map(|s| format!("- [{}] {}", s.segment.id, s.segment.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn evidence_text(&self) -> String {
        self.evidence
            .entries
            .iter()
            .map(|e| format!("- \"{}\" means {}.{} = '{}'", e.nl_term, e.table, e.column, e.db_value))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Assemble the context, dropping evidence that points outside the catalog.
pub fn build_context(
    catalog: SchemaCatalog,
    segments: Vec<RankedSegment>,
    evidence: EvidenceMap,
    retrieval_latency: Duration,
) -> SchemaContext {
    let mut warnings = Vec::new();
    let entries = evidence
        .entries
        .into_iter()
        .filter(|e| {
            let ok = catalog.has_column(&e.table, &e.column);
            if !ok {
                let msg = format!(
                    "evidence for {:?} references unknown column {}.{}; dropped",
                    e.nl_term, e.table, e.column
                );
                warn!("{msg}");
                warnings.push(msg);
            }
            ok
        })
        .collect();
    SchemaContext {
        catalog,
        segments,
        evidence: EvidenceMap { entries },
        retrieval_latency,
        warnings,
    }
}

/// Sidecar files that live next to `<db_id>.sqlite`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbFiles {
    pub db: PathBuf,
    pub docs: PathBuf,
    pub evidence: PathBuf,
    pub cache: PathBuf,
}

impl DbFiles {
    pub fn new(db_id: &str, db: &Path) -> Self {
        let sibling = |suffix: &str| db.with_file_name(format!("{db_id}.{suffix}"));
        DbFiles {
            db: db.to_path_buf(),
            docs: sibling("docs.jsonl"),
            evidence: sibling("evidence.jsonl"),
            cache: sibling("emb.bin"),
        }
    }
}

/// What [`build_index_cache`] wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSummary {
    pub cache_path: PathBuf,
    pub segments: usize,
    pub evidence_entries: usize,
    pub warnings: Vec<String>,
}

/// Embed the documentation of one database and write its cache file.
pub fn build_index_cache(files: &DbFiles, embedder: &BackendSpec) -> Result<IndexSummary, ExtractionError> {
    introspect_schema(&files.db)?;
    if !files.docs.is_file() {
        return Err(ExtractionError::Io {
            path: files.docs.clone(),
            source: io::Error::new(io::ErrorKind::NotFound, "documentation file not found"),
        });
    }
    let docs = load_docs(&files.docs)?;
    let mut warnings = Vec::new();
    let evidence_entries = if files.evidence.is_file() {
        load_evidence(&files.evidence)?.entries.len()
    } else {
        let msg = format!("no evidence file at {}; continuing without evidence", files.evidence.display());
        warn!("{msg}");
        warnings.push(msg);
        0
    };
    let store = VectorStore::build(docs, embedder)?;
    store.save(&files.cache)?;
    Ok(IndexSummary {
        cache_path: files.cache.clone(),
        segments: store.len(),
        evidence_entries,
        warnings,
    })
}

/// Per-database retrieval state: catalog, embedded docs and evidence.
#[derive(Debug, Clone)]
pub struct DatabaseIndex {
    pub db_path: PathBuf,
    pub catalog: SchemaCatalog,
    pub store: VectorStore,
    pub evidence: EvidenceMap,
}

impl DatabaseIndex {
    /// Introspect the database and load its docs, evidence and cached vectors.
    ///
    /// Missing docs or evidence yield an empty store or map. A missing or
    /// stale cache is rebuilt in memory with `embedder`.
    pub fn open(files: &DbFiles, embedder: &BackendSpec) -> Result<(Self, Vec<String>), ExtractionError> {
        let catalog = introspect_schema(&files.db)?;
        let mut warnings = Vec::new();
        let mut note = |msg: String| {
            warn!("{msg}");
            warnings.push(msg);
        };
        let docs = if files.docs.is_file() {
            load_docs(&files.docs)?
        } else {
            note(format!("no documentation file at {}", files.docs.display()));
            Vec::new()
        };
        let evidence = if files.evidence.is_file() {
            load_evidence(&files.evidence)?
        } else {
            EvidenceMap::default()
        };
        let store = if docs.is_empty() {
            VectorStore::new(0)
        } else if files.cache.is_file() {
            match VectorStore::load(&files.cache, docs.clone()) {
                Ok(s) => s,
                Err(e) => {
                    note(format!("ignoring embedding cache: {e}"));
                    VectorStore::build(docs, embedder)?
                }
            }
        } else {
            VectorStore::build(docs, embedder)?
        };
        Ok((
            DatabaseIndex {
                db_path: files.db.clone(),
                catalog,
                store,
                evidence,
            },
            warnings,
        ))
    }

    /// Run retrieval, re-ranking and assembly for one question.
    pub fn extract(
        &self,
        question: &str,
        embedder: &BackendSpec,
        cfg: &RetrievalConfig,
    ) -> Result<SchemaContext, ExtractionError> {
        let started = std::time::Instant::now();
        let segments = if self.store.is_empty() {
            Vec::new()
        } else {
            let q = embed_text(embedder, question)?;
            if q.len() != self.store.dim() {
                return Err(ExtractionError::Dimension {
                    expected: self.store.dim(),
                    got: q.len(),
                });
            }
            rerank_filter(&self.store.retrieve(&q, cfg.k), question, cfg)
        };
        let latency = started.elapsed();
        Ok(build_context(
            self.catalog.clone(),
            segments,
            self.evidence.clone(),
            latency,
        ))
    }
}
