//! Corpus, embedding and committee loaders plus pipeline-state persistence.
//!
//! Line-oriented inputs (manifest, committee) are JSON Lines. Embeddings
//! come either as a binary blob (`XVEC0001`, u32 n, u32 d, n*d little-endian
//! f32) or as text (`n d` header line followed by one row per line); the
//! loader picks the format from the leading magic bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CorpusManifest, PipelineState, SampleId, SampleRecord};
use crate::pipeline::PipelineConfig;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"XVEC0001";
pub const STATE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_COMMITTEE_SIZE: usize = 20;

/// Output of one external transcriber run for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitteeArtifact {
    #[serde(rename = "id")]
    pub sample_id: SampleId,
    /// Transcription from the model with dropout disabled.
    pub reference: String,
    /// One transcription per dropout mask.
    pub hypotheses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_entropies: Option<Vec<f64>>,
}

/// Row-major embedding matrix aligned to sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<SampleId>,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<SampleId>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("embedding dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::TruncatedEmbeddings {
                expected: ids.len() * dim,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(EmbeddingMatrix { dim, ids, data })
    }

    /// Picks each manifest entry's row out of `raw`, in manifest order.
    pub fn from_manifest(manifest: &CorpusManifest, raw: &RawEmbeddings) -> Result<Self> {
        manifest.validate(Some(raw.rows))?;
        let mut data = Vec::with_capacity(manifest.len() * raw.dim);
        for rec in &manifest.entries {
            data.extend(raw.row(rec.embedding_index).iter().map(|&v| f64::from(v)));
        }
        EmbeddingMatrix::new(manifest.entries.iter().map(|r| r.id.clone()).collect(), raw.dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Sub-matrix with the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        EmbeddingMatrix {
            dim: self.dim,
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            data,
        }
    }
}

/// Embedding rows as stored on disk, before they are tied to sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbeddings {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl RawEmbeddings {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let entries: Vec<SampleRecord> = read_jsonl(path)?;
    let manifest = CorpusManifest {
        source_tag: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
    };
    manifest.validate(None)?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &CorpusManifest, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path, &manifest.entries)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<RawEmbeddings> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(EMBEDDING_MAGIC) {
        parse_binary_embeddings(path, &bytes)
    } else {
        parse_text_embeddings(path, &bytes)
    }
}

fn parse_binary_embeddings(path: &Path, bytes: &[u8]) -> Result<RawEmbeddings> {
    let header = EMBEDDING_MAGIC.len() + 8;
    if bytes.len() < header {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 0,
            message: "binary embedding header is truncated".into(),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let rows = word(8);
    let dim = word(12);
    if dim == 0 && rows > 0 {
        return Err(Error::InvalidParameter("embedding dimension must be positive".into()));
    }
    let body = &bytes[header..];
    let expected = rows.checked_mul(dim).ok_or_else(|| Error::Parse {
        path: path.to_owned(),
        line: 0,
        message: "header dimensions overflow".into(),
    })?;
    if body.len() % 4 != 0 || body.len() / 4 != expected {
        return Err(Error::TruncatedEmbeddings {
            expected,
            found: body.len() / 4,
        });
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    check_finite(&data, dim)?;
    Ok(RawEmbeddings { rows, dim, data })
}

fn parse_text_embeddings(path: &Path, bytes: &[u8]) -> Result<RawEmbeddings> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: 0,
        message: format!("not UTF-8 and no binary magic: {e}"),
    })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let Some((hline, header)) = lines.next() else {
        return Ok(RawEmbeddings {
            rows: 0,
            dim: 0,
            data: Vec::new(),
        });
    };
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(hline, format!("bad header: {e}")))?;
    let [rows, dim] = dims[..] else {
        return Err(parse_err(hline, "header must be `<rows> <dim>`".into()));
    };
    if dim == 0 && rows > 0 {
        return Err(Error::InvalidParameter("embedding dimension must be positive".into()));
    }
    let mut data = Vec::with_capacity(rows * dim);
    for (lineno, line) in lines {
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f32 = tok
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad value `{tok}`: {e}")))?;
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(parse_err(
                lineno,
                format!("row has {} values, expected {dim}", data.len() - before),
            ));
        }
    }
    if data.len() != rows * dim {
        return Err(Error::TruncatedEmbeddings {
            expected: rows * dim,
            found: data.len(),
        });
    }
    check_finite(&data, dim)?;
    Ok(RawEmbeddings { rows, dim, data })
}

fn check_finite(data: &[f32], dim: usize) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::NonFinite {
            row: pos / dim,
            col: pos % dim,
        }),
        None => Ok(()),
    }
}

pub fn write_embeddings_binary(raw: &RawEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + raw.data.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(raw.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(raw.dim as u32).to_le_bytes());
    for v in &raw.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn write_embeddings_text(raw: &RawEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("{} {}\n", raw.rows, raw.dim);
    for r in 0..raw.rows {
        let row: Vec<String> = raw.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    atomic_write(path.as_ref(), out.as_bytes())
}

/// Loads a committee file, rejecting records whose hypothesis count is not
/// `expected_t`.
pub fn load_committee(
    path: impl AsRef<Path>,
    expected_t: usize,
) -> Result<BTreeMap<SampleId, CommitteeArtifact>> {
    let records: Vec<CommitteeArtifact> = read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for rec in records {
        if rec.hypotheses.len() != expected_t {
            return Err(Error::WrongArity {
                id: rec.sample_id,
                expected: expected_t,
                found: rec.hypotheses.len(),
            });
        }
        if let Some(e) = &rec.token_entropies {
            if e.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::BadEntropy { id: rec.sample_id });
            }
        }
        if out.contains_key(&rec.sample_id) {
            return Err(Error::DuplicateId(rec.sample_id));
        }
        out.insert(rec.sample_id.clone(), rec);
    }
    Ok(out)
}

pub fn save_committee<'a>(
    artifacts: impl IntoIterator<Item = &'a CommitteeArtifact>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let items: Vec<&CommitteeArtifact> = artifacts.into_iter().collect();
    write_jsonl(path, &items)
}

/// Canonical text of a state file: keys sorted at every level, two-space
/// indent, trailing newline.
pub fn state_to_string(state: &PipelineState) -> Result<String> {
    let mut value = serde_json::to_value(state).map_err(|e| Error::StateFormat(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::StateFormat("state did not serialize to an object".into()))?;
    obj.insert("format_version".into(), STATE_FORMAT_VERSION.into());
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| Error::StateFormat(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn state_from_str(text: &str) -> Result<PipelineState> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::StateFormat(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::StateFormat("state document is not an object".into()))?;
    let version = obj
        .remove("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::StateFormat("missing format_version".into()))?;
    if version != u64::from(STATE_FORMAT_VERSION) {
        return Err(Error::Version {
            expected: STATE_FORMAT_VERSION,
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::StateFormat(e.to_string()))
}

pub fn save_state(state: &PipelineState, path: impl AsRef<Path>) -> Result<()> {
    let text = state_to_string(state)?;
    atomic_write(path.as_ref(), text.as_bytes())
}

pub fn load_state(path: impl AsRef<Path>) -> Result<PipelineState> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    state_from_str(&text)
}

/// Loads a state and checks that it was produced under `config`.
pub fn load_state_strict(path: impl AsRef<Path>, config: &PipelineConfig) -> Result<PipelineState> {
    let state = load_state(path)?;
    let expected = config.hash();
    if state.config_hash != expected || state.config.hash() != expected {
        return Err(Error::Integrity {
            expected,
            found: state.config_hash,
        });
    }
    Ok(state)
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Exclusive writer lock, held as `<state>.lock` for the guard's lifetime.
#[derive(Debug)]
pub struct StateLock {
    path: PathBuf,
}

impl StateLock {
    pub fn acquire(state_path: impl AsRef<Path>) -> Result<Self> {
        let state_path = state_path.as_ref();
        let mut name = state_path.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(StateLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(state_path.to_owned()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for StateLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = BufWriter::new(Vec::new());
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| Error::StateFormat(e.to_string()))?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    let bytes = buf.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    atomic_write(path, &bytes)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::StateFormat(e.to_string()))?;
    text.push('\n');
    atomic_write(path.as_ref(), text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write(dir: &Path, name: &str, body: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn manifest_loading() {
        let dir = tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.jsonl",
            br#"{"id":"a","embedding_index":0}
{"id":"b","embedding_index":1,"duration_s":2.5}
{"id":"c","embedding_index":2,"oracle_text":"hello"}
"#,
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.source_tag, "m");

        let p = write(
            dir.path(),
            "dup.jsonl",
            b"{\"id\":\"a\",\"embedding_index\":0}\n{\"id\":\"a\",\"embedding_index\":1}\n",
        );
        match load_manifest(&p) {
            Err(Error::DuplicateId(id)) => assert_eq!(id.as_str(), "a"),
            other => panic!("{other:?}"),
        }

        let p = write(dir.path(), "empty.jsonl", b"");
        assert!(load_manifest(&p).unwrap().is_empty());

        let p = write(dir.path(), "bad.jsonl", b"{\"id\":\"a\",\"embedding_index\":0}\nnot json\n");
        assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 2, .. })));
    }

    fn binary(rows: u32, dim: u32, vals: &[f32]) -> Vec<u8> {
        let mut b = EMBEDDING_MAGIC.to_vec();
        b.extend(rows.to_le_bytes());
        b.extend(dim.to_le_bytes());
        for v in vals {
            b.extend(v.to_le_bytes());
        }
        b
    }

    #[test]
    fn binary_embeddings() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "e.bin", &binary(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let e = load_embeddings(&p).unwrap();
        assert_eq!((e.rows, e.dim), (2, 3));
        assert_eq!(e.row(1), &[4., 5., 6.]);

        let p = write(dir.path(), "short.bin", &binary(2, 3, &[1., 2., 3., 4., 5.]));
        assert!(matches!(
            load_embeddings(&p),
            Err(Error::TruncatedEmbeddings { expected: 6, found: 5 })
        ));

        let p = write(dir.path(), "nan.bin", &binary(2, 3, &[1., 2., 3., 4., f32::NAN, 6.]));
        assert!(matches!(load_embeddings(&p), Err(Error::NonFinite { row: 1, col: 1 })));

        let p = write(dir.path(), "hdr.bin", b"XVEC0001\x01\x00");
        assert!(matches!(load_embeddings(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn text_embeddings() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "e.txt", b"2 3\n1 2 3\n4 5 6\n");
        let e = load_embeddings(&p).unwrap();
        assert_eq!(e.data, vec![1., 2., 3., 4., 5., 6.]);
        let p = write(dir.path(), "e2.txt", b"2 3\n1 2 3\n");
        assert!(matches!(load_embeddings(&p), Err(Error::TruncatedEmbeddings { .. })));
        let p = write(dir.path(), "e3.txt", b"2 3\n1 2 3\n4 inf 6\n");
        assert!(matches!(load_embeddings(&p), Err(Error::NonFinite { row: 1, col: 1 })));
        let p = write(dir.path(), "e4.txt", b"2 3\n1 2\n");
        assert!(matches!(load_embeddings(&p), Err(Error::Parse { line: 2, .. })));

        let raw = RawEmbeddings {
            rows: 2,
            dim: 2,
            data: vec![0.5, -1.25, 3.0, 1e-3],
        };
        let p = dir.path().join("rt.txt");
        write_embeddings_text(&raw, &p).unwrap();
        assert_eq!(load_embeddings(&p).unwrap(), raw);
        let p = dir.path().join("rt.bin");
        write_embeddings_binary(&raw, &p).unwrap();
        assert_eq!(load_embeddings(&p).unwrap(), raw);
    }

    #[test]
    fn matrix_from_manifest_follows_indices() {
        let raw = RawEmbeddings {
            rows: 2,
            dim: 1,
            data: vec![10.0, 20.0],
        };
        let m = CorpusManifest {
            source_tag: String::new(),
            entries: vec![SampleRecord::new("x", 1), SampleRecord::new("y", 0)],
        };
        let e = EmbeddingMatrix::from_manifest(&m, &raw).unwrap();
        assert_eq!(e.row(0), &[20.0]);
        assert_eq!(e.ids()[1].as_str(), "y");
        let m = CorpusManifest {
            source_tag: String::new(),
            entries: vec![SampleRecord::new("x", 2)],
        };
        assert!(matches!(
            EmbeddingMatrix::from_manifest(&m, &raw),
            Err(Error::DanglingEmbedding { index: 2, rows: 2, .. })
        ));
    }

    fn committee_line(id: &str, t: usize) -> String {
        let hyps: Vec<String> = (0..t).map(|i| format!("h{i}")).collect();
        serde_json::json!({"id": id, "reference": "r", "hypotheses": hyps}).to_string()
    }

    #[test]
    fn committee_loading() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", format!("{}\n", committee_line("a", 20)).as_bytes());
        let c = load_committee(&p, DEFAULT_COMMITTEE_SIZE).unwrap();
        assert_eq!(c[&SampleId::from("a")].hypotheses.len(), 20);

        let p = write(dir.path(), "c19.jsonl", format!("{}\n", committee_line("a", 19)).as_bytes());
        match load_committee(&p, 20) {
            Err(Error::WrongArity { id, found: 19, .. }) => assert_eq!(id.as_str(), "a"),
            other => panic!("{other:?}"),
        }

        let p = write(
            dir.path(),
            "empty_h.jsonl",
            br#"{"id":"a","reference":"","hypotheses":["",""]}"#,
        );
        assert_eq!(load_committee(&p, 2).unwrap().len(), 1);

        let line = committee_line("a", 2);
        let p = write(dir.path(), "dup.jsonl", format!("{line}\n{line}\n").as_bytes());
        assert!(matches!(load_committee(&p, 2), Err(Error::DuplicateId(_))));

        let p = write(
            dir.path(),
            "neg.jsonl",
            br#"{"id":"a","reference":"","hypotheses":[""],"token_entropies":[-1.0]}"#,
        );
        assert!(matches!(load_committee(&p, 1), Err(Error::BadEntropy { .. })));
    }

    #[test]
    fn state_version_and_strict_checks() {
        let dir = tempdir().unwrap();
        let m = CorpusManifest {
            source_tag: "t".into(),
            entries: vec![SampleRecord::new("a", 0)],
        };
        let config = PipelineConfig::default();
        let state = PipelineState::new(m, config.clone());
        let p = dir.path().join("state.json");
        save_state(&state, &p).unwrap();
        assert_eq!(load_state(&p).unwrap(), state);
        assert!(load_state_strict(&p, &config).is_ok());

        let altered = PipelineConfig {
            target_per_iteration: 7,
            ..config
        };
        assert!(matches!(load_state_strict(&p, &altered), Err(Error::Integrity { .. })));

        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_state(&p), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn unknown_field_rejected() {
        let m = CorpusManifest::default();
        let state = PipelineState::new(m, PipelineConfig::default());
        let mut v: serde_json::Value = serde_json::from_str(&state_to_string(&state).unwrap()).unwrap();
        v.as_object_mut().unwrap().insert("future".into(), 1.into());
        assert!(matches!(state_from_str(&v.to_string()), Err(Error::StateFormat(_))));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.json");
        let guard = StateLock::acquire(&p).unwrap();
        assert!(matches!(StateLock::acquire(&p), Err(Error::Locked(_))));
        drop(guard);
        assert!(StateLock::acquire(&p).is_ok());
    }
}
