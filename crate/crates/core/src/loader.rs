//! Line-delimited JSON ingestion for prompts, responses and the model
//! manifest, plus the matching writers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{
    Candidate, ContextKind, Dataset, Dimension, ModelDescriptor, PromptRecord, RawResponse,
    ResponseRecord, Role,
};
use crate::normalize::{normalize_response, RefusalLexicon};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("{path}:{line}: duplicate {what} `{id}`")]
    Duplicate {
        path: PathBuf,
        line: usize,
        what: &'static str,
        id: String,
    },
    #[error("{path}: {count} malformed line(s); first: {first}")]
    Rejected {
        path: PathBuf,
        count: usize,
        first: Box<LoadError>,
    },
    #[error("{path}:{line}: response references unknown prompt `{prompt_id}`")]
    UnknownPrompt {
        path: PathBuf,
        line: usize,
        prompt_id: String,
    },
}

impl LoadError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        LoadError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Records parsed from a file together with every rejected line.
#[derive(Debug)]
pub struct LoadReport<T> {
    pub records: Vec<T>,
    pub rejects: Vec<LoadError>,
}

impl<T> LoadReport<T> {
    fn into_strict(self, path: &Path) -> Result<Vec<T>, LoadError> {
        let mut rejects = self.rejects;
        match rejects.len() {
            0 => Ok(self.records),
            1 => Err(rejects.remove(0)),
            count => Err(LoadError::Rejected {
                path: path.to_path_buf(),
                count,
                first: Box::new(rejects.remove(0)),
            }),
        }
    }
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn schema(&self, field: &str, message: impl Into<String>) -> LoadError {
        LoadError::Schema {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn string(&self, obj: &Map<String, Value>, field: &str) -> Result<String, LoadError> {
        match obj.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(self.schema(field, "expected a string")),
            None => Err(self.schema(field, "missing")),
        }
    }

    fn enumerated<T: serde::de::DeserializeOwned>(
        &self,
        obj: &Map<String, Value>,
        field: &str,
    ) -> Result<T, LoadError> {
        let v = obj
            .get(field)
            .ok_or_else(|| self.schema(field, "missing"))?;
        serde_json::from_value(v.clone()).map_err(|e| self.schema(field, e.to_string()))
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, LoadError> {
    let file = File::open(path).map_err(|e| LoadError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LoadError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_object(ctx: &LineCtx<'_>, text: &str) -> Result<Map<String, Value>, LoadError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ctx.schema("<line>", "expected a JSON object")),
        Err(e) => Err(ctx.schema("<line>", format!("invalid JSON: {e}"))),
    }
}

fn parse_prompt(ctx: &LineCtx<'_>, text: &str) -> Result<PromptRecord, LoadError> {
    let obj = parse_object(ctx, text)?;
    let prompt_id = ctx.string(&obj, "prompt_id")?;
    let dataset: Dataset = ctx.enumerated(&obj, "dataset")?;
    let dimension: Dimension = ctx
        .string(&obj, "dimension")?
        .parse()
        .unwrap_or_else(|e| match e {});
    let context_kind: ContextKind = ctx.enumerated(&obj, "context_kind")?;
    let raw_candidates = match obj.get("candidates") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(ctx.schema("candidates", "expected an array")),
        None => return Err(ctx.schema("candidates", "missing")),
    };
    let mut candidates = Vec::with_capacity(raw_candidates.len());
    for (i, c) in raw_candidates.iter().enumerate() {
        let Value::Object(c) = c else {
            return Err(ctx.schema(&format!("candidates[{i}]"), "expected an object"));
        };
        let text = match c.get("text") {
            Some(Value::String(s)) => s.clone(),
            _ => {
                return Err(ctx.schema(&format!("candidates[{i}].text"), "missing or not a string"))
            }
        };
        let role: Role = match c.get("role") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| ctx.schema(&format!("candidates[{i}].role"), e.to_string()))?,
            None => return Err(ctx.schema(&format!("candidates[{i}].role"), "missing")),
        };
        candidates.push(Candidate { text, role });
    }
    let gold_role = match obj.get("gold_role") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value::<Role>(v.clone())
                .map_err(|e| ctx.schema("gold_role", e.to_string()))?,
        ),
    };
    let record = PromptRecord {
        prompt_id,
        dataset,
        dimension,
        context_kind,
        candidates,
        gold_role,
    };
    record
        .validate()
        .map_err(|v| ctx.schema(v.field, v.message))?;
    Ok(record)
}

/// Parses every line of a prompt file, collecting rejects instead of
/// stopping at the first one. `expect` restricts the accepted dataset tag.
pub fn read_prompts_lenient(
    path: &Path,
    expect: Option<Dataset>,
) -> Result<LoadReport<PromptRecord>, LoadError> {
    let mut report = LoadReport {
        records: Vec::new(),
        rejects: Vec::new(),
    };
    let mut seen: HashSet<String> = HashSet::new();
    for (line, text) in read_lines(path)? {
        let ctx = LineCtx { path, line };
        match parse_prompt(&ctx, &text) {
            Ok(rec) => {
                if let Some(ds) = expect {
                    if rec.dataset != ds {
                        report.rejects.push(ctx.schema(
                            "dataset",
                            format!("expected `{ds}`, found `{}`", rec.dataset),
                        ));
                        continue;
                    }
                }
                if !seen.insert(rec.prompt_id.clone()) {
                    report.rejects.push(LoadError::Duplicate {
                        path: path.to_path_buf(),
                        line,
                        what: "prompt_id",
                        id: rec.prompt_id,
                    });
                    continue;
                }
                report.records.push(rec);
            }
            Err(e) => report.rejects.push(e),
        }
    }
    Ok(report)
}

/// Loads a BBQ-shaped prompt file, failing on the first malformed line.
pub fn load_bbq(path: &Path) -> Result<Vec<PromptRecord>, LoadError> {
    read_prompts_lenient(path, Some(Dataset::Bbq))?.into_strict(path)
}

/// Loads an UnQover-shaped (two-candidate, forced-choice) prompt file.
pub fn load_unqover(path: &Path) -> Result<Vec<PromptRecord>, LoadError> {
    read_prompts_lenient(path, Some(Dataset::Unqover))?.into_strict(path)
}

fn parse_response(ctx: &LineCtx<'_>, text: &str) -> Result<RawResponse, LoadError> {
    let obj = parse_object(ctx, text)?;
    Ok(RawResponse {
        model_id: ctx.string(&obj, "model_id")?,
        prompt_id: ctx.string(&obj, "prompt_id")?,
        raw_text: ctx.string(&obj, "raw_text")?,
    })
}

/// Response lines in file order, each paired with its 1-based line number.
pub fn read_responses_lenient(path: &Path) -> Result<LoadReport<(usize, RawResponse)>, LoadError> {
    let mut report = LoadReport {
        records: Vec::new(),
        rejects: Vec::new(),
    };
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (line, text) in read_lines(path)? {
        let ctx = LineCtx { path, line };
        match parse_response(&ctx, &text) {
            Ok(r) => {
                if !seen.insert((r.model_id.clone(), r.prompt_id.clone())) {
                    report.rejects.push(LoadError::Duplicate {
                        path: path.to_path_buf(),
                        line,
                        what: "(model_id, prompt_id)",
                        id: format!("{}/{}", r.model_id, r.prompt_id),
                    });
                    continue;
                }
                report.records.push((line, r));
            }
            Err(e) => report.rejects.push(e),
        }
    }
    Ok(report)
}

/// Loads a response file and labels every line against its prompt.
/// Any label present in the input is ignored; labels are always recomputed.
pub fn load_responses(
    path: &Path,
    prompts: &[PromptRecord],
    lexicon: &RefusalLexicon,
) -> Result<Vec<ResponseRecord>, LoadError> {
    let raws = read_responses_lenient(path)?.into_strict(path)?;
    let by_id: HashMap<&str, &PromptRecord> =
        prompts.iter().map(|p| (p.prompt_id.as_str(), p)).collect();
    let mut out = Vec::with_capacity(raws.len());
    for (line, raw) in raws {
        let Some(prompt) = by_id.get(raw.prompt_id.as_str()) else {
            return Err(LoadError::UnknownPrompt {
                path: path.to_path_buf(),
                line,
                prompt_id: raw.prompt_id,
            });
        };
        out.push(label_response(raw, prompt, lexicon));
    }
    Ok(out)
}

pub fn label_response(
    raw: RawResponse,
    prompt: &PromptRecord,
    lexicon: &RefusalLexicon,
) -> ResponseRecord {
    let (label, norm_method) = normalize_response(&raw.raw_text, &prompt.candidates, lexicon);
    ResponseRecord {
        model_id: raw.model_id,
        prompt_id: raw.prompt_id,
        raw_text: raw.raw_text,
        label,
        norm_method,
    }
}

/// Reads `models.json`: a JSON array of model descriptors with unique ids.
pub fn load_manifest(path: &Path) -> Result<Vec<ModelDescriptor>, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|e| LoadError::io(path, e))?;
    let models: Vec<ModelDescriptor> =
        serde_json::from_str(&text).map_err(|e| LoadError::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            field: "<manifest>".into(),
            message: e.to_string(),
        })?;
    let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
    for m in &models {
        if seen.insert(m.id.as_str(), ()).is_some() {
            return Err(LoadError::Duplicate {
                path: path.to_path_buf(),
                line: 0,
                what: "model id",
                id: m.id.clone(),
            });
        }
    }
    Ok(models)
}

/// Writes records as line-delimited JSON.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
