//! Reader and writer for the VisDial JSON layout.
//!
//! ```json
//! {"data": {
//!   "questions": ["..."], "answers": ["..."],
//!   "dialogs": [{"image_id": 1, "caption": "...",
//!     "dialog": [{"question": 0, "answer": 3, "answer_options": [..], "gt_index": 2,
//!                 "relevance": [..]}]}]}}
//! ```
//!
//! `question`, `answer` and `answer_options` index the string pools.
//! `relevance` is an optional per-option extension. Images travel separately
//! as a sidecar of concatenated binary tensor records, one per dialog.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use super::{RawDialog, RawRound};
use crate::error::{Error, Result};
use crate::tensor::{io as tio, Tensor};

fn schema(field: &str) -> Error {
    Error::Schema {
        field: field.to_string(),
    }
}

fn field<'a>(v: &'a Value, name: &str) -> Result<&'a Value> {
    v.get(name).ok_or_else(|| schema(name))
}

fn as_usize(v: &Value, name: &str) -> Result<usize> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| schema(name))
}

fn as_array<'a>(v: &'a Value, name: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| schema(name))
}

fn pool_str<'a>(pool: &'a [String], idx: usize, name: &str) -> Result<&'a str> {
    pool.get(idx)
        .map(String::as_str)
        .ok_or_else(|| schema(name))
}

/// Parses a VisDial-layout JSON file into text dialogs (without images).
pub fn load_visdial_json(path: &Path) -> Result<Vec<RawDialog>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    parse_root(&root)
}

fn strings(v: &Value, name: &str) -> Result<Vec<String>> {
    as_array(v, name)?
        .iter()
        .map(|s| s.as_str().map(str::to_string).ok_or_else(|| schema(name)))
        .collect()
}

fn parse_root(root: &Value) -> Result<Vec<RawDialog>> {
    let data = field(root, "data")?;
    let questions = strings(field(data, "questions")?, "questions")?;
    let answers = strings(field(data, "answers")?, "answers")?;
    let mut out = Vec::new();
    for d in as_array(field(data, "dialogs")?, "dialogs")? {
        let id = field(d, "image_id")?
            .as_u64()
            .ok_or_else(|| schema("image_id"))?;
        let caption = field(d, "caption")?
            .as_str()
            .ok_or_else(|| schema("caption"))?
            .to_string();
        let mut rounds = Vec::new();
        for r in as_array(field(d, "dialog")?, "dialog")? {
            let q = as_usize(field(r, "question")?, "question")?;
            let a = as_usize(field(r, "answer")?, "answer")?;
            let options = as_array(field(r, "answer_options")?, "answer_options")?
                .iter()
                .map(|o| {
                    as_usize(o, "answer_options")
                        .and_then(|i| pool_str(&answers, i, "answer_options").map(str::to_string))
                })
                .collect::<Result<Vec<_>>>()?;
            let gt_index = as_usize(field(r, "gt_index")?, "gt_index")?;
            if gt_index >= options.len() {
                return Err(schema("gt_index"));
            }
            let relevance = match r.get("relevance") {
                None | Some(Value::Null) => None,
                Some(v) => {
                    let rel = as_array(v, "relevance")?
                        .iter()
                        .map(|x| x.as_f64().ok_or_else(|| schema("relevance")))
                        .collect::<Result<Vec<_>>>()?;
                    if rel.len() != options.len() {
                        return Err(schema("relevance"));
                    }
                    Some(rel)
                }
            };
            rounds.push(RawRound {
                question: pool_str(&questions, q, "question")?.to_string(),
                answer: pool_str(&answers, a, "answer")?.to_string(),
                candidates: options,
                gt_index,
                relevance,
            });
        }
        out.push(RawDialog {
            id,
            caption,
            rounds,
            image: None,
        });
    }
    Ok(out)
}

/// Writes `dialogs` in the VisDial layout with deduplicated string pools.
pub fn save_visdial_json(dialogs: &[RawDialog], path: &Path) -> Result<()> {
    let mut qpool: Vec<String> = Vec::new();
    let mut apool: Vec<String> = Vec::new();
    let mut qidx: HashMap<String, usize> = HashMap::new();
    let mut aidx: HashMap<String, usize> = HashMap::new();
    let intern = |pool: &mut Vec<String>, idx: &mut HashMap<String, usize>, s: &str| -> usize {
        *idx.entry(s.to_string()).or_insert_with(|| {
            pool.push(s.to_string());
            pool.len() - 1
        })
    };
    let mut ds = Vec::with_capacity(dialogs.len());
    for d in dialogs {
        let mut rounds = Vec::with_capacity(d.rounds.len());
        for r in &d.rounds {
            let q = intern(&mut qpool, &mut qidx, &r.question);
            let a = intern(&mut apool, &mut aidx, &r.answer);
            let opts: Vec<usize> = r
                .candidates
                .iter()
                .map(|c| intern(&mut apool, &mut aidx, c))
                .collect();
            let mut round = json!({
                "question": q,
                "answer": a,
                "answer_options": opts,
                "gt_index": r.gt_index,
            });
            if let Some(rel) = &r.relevance {
                round["relevance"] = json!(rel);
            }
            rounds.push(round);
        }
        ds.push(json!({"image_id": d.id, "caption": d.caption, "dialog": rounds}));
    }
    let root = json!({"data": {"questions": qpool, "answers": apool, "dialogs": ds}});
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &root).map_err(|e| Error::io(path, e.into()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes each dialog's image as a binary tensor record, in order.
pub fn save_images(dialogs: &[RawDialog], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dialogs {
        let img = d
            .image
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("dialog {} has no image", d.id)))?;
        tio::write_binary(img, &mut w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads every record of an image sidecar.
pub fn load_images(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(t) = tio::read_binary(&mut r).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })? {
        out.push(t);
    }
    Ok(out)
}
