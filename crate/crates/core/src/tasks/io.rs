use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gen::Sample;
use super::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    prompt: String,
    completion: String,
}

/// Write one `{"prompt": …, "completion": …}` object per line.
pub fn write_jsonl(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for s in samples {
        let rec = Record {
            prompt: s.prompt.clone(),
            completion: s.completion.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::State(format!("serialize: {e}")))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a JSON-lines dataset, tokenizing each record. Errors name the line.
pub fn read_jsonl(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let shown = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Parse {
            path: shown.clone(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        out.push(Sample::new(rec.prompt, rec.completion, vocab).map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

/// Prompts of every dataset file in `paths`.
pub fn prompts_of(paths: &[impl AsRef<Path>], vocab: &Vocab) -> Result<HashSet<String>> {
    let mut set = HashSet::new();
    for p in paths {
        set.extend(read_jsonl(p, vocab)?.into_iter().map(|s| s.prompt));
    }
    Ok(set)
}
