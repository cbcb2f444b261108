//! Line-delimited JSON corpus files (`-1` marks the root).

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use graphdec_core::graph::{CorpusExample, Head};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    src: Vec<String>,
    tgt: Vec<String>,
    src_heads: Vec<i64>,
    tgt_heads: Vec<i64>,
}

pub fn heads_to_ints(heads: &[Head]) -> Vec<i64> {
    heads.iter().map(|h| h.map_or(-1, |j| j as i64)).collect()
}

fn ints_to_heads(v: &[i64], what: &str) -> Result<Vec<Head>> {
    let n = v.len() as i64;
    v.iter()
        .map(|&h| match h {
            -1 => Ok(None),
            h if (0..n).contains(&h) => Ok(Some(h as usize)),
            h => bail!("{what} head index {h} out of range for {n} tokens"),
        })
        .collect()
}

pub fn format_example(ex: &CorpusExample) -> String {
    let line = Line {
        src: ex.src.clone(),
        tgt: ex.tgt.clone(),
        src_heads: heads_to_ints(&ex.src_heads),
        tgt_heads: heads_to_ints(&ex.tgt_heads),
    };
    serde_json::to_string(&line).expect("corpus lines serialize")
}

pub fn format_corpus(examples: &[CorpusExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&format_example(ex));
        s.push('\n');
    }
    s
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusExample>> {
    let mut out = Vec::new();
    for (i, raw) in text.split_terminator('\n').enumerate() {
        let n = i + 1;
        let line: Line = serde_json::from_str(raw).with_context(|| format!("line {n}: malformed example"))?;
        let ex = CorpusExample {
            src_heads: ints_to_heads(&line.src_heads, "source").with_context(|| format!("line {n}"))?,
            tgt_heads: ints_to_heads(&line.tgt_heads, "target").with_context(|| format!("line {n}"))?,
            src: line.src,
            tgt: line.tgt,
        };
        ex.validate().with_context(|| format!("line {n}: invalid example"))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusExample>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_corpus(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_corpus(path: &Path, examples: &[CorpusExample]) -> Result<()> {
    fs::write(path, format_corpus(examples)).with_context(|| format!("writing {}", path.display()))
}
