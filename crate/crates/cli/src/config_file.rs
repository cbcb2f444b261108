//! `key = value` configuration files.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use graphdec_core::config::Config;

/// Non-comment `(line number, key, value)` triples.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`", i + 1);
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Builds a config: the preset named by `preset` (or by the file, or `desk`),
/// then the file's settings.
pub fn load(text: &str, preset: Option<&str>) -> Result<Config> {
    let lines = parse_lines(text)?;
    let file_preset = lines.iter().find(|(_, k, _)| k == "preset").map(|(_, _, v)| v.as_str());
    let name = preset.or(file_preset).unwrap_or("desk");
    let mut cfg = Config::preset(name)?;
    for (n, k, v) in &lines {
        if k == "preset" {
            continue;
        }
        cfg.set(k, v).with_context(|| format!("line {n}"))?;
    }
    Ok(cfg)
}

pub fn read(path: &Path, preset: Option<&str>) -> Result<Config> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    load(&text, preset).with_context(|| format!("in config {}", path.display()))
}

pub fn format(cfg: &Config) -> String {
    cfg.entries()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
