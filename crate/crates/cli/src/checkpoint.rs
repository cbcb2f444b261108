//! Named-tensor checkpoint container.
//!
//! Layout: a text header (`1`, the entry count, then one `name d0 d1` line per
//! entry and a blank line) followed by little-endian `f64` payloads in header
//! order.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use graphdec_core::params::ParamStore;
use graphdec_core::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = format!("{FORMAT_VERSION}\n{}\n", store.len());
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        out.push_str(&format!("{name} {}\n", dims.join(" ")));
    }
    out.push('\n');
    let mut bytes = out.into_bytes();
    for (_, t) in store.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .context("checkpoint header is truncated")?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).context("checkpoint header is not UTF-8")
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut pos = 0;
    let version: u32 = take_line(bytes, &mut pos)?
        .trim()
        .parse()
        .context("checkpoint version line is not an integer")?;
    ensure!(version == FORMAT_VERSION, "unsupported checkpoint version {version}");
    let count: usize = take_line(bytes, &mut pos)?
        .trim()
        .parse()
        .context("checkpoint entry count is not an integer")?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let line = take_line(bytes, &mut pos)?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .with_context(|| format!("checkpoint header entry {i} is empty"))?;
        let shape = parts
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("bad shape for checkpoint entry {name}"))?;
        entries.push(Entry {
            name: name.to_string(),
            shape,
            data: Vec::new(),
        });
    }
    ensure!(take_line(bytes, &mut pos)?.is_empty(), "checkpoint header has extra lines");
    for e in &mut entries {
        let n: usize = e.shape.iter().product();
        let end = pos + 8 * n;
        ensure!(end <= bytes.len(), "checkpoint payload for {} is truncated", e.name);
        e.data = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        pos = end;
    }
    ensure!(pos == bytes.len(), "checkpoint has {} trailing bytes", bytes.len() - pos);
    Ok(entries)
}

/// Copies entries into `store`; names and shapes must match one to one.
pub fn load_into(store: &mut ParamStore, entries: &[Entry]) -> Result<()> {
    ensure!(
        entries.len() == store.len(),
        "checkpoint has {} tensors, model expects {}",
        entries.len(),
        store.len()
    );
    for e in entries {
        let t = Tensor::new(e.shape.clone(), e.data.clone())?;
        store
            .set(&e.name, t)
            .with_context(|| format!("loading checkpoint tensor {}", e.name))?;
    }
    Ok(())
}

pub fn write(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(store)).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("parsing {}", path.display()))
}
