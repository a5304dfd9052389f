// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parses JSONL text; blank lines are skipped. Errors carry the 1-based line
/// number and `origin` as the path.
pub fn parse_jsonl<T>(text: &str, origin: &Path) -> Result<Vec<T>>
where
    T: DeserializeOwned + Send,
{
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    lines
        .par_iter()
        .map(|&(line, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data {
                path: origin.to_path_buf(),
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_jsonl<T>(path: impl AsRef<Path>) -> Result<Vec<T>>
where
    T: DeserializeOwned + Send,
{
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Data {
        path: PathBuf::from(path),
        line: 0,
        message: e.to_string(),
    })?;
    parse_jsonl(&text, path)
}

pub fn write_jsonl<T: Serialize>(items: &[T], out: impl Write) -> Result<()> {
    let mut w = BufWriter::new(out);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl_file<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(items, fs::File::create(path)?)
}
