//! Config loading, output directories and summary tables.

use std::fs;
use std::io::Write;
use std::path::Path;

use ilq_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::VERSION;

pub const CONFIG_FILE: &str = "config.json";

/// `println!` unless the command ran with `--quiet`.
macro_rules! say {
    ($common:expr, $($arg:tt)*) => {
        if !$common.quiet {
            println!($($arg)*);
        }
    };
}
pub(crate) use say;

/// Reads a JSON config, or the defaults when no file is given. Unknown
/// fields are a configuration error.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Resolved<'a, T> {
    command: &'a str,
    version: &'a str,
    config: &'a T,
}

/// Creates `out` and writes the resolved config with the toolkit version.
pub fn prepare(out: &Path, command: &str, config: &impl Serialize) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join(CONFIG_FILE),
        &Resolved {
            command,
            version: VERSION,
            config,
        },
    )
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json("output", e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json("output", e))?;
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Left-aligned first column, right-aligned numbers.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = width[i])
                } else {
                    format!("{c:>w$}", w = width[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut s = line(headers.to_vec());
    s.push('\n');
    s.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (width.len() - 1)));
    for r in rows {
        s.push('\n');
        s.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    s
}
