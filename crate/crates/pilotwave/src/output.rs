//! Bit-stable file emission.
//!
//! Every CSV starts with comment lines carrying the configuration hash and
//! seed, then a header row. Floats are rendered with 17 significant digits
//! so files are byte-identical across runs, worker counts, and platforms
//! sharing IEEE-754 semantics.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("failed writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// A float rendered with enough digits to round-trip exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// One value of a CSV row.
pub enum Field {
    Float(f64),
    Int(i64),
    Text(String),
}

impl From<f64> for Field {
    fn from(x: f64) -> Self {
        Field::Float(x)
    }
}

impl From<usize> for Field {
    fn from(x: usize) -> Self {
        Field::Int(x as i64)
    }
}

impl From<i64> for Field {
    fn from(x: i64) -> Self {
        Field::Int(x)
    }
}

impl From<&str> for Field {
    fn from(x: &str) -> Self {
        Field::Text(x.to_string())
    }
}

impl Field {
    fn render(&self) -> String {
        match self {
            Field::Float(x) => fmt_f64(*x),
            Field::Int(i) => i.to_string(),
            Field::Text(s) => s.clone(),
        }
    }
}

/// Buffered CSV assembly; nothing touches the filesystem until `write_to`.
pub struct Csv {
    buffer: String,
}

impl Csv {
    /// Start a CSV with the standard provenance header.
    pub fn new(config_hash: &str, seed: u64, columns: &[&str]) -> Self {
        let mut buffer = String::new();
        buffer.push_str(&format!("# config_hash={config_hash}\n"));
        buffer.push_str(&format!("# seed={seed}\n"));
        buffer.push_str(&columns.join(","));
        buffer.push('\n');
        Csv { buffer }
    }

    pub fn row(&mut self, fields: &[Field]) {
        let rendered: Vec<String> = fields.iter().map(Field::render).collect();
        self.buffer.push_str(&rendered.join(","));
        self.buffer.push('\n');
    }

    pub fn into_string(self) -> String {
        self.buffer
    }

    pub fn write_to(&self, path: &Path) -> Result<(), OutputError> {
        write_text(path, &self.buffer)
    }
}

pub fn write_text(path: &Path, content: &str) -> Result<(), OutputError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| OutputError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let mut f = std::fs::File::create(path).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(content.as_bytes()).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for &x in &[1.0, std::f64::consts::PI, 1e-300, -2.5e17, 0.1 + 0.2] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn csv_layout_is_stable() {
        let mut csv = Csv::new("deadbeef", 42, &["t", "value"]);
        csv.row(&[0.5.into(), 3i64.into()]);
        let text = csv.into_string();
        assert_eq!(
            text,
            "# config_hash=deadbeef\n# seed=42\nt,value\n5.0000000000000000e-1,3\n"
        );
    }
}
