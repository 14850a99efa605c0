//! Policy checkpoint serialization.
//!
//! Line-oriented text format: a version tag, the architecture as `key =
//! value` pairs, the training seed, a parameter count, then one weight per
//! line. Floats print in Rust's shortest round-trip form, so saving and
//! reloading reproduces every bit and identical parameters produce
//! identical files.

use crate::gnn::{Aggregator, GnnConfig, GnnError};
use crate::policy::PolicyParameters;
use crate::real;
use crate::Scalar;
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::Path;

/// First line of every checkpoint this version writes.
pub const CHECKPOINT_TAG: &str = "voltgraph-policy-v1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("line 1: expected tag {CHECKPOINT_TAG:?}, found {found:?}")]
    BadTag { found: String },
    #[error("line {line}: expected `{key} = <value>`")]
    MissingField { line: usize, key: &'static str },
    #[error("line {line}: cannot parse {text:?} as {what}")]
    BadValue {
        line: usize,
        text: String,
        what: &'static str,
    },
    #[error("expected {expected} parameter lines, found {found}")]
    WrongCount { expected: usize, found: usize },
    #[error(transparent)]
    Shape(#[from] GnnError),
}

/// Writes the checkpoint text.
pub fn save_policy<T: Scalar, W: Write>(
    mut w: W,
    params: &PolicyParameters<T>,
    seed: u64,
) -> std::io::Result<()> {
    let c = params.config();
    writeln!(w, "{CHECKPOINT_TAG}")?;
    writeln!(w, "layers = {}", c.layers)?;
    writeln!(w, "d_h = {}", c.d_h)?;
    writeln!(w, "d_m = {}", c.d_m)?;
    writeln!(w, "d_g = {}", c.d_g)?;
    writeln!(w, "d_x = {}", c.d_x)?;
    writeln!(w, "d_e = {}", c.d_e)?;
    writeln!(w, "d_z = {}", c.d_z)?;
    writeln!(w, "mlp_hidden = {}", c.mlp_hidden)?;
    writeln!(w, "aggregator = {}", c.aggregator)?;
    writeln!(w, "seed = {seed}")?;
    let flat = params.to_flat();
    writeln!(w, "parameters = {}", flat.len())?;
    for v in &flat {
        writeln!(w, "{v}")?;
    }
    Ok(())
}

struct FieldReader<L> {
    lines: L,
    line: usize,
}

impl<L: Iterator<Item = std::io::Result<String>>> FieldReader<L> {
    fn next_line(&mut self) -> Result<Option<String>, std::io::Error> {
        self.line += 1;
        self.lines.next().transpose()
    }

    fn field(&mut self, key: &'static str) -> Result<String, CheckpointError> {
        let line = self
            .next_line()
            .map_err(io_as_value(self.line, "line"))?
            .ok_or(CheckpointError::MissingField {
                line: self.line,
                key,
            })?;
        let (name, value) = line.split_once('=').ok_or(CheckpointError::MissingField {
            line: self.line,
            key,
        })?;
        if name.trim() != key {
            return Err(CheckpointError::MissingField {
                line: self.line,
                key,
            });
        }
        Ok(value.trim().to_string())
    }

    fn usize_field(&mut self, key: &'static str) -> Result<usize, CheckpointError> {
        let text = self.field(key)?;
        text.parse().map_err(|_| CheckpointError::BadValue {
            line: self.line,
            text,
            what: "integer",
        })
    }
}

fn io_as_value(line: usize, what: &'static str) -> impl FnOnce(std::io::Error) -> CheckpointError {
    move |e| CheckpointError::BadValue {
        line,
        text: e.to_string(),
        what,
    }
}

/// Reads a checkpoint, returning the parameters and the recorded seed.
pub fn load_policy<T: Scalar, R: BufRead>(
    r: R,
) -> Result<(PolicyParameters<T>, u64), CheckpointError> {
    let mut reader = FieldReader {
        lines: r.lines(),
        line: 0,
    };
    let tag = reader
        .next_line()
        .map_err(io_as_value(1, "line"))?
        .unwrap_or_default();
    if tag.trim() != CHECKPOINT_TAG {
        return Err(CheckpointError::BadTag { found: tag });
    }

    let config = GnnConfig {
        layers: reader.usize_field("layers")?,
        d_h: reader.usize_field("d_h")?,
        d_m: reader.usize_field("d_m")?,
        d_g: reader.usize_field("d_g")?,
        d_x: reader.usize_field("d_x")?,
        d_e: reader.usize_field("d_e")?,
        d_z: reader.usize_field("d_z")?,
        mlp_hidden: reader.usize_field("mlp_hidden")?,
        aggregator: {
            let text = reader.field("aggregator")?;
            text.parse::<Aggregator>()
                .map_err(|_| CheckpointError::BadValue {
                    line: reader.line,
                    text,
                    what: "aggregator",
                })?
        },
    };
    let seed = {
        let text = reader.field("seed")?;
        text.parse::<u64>().map_err(|_| CheckpointError::BadValue {
            line: reader.line,
            text,
            what: "integer",
        })?
    };
    let expected = reader.usize_field("parameters")?;

    let mut flat = Vec::with_capacity(expected);
    loop {
        match reader.next_line().map_err(io_as_value(reader.line, "line"))? {
            None => break,
            Some(line) => {
                let text = line.trim();
                if text.is_empty() {
                    continue;
                }
                let v: f64 = text.parse().map_err(|_| CheckpointError::BadValue {
                    line: reader.line,
                    text: text.to_string(),
                    what: "float",
                })?;
                flat.push(real::<T>(v));
            }
        }
    }
    if flat.len() != expected {
        return Err(CheckpointError::WrongCount {
            expected,
            found: flat.len(),
        });
    }
    let params = PolicyParameters::from_flat(config, &flat)?;
    Ok((params, seed))
}

/// Saves to a file, creating parent directories.
pub fn save_policy_file<T: Scalar>(
    path: &Path,
    params: &PolicyParameters<T>,
    seed: u64,
) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_policy(&mut file, params, seed)?;
    file.flush()
}

/// Loads from a file.
pub fn load_policy_file<T: Scalar>(
    path: &Path,
) -> Result<(PolicyParameters<T>, u64), LoadError> {
    let file = std::fs::File::open(path).map_err(|e| LoadError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    load_policy(std::io::BufReader::new(file)).map_err(LoadError::Format)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoadError {
    #[error("cannot open {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Format(#[from] CheckpointError),
}

/// SHA-256 of a file's bytes, lowercase hex.
pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
