//! Run manifests: the command line, every effective setting and the SHA-256
//! of every input file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use brainseg_core::{Error, Result};
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

#[derive(Debug, Default)]
pub struct Manifest {
    command: String,
    settings: Vec<(String, String)>,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.settings.push((key.to_string(), value.to_string()));
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let hash = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), hash));
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// Lines prefixed with `prefix`, so the block can sit inside another
    /// file as comments.
    pub fn render(&self, prefix: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{prefix}brainseg {} (version {})", self.command, env!("CARGO_PKG_VERSION"));
        let args: Vec<String> = std::env::args().skip(1).collect();
        let _ = writeln!(s, "{prefix}command line: brainseg {}", args.join(" "));
        for (k, v) in &self.settings {
            let _ = writeln!(s, "{prefix}setting {k} = {v}");
        }
        for (p, h) in &self.inputs {
            let _ = writeln!(s, "{prefix}input sha256 {h} {}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "{prefix}output {}", p.display());
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render("")).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
