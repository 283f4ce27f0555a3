//! Training configuration files.
//!
//! Flat `key = value` lines grouped under `[section]` headers. Blank lines
//! and lines starting with `#` are ignored. Unknown sections and keys are
//! errors. Relative paths resolve against the file's directory.
//!
//! ```text
//! [data]
//! train = img1.vhdr labels1.vhdr mask1.vhdr      # repeatable
//! validate = img4.vhdr labels4.vhdr mask4.vhdr   # optional, repeatable
//!
//! [network]
//! classes = 9                  # optional; inferred from the training labels
//! branches = 25 51 75          # subset of the default architecture
//! branch = 25 5,3,3 24,32,48 1,1,0 256   # custom branch (repeatable)
//!
//! [training]
//! samples_per_class = 50000
//! epochs = 10
//! batch_size = 128
//! learning_rate = 0.001
//! rho = 0.9
//! epsilon = 1e-8
//! dropout_keep = 0.5
//! seed = 0
//! threads = 1
//!
//! [output]
//! dir = run1
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use brainseg_core::{BranchSpec, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    /// 1-based; 0 for problems not tied to one line.
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.line == 0 {
            f.write_str(&self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub image: PathBuf,
    pub labels: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainFile {
    pub train: Vec<Triplet>,
    pub validate: Vec<Triplet>,
    pub classes: Option<usize>,
    pub branches: Option<Vec<usize>>,
    pub custom_branches: Vec<BranchSpec>,
    pub training: TrainingConfig,
    pub output_dir: Option<PathBuf>,
}

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

fn number<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ParseError> {
    v.parse().map_err(|_| err(line, format!("'{key}': cannot parse '{v}'")))
}

fn list<T: FromStr>(line: usize, key: &str, v: &str, sep: char) -> Result<Vec<T>, ParseError> {
    v.split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| number(line, key, s))
        .collect()
}

fn parse_branch(line: usize, v: &str) -> Result<BranchSpec, ParseError> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    let [patch, kernels, channels, pools, fc] = parts.as_slice() else {
        return Err(err(line, "'branch' needs: patch kernels channels pools fc_width"));
    };
    let pools: Vec<u8> = list(line, "branch pools", pools, ',')?;
    if pools.iter().any(|&p| p > 1) {
        return Err(err(line, "'branch' pool flags must be 0 or 1"));
    }
    BranchSpec::new(
        number(line, "branch patch", patch)?,
        &list(line, "branch kernels", kernels, ',')?,
        &list(line, "branch channels", channels, ',')?,
        &pools.iter().map(|&p| p == 1).collect::<Vec<_>>(),
        number(line, "branch fc_width", fc)?,
    )
    .map_err(|e| err(line, e.to_string()))
}

impl TrainFile {
    pub fn parse(text: &str, base: &Path) -> Result<Self, ParseError> {
        let mut cfg = TrainFile {
            train: Vec::new(),
            validate: Vec::new(),
            classes: None,
            branches: None,
            custom_branches: Vec::new(),
            training: TrainingConfig::default(),
            output_dir: None,
        };
        let mut section: Option<String> = None;
        let mut seen: Vec<(String, String)> = Vec::new();
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            if let Some(name) = body.strip_prefix('[').and_then(|b| b.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "data" | "network" | "training" | "output") {
                    return Err(err(line, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected 'key = value', got '{body}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| err(line, format!("key '{key}' appears before any [section]")))?;
            let repeatable = matches!((sec, key), ("data", "train" | "validate") | ("network", "branch"));
            let id = (sec.to_string(), key.to_string());
            if !repeatable && seen.contains(&id) {
                return Err(err(line, format!("duplicate key '{key}' in [{sec}]")));
            }
            seen.push(id);
            let t = &mut cfg.training;
            match (sec, key) {
                ("data", "train" | "validate") => {
                    let paths: Vec<&str> = value.split_whitespace().collect();
                    let [image, labels, mask] = paths.as_slice() else {
                        return Err(err(line, format!("'{key}' needs three paths: image labels mask")));
                    };
                    let triplet = Triplet {
                        image: resolve(image),
                        labels: resolve(labels),
                        mask: resolve(mask),
                    };
                    if key == "train" {
                        cfg.train.push(triplet);
                    } else {
                        cfg.validate.push(triplet);
                    }
                }
                ("network", "classes") => cfg.classes = Some(number(line, key, value)?),
                ("network", "branches") => cfg.branches = Some(list(line, key, value, ' ')?),
                ("network", "branch") => cfg.custom_branches.push(parse_branch(line, value)?),
                ("training", "samples_per_class") => t.samples_per_class = number(line, key, value)?,
                ("training", "epochs") => t.epochs = number(line, key, value)?,
                ("training", "batch_size") => t.batch_size = number(line, key, value)?,
                ("training", "learning_rate") => t.learning_rate = number(line, key, value)?,
                ("training", "rho") => t.rho = number(line, key, value)?,
                ("training", "epsilon") => t.epsilon = number(line, key, value)?,
                ("training", "dropout_keep") => t.dropout_keep = number(line, key, value)?,
                ("training", "seed") => t.seed = number(line, key, value)?,
                ("training", "threads") => t.threads = number(line, key, value)?,
                ("output", "dir") => cfg.output_dir = Some(resolve(value)),
                _ => return Err(err(line, format!("unknown key '{key}' in [{sec}]"))),
            }
        }
        if cfg.train.is_empty() {
            return Err(err(text.lines().count().max(1), "no 'train' entries in [data]"));
        }
        if cfg.branches.is_some() && !cfg.custom_branches.is_empty() {
            return Err(err(0, "'branches' and 'branch' cannot be combined"));
        }
        cfg.training
            .validate()
            .map_err(|e| err(0, e.to_string()))?;
        Ok(cfg)
    }

    /// Canonical text form with every value spelled out; parses back to
    /// the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::from("[data]\n");
        for (key, list) in [("train", &self.train), ("validate", &self.validate)] {
            for t in list {
                let _ = writeln!(s, "{key} = {} {} {}", t.image.display(), t.labels.display(), t.mask.display());
            }
        }
        s.push_str("\n[network]\n");
        if let Some(n) = self.classes {
            let _ = writeln!(s, "classes = {n}");
        }
        if let Some(b) = &self.branches {
            let b: Vec<String> = b.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "branches = {}", b.join(" "));
        }
        for b in &self.custom_branches {
            let join = |v: Vec<String>| v.join(",");
            let _ = writeln!(
                s,
                "branch = {} {} {} {} {}",
                b.patch_size,
                join(b.layers.iter().map(|l| l.kernel.to_string()).collect()),
                join(b.layers.iter().map(|l| l.channels.to_string()).collect()),
                join(b.layers.iter().map(|l| (l.pool as u8).to_string()).collect()),
                b.fc_width
            );
        }
        let t = &self.training;
        let _ = write!(
            s,
            "\n[training]\nsamples_per_class = {}\nepochs = {}\nbatch_size = {}\nlearning_rate = {:?}\nrho = {:?}\n\
             epsilon = {:?}\ndropout_keep = {:?}\nseed = {}\nthreads = {}\n",
            t.samples_per_class, t.epochs, t.batch_size, t.learning_rate, t.rho, t.epsilon, t.dropout_keep, t.seed, t.threads
        );
        if let Some(d) = &self.output_dir {
            let _ = write!(s, "\n[output]\ndir = {}\n", d.display());
        }
        s
    }
}
