//! Plain-text model files.
//!
//! ```text
//! slatelab-model 1
//! kind mf
//! k 2
//! l2 0.0001
//! seed 7
//! fingerprint 3f2a...
//! beta0 -0.41
//! users 2
//! 1 0.12 0.03 -0.2      # id, bias, k factors
//! 4 -0.3 0.1 0.0
//! stories 1
//! 9 0.5 0.2 0.01
//! end
//! ```
//!
//! Numbers use Rust's shortest round-trip formatting, so a save/load cycle
//! is lossless.

use super::{ModelError, ModelKind, OutcomeModel};
use crate::log::{StoryId, UserId};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "slatelab-model";

pub fn write_model<W: Write>(m: &OutcomeModel, mut w: W) -> std::io::Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(s, "kind {}", m.kind.as_str());
    let _ = writeln!(s, "k {}", m.k);
    let _ = writeln!(s, "l2 {}", m.l2);
    let _ = writeln!(s, "seed {}", m.seed);
    let _ = writeln!(
        s,
        "fingerprint {}",
        if m.fingerprint.is_empty() {
            "-"
        } else {
            &m.fingerprint
        }
    );
    let _ = writeln!(s, "beta0 {}", m.beta0);
    let _ = writeln!(s, "users {}", m.users().len());
    for (i, u) in m.users().iter().enumerate() {
        let _ = write!(s, "{} {}", u.0, m.user_bias[i]);
        for x in &m.user_factors[i * m.k..(i + 1) * m.k] {
            let _ = write!(s, " {x}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "stories {}", m.stories().len());
    for (j, st) in m.stories().iter().enumerate() {
        let _ = write!(s, "{} {}", st.0, m.story_bias[j]);
        for x in &m.story_factors[j * m.k..(j + 1) * m.k] {
            let _ = write!(s, " {x}");
        }
        s.push('\n');
    }
    s.push_str("end\n");
    w.write_all(s.as_bytes())
}

pub fn save_model(m: &OutcomeModel, path: &Path) -> Result<(), ModelError> {
    let f = std::fs::File::create(path)?;
    write_model(m, std::io::BufWriter::new(f))?;
    Ok(())
}

struct Lines<I> {
    inner: I,
    line: usize,
}

impl<I: Iterator<Item = std::io::Result<String>>> Lines<I> {
    fn next(&mut self) -> Result<String, ModelError> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(ModelError::CorruptFile(format!(
                "unexpected end of file at line {}",
                self.line
            ))),
        }
    }

    fn field(&mut self, key: &str) -> Result<String, ModelError> {
        let l = self.next()?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ => Err(ModelError::CorruptFile(format!(
                "line {}: expected '{key}'",
                self.line
            ))),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ModelError> {
        let v = self.field(key)?;
        v.parse().map_err(|_| {
            ModelError::CorruptFile(format!("line {}: bad value for '{key}'", self.line))
        })
    }

    fn entity_row(&mut self, k: usize) -> Result<(u32, f64, Vec<f64>), ModelError> {
        let l = self.next()?;
        let bad = |line| ModelError::CorruptFile(format!("line {line}: malformed parameter row"));
        let mut parts = l.split_whitespace();
        let id: u32 = parts
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| bad(self.line))?;
        let bias: f64 = parts
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| bad(self.line))?;
        let factors: Vec<f64> = parts
            .map(|x| x.parse().map_err(|_| bad(self.line)))
            .collect::<Result<_, _>>()?;
        if factors.len() != k {
            return Err(ModelError::VersionMismatch(format!(
                "line {}: {} factors but header declares k = {k}",
                self.line,
                factors.len()
            )));
        }
        Ok((id, bias, factors))
    }
}

pub fn read_model<R: Read>(r: R) -> Result<OutcomeModel, ModelError> {
    let all: Vec<String> = BufReader::new(r).lines().collect::<Result<_, _>>()?;
    if all.last().map(|l| l.trim()) != Some("end") {
        return Err(ModelError::CorruptFile(
            "missing 'end' trailer (truncated file?)".into(),
        ));
    }
    let mut lines = Lines {
        inner: all.into_iter().map(Ok),
        line: 0,
    };
    let head = lines.next()?;
    match head.split_once(' ') {
        Some((MAGIC, v)) if v.trim() == FORMAT_VERSION.to_string() => {}
        Some((MAGIC, v)) => {
            return Err(ModelError::VersionMismatch(format!(
                "format version {v}, expected {FORMAT_VERSION}"
            )))
        }
        _ => return Err(ModelError::CorruptFile("missing model header".into())),
    }
    let kind_s = lines.field("kind")?;
    let kind = ModelKind::parse(&kind_s)
        .ok_or_else(|| ModelError::CorruptFile(format!("unknown model kind '{kind_s}'")))?;
    let k: usize = lines.parsed("k")?;
    if !kind.has_factors() && k != 0 {
        return Err(ModelError::VersionMismatch(format!(
            "{} model with k = {k}",
            kind.as_str()
        )));
    }
    let l2: f64 = lines.parsed("l2")?;
    let seed: u64 = lines.parsed("seed")?;
    let fp = lines.field("fingerprint")?;
    let beta0: f64 = lines.parsed("beta0")?;
    let nu: usize = lines.parsed("users")?;
    let mut users = Vec::with_capacity(nu);
    for _ in 0..nu {
        users.push(lines.entity_row(k)?);
    }
    let ns: usize = lines.parsed("stories")?;
    let mut stories = Vec::with_capacity(ns);
    for _ in 0..ns {
        stories.push(lines.entity_row(k)?);
    }
    if lines.next()?.trim() != "end" {
        return Err(ModelError::CorruptFile(format!(
            "line {}: expected 'end'",
            lines.line
        )));
    }
    let mut m = OutcomeModel::zeros(
        kind,
        k,
        users.iter().map(|r| UserId(r.0)).collect(),
        stories.iter().map(|r| StoryId(r.0)).collect(),
    );
    if m.users().len() != nu || m.stories().len() != ns {
        return Err(ModelError::CorruptFile("duplicate entity ids".into()));
    }
    m.l2 = l2;
    m.seed = seed;
    m.fingerprint = if fp == "-" { String::new() } else { fp };
    m.beta0 = beta0;
    for (id, b, f) in users {
        m.set_user(UserId(id), b, &f);
    }
    for (id, b, f) in stories {
        m.set_story(StoryId(id), b, &f);
    }
    Ok(m)
}

pub fn load_model(path: &Path) -> Result<OutcomeModel, ModelError> {
    read_model(std::fs::File::open(path)?)
}
