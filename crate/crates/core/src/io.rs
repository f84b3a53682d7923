//! File formats: JSON model files, JSONL and CSV sequence files.
//!
//! Reals are written with 17 significant digits, which is enough for every `f64` to read
//! back bit-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, Gmm};
use crate::h3m_em::H3m;
use crate::hmm::{Hmm, Sequence};

pub const MODEL_FILE_VERSION: u32 = 1;

/// serde_json formatter that prints every float in scientific notation with 17 significant digits.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactFloatFormatter;

impl Formatter for ExactFloatFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            CompactFormatter.write_null(writer)
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes `value` as one line of JSON with exact floats.
pub fn to_exact_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloatFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hmm,
    H3m,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmRecord {
    pub c: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmRecord {
    pub pi: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub emissions: Vec<GmmRecord>,
}

/// On-disk form of an HMM or an H3M. An HMM is stored as a one-component mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: ModelKind,
    pub d: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub omega: Vec<f64>,
    pub components: Vec<HmmRecord>,
}

fn hmm_record(h: &Hmm) -> HmmRecord {
    let s = h.n_states();
    HmmRecord {
        pi: h.pi().to_vec(),
        a: (0..s).map(|r| h.trans().row(r).iter().copied().collect()).collect(),
        emissions: h
            .emissions()
            .iter()
            .map(|g| GmmRecord {
                c: g.weights().to_vec(),
                means: g.components().iter().map(|c| c.mean().iter().copied().collect()).collect(),
                covs: g
                    .components()
                    .iter()
                    .map(|c| {
                        let d = c.dim();
                        (0..d).map(|r| c.cov().row(r).iter().copied().collect()).collect()
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn matrix(rows: &[Vec<f64>], n: usize, m: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != m) {
        return Err(Error::invalid(format!("{what} must be {n}x{m}")));
    }
    Ok(DMatrix::from_fn(n, m, |r, c| rows[r][c]))
}

impl HmmRecord {
    fn to_hmm(&self, d: usize, s: usize, m: usize) -> Result<Hmm> {
        if self.pi.len() != s || self.emissions.len() != s {
            return Err(Error::invalid(format!("expected {s} states")));
        }
        let trans = matrix(&self.a, s, s, "A")?;
        let emissions = self
            .emissions
            .iter()
            .map(|e| {
                if e.c.len() != m || e.means.len() != m || e.covs.len() != m {
                    return Err(Error::invalid(format!("expected {m} mixture components")));
                }
                let comps = e
                    .means
                    .iter()
                    .zip(&e.covs)
                    .map(|(mu, cov)| {
                        if mu.len() != d {
                            return Err(Error::DimensionMismatch {
                                expected: d,
                                found: mu.len(),
                            });
                        }
                        Gaussian::new(DVector::from_column_slice(mu), matrix(cov, d, d, "covariance")?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Gmm::new(e.c.clone(), comps)
            })
            .collect::<Result<Vec<_>>>()?;
        Hmm::new(self.pi.clone(), trans, emissions)
    }
}

impl ModelFile {
    pub fn from_hmm(h: &Hmm) -> Self {
        Self {
            v: MODEL_FILE_VERSION,
            kind: ModelKind::Hmm,
            d: h.dim(),
            s: h.n_states(),
            m: h.n_mix(),
            omega: vec![1.0],
            components: vec![hmm_record(h)],
        }
    }

    pub fn from_h3m(h: &H3m) -> Self {
        Self {
            v: MODEL_FILE_VERSION,
            kind: ModelKind::H3m,
            d: h.dim(),
            s: h.n_states(),
            m: h.n_mix(),
            omega: h.omega().to_vec(),
            components: h.components().iter().map(hmm_record).collect(),
        }
    }

    fn check_header(&self) -> Result<()> {
        if self.v != MODEL_FILE_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model file version {} (expected {MODEL_FILE_VERSION})",
                self.v
            )));
        }
        if self.d == 0 || self.s == 0 || self.m == 0 {
            return Err(Error::invalid("d, S and M must be at least 1"));
        }
        Ok(())
    }

    /// The stored model as an H3M; an HMM file becomes a one-component mixture.
    pub fn to_h3m(&self) -> Result<H3m> {
        self.check_header()?;
        let comps = self
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.to_hmm(self.d, self.s, self.m)
                    .map_err(|e| Error::invalid(format!("component {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        H3m::new(self.omega.clone(), comps)
    }

    /// The stored model as a single HMM. Fails for mixtures with more than one component.
    pub fn to_hmm(&self) -> Result<Hmm> {
        let h = self.to_h3m()?;
        if h.n_components() != 1 {
            return Err(Error::invalid(format!(
                "expected a single HMM, found a mixture of {}",
                h.n_components()
            )));
        }
        Ok(h.components()[0].clone())
    }

    pub fn to_json(&self) -> Result<String> {
        to_exact_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Sequences read from a file, with the optional group label of each.
#[derive(Clone, Debug, Default)]
pub struct SequenceSet {
    pub sequences: Vec<Sequence>,
    pub groups: Vec<Option<String>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Frames {
    Scalars(Vec<f64>),
    Vectors(Vec<Vec<f64>>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceLine {
    id: String,
    frames: Frames,
    #[serde(default)]
    group: Option<String>,
}

#[derive(Serialize)]
struct SequenceOut<'a> {
    id: &'a str,
    frames: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    group: Option<&'a str>,
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads one JSON object per line: `{"id": ..., "frames": [[...], ...], "group": ...}`.
/// Scalar frames (`"frames": [1.0, 2.0]`) are read as one-dimensional. Blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<SequenceSet> {
    let reader = BufReader::new(File::open(path)?);
    let mut set = SequenceSet::default();
    let mut dim = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceLine =
            serde_json::from_str(&line).map_err(|e| parse_error(path, lineno, e.to_string()))?;
        let frames: Vec<DVector<f64>> = match rec.frames {
            Frames::Scalars(v) => v.into_iter().map(|x| DVector::from_element(1, x)).collect(),
            Frames::Vectors(v) => v.into_iter().map(DVector::from_vec).collect(),
        };
        let seq = Sequence::new(rec.id, frames).map_err(|e| parse_error(path, lineno, e.to_string()))?;
        check_dim(&mut dim, seq.dim()).map_err(|e| parse_error(path, lineno, e.to_string()))?;
        set.sequences.push(seq);
        set.groups.push(rec.group);
    }
    if set.sequences.is_empty() {
        return Err(parse_error(path, 0, "no sequences"));
    }
    Ok(set)
}

fn check_dim(dim: &mut Option<usize>, d: usize) -> Result<()> {
    match *dim {
        Some(e) if e != d => Err(Error::DimensionMismatch {
            expected: e,
            found: d,
        }),
        _ => {
            *dim = Some(d);
            Ok(())
        }
    }
}

/// Reads CSV with header `id,t,f0,f1,...`: one frame per row, rows of a sequence in time order.
/// Sequences appear in order of their first row.
pub fn read_csv(path: &Path) -> Result<SequenceSet> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_error(path, 1, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "t" {
        return Err(parse_error(path, 1, "header must be id,t,f0[,f1,...]"));
    }
    let d = header.len() - 2;
    let mut ids: Vec<String> = Vec::new();
    let mut frames: Vec<Vec<DVector<f64>>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec[0].to_string();
        let t: usize = rec[1]
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad time index '{}'", &rec[1])))?;
        let values = (2..2 + d)
            .map(|k| {
                rec[k]
                    .parse::<f64>()
                    .map_err(|_| parse_error(path, line, format!("bad number '{}'", &rec[k])))
            })
            .collect::<Result<Vec<_>>>()?;
        let idx = match ids.iter().position(|x| *x == id) {
            Some(i) => i,
            None => {
                ids.push(id);
                frames.push(Vec::new());
                ids.len() - 1
            }
        };
        if t != frames[idx].len() {
            return Err(parse_error(
                path,
                line,
                format!("expected t = {} for sequence '{}', found {t}", frames[idx].len(), ids[idx]),
            ));
        }
        frames[idx].push(DVector::from_vec(values));
    }
    if ids.is_empty() {
        return Err(parse_error(path, 1, "no sequences"));
    }
    let sequences = ids
        .into_iter()
        .zip(frames)
        .map(|(id, f)| Sequence::new(id, f))
        .collect::<Result<Vec<_>>>()?;
    let groups = vec![None; sequences.len()];
    Ok(SequenceSet { sequences, groups })
}

/// Reads CSV when the extension is `.csv`, JSONL otherwise.
pub fn read_sequences(path: &Path) -> Result<SequenceSet> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => read_csv(path),
        _ => read_jsonl(path),
    }
}

/// Writes sequences as JSONL with exact floats.
pub fn write_jsonl<W: Write>(seqs: &[Sequence], groups: Option<&[String]>, mut out: W) -> Result<()> {
    for (i, q) in seqs.iter().enumerate() {
        let rec = SequenceOut {
            id: &q.id,
            frames: q.frames.iter().map(|f| f.iter().copied().collect()).collect(),
            group: groups.map(|g| g[i].as_str()),
        };
        writeln!(out, "{}", to_exact_json(&rec)?)?;
    }
    Ok(())
}
