//! Raw delimited text to per-field integer indices.
//!
//! Categorical fields keep every token seen at least `min_count` times in the
//! fitting data, numbered from 1 in descending-frequency order (ties broken
//! lexicographically). Index 0 collects out-of-vocabulary and infrequent
//! tokens. Continuous fields are optionally transformed and then bucketed into
//! equal-frequency bins; a value lands in the first bucket whose upper
//! boundary it does not exceed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_COUNT: usize = 20;
pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);
pub const VOCAB_MAGIC: &str = "PINVOCAB v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    None,
    /// `floor(ln(v^2))` for `|v| > 1`, else 0.
    LogSquareFloor,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Categorical => "categorical",
            FieldKind::Continuous => "continuous",
        }
    }
}

impl FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(FieldKind::Categorical),
            "continuous" => Ok(FieldKind::Continuous),
            other => Err(Error::Schema(format!("unknown field kind `{other}`"))),
        }
    }
}

impl Transform {
    pub fn as_str(self) -> &'static str {
        match self {
            Transform::None => "none",
            Transform::LogSquareFloor => "log_square_floor",
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Transform::None),
            "log_square_floor" => Ok(Transform::LogSquareFloor),
            other => Err(Error::Schema(format!("unknown transform `{other}`"))),
        }
    }
}

/// Applies a continuous-field transform.
///
/// ```
/// use xdeepint::features::{transform_value, Transform};
/// assert_eq!(transform_value(10.0, Transform::LogSquareFloor), 4.0);
/// assert_eq!(transform_value(0.0, Transform::LogSquareFloor), 0.0);
/// ```
pub fn transform_value(v: f64, transform: Transform) -> f64 {
    match transform {
        Transform::None => v,
        Transform::LogSquareFloor => {
            if v.abs() <= 1.0 {
                0.0
            } else {
                (v * v).ln().floor()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub transform: Transform,
}

impl FieldSpec {
    pub fn categorical(name: impl Into<String>) -> Self {
        FieldSpec {
            name: name.into(),
            kind: FieldKind::Categorical,
            transform: Transform::None,
        }
    }

    pub fn continuous(name: impl Into<String>, transform: Transform) -> Self {
        FieldSpec {
            name: name.into(),
            kind: FieldKind::Continuous,
            transform,
        }
    }
}

/// Ordered field declarations plus the name of the label column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    fields: Vec<FieldSpec>,
    label: String,
}

impl Schema {
    pub fn new(fields: Vec<FieldSpec>, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        let mut seen = HashSet::new();
        for f in &fields {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field `{}`", f.name)));
            }
            if f.name == label {
                return Err(Error::Schema(format!("field `{}` is also the label column", f.name)));
            }
            if f.kind == FieldKind::Categorical && f.transform != Transform::None {
                return Err(Error::Schema(format!(
                    "transform `{}` is only valid on continuous fields (field `{}`)",
                    f.transform.as_str(),
                    f.name
                )));
            }
        }
        if fields.is_empty() {
            return Err(Error::Schema("schema declares no fields".into()));
        }
        Ok(Schema { fields, label })
    }

    /// Parses `name<TAB>kind<TAB>transform` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, label: impl Into<String>) -> Result<Self> {
        let mut fields = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let [name, kind, transform] = parts[..] else {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected `name<TAB>kind<TAB>transform`, got {} columns", parts.len()),
                });
            };
            let with_line = |e: Error| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            };
            fields.push(FieldSpec {
                name: name.to_string(),
                kind: kind.parse().map_err(with_line)?,
                transform: transform.parse().map_err(with_line)?,
            });
        }
        Schema::new(fields, label)
    }

    pub fn load(path: impl AsRef<Path>, label: impl Into<String>) -> Result<Self> {
        Schema::parse(&fs::read_to_string(path)?, label)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in &self.fields {
            let _ = writeln!(out, "{}\t{}\t{}", f.name, f.kind.as_str(), f.transform.as_str());
        }
        out
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// A header plus string cells, as read from a delimited file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Source line of each row; empty when rows directly follow the header.
    pub line_numbers: Vec<usize>,
}

impl RawTable {
    pub fn read(reader: impl Read, delimiter: char) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header = match lines.next() {
            Some(line) => split_line(&line?, delimiter),
            None => return Err(Error::Format("input is empty; a header row is required".into())),
        };
        let mut rows = Vec::new();
        let mut line_numbers = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            line_numbers.push(n + 2);
            let cells = split_line(&line, delimiter);
            if cells.len() != header.len() {
                return Err(Error::Parse {
                    line: n + 2,
                    message: format!("expected {} columns, found {}", header.len(), cells.len()),
                });
            }
            rows.push(cells);
        }
        Ok(RawTable {
            header,
            rows,
            line_numbers,
        })
    }

    pub fn load(path: impl AsRef<Path>, delimiter: char) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        RawTable::read(file, delimiter)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The listed rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> RawTable {
        RawTable {
            header: self.header.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            line_numbers: indices.iter().map(|&i| self.line_of(i)).collect(),
        }
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Line number (1-based, header included) of data row `i`.
    fn line_of(&self, i: usize) -> usize {
        self.line_numbers.get(i).copied().unwrap_or(i + 2)
    }
}

fn split_line(line: &str, delimiter: char) -> Vec<String> {
    line.trim_end_matches('\r').split(delimiter).map(str::to_string).collect()
}

/// Fitted encoding for one field.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldVocab {
    Categorical {
        /// Token to index, indices `1..=tokens.len()`.
        tokens: HashMap<String, usize>,
    },
    Continuous {
        transform: Transform,
        /// Strictly increasing upper bucket boundaries.
        boundaries: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedField {
    pub name: String,
    pub vocab: FieldVocab,
}

impl FittedField {
    pub fn kind(&self) -> FieldKind {
        match self.vocab {
            FieldVocab::Categorical { .. } => FieldKind::Categorical,
            FieldVocab::Continuous { .. } => FieldKind::Continuous,
        }
    }

    pub fn cardinality(&self) -> usize {
        match &self.vocab {
            FieldVocab::Categorical { tokens } => tokens.len() + 1,
            FieldVocab::Continuous { boundaries, .. } => boundaries.len() + 1,
        }
    }

    /// Index of a raw cell. `line` is only used for error messages.
    pub fn encode_cell(&self, cell: &str, line: usize) -> Result<usize> {
        match &self.vocab {
            FieldVocab::Categorical { tokens } => Ok(tokens.get(cell).copied().unwrap_or(0)),
            FieldVocab::Continuous { transform, boundaries } => {
                let v = parse_real(cell, &self.name, line)?;
                Ok(bucket_of(transform_value(v, *transform), boundaries))
            }
        }
    }
}

fn parse_real(cell: &str, field: &str, line: usize) -> Result<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            line,
            message: format!("field `{field}`: `{cell}` is not a finite number"),
        }),
    }
}

/// First bucket `i` with `v <= boundaries[i]`, or `boundaries.len()`.
pub fn bucket_of(v: f64, boundaries: &[f64]) -> usize {
    boundaries.partition_point(|&b| b < v)
}

/// Equal-frequency boundaries: the `j/bins` lower empirical quantiles of
/// `values`, deduplicated, with any boundary at or above the maximum dropped
/// so that every bucket is occupied by some fitting value.
pub fn equal_frequency_boundaries(values: &mut [f64], bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let Some(&max) = values.last() else {
        return Vec::new();
    };
    let mut out: Vec<f64> = Vec::with_capacity(bins.saturating_sub(1));
    for j in 1..bins {
        // ceil(j * n / bins) - 1
        let idx = (j * n).div_ceil(bins) - 1;
        let b = values[idx];
        if b >= max {
            break;
        }
        if out.last() != Some(&b) {
            out.push(b);
        }
    }
    out
}

/// Row indices of a seeded train/valid/test split of `n` rows.
pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<[Vec<usize>; 3]> {
    let (ft, fv, fs) = fractions;
    if n == 0 {
        return Err(Error::Value("cannot split an empty dataset".into()));
    }
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Value(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_valid = ((fv * n as f64).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_valid);
    let valid = order.split_off(n_train);
    Ok([order, valid, test])
}

/// Fitted dictionaries for every field, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub label: String,
    pub fields: Vec<FittedField>,
}

impl Vocabulary {
    /// Fits categorical dictionaries and continuous bin boundaries.
    pub fn fit(table: &RawTable, schema: &Schema, min_count: usize, bins: usize) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::Value("cannot fit a vocabulary on an empty table".into()));
        }
        if bins < 2 {
            return Err(Error::Config(format!("bins must be at least 2, got {bins}")));
        }
        let mut fields = Vec::with_capacity(schema.fields().len());
        for spec in schema.fields() {
            let col = table
                .column(&spec.name)
                .ok_or_else(|| Error::Schema(format!("field `{}` is not a column of the input", spec.name)))?;
            let vocab = match spec.kind {
                FieldKind::Categorical => {
                    let mut counts: HashMap<&str, usize> = HashMap::new();
                    for row in &table.rows {
                        *counts.entry(row[col].as_str()).or_default() += 1;
                    }
                    let mut kept: Vec<(&str, usize)> =
                        counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
                    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
                    let tokens = kept
                        .into_iter()
                        .enumerate()
                        .map(|(i, (tok, _))| (tok.to_string(), i + 1))
                        .collect();
                    FieldVocab::Categorical { tokens }
                }
                FieldKind::Continuous => {
                    let mut values = Vec::with_capacity(table.len());
                    for (i, row) in table.rows.iter().enumerate() {
                        let v = parse_real(&row[col], &spec.name, table.line_of(i))?;
                        values.push(transform_value(v, spec.transform));
                    }
                    FieldVocab::Continuous {
                        transform: spec.transform,
                        boundaries: equal_frequency_boundaries(&mut values, bins),
                    }
                }
            };
            fields.push(FittedField {
                name: spec.name.clone(),
                vocab,
            });
        }
        Ok(Vocabulary {
            label: schema.label().to_string(),
            fields,
        })
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(FittedField::cardinality).collect()
    }

    /// Encodes every row of `table`; unseen tokens map to index 0.
    pub fn encode(&self, table: &RawTable) -> Result<EncodedDataset> {
        let label_col = table
            .column(&self.label)
            .ok_or_else(|| Error::Format(format!("label column `{}` is missing", self.label)))?;
        let features = self.encode_features(table)?;
        let mut examples = Vec::with_capacity(table.len());
        for (i, (row, indices)) in table.rows.iter().zip(features).enumerate() {
            let label = match row[label_col].trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Parse {
                        line: table.line_of(i),
                        message: format!("label must be 0 or 1, got `{other}`"),
                    })
                }
            };
            examples.push(Example { indices, label });
        }
        Ok(EncodedDataset {
            examples,
            cardinalities: self.cardinalities(),
        })
    }

    /// Field indices for every row; the label column may be absent.
    pub fn encode_features(&self, table: &RawTable) -> Result<Vec<Vec<usize>>> {
        let cols = self
            .fields
            .iter()
            .map(|f| {
                table
                    .column(&f.name)
                    .ok_or_else(|| Error::Schema(format!("field `{}` is not a column of the input", f.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        table
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let line = table.line_of(i);
                self.fields
                    .iter()
                    .zip(&cols)
                    .map(|(f, &c)| f.encode_cell(&row[c], line))
                    .collect()
            })
            .collect()
    }

    /// Serializes to the versioned text format.
    ///
    /// Categorical tokens are listed by ascending index; boundaries are
    /// written with 17 significant digits so they parse back exactly.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "{VOCAB_MAGIC}");
        let _ = writeln!(out, "label\t{}", self.label);
        for f in &self.fields {
            match &f.vocab {
                FieldVocab::Categorical { tokens } => {
                    let _ = writeln!(out, "field\t{}\tcategorical\tnone\t{}", f.name, f.cardinality());
                    let mut sorted: Vec<(&String, &usize)> = tokens.iter().collect();
                    sorted.sort_by_key(|&(_, &i)| i);
                    for (tok, idx) in sorted {
                        if tok.contains(['\t', '\n', '\r']) {
                            return Err(Error::Format(format!(
                                "field `{}`: token {tok:?} contains a tab or newline",
                                f.name
                            )));
                        }
                        let _ = writeln!(out, "{tok}\t{idx}");
                    }
                }
                FieldVocab::Continuous { transform, boundaries } => {
                    let _ = writeln!(
                        out,
                        "field\t{}\tcontinuous\t{}\t{}",
                        f.name,
                        transform.as_str(),
                        f.cardinality()
                    );
                    for b in boundaries {
                        let _ = writeln!(out, "boundary\t{b:.16e}");
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l.trim_end_matches('\r')));
        match lines.next() {
            Some((_, VOCAB_MAGIC)) => {}
            _ => return Err(Error::Format(format!("vocabulary must start with `{VOCAB_MAGIC}`"))),
        }
        let label = match lines.next() {
            Some((_, l)) if l.starts_with("label\t") => l["label\t".len()..].to_string(),
            _ => return Err(bad(2, "expected `label<TAB>name`".into())),
        };
        let mut fields: Vec<(FittedField, usize)> = Vec::new();
        for (n, line) in lines {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts[0] == "field" {
                let [_, name, kind, transform, card] = parts[..] else {
                    return Err(bad(n, "malformed field header".into()));
                };
                let card: usize = card.parse().map_err(|_| bad(n, format!("bad cardinality `{card}`")))?;
                let transform: Transform = transform.parse().map_err(|e: Error| bad(n, e.to_string()))?;
                let vocab = match kind.parse().map_err(|e: Error| bad(n, e.to_string()))? {
                    FieldKind::Categorical => FieldVocab::Categorical { tokens: HashMap::new() },
                    FieldKind::Continuous => FieldVocab::Continuous {
                        transform,
                        boundaries: Vec::new(),
                    },
                };
                fields.push((
                    FittedField {
                        name: name.to_string(),
                        vocab,
                    },
                    card,
                ));
                continue;
            }
            let Some((field, _)) = fields.last_mut() else {
                return Err(bad(n, "entry before any field header".into()));
            };
            match (&mut field.vocab, &parts[..]) {
                (FieldVocab::Continuous { boundaries, .. }, ["boundary", v]) => {
                    let v: f64 = v.parse().map_err(|_| bad(n, format!("bad boundary `{v}`")))?;
                    if boundaries.last().is_some_and(|&last| last >= v) {
                        return Err(bad(n, "boundaries must be strictly increasing".into()));
                    }
                    boundaries.push(v);
                }
                (FieldVocab::Categorical { tokens }, [tok, idx]) => {
                    let idx: usize = idx.parse().map_err(|_| bad(n, format!("bad index `{idx}`")))?;
                    if idx != tokens.len() + 1 {
                        return Err(bad(n, format!("expected index {}, got {idx}", tokens.len() + 1)));
                    }
                    if tokens.insert(tok.to_string(), idx).is_some() {
                        return Err(bad(n, format!("duplicate token `{tok}`")));
                    }
                }
                _ => return Err(bad(n, format!("unexpected line in field `{}`", field.name))),
            }
        }
        let mut out = Vec::with_capacity(fields.len());
        for (field, card) in fields {
            if field.cardinality() != card {
                return Err(Error::Format(format!(
                    "field `{}` declares cardinality {card} but lists {}",
                    field.name,
                    field.cardinality()
                )));
            }
            out.push(field);
        }
        if out.is_empty() {
            return Err(Error::Format("vocabulary declares no fields".into()));
        }
        Ok(Vocabulary { label, fields: out })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Vocabulary::parse(&fs::read_to_string(path)?)
    }

    /// First eight bytes (little-endian) of the SHA-256 of the serialized form.
    pub fn content_hash(&self) -> Result<u64> {
        let digest = Sha256::digest(self.to_text()?.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Ok(u64::from_le_bytes(bytes))
    }
}

/// One encoded example: the hot index of every field and a binary label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub indices: Vec<usize>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub examples: Vec<Example>,
    pub cardinalities: Vec<usize>,
}

impl EncodedDataset {
    /// Validates indices and labels against the declared cardinalities.
    pub fn new(examples: Vec<Example>, cardinalities: Vec<usize>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.indices.len() != cardinalities.len() {
                return Err(Error::Value(format!(
                    "example {i} has {} fields, expected {}",
                    ex.indices.len(),
                    cardinalities.len()
                )));
            }
            if ex.label > 1 {
                return Err(Error::Value(format!("example {i} has non-binary label {}", ex.label)));
            }
            for (f, (&idx, &card)) in ex.indices.iter().zip(&cardinalities).enumerate() {
                if idx >= card {
                    return Err(Error::Example {
                        example: i,
                        source: Box::new(Error::Lookup {
                            field: f,
                            index: idx,
                            cardinality: card,
                        }),
                    });
                }
            }
        }
        Ok(EncodedDataset { examples, cardinalities })
    }

    pub fn field_count(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    fn subset(&self, examples: Vec<Example>) -> EncodedDataset {
        EncodedDataset {
            examples,
            cardinalities: self.cardinalities.clone(),
        }
    }

    /// Seeded shuffle followed by contiguous train/valid/test slices.
    pub fn split(&self, fractions: (f64, f64, f64), seed: u64) -> Result<(Self, Self, Self)> {
        let [a, b, c] = split_indices(self.len(), fractions, seed)?;
        let take = |ix: Vec<usize>| self.subset(ix.into_iter().map(|i| self.examples[i].clone()).collect());
        Ok((take(a), take(b), take(c)))
    }

    /// Frequency of each (field, index) pair; mostly useful for diagnostics.
    pub fn index_counts(&self) -> Vec<BTreeMap<usize, usize>> {
        let mut out = vec![BTreeMap::new(); self.field_count()];
        for ex in &self.examples {
            for (f, &i) in ex.indices.iter().enumerate() {
                *out[f].entry(i).or_default() += 1;
            }
        }
        out
    }
}
