//! Dataset representation vectors and the GDVX interchange format.
//!
//! A GDVX file (little-endian) is laid out as
//!
//! ```text
//! "GDVX" | u16 version=1 | u8 dtype | u8 kind | u32 N | u64 d
//! N*d row-major payload | d target payload
//! N x (u32 byte length | UTF-8 name)
//! ```
//!
//! The GDVX-E variant appends, per dataset in index order, a `u32` example
//! count followed by that many `d`-length example rows in the same dtype.
//! Payloads are either `f64` (dtype 0) or `f32` (dtype 1); everything is
//! upcast to `f64` on load.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GDVX";
const VERSION: u16 = 1;

/// Where the rows of a [`GradientSet`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RepresentationKind {
    OneStepGradient,
    TaskVector,
    /// Rows mapped through a curvature metric.
    Transformed,
}

impl RepresentationKind {
    pub fn code(self) -> u8 {
        match self {
            RepresentationKind::OneStepGradient => 0,
            RepresentationKind::TaskVector => 1,
            RepresentationKind::Transformed => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(RepresentationKind::OneStepGradient),
            1 => Ok(RepresentationKind::TaskVector),
            2 => Ok(RepresentationKind::Transformed),
            other => Err(Error::Format(format!(
                "unknown representation kind {other}"
            ))),
        }
    }
}

/// On-disk payload precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// N dataset vectors plus one target vector, all of dimension `dim`.
///
/// Immutable once built; the name order defines the dataset index order used
/// by every downstream computation.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    n_datasets: usize,
    dim: usize,
    vectors: Vec<f64>,
    target: Vec<f64>,
    names: Vec<String>,
    kind: RepresentationKind,
}

impl GradientSet {
    pub fn new(
        names: Vec<String>,
        rows: Vec<Vec<f64>>,
        target: Vec<f64>,
        kind: RepresentationKind,
    ) -> Result<Self> {
        let dim = target.len();
        if rows.len() != names.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} names",
                rows.len(),
                names.len()
            )));
        }
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, target has {dim}",
                    row.len()
                )));
            }
            vectors.extend_from_slice(row);
        }
        Self::from_flat(names, vectors, target, kind)
    }

    /// Builds a set from a row-major `N x dim` buffer.
    pub fn from_flat(
        names: Vec<String>,
        vectors: Vec<f64>,
        target: Vec<f64>,
        kind: RepresentationKind,
    ) -> Result<Self> {
        let n_datasets = names.len();
        let dim = target.len();
        if n_datasets == 0 {
            return Err(Error::Validation("at least one dataset is required".into()));
        }
        if dim == 0 {
            return Err(Error::Validation("dimension must be positive".into()));
        }
        if vectors.len() != n_datasets * dim {
            return Err(Error::Shape(format!(
                "payload has {} entries, expected {n_datasets}x{dim}",
                vectors.len()
            )));
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "dataset `{}` coordinate {}",
                names[pos / dim],
                pos % dim
            )));
        }
        if let Some(pos) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("target coordinate {pos}")));
        }
        let mut seen = HashSet::with_capacity(n_datasets);
        for name in &names {
            if name.is_empty() {
                return Err(Error::Validation("dataset names must be non-empty".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate dataset name `{name}`"
                )));
            }
        }
        Ok(Self {
            n_datasets,
            dim,
            vectors,
            target,
            names,
            kind,
        })
    }

    pub fn n_datasets(&self) -> usize {
        self.n_datasets
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.dim)
    }

    /// Row-major `N x dim` payload.
    pub fn flat(&self) -> &[f64] {
        &self.vectors
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self) -> RepresentationKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: RepresentationKind) -> Self {
        self.kind = kind;
        self
    }

    /// Returns a copy with every row and the target scaled to unit length.
    pub fn normalized(&self) -> Result<Self> {
        let mut vectors = self.vectors.clone();
        for (i, row) in vectors.chunks_exact_mut(self.dim).enumerate() {
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(Error::DegenerateVector(self.names[i].clone()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let tnorm = l2_norm(&self.target);
        if tnorm == 0.0 {
            return Err(Error::DegenerateVector("target".into()));
        }
        let target = self.target.iter().map(|v| v / tnorm).collect();
        Ok(Self {
            vectors,
            target,
            ..self.clone()
        })
    }

    /// Reorders datasets so that new index `j` holds old dataset `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_datasets {
            return Err(Error::Shape("permutation length differs from N".into()));
        }
        let mut vectors = Vec::with_capacity(self.vectors.len());
        let mut names = Vec::with_capacity(self.n_datasets);
        for &p in perm {
            if p >= self.n_datasets {
                return Err(Error::Validation(format!("index {p} out of range")));
            }
            vectors.extend_from_slice(self.row(p));
            names.push(self.names[p].clone());
        }
        Self::from_flat(names, vectors, self.target.clone(), self.kind)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-example gradient rows for each dataset, used to draw previews.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleStore {
    dim: usize,
    blocks: Vec<Vec<f64>>,
}

impl PerExampleStore {
    pub fn new(dim: usize, blocks: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("dimension must be positive".into()));
        }
        for (i, block) in blocks.iter().enumerate() {
            if block.len() % dim != 0 {
                return Err(Error::Shape(format!(
                    "example block {i} length {} is not a multiple of {dim}",
                    block.len()
                )));
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("example block {i}")));
            }
        }
        Ok(Self { dim, blocks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_datasets(&self) -> usize {
        self.blocks.len()
    }

    pub fn count(&self, dataset: usize) -> usize {
        self.blocks[dataset].len() / self.dim
    }

    pub fn total_examples(&self) -> usize {
        (0..self.n_datasets()).map(|i| self.count(i)).sum()
    }

    pub fn example(&self, dataset: usize, j: usize) -> &[f64] {
        &self.blocks[dataset][j * self.dim..(j + 1) * self.dim]
    }

    pub fn examples(&self, dataset: usize) -> impl Iterator<Item = &[f64]> {
        self.blocks[dataset].chunks_exact(self.dim)
    }

    /// Mean over every stored example of one dataset.
    pub fn full_mean(&self, dataset: usize) -> Vec<f64> {
        shifted_mean(self.examples(dataset), self.dim)
    }
}

/// Mean of rows computed around the first row, so that identical rows average
/// to themselves without rounding drift.
fn shifted_mean<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut rows = rows.peekable();
    let Some(first) = rows.peek().map(|r| r.to_vec()) else {
        return vec![0.0; dim];
    };
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for row in rows {
        for ((a, x), s) in acc.iter_mut().zip(row).zip(&first) {
            *a += x - s;
        }
        count += 1;
    }
    first
        .iter()
        .zip(&acc)
        .map(|(s, a)| s + a / count as f64)
        .collect()
}

/// Replaces each row with the mean of `m` examples drawn without replacement
/// from that dataset's store. The target row is copied unchanged.
pub fn preview_subsample(
    set: &GradientSet,
    per_example: &PerExampleStore,
    m: usize,
    seed: u64,
) -> Result<GradientSet> {
    if m == 0 {
        return Err(Error::Validation("preview size must be at least 1".into()));
    }
    if per_example.n_datasets() != set.n_datasets() || per_example.dim() != set.dim() {
        return Err(Error::Shape(format!(
            "store is {}x{}, set is {}x{}",
            per_example.n_datasets(),
            per_example.dim(),
            set.n_datasets(),
            set.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors = Vec::with_capacity(set.n_datasets() * set.dim());
    for i in 0..set.n_datasets() {
        let available = per_example.count(i);
        if m > available {
            return Err(Error::InsufficientPreview(format!(
                "dataset `{}` has {available} examples, preview needs {m}",
                set.names()[i]
            )));
        }
        let mut picked = index::sample(&mut rng, available, m).into_vec();
        // ascending order makes m == available reproduce `full_mean` bit for bit
        picked.sort_unstable();
        let mean = shifted_mean(picked.iter().map(|&j| per_example.example(i, j)), set.dim());
        vectors.extend(mean);
    }
    GradientSet::from_flat(
        set.names().to_vec(),
        vectors,
        set.target().to_vec(),
        set.kind(),
    )
}

// ---------------------------------------------------------------------------
// Binary encoding

fn push_values(out: &mut Vec<u8>, values: &[f64], dtype: Dtype) {
    match dtype {
        Dtype::F64 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
}

fn encode_set(set: &GradientSet, dtype: Dtype) -> Result<Vec<u8>> {
    let n = u32::try_from(set.n_datasets())
        .map_err(|_| Error::Validation("too many datasets for GDVX".into()))?;
    let mut out = Vec::with_capacity(20 + (set.flat().len() + set.dim()) * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(set.kind().code());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&(set.dim() as u64).to_le_bytes());
    push_values(&mut out, set.flat(), dtype);
    push_values(&mut out, set.target(), dtype);
    for name in set.names() {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(bytes);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn values(&mut self, count: usize, dtype: Dtype, what: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(dtype.width())
            .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        Ok(match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        })
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn decode_set<'a>(bytes: &'a [u8]) -> Result<(GradientSet, Dtype, Reader<'a>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("missing GDVX magic".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported GDVX version {version}")));
    }
    let dtype = Dtype::from_code(r.u8("dtype")?)?;
    let kind = RepresentationKind::from_code(r.u8("kind")?)?;
    let n = r.u32("dataset count")? as usize;
    let d = usize::try_from(r.u64("dimension")?)
        .map_err(|_| Error::Format("dimension does not fit in memory".into()))?;
    if n == 0 || d == 0 {
        return Err(Error::Format(format!("header declares N={n}, d={d}")));
    }
    let count = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let vectors = r.values(count, dtype, "dataset payload")?;
    let target = r.values(d, dtype, "target payload")?;
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let len = r.u32("name length")? as usize;
        let raw = r.take(len, "name bytes")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::Format(format!("name {i} is not valid UTF-8")))?;
        names.push(name.to_owned());
    }
    let set = GradientSet::from_flat(names, vectors, target, kind)?;
    Ok((set, dtype, r))
}

fn csv_sidecar(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".names");
    PathBuf::from(os)
}

fn parse_csv(bytes: &[u8], path: &Path) -> Result<GradientSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("csv line {}: {e}", line + 1)))?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    Error::Format(format!("csv line {}: bad number `{field}`", line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(Error::Format(
            "csv needs a target row and at least one dataset row".into(),
        ));
    }
    let target = rows.remove(0);
    let sidecar = csv_sidecar(path);
    let names = if sidecar.exists() {
        fs::read_to_string(&sidecar)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect::<Vec<_>>()
    } else {
        (0..rows.len()).map(|i| format!("dataset_{i}")).collect()
    };
    GradientSet::new(names, rows, target, RepresentationKind::OneStepGradient)
}

/// Loads a GDVX (or GDVX-E) file, falling back to CSV when the magic bytes are
/// absent. CSV names come from a `<path>.names` sidecar when present.
pub fn load_gradient_set(path: impl AsRef<Path>) -> Result<GradientSet> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Format(format!("{} is empty", path.display())));
    }
    if bytes.starts_with(MAGIC) {
        decode_set(&bytes).map(|(set, _, _)| set)
    } else {
        parse_csv(&bytes, path)
    }
}

pub fn save_gradient_set(set: &GradientSet, path: impl AsRef<Path>) -> Result<()> {
    save_gradient_set_as(set, path, Dtype::F64)
}

pub fn save_gradient_set_as(set: &GradientSet, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_set(set, dtype)?)?;
    Ok(())
}

/// Writes a GDVX-E file: the set followed by its per-example blocks.
pub fn save_preview_store(
    set: &GradientSet,
    store: &PerExampleStore,
    path: impl AsRef<Path>,
    dtype: Dtype,
) -> Result<()> {
    if store.n_datasets() != set.n_datasets() || store.dim() != set.dim() {
        return Err(Error::Shape("store does not match gradient set".into()));
    }
    let mut out = encode_set(set, dtype)?;
    for i in 0..store.n_datasets() {
        let count = u32::try_from(store.count(i))
            .map_err(|_| Error::Validation("too many examples for GDVX-E".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        push_values(&mut out, &store.blocks[i], dtype);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_preview_store(path: impl AsRef<Path>) -> Result<(GradientSet, PerExampleStore)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Format(format!(
            "{} is not a GDVX-E file",
            path.display()
        )));
    }
    let (set, dtype, mut r) = decode_set(&bytes)?;
    if r.remaining() == 0 {
        return Err(Error::Format("file has no per-example section".into()));
    }
    let mut blocks = Vec::with_capacity(set.n_datasets());
    for _ in 0..set.n_datasets() {
        let count = r.u32("example count")? as usize;
        blocks.push(r.values(count * set.dim(), dtype, "example rows")?);
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    let store = PerExampleStore::new(set.dim(), blocks)?;
    Ok((set, store))
}
