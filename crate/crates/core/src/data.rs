//! Dataset loading, preprocessing, splits and label budgets.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// Intensities in `[0, 1]` that are binarized before use.
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N × D
    pub x: Tensor,
    /// Class index per row, into `label_values`.
    pub y: Option<Vec<usize>>,
    pub kind: DataKind,
    /// Raw label values in increasing order.
    pub label_values: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Option<Vec<usize>>, kind: DataKind, label_values: Vec<f64>) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::Dataset(format!("inputs must be N × D, got {:?}", x.shape())));
        }
        if let Some(y) = &y {
            if y.len() != x.shape()[0] {
                return Err(Error::Dataset(format!("{} labels for {} rows", y.len(), x.shape()[0])));
            }
            if let Some(&bad) = y.iter().find(|&&c| c >= label_values.len()) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: label_values.len(),
                });
            }
        }
        if kind == DataKind::Binary && x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dataset("binary data must lie in [0, 1]".into()));
        }
        Ok(Dataset { x, y, kind, label_values })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.label_values.len()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.y.as_deref().ok_or_else(|| Error::Dataset("dataset has no labels".into()))
    }

    /// Rows `idx` in the given order. `idx` must be non-empty.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::Dataset("empty subset".into()));
        }
        Ok(Dataset {
            x: self.x.gather_rows(idx)?,
            y: self.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
            kind: self.kind,
            label_values: self.label_values.clone(),
        })
    }
}

/// Mixes a master seed with a stream index (splitmix64 finalizer), so
/// derived seeds are deterministic and well separated.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Parses an IDX image file into an N × (rows·cols) tensor scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |r: String| Error::data(path, r);
    let magic = be_u32(bytes, 0).ok_or_else(|| bad("truncated header".into()))?;
    if magic != IDX_IMAGES {
        return Err(bad(format!("bad magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| bad("truncated header".into()))?;
    let (n, d) = (dims[0], dims[1] * dims[2]);
    let body = &bytes[16..];
    if body.len() != n * d {
        return Err(bad(format!("expected {} pixel bytes, found {}", n * d, body.len())));
    }
    if n == 0 || d == 0 {
        return Err(bad("empty image file".into()));
    }
    Tensor::new(&[n, d], body.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let bad = |r: String| Error::data(path, r);
    let magic = be_u32(bytes, 0).ok_or_else(|| bad("truncated header".into()))?;
    if magic != IDX_LABELS {
        return Err(bad(format!("bad magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4).ok_or_else(|| bad("truncated header".into()))? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(bad(format!("expected {n} label bytes, found {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// MNIST images and labels as a 10-class binary-kind dataset.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read(images)?, images)?;
    let y = parse_idx_labels(&read(labels)?, labels)?;
    if y.len() != x.shape()[0] {
        return Err(Error::data(
            labels,
            format!("{} labels for {} images", y.len(), x.shape()[0]),
        ));
    }
    if let Some(&bad) = y.iter().find(|&&c| c > 9) {
        return Err(Error::data(labels, format!("label {bad} outside 0..9")));
    }
    Dataset::new(x, Some(y), DataKind::Binary, (0..10).map(f64::from).collect())
}

/// The standard file names inside an MNIST directory: (train, test).
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_mnist_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Seeded shuffle of `0..n` split into the first `n_first` indices and the rest.
pub fn shuffled_split(n: usize, n_first: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_first > n {
        return Err(Error::Dataset(format!("cannot take {n_first} of {n} examples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = idx.split_off(n_first);
    Ok((idx, rest))
}

/// Training (50000) and validation (10000) index sets of the 60000-example MNIST training file.
pub fn split_mnist(d: &Dataset, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if d.len() != 60_000 {
        return Err(Error::Dataset(format!("MNIST training source must have 60000 rows, got {}", d.len())));
    }
    shuffled_split(60_000, 50_000, seed)
}

/// Each pixel becomes 1 with probability equal to its intensity.
pub fn binarize<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Result<Tensor> {
    if let Some(&bad) = x.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain {
            op: "binarize",
            reason: format!("intensity {bad} outside [0, 1]"),
        });
    }
    // u < p is never true for p = 0 and always true for p = 1
    Ok(x.map(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }))
}

/// Where the label sits in each row of a delimited file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelColumn {
    Last,
    First,
    Index(usize),
}

impl LabelColumn {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "last" => Some(LabelColumn::Last),
            "first" => Some(LabelColumn::First),
            _ => s.parse().ok().map(LabelColumn::Index),
        }
    }

    fn resolve(self, width: usize) -> usize {
        match self {
            LabelColumn::Last => width - 1,
            LabelColumn::First => 0,
            LabelColumn::Index(i) => i,
        }
    }
}

/// A loaded delimited file plus any non-fatal warnings.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Numeric rows separated by commas and/or whitespace. Blank lines and lines
/// starting with `#` are skipped; a first line that does not parse as numbers
/// is treated as a header.
pub fn parse_delimited(text: &str, path: &Path, label: LabelColumn, expected_classes: Option<usize>) -> Result<Loaded> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let mut header_seen = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if rows.is_empty() && !header_seen => {
                header_seen = true;
                continue;
            }
            Err(_) => {
                return Err(Error::data(path, format!("line {}: non-numeric field", lineno + 1)));
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(path, format!("line {}: non-finite value", lineno + 1)));
        }
        let w = *width.get_or_insert(values.len());
        if values.len() != w {
            return Err(Error::data(
                path,
                format!("line {}: expected {w} columns, found {}", lineno + 1, values.len()),
            ));
        }
        rows.push(values);
    }
    let width = width.ok_or_else(|| Error::data(path, "no data rows"))?;
    if width < 2 {
        return Err(Error::data(path, "need at least one feature and a label column"));
    }
    let col = label.resolve(width);
    if col >= width {
        return Err(Error::data(path, format!("label column {col} out of range for {width} columns")));
    }
    let raw: Vec<f64> = rows.iter().map(|r| r[col]).collect();
    let mut label_values: Vec<f64> = raw.clone();
    label_values.sort_by(f64::total_cmp);
    label_values.dedup();
    let y = raw
        .iter()
        .map(|v| label_values.binary_search_by(|p| p.total_cmp(v)).expect("present"))
        .collect();
    let data = rows
        .iter()
        .flat_map(|r| r.iter().enumerate().filter(|&(j, _)| j != col).map(|(_, &v)| v))
        .collect();
    let x = Tensor::matrix(rows.len(), width - 1, data)?;
    let mut warnings = Vec::new();
    if let Some(k) = expected_classes {
        if label_values.len() != k {
            warnings.push(format!("expected {k} distinct labels, found {}", label_values.len()));
        }
    }
    Ok(Loaded {
        dataset: Dataset::new(x, Some(y), DataKind::Continuous, label_values)?,
        warnings,
    })
}

/// The stock-domain file: 950 rows of 9 features and a 5-valued ordinal label.
pub fn load_stocks_csv(path: &Path, label: LabelColumn) -> Result<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut loaded = parse_delimited(&text, path, label, Some(5))?;
    let d = &loaded.dataset;
    if d.len() != 950 || d.dim() != 9 {
        loaded
            .warnings
            .push(format!("expected 950 × 9, found {} × {}", d.len(), d.dim()));
    }
    Ok(loaded)
}

/// Per-feature standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl ZScore {
    /// Population mean and standard deviation per column, std floored at 1e-8.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = x.dims2()?;
        let mean = x.mean_axis(0)?.into_data();
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(ZScore { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.mean.len() {
            return Err(Error::shape("zscore", x.shape(), &[n, self.mean.len()]));
        }
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(out)
    }
}

/// Fits statistics on `train` and applies them to `train` and every dataset in `others`.
pub fn zscore_fit_apply(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, ZScore)> {
    if train.kind != DataKind::Continuous || others.iter().any(|d| d.kind != DataKind::Continuous) {
        return Err(Error::Dataset("z-scoring applies to continuous data only".into()));
    }
    let z = ZScore::fit(&train.x)?;
    let norm = |d: &Dataset| -> Result<Dataset> {
        Ok(Dataset {
            x: z.apply(&d.x)?,
            ..d.clone()
        })
    };
    let t = norm(train)?;
    let o = others.iter().map(|d| norm(d)).collect::<Result<_>>()?;
    Ok((t, o, z))
}

/// Disjoint index sets over one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemiSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SemiSplit {
    pub fn new(
        labeled: Vec<usize>,
        unlabeled: Vec<usize>,
        validation: Vec<usize>,
        test: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let total = labeled.len() + unlabeled.len() + validation.len() + test.len();
        let distinct: BTreeSet<usize> = labeled
            .iter()
            .chain(&unlabeled)
            .chain(&validation)
            .chain(&test)
            .copied()
            .collect();
        if distinct.len() != total {
            return Err(Error::Dataset("split index sets overlap".into()));
        }
        Ok(SemiSplit {
            labeled,
            unlabeled,
            validation,
            test,
            seed,
        })
    }

    /// Labeled plus unlabeled indices.
    pub fn training(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.labeled.iter().chain(&self.unlabeled).copied().collect();
        t.sort_unstable();
        t
    }
}

/// `n_repeats` seeded shuffles of `n_train + n_test` rows into train and test parts.
/// All training rows start out labeled.
pub fn make_stock_splits(n: usize, n_repeats: usize, n_train: usize, n_test: usize, seed: u64) -> Result<Vec<SemiSplit>> {
    if n != n_train + n_test {
        return Err(Error::Dataset(format!(
            "{n} rows cannot be split into {n_train} + {n_test}"
        )));
    }
    (0..n_repeats)
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let (train, test) = shuffled_split(n, n_train, s)?;
            SemiSplit::new(train, Vec::new(), Vec::new(), test, s)
        })
        .collect()
}

/// Moves a seeded random `fraction` of the training rows into validation.
pub fn carve_validation(split: &SemiSplit, fraction: f64, seed: u64) -> Result<SemiSplit> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
    }
    let train = split.training();
    let n_val = (fraction * train.len() as f64).round() as usize;
    let (val_pos, _) = shuffled_split(train.len(), n_val, seed)?;
    let val: BTreeSet<usize> = val_pos.iter().map(|&p| train[p]).collect();
    let keep = |v: &[usize]| v.iter().copied().filter(|i| !val.contains(i)).collect::<Vec<_>>();
    let mut validation = split.validation.clone();
    validation.extend(val_pos.iter().map(|&p| train[p]));
    SemiSplit::new(keep(&split.labeled), keep(&split.unlabeled), validation, split.test.clone(), split.seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Count(usize),
    Fraction(f64),
}

impl Budget {
    /// Number of labeled examples this budget yields out of `n`.
    pub fn resolve(self, n: usize) -> Result<usize> {
        let count = match self {
            Budget::Count(c) => c,
            Budget::Fraction(f) if f > 0.0 && f <= 1.0 => (f * n as f64).round() as usize,
            Budget::Fraction(f) => return Err(Error::Config(format!("label fraction {f} outside (0, 1]"))),
        };
        if count == 0 || count > n {
            return Err(Error::Config(format!("label budget {count} outside 1..={n}")));
        }
        Ok(count)
    }
}

/// Keeps labels on `count` training rows chosen at random (or proportionally
/// per class when `stratified`); every other training row becomes unlabeled.
pub fn sample_label_budget(split: &SemiSplit, count: usize, labels: &[usize], seed: u64, stratified: bool) -> Result<SemiSplit> {
    let train = split.training();
    if count == 0 || count > train.len() {
        return Err(Error::Config(format!("label budget {count} outside 1..={}", train.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = train.clone();
    pool.shuffle(&mut rng);
    let chosen: Vec<usize> = if stratified {
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut by_class = vec![Vec::new(); classes];
        for &i in &pool {
            by_class[labels[i]].push(i);
        }
        // largest-remainder allocation proportional to class frequency
        let n = train.len() as f64;
        let quotas: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * count as f64 / n).collect();
        let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
        let mut left = count - alloc.iter().sum::<usize>();
        for &c in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if alloc[c] < by_class[c].len() {
                alloc[c] += 1;
                left -= 1;
            }
        }
        by_class.iter().zip(&alloc).flat_map(|(c, &a)| c[..a].iter().copied()).collect()
    } else {
        pool[..count].to_vec()
    };
    let chosen_set: BTreeSet<usize> = chosen.iter().copied().collect();
    let mut labeled: Vec<usize> = chosen;
    labeled.sort_unstable();
    let unlabeled = train.into_iter().filter(|i| !chosen_set.contains(i)).collect();
    SemiSplit::new(labeled, unlabeled, split.validation.clone(), split.test.clone(), split.seed)
}

const CACHE_MAGIC: &[u8; 8] = b"CCVAEDS\0";
const CACHE_VERSION: u32 = 1;

pub fn encode_cache(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + d.x.numel() * 8);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.push(match d.kind {
        DataKind::Binary => 0,
        DataKind::Continuous => 1,
    });
    out.extend_from_slice(&(d.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d.dim() as u64).to_le_bytes());
    for v in d.x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(d.label_values.len() as u64).to_le_bytes());
    for v in &d.label_values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &d.y {
        Some(y) => {
            out.push(1);
            for &c in y {
                out.extend_from_slice(&(c as u32).to_le_bytes());
            }
        }
        None => out.push(0),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_cache(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let bad = |r: &str| Error::data(path, r.to_string());
    let mut r = Reader { bytes, at: 0 };
    if r.take(8) != Some(CACHE_MAGIC) {
        return Err(bad("not a dataset cache"));
    }
    if r.u32() != Some(CACHE_VERSION) {
        return Err(bad("unsupported cache version"));
    }
    let kind = match r.u8() {
        Some(0) => DataKind::Binary,
        Some(1) => DataKind::Continuous,
        _ => return Err(bad("bad kind tag")),
    };
    let trunc = || bad("truncated cache");
    let n = r.u64().ok_or_else(trunc)? as usize;
    let d = r.u64().ok_or_else(trunc)? as usize;
    let numel = n.checked_mul(d).ok_or_else(trunc)?;
    if bytes.len() < numel.saturating_mul(8) {
        return Err(trunc());
    }
    let x: Vec<f64> = (0..numel).map(|_| r.f64()).collect::<Option<_>>().ok_or_else(trunc)?;
    let l = r.u64().ok_or_else(trunc)? as usize;
    let label_values: Vec<f64> = (0..l).map(|_| r.f64()).collect::<Option<_>>().ok_or_else(trunc)?;
    let y = match r.u8() {
        Some(1) => Some((0..n).map(|_| r.u32().map(|c| c as usize)).collect::<Option<Vec<_>>>().ok_or_else(trunc)?),
        Some(0) => None,
        _ => return Err(trunc()),
    };
    if r.at != bytes.len() {
        return Err(bad("trailing bytes in cache"));
    }
    Dataset::new(Tensor::matrix(n, d, x)?, y, kind, label_values)
}

pub fn write_cache(path: &Path, d: &Dataset) -> Result<()> {
    crate::checkpoint::write_atomic(path, &encode_cache(d))
}

pub fn read_cache(path: &Path) -> Result<Dataset> {
    decode_cache(&read(path)?, path)
}
