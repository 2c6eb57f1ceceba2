//! Desk-scale datasets: seeded Gaussian clusters, CSV files, stratified
//! splitting and parametric distribution-shift corruptions.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::array::NumArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64 },
    Csv { path: String },
    Corrupted { kind: Corruption, intensity: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: NumArray,
    labels: Vec<usize>,
    classes: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(features: NumArray, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::with_provenance(features, labels, classes, Provenance::Synthetic { seed: 0 })
    }

    pub fn with_provenance(
        features: NumArray,
        labels: Vec<usize>,
        classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if !features.is_matrix() {
            return Err(Error::Shape(format!(
                "features must be n×d, got {:?}",
                features.shape()
            )));
        }
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("a dataset needs at least 2 classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            provenance,
        })
    }

    pub fn features(&self) -> &NumArray {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// The examples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        Ok(Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        })
    }

    pub fn one_hot(&self) -> NumArray {
        let z = self.classes;
        let mut data = vec![0.0; self.len() * z];
        for (i, &y) in self.labels.iter().enumerate() {
            data[i * z + y] = 1.0;
        }
        NumArray::from_parts(vec![self.len(), z], data)
    }
}

/// Gaussian blobs: class centres drawn from a standard normal in `dim`
/// dimensions, examples scattered around them with standard deviation
/// `spread`. Neighbouring clusters overlap for moderate spreads, which puts
/// some examples close to the decision boundaries.
pub fn synth(classes: usize, dim: usize, n_per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < 2 || n_per_class == 0 {
        return Err(Error::invalid(format!(
            "synth needs classes ≥ 2, dim ≥ 2, n_per_class ≥ 1 (got {classes}, {dim}, {n_per_class})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("cluster spread must be a finite non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(&mut rng, classes, dim);
    let ds = draw_blobs(&centers, n_per_class, spread, &mut rng)?;
    Dataset::with_provenance(ds.features, ds.labels, classes, Provenance::Synthetic { seed })
}

/// Fresh examples around the same centres `synth(.., seed)` uses, drawn from
/// an independent stream keyed by `sample_seed`. Useful as a large i.i.d.
/// evaluation pool that shares no examples with the `synth` output.
pub fn resample_blobs(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
    sample_seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 || n_per_class == 0 {
        return Err(Error::invalid(format!(
            "synth needs classes ≥ 2, dim ≥ 2, n_per_class ≥ 1 (got {classes}, {dim}, {n_per_class})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("cluster spread must be a finite non-negative number"));
    }
    let centers = blob_centers(&mut ChaCha8Rng::seed_from_u64(seed), classes, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ 0x5eed_b10b_5eed_b10b);
    let ds = draw_blobs(&centers, n_per_class, spread, &mut rng)?;
    Dataset::with_provenance(
        ds.features,
        ds.labels,
        classes,
        Provenance::Synthetic { seed: sample_seed },
    )
}

fn blob_centers(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn draw_blobs(centers: &[Vec<f64>], n_per_class: usize, spread: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let (classes, dim) = (centers.len(), centers[0].len());
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(NumArray::matrix(n, dim, data)?, labels, classes)
}

/// Stratified split into train / validation / test.
///
/// Within each class the examples are shuffled with `seed`, then the first
/// `round(n_c·f_train)` go to train, the next `round(n_c·f_val)` to
/// validation and the rest to test. Each output keeps the original example
/// order.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = split_indices(ds, fractions, seed)?;
    Ok((ds.subset(&a)?, ds.subset(&b)?, ds.subset(&c)?))
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.15, 0.15];

pub fn split_indices(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: [Vec<usize>; 3] = Default::default();
    for class in 0..ds.classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_train = (n * fractions[0]).round() as usize;
        let n_val = ((n * fractions[1]).round() as usize).min(members.len() - n_train);
        out[0].extend_from_slice(&members[..n_train]);
        out[1].extend_from_slice(&members[n_train..n_train + n_val]);
        out[2].extend_from_slice(&members[n_train + n_val..]);
    }
    for (part, name) in out.iter_mut().zip(["train", "validation", "test"]) {
        if part.is_empty() {
            return Err(Error::invalid(format!("{name} split would be empty")));
        }
        part.sort_unstable();
    }
    let mut seen = vec![false; ds.classes()];
    for &i in &out[0] {
        seen[ds.labels[i]] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("class {missing} absent from the train split")));
    }
    Ok(out)
}

/// Parametric stand-ins for image corruption suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise,
    UniformNoise,
    FeatureDropout,
    SmoothBlur,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [
        Corruption::GaussianNoise,
        Corruption::UniformNoise,
        Corruption::FeatureDropout,
        Corruption::SmoothBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::UniformNoise => "uniform_noise",
            Corruption::FeatureDropout => "feature_dropout",
            Corruption::SmoothBlur => "smooth_blur",
        }
    }

    /// Severity parameter at intensity 1..=5.
    ///
    /// Noise kinds: noise standard deviation as a multiple of each feature's
    /// standard deviation. Dropout: probability a feature is replaced by its
    /// column mean. Blur: mixing weight toward the 3-tap neighbourhood mean.
    pub fn severity(self, intensity: u8) -> f64 {
        let i = intensity as usize - 1;
        match self {
            Corruption::GaussianNoise | Corruption::UniformNoise => [0.2, 0.4, 0.6, 0.8, 1.0][i],
            Corruption::FeatureDropout => [0.1, 0.2, 0.3, 0.4, 0.5][i],
            Corruption::SmoothBlur => [0.2, 0.4, 0.6, 0.8, 1.0][i],
        }
    }

    fn stream(self) -> u64 {
        match self {
            Corruption::GaussianNoise => 1,
            Corruption::UniformNoise => 2,
            Corruption::FeatureDropout => 3,
            Corruption::SmoothBlur => 4,
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind {s:?}")))
    }
}

/// Applies `kind` at `intensity` (1..=5). Labels and example count are
/// untouched.
///
/// The random draws depend only on `(seed, kind)`, not on the intensity, so
/// higher intensities scale (or extend) exactly the perturbation used at
/// lower ones.
pub fn corrupt(ds: &Dataset, kind: Corruption, intensity: u8, seed: u64) -> Result<Dataset> {
    if !(1..=5).contains(&intensity) {
        return Err(Error::invalid(format!("intensity {intensity} outside 1..=5")));
    }
    let severity = kind.severity(intensity);
    let (n, d) = (ds.len(), ds.dim());
    let x = ds.features.data();
    let (mean, std) = column_moments(&ds.features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind.stream().wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut out = x.to_vec();

    match kind {
        Corruption::GaussianNoise => {
            for (k, v) in out.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v += severity * std[k % d] * z;
            }
        }
        Corruption::UniformNoise => {
            // unit-variance uniform on [-√3, √3]
            let half = 3f64.sqrt();
            for (k, v) in out.iter_mut().enumerate() {
                let u: f64 = rng.random_range(-half..half);
                *v += severity * std[k % d] * u;
            }
        }
        Corruption::FeatureDropout => {
            for (k, v) in out.iter_mut().enumerate() {
                let u: f64 = rng.random();
                if u < severity {
                    *v = mean[k % d];
                }
            }
        }
        Corruption::SmoothBlur => {
            for i in 0..n {
                let row = &x[i * d..(i + 1) * d];
                for j in 0..d {
                    let left = row[j.saturating_sub(1)];
                    let right = row[(j + 1).min(d - 1)];
                    let local = (left + row[j] + right) / 3.0;
                    out[i * d + j] = (1.0 - severity) * row[j] + severity * local;
                }
            }
        }
    }

    Dataset::with_provenance(
        NumArray::matrix(n, d, out)?,
        ds.labels.clone(),
        ds.classes,
        Provenance::Corrupted { kind, intensity },
    )
}

fn column_moments(x: &NumArray) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n as f64).sqrt()).collect();
    (mean, std)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub label_column: String,
    /// Class count; inferred as `max(label) + 1` when absent.
    pub classes: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: "label".into(),
            classes: None,
        }
    }
}

/// Writes a header `f0,…,f{d-1},label` and one row per example. Values use
/// the shortest decimal form that parses back to the same `f64`.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    save_csv_with_comments(ds, path, &[])
}

/// Like [`save_csv`], preceded by one `# ` line per comment.
pub fn save_csv_with_comments(ds: &Dataset, path: &Path, comments: &[String]) -> Result<()> {
    let io_ctx = |e: std::io::Error| Error::io(format!("writing {}", path.display()), e);
    let ctx = |e: csv::Error| Error::io(format!("writing {}", path.display()), std::io::Error::other(e));
    let mut file = std::fs::File::create(path).map_err(io_ctx)?;
    for c in comments {
        writeln!(file, "# {c}").map_err(io_ctx)?;
    }
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(ctx)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec).map_err(ctx)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), std::io::Error::other(e)))?;
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let label_col = header
        .iter()
        .position(|h| h.trim() == schema.label_column)
        .ok_or_else(|| {
            Error::Schema(format!(
                "{}: no {:?} column in header",
                path.display(),
                schema.label_column
            ))
        })?;
    let width = header.len();
    if width < 2 {
        return Err(Error::Schema(format!("{}: no feature columns", path.display())));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", rec.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            let field = field.trim();
            if j == label_col {
                let y: usize = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("label {field:?} is not a class id")))?;
                labels.push(y);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("column {j}: {field:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("column {j}: non-finite value")));
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Schema(format!("{}: no data rows", path.display())));
    }
    let classes = match schema.classes {
        Some(z) => z,
        None => labels.iter().max().map_or(0, |m| m + 1),
    };
    let n = labels.len();
    Dataset::with_provenance(
        NumArray::matrix(n, width - 1, data)?,
        labels,
        classes,
        Provenance::Csv {
            path: path.display().to_string(),
        },
    )
}
