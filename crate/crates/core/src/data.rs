//! Datasets: synthetic blobs, CSV ingestion, label corruption and random
//! probe sets for off-data Lipschitz probing.

use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, normalize};
use crate::loss::Target;
use crate::nn::Shape;
use crate::rng;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    UniformBand,
    Gaussian,
    Sphere,
    Jitter,
}

impl ProbeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::UniformBand => "uniform_band",
            ProbeKind::Gaussian => "gaussian",
            ProbeKind::Sphere => "sphere",
            ProbeKind::Jitter => "jitter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Val,
    Probe(ProbeKind),
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
            Split::Val => f.write_str("val"),
            Split::Probe(k) => write!(f, "probe:{}", k.name()),
        }
    }
}

/// Per-channel mean and standard deviation over all samples and positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    fn compute<T: Scalar>(shape: Shape, inputs: &[T]) -> Self {
        let d = shape.numel();
        let per = shape.spatial();
        let n = inputs.len() / d.max(1);
        let count = (n * per).max(1) as f64;
        let mut mean = vec![0.0; shape.c];
        let mut sq = vec![0.0; shape.c];
        for row in inputs.chunks_exact(d) {
            for c in 0..shape.c {
                for v in &row[c * per..(c + 1) * per] {
                    mean[c] += v.to64();
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for row in inputs.chunks_exact(d) {
            for c in 0..shape.c {
                for v in &row[c * per..(c + 1) * per] {
                    let e = v.to64() - mean[c];
                    sq[c] += e * e;
                }
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt()).collect();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    shape: Shape,
    inputs: Vec<T>,
    labels: Vec<usize>,
    num_classes: usize,
    targets: Option<Vec<T>>,
    noise_mask: Vec<bool>,
    split: Split,
    stats: ChannelStats,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        shape: Shape,
        inputs: Vec<T>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let d = shape.numel();
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if d == 0 || inputs.len() != labels.len() * d {
            return Err(Error::ShapeMismatch(format!(
                "{} input values for {} samples of shape {shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if !crate::linalg::all_finite(&inputs) {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        let stats = ChannelStats::compute(shape, &inputs);
        let n = labels.len();
        Ok(Self {
            shape,
            inputs,
            labels,
            num_classes,
            targets: None,
            noise_mask: vec![false; n],
            split,
            stats,
        })
    }

    /// Attaches real-valued regression targets (`N x K`, row-major) that
    /// replace the one-hot encodings of the labels.
    pub fn with_targets(mut self, targets: Vec<T>) -> Result<Self> {
        if targets.len() != self.len() * self.num_classes {
            return Err(Error::DimensionMismatch {
                expected: self.len() * self.num_classes,
                got: targets.len(),
            });
        }
        self.targets = Some(targets);
        Ok(self)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shape.numel()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn input(&self, n: usize) -> &[T] {
        let d = self.dim();
        &self.inputs[n * d..(n + 1) * d]
    }

    pub fn inputs(&self) -> &[T] {
        &self.inputs
    }

    pub fn label(&self, n: usize) -> usize {
        self.labels[n]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn target(&self, n: usize) -> Target<'_, T> {
        match &self.targets {
            Some(t) => Target::Values(&t[n * self.num_classes..(n + 1) * self.num_classes]),
            None => Target::Class(self.labels[n]),
        }
    }

    pub fn has_regression_targets(&self) -> bool {
        self.targets.is_some()
    }

    pub fn noise_mask(&self) -> &[bool] {
        &self.noise_mask
    }

    /// Fraction of corrupted labels, recovered from the noise mask.
    pub fn noise_fraction(&self) -> f64 {
        self.noise_mask.iter().filter(|m| **m).count() as f64 / self.len() as f64
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut inputs = Vec::with_capacity(indices.len() * self.dim());
        let mut labels = Vec::with_capacity(indices.len());
        let mut mask = Vec::with_capacity(indices.len());
        let mut targets = self.targets.as_ref().map(|_| Vec::new());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
            mask.push(self.noise_mask[i]);
            if let (Some(dst), Some(src)) = (targets.as_mut(), self.targets.as_ref()) {
                dst.extend_from_slice(&src[i * self.num_classes..(i + 1) * self.num_classes]);
            }
        }
        let mut out = Self::new(self.shape, inputs, labels, self.num_classes, self.split)?;
        out.noise_mask = mask;
        out.targets = targets;
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            shape: self.shape,
            inputs: self.inputs.iter().map(|v| U::of(v.to64())).collect(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            targets: self
                .targets
                .as_ref()
                .map(|t| t.iter().map(|v| U::of(v.to64())).collect()),
            noise_mask: self.noise_mask.clone(),
            split: self.split,
            stats: self.stats.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainTest<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

fn simplex_means(classes: usize, d: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    if classes <= d {
        let c = classes as f64;
        let scale = separation * (c / (c - 1.0)).sqrt();
        (0..classes)
            .map(|k| {
                let mut m = vec![0.0; d];
                for (j, v) in m.iter_mut().enumerate().take(classes) {
                    *v = scale * (f64::from(u8::from(j == k)) - 1.0 / c);
                }
                m
            })
            .collect()
    } else {
        (0..classes)
            .map(|k| {
                let mut m: Vec<f64> = rng::gaussian_vec(&mut rng::stream(seed, "blob-mean", k as u64), d);
                normalize(&mut m);
                m.iter_mut().for_each(|v| *v *= separation);
                m
            })
            .collect()
    }
}

/// Gaussian class clusters (unit covariance) centred on the vertices of a
/// regular simplex of radius `separation`. Labels cycle through the classes;
/// samples are routed to train/test 80/20 by a hash of their index.
pub fn gen_blobs(n: usize, shape: Shape, classes: usize, separation: f64, seed: u64) -> Result<TrainTest<f64>> {
    if classes < 2 {
        return Err(Error::Config(format!("blobs need at least 2 classes, got {classes}")));
    }
    let d = shape.numel();
    let means = simplex_means(classes, d, separation, seed);
    let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let y = i % classes;
        let noise: Vec<f64> = rng::gaussian_vec(&mut rng::stream(seed, "blob-sample", i as u64), d);
        let x = means[y].iter().zip(&noise).map(|(m, e)| m + e);
        if rng::derive_seed(seed, "blob-split", i as u64).is_multiple_of(5) {
            te_x.extend(x);
            te_y.push(y);
        } else {
            tr_x.extend(x);
            tr_y.push(y);
        }
    }
    Ok(TrainTest {
        train: Dataset::new(shape, tr_x, tr_y, classes, Split::Train)?,
        test: Dataset::new(shape, te_x, te_y, classes, Split::Test)?,
    })
}

/// Replaces `floor(fraction * N)` uniformly chosen labels with a uniformly
/// drawn different label and marks them in the noise mask.
pub fn corrupt_labels<T: Scalar>(ds: &Dataset<T>, fraction: f64, seed: u64) -> Result<Dataset<T>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    let n = ds.len();
    let count = ((fraction * n as f64) + 1e-9).floor() as usize;
    let mut out = ds.clone();
    if count == 0 {
        return Ok(out);
    }
    if ds.num_classes < 2 {
        return Err(Error::Config("label corruption needs at least 2 classes".into()));
    }
    let mut r = rng::stream(seed, "corrupt", 0);
    let mut chosen = index::sample(&mut r, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let old = out.labels[i];
        let mut new = r.random_range(0..ds.num_classes - 1);
        if new >= old {
            new += 1;
        }
        out.labels[i] = new;
        out.noise_mask[i] = true;
    }
    Ok(out)
}

/// Where a probe set takes its statistics (and, for jitter, its base inputs) from.
#[derive(Debug, Clone, Copy)]
pub enum ProbeSource<'a, T> {
    Stats { shape: Shape, stats: &'a ChannelStats, num_classes: usize },
    Dataset(&'a Dataset<T>),
}

/// Label-free random inputs for Lipschitz probing away from the data.
/// `jitter_amplitude` scales the per-channel standard deviation of the
/// uniform noise added to reference inputs.
pub fn gen_probe_set<T: Scalar>(
    kind: ProbeKind,
    source: ProbeSource<'_, T>,
    n: usize,
    seed: u64,
    jitter_amplitude: f64,
) -> Result<Dataset<T>> {
    let (shape, stats, classes, reference) = match source {
        ProbeSource::Stats { shape, stats, num_classes } => (shape, stats, num_classes, None),
        ProbeSource::Dataset(ds) => (ds.shape, &ds.stats, ds.num_classes, Some(ds)),
    };
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = shape.numel();
    let per = shape.spatial();
    let mut inputs = Vec::with_capacity(n * d);
    for s in 0..n {
        let mut r = rng::stream(seed, kind.name(), s as u64);
        match kind {
            ProbeKind::UniformBand => {
                for c in 0..shape.c {
                    let (m, sd) = (stats.mean[c], stats.std[c]);
                    for _ in 0..per {
                        inputs.push(T::of(m + sd * r.random_range(-1.0..=1.0)));
                    }
                }
            }
            ProbeKind::Gaussian => {
                let z: Vec<f64> = rng::gaussian_vec(&mut r, d);
                for c in 0..shape.c {
                    for e in &z[c * per..(c + 1) * per] {
                        inputs.push(T::of(stats.mean[c] + stats.std[c] * e));
                    }
                }
            }
            ProbeKind::Sphere => {
                let mut z: Vec<f64> = rng::gaussian_vec(&mut r, d);
                normalize(&mut z);
                inputs.extend(z.into_iter().map(T::of));
            }
            ProbeKind::Jitter => {
                let base = reference.ok_or(Error::MissingReference)?;
                let x = base.input(s % base.len());
                for c in 0..shape.c {
                    let amp = jitter_amplitude * stats.std[c];
                    for v in &x[c * per..(c + 1) * per] {
                        let e = if amp > 0.0 { amp * r.random_range(-1.0..=1.0) } else { 0.0 };
                        inputs.push(*v + T::of(e));
                    }
                }
            }
        }
    }
    Dataset::new(shape, inputs, vec![0; n], classes.max(1), Split::Probe(kind))
}

/// `min_n |x_n|_2` over non-zero samples, with the number of zero-norm samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XMin {
    pub value: f64,
    pub zero_norm: usize,
}

pub fn x_min<T: Scalar>(ds: &Dataset<T>) -> Result<XMin> {
    let mut best = f64::INFINITY;
    let mut zero_norm = 0;
    for n in 0..ds.len() {
        let v = norm2(ds.input(n)).to64();
        if v == 0.0 {
            zero_norm += 1;
        } else {
            best = best.min(v);
        }
    }
    if zero_norm == ds.len() {
        return Err(Error::ZeroNormSample);
    }
    if zero_norm > 0 {
        log::warn!("{zero_norm} zero-norm samples excluded from x_min");
    }
    Ok(XMin { value: best, zero_norm })
}

/// Reads a numeric CSV: one label column (by index), the remaining columns
/// are the flattened input in channel-height-width order. Without an explicit
/// `shape` the input is treated as a flat vector.
pub fn load_csv(path: &Path, has_header: bool, label_col: usize, shape: Option<Shape>) -> Result<Dataset<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let first_row = if has_header { 2 } else { 1 };
    for (r, record) in reader.records().enumerate() {
        let row = r + first_row;
        let record = record.map_err(|e| Error::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    row,
                    col: record.len().min(w) + 1,
                    msg: format!("expected {w} columns, found {}", record.len()),
                })
            }
            _ => {}
        }
        if label_col >= record.len() {
            return Err(Error::Parse {
                row,
                col: label_col + 1,
                msg: "label column out of range".into(),
            });
        }
        for (c, field) in record.iter().enumerate() {
            let field = field.trim();
            if c == label_col {
                let y = field.parse::<usize>().map_err(|e| Error::Parse {
                    row,
                    col: c + 1,
                    msg: format!("label `{field}`: {e}"),
                })?;
                labels.push(y);
            } else {
                let v = field.parse::<f64>().map_err(|e| Error::Parse {
                    row,
                    col: c + 1,
                    msg: format!("value `{field}`: {e}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        col: c + 1,
                        msg: format!("non-finite value `{field}`"),
                    });
                }
                inputs.push(v);
            }
        }
    }
    let d = width.ok_or(Error::EmptyDataset)? - 1;
    let shape = shape.unwrap_or(Shape::flat(d));
    if shape.numel() != d {
        return Err(Error::ShapeMismatch(format!("{d} feature columns for shape {shape:?}")));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(shape, inputs, labels, classes, Split::Train)
}

/// Writes `label,x0,x1,...` rows with round-trip float formatting.
pub fn write_csv<T: Scalar>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for n in 0..ds.len() {
        let mut row = vec![ds.label(n).to_string()];
        row.extend(ds.input(n).iter().map(|v| format!("{}", v.to64())));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row: 0,
            col: 0,
            msg: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn blobs() -> TrainTest<f64> {
        gen_blobs(200, Shape::flat(5), 3, 2.0, 42).unwrap()
    }

    #[test]
    fn blobs_are_deterministic_and_split() {
        let a = blobs();
        let b = blobs();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len() + a.test.len(), 200);
        let frac = a.test.len() as f64 / 200.0;
        assert!((0.1..0.3).contains(&frac), "{frac}");
        let c = gen_blobs(200, Shape::flat(5), 3, 2.0, 43).unwrap();
        assert_ne!(a.train.inputs(), c.train.inputs());
    }

    #[test]
    fn simplex_means_are_equidistant() {
        let m = simplex_means(4, 6, 3.0, 0);
        for i in 0..4 {
            assert!((norm2(&m[i]) - 3.0).abs() < 1e-12);
            for j in 0..i {
                let d: Vec<f64> = m[i].iter().zip(&m[j]).map(|(a, b)| a - b).collect();
                let expected = 3.0 * (2.0f64 * 4.0 / 3.0).sqrt();
                assert!((norm2(&d) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corruption_flips_exact_count() {
        let ds = gen_blobs(700, Shape::flat(4), 5, 1.0, 1).unwrap().train;
        let ds = ds.subset(&(0..500).collect::<Vec<_>>()).unwrap();
        let noisy = corrupt_labels(&ds, 0.2, 9).unwrap();
        let flipped: Vec<usize> = (0..500).filter(|&i| noisy.label(i) != ds.label(i)).collect();
        assert_eq!(flipped.len(), 100);
        assert_eq!(noisy.noise_mask().iter().filter(|m| **m).count(), 100);
        assert!((noisy.noise_fraction() - 0.2).abs() < 1.0 / 500.0);
        for i in flipped {
            assert!(noisy.noise_mask()[i]);
        }
        assert_eq!(corrupt_labels(&ds, 0.0, 9).unwrap(), ds);
        let all = corrupt_labels(&ds, 1.0, 9).unwrap();
        assert!((0..500).all(|i| all.label(i) != ds.label(i)));
    }

    #[test]
    fn probe_sets() {
        let ds = blobs().train;
        let sphere = gen_probe_set(ProbeKind::Sphere, ProbeSource::Dataset(&ds), 50, 3, 1.0).unwrap();
        for n in 0..50 {
            assert!((norm2(sphere.input(n)) - 1.0).abs() < 1e-12);
        }
        assert_eq!(sphere.split().to_string(), "probe:sphere");

        let still = gen_probe_set(ProbeKind::Jitter, ProbeSource::Dataset(&ds), 20, 3, 0.0).unwrap();
        for n in 0..20 {
            assert_eq!(still.input(n), ds.input(n));
        }

        let stats = ds.stats().clone();
        let src = ProbeSource::<f64>::Stats {
            shape: ds.shape(),
            stats: &stats,
            num_classes: 3,
        };
        assert!(matches!(
            gen_probe_set(ProbeKind::Jitter, src, 5, 0, 1.0),
            Err(Error::MissingReference)
        ));

        let (n, d) = (400, ds.dim());
        let g = gen_probe_set(ProbeKind::Gaussian, src, n, 5, 1.0).unwrap();
        for c in 0..d {
            let m: f64 = (0..n).map(|i| g.input(i)[c]).sum::<f64>() / n as f64;
            // Each channel mean averages n * spatial independent draws.
            let bound = 5.0 * stats.std[c] / ((n * ds.shape().spatial()) as f64).sqrt();
            assert!((m - stats.mean[c]).abs() < bound, "channel {c}");
        }
        let u = gen_probe_set(ProbeKind::UniformBand, src, 100, 5, 1.0).unwrap();
        for i in 0..100 {
            for c in 0..d {
                let v = u.input(i)[c];
                assert!(v >= stats.mean[c] - stats.std[c] && v <= stats.mean[c] + stats.std[c]);
            }
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(b"y,a,b\n1,0.5,-2\n0,3,4\n2,1e-3,0.1\n")
            .unwrap();
        let ds = load_csv(&path, true, 0, None).unwrap();
        assert_eq!(ds.labels(), &[1, 0, 2]);
        assert_eq!(ds.input(0), &[0.5, -2.0]);
        assert_eq!(ds.input(2), &[1e-3, 0.1]);
        assert_eq!(ds.num_classes(), 3);
        assert!((x_min(&ds).unwrap().value - (1e-6f64 + 0.01).sqrt()).abs() < 1e-15);

        let out = dir.path().join("o.csv");
        write_csv(&ds, &out).unwrap();
        assert_eq!(load_csv(&out, true, 0, None).unwrap().inputs(), ds.inputs());

        std::fs::write(&path, "1,0.5\n0,abc\n").unwrap();
        match load_csv(&path, false, 0, None) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "1,NaN\n").unwrap();
        assert!(matches!(load_csv(&path, false, 0, None), Err(Error::Parse { .. })));
    }

    #[test]
    fn x_min_skips_zero_rows() {
        let ds = Dataset::new(Shape::flat(2), vec![0.0, 0.0, 3.0, 4.0, 1.0, 0.0], vec![0, 0, 0], 1, Split::Train).unwrap();
        let xm = x_min(&ds).unwrap();
        assert_eq!(xm.value, 1.0);
        assert_eq!(xm.zero_norm, 1);
        let zero = Dataset::new(Shape::flat(2), vec![0.0; 2], vec![0], 1, Split::Train).unwrap();
        assert!(matches!(x_min(&zero), Err(Error::ZeroNormSample)));
    }
}
