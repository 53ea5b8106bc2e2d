use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{corrupt_labels, gen_blobs, load_csv, Dataset, ProbeKind};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::nn::{build_convnet, build_mlp, InitScheme, Network, Shape};
use crate::probes::{HutchinsonConfig, Metric, NoiseConfig, ProbeConfig};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Dense ReLU network with `depth` hidden layers of width `w`.
    #[default]
    Mlp,
    /// Convolutional family with stage widths `[w, 2w, 4w, 8w]`.
    Convnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Blobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    /// Input channels, height and width; MLPs see the flattened vector.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Distance of the cluster means from the origin.
    pub separation: f64,
    pub seed: u64,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            n_train: 200,
            n_test: 100,
            channels: 1,
            height: 1,
            width: 10,
            classes: 4,
            separation: 2.0,
            seed: 0,
            train_csv: None,
            test_csv: None,
        }
    }
}

impl DatasetSpec {
    pub fn shape(&self) -> Shape {
        Shape::image(self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    pub family: Family,
    /// Hidden layers of the MLP family.
    pub depth: usize,
    pub widths: Vec<usize>,
    pub dataset: DatasetSpec,
    /// Fraction of training labels replaced by a different class.
    pub label_noise: f64,
    pub init: InitScheme,
    pub train: TrainConfig,
    /// Epochs at which probes run; the final epoch is always probed.
    pub probe_epochs: Vec<usize>,
    pub probe: ProbeConfig,
    /// Also emit per-sample metrics evaluated on the test set.
    pub probe_test_split: bool,
    /// Random probe sets whose Lipschitz rows are tagged `probe:<kind>`.
    pub probe_sets: Vec<ProbeKind>,
    pub probe_set_size: usize,
    pub jitter_amplitude: f64,
    /// Bounds verified at every probe epoch: thm1, cor1, thm2, cor2, duality.
    pub bounds: Vec<String>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write a checkpoint at every probe epoch under `checkpoints/`.
    pub save_checkpoints: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            family: Family::Mlp,
            depth: 1,
            widths: vec![2, 8, 32],
            dataset: DatasetSpec::default(),
            label_noise: 0.1,
            init: InitScheme::He,
            train: TrainConfig {
                lr: 1e-2,
                batch_size: 32,
                epochs: 50,
                ..TrainConfig::default()
            },
            probe_epochs: vec![0],
            probe: ProbeConfig {
                hutchinson: HutchinsonConfig { num_probes: 20, seed: 0 },
                lanczos_steps: 10,
                noise: NoiseConfig { batch_size: 32, num_batches: 10, seed: 0, bootstrap: 0 },
                ..ProbeConfig::default()
            },
            probe_test_split: false,
            probe_sets: vec![ProbeKind::Gaussian],
            probe_set_size: 50,
            jitter_amplitude: 0.1,
            bounds: vec!["cor1".into(), "cor2".into()],
            seeds: vec![0],
            output_dir: PathBuf::from("sweep-out"),
            save_checkpoints: false,
        }
    }
}

pub const BOUND_IDS: [&str; 5] = ["thm1", "cor1", "thm2", "cor2", "duality"];

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.widths.is_empty() || self.widths.windows(2).any(|w| w[0] >= w[1]) || self.widths[0] == 0 {
            return Err(Error::Config("widths must be positive and strictly increasing".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.family == Family::Mlp && self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!("label_noise {} outside [0, 1]", self.label_noise)));
        }
        if let Some(b) = self.bounds.iter().find(|b| !BOUND_IDS.contains(&b.as_str())) {
            return Err(Error::Config(format!("unknown bound '{b}'")));
        }
        if !self.probe_sets.is_empty() && self.probe_set_size == 0 {
            return Err(Error::Config("probe_set_size must be positive when probe_sets are given".into()));
        }
        self.train.validate()?;
        self.probe.power.validate()
    }

    /// Probe epochs within the training budget, plus the final epoch.
    pub fn probe_schedule(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.probe_epochs.iter().copied().filter(|e| *e <= self.train.epochs).collect();
        e.push(self.train.epochs);
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Hash of everything that determines the results (not the output path).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.save_checkpoints = false;
        let json = serde_json::to_string(&c).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn input_shape(&self) -> Shape {
        match self.family {
            Family::Mlp => Shape::flat(self.dataset.shape().numel()),
            Family::Convnet => self.dataset.shape(),
        }
    }

    pub fn build_network(&self, width: usize) -> Result<Network<f64>> {
        let d = &self.dataset;
        match self.family {
            Family::Mlp => {
                let mut widths = vec![d.shape().numel()];
                widths.extend(std::iter::repeat_n(width, self.depth));
                build_mlp(&widths, d.classes)
            }
            Family::Convnet => build_convnet(width, d.channels, d.classes, d.height, d.width),
        }
    }

    /// Train and test sets; label noise is applied to the training set only.
    pub fn build_datasets(&self) -> Result<(Dataset<f64>, Dataset<f64>)> {
        let d = &self.dataset;
        let shape = self.input_shape();
        let (train, test) = match d.source {
            DataSource::Blobs => {
                if d.n_train == 0 || d.n_test == 0 {
                    return Err(Error::Config("n_train and n_test must be positive".into()));
                }
                // Grow the pool until both splits have enough samples, then
                // take prefixes.
                let mut n = (d.n_train + d.n_test) * 5 / 4 + 8;
                let tt = loop {
                    let tt = gen_blobs(n, shape, d.classes, d.separation, d.seed)?;
                    if tt.train.len() >= d.n_train && tt.test.len() >= d.n_test {
                        break tt;
                    }
                    n *= 2;
                };
                let train = tt.train.subset(&(0..d.n_train).collect::<Vec<_>>())?;
                let test = tt.test.subset(&(0..d.n_test).collect::<Vec<_>>())?;
                (train, test)
            }
            DataSource::Csv => {
                let path = |p: &Option<PathBuf>, what: &str| {
                    p.clone().ok_or_else(|| Error::Config(format!("dataset.{what} is required for csv data")))
                };
                let train = load_csv(&path(&d.train_csv, "train_csv")?, true, 0, Some(shape))?;
                let test = load_csv(&path(&d.test_csv, "test_csv")?, true, 0, Some(shape))?
                    .with_split(crate::data::Split::Test);
                (train, test)
            }
        };
        let train = corrupt_labels(&train, self.label_noise, self.dataset.seed)?;
        Ok((train, test))
    }

    pub fn loss(&self) -> LossKind {
        self.train.loss
    }

    pub fn wants(&self, metric: Metric) -> bool {
        self.probe.metrics.contains(&metric)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_the_smoke_sweep() {
        let c: SweepConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, SweepConfig::default());
        c.validate().unwrap();
        assert_eq!(c.probe_schedule(), vec![0, 50]);
    }

    #[test]
    fn strict_parsing_and_validation() {
        assert!(serde_json::from_str::<SweepConfig>(r#"{"widthz": [1]}"#).is_err());
        assert!(serde_json::from_str::<SweepConfig>(r#"{"train": {"lr": 0.1, "bogus": 1}}"#).is_err());
        for bad in [
            SweepConfig { widths: vec![4, 2], ..Default::default() },
            SweepConfig { widths: vec![], ..Default::default() },
            SweepConfig { seeds: vec![], ..Default::default() },
            SweepConfig { schema_version: 2, ..Default::default() },
            SweepConfig { bounds: vec!["thm9".into()], ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn datasets_have_requested_sizes() {
        let c = SweepConfig::default();
        let (train, test) = c.build_datasets().unwrap();
        assert_eq!((train.len(), test.len()), (200, 100));
        assert_eq!(train.noise_mask().iter().filter(|m| **m).count(), 20);
        assert_eq!(c.build_network(8).unwrap().param_count(), 10 * 8 + 8 + 8 * 4 + 4);
        let other = SweepConfig { output_dir: "elsewhere".into(), ..c.clone() };
        assert_eq!(c.fingerprint(), other.fingerprint());
    }
}
