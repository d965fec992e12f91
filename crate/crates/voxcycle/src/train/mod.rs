//! Training orchestration: four networks, two image pools, four Adam
//! states, seeded data ordering, checkpointing, metric logging, and
//! inference-time translation.

pub mod checkpoint;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{augment_dataset, AugmentError, DEFAULT_SIGMA_DEGREES};
use crate::loss::{discriminator_objective, generator_objective, LossError, LossWeights};
use crate::net::{NetError, Network, NetworkSpec};
use crate::nifti::{read_nifti_file, NiftiError};
use crate::optim::{lr_schedule, AdamHyper, AdamState, OptimError};
use crate::pool::{ImagePool, DEFAULT_POOL_CAPACITY};
use crate::rng::RngState;
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::volume::{NormStats, Volume, VolumeError, DEFAULT_PERCENTILE};

use checkpoint::{CheckpointError, Records};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("domain directory {0} contains no .nii/.nii.gz volumes")]
    EmptyDomain(PathBuf),
    #[error("non-finite value in {what}; aborting")]
    NonFinite { what: String },
    #[error("checkpoint was written by a run with a different configuration; pass force_resume=true to override")]
    FingerprintMismatch,
    #[error("translation requires target-domain intensity stats, but the checkpoint has none")]
    MissingDomainStats,
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    A2B,
    B2A,
}

impl std::str::FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "a2b" => Ok(Direction::A2B),
            "b2a" => Ok(Direction::B2A),
            other => Err(format!("unknown direction {other:?}; use a2b or b2a")),
        }
    }
}

/// Full training configuration. Mirrors the flat `key = value` config file;
/// every key listed in [`TrainConfig::apply_kv`] is accepted, everything
/// else is rejected.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub data_a: PathBuf,
    pub data_b: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub constant_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
    pub pool_capacity: usize,
    pub seed: u64,
    pub augment_rotations: usize,
    pub augment_sigma: f64,
    pub checkpoint_every: usize,
    pub precision: Precision,
    pub deterministic: bool,
    /// Stop (with a checkpoint) after this many epochs without changing the
    /// schedule; excluded from the fingerprint, it is run control only.
    pub stop_after_epochs: Option<usize>,
    pub resume: Option<PathBuf>,
    pub force_resume: bool,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(data_a: PathBuf, data_b: PathBuf, out_dir: PathBuf) -> Self {
        TrainConfig {
            data_a,
            data_b,
            out_dir,
            epochs: 200,
            constant_epochs: 100,
            batch_size: 1,
            base_lr: 2e-4,
            lambda_cycle: 10.0,
            lambda_identity: 0.0,
            pool_capacity: DEFAULT_POOL_CAPACITY,
            seed: 0,
            augment_rotations: 0,
            augment_sigma: DEFAULT_SIGMA_DEGREES,
            checkpoint_every: 0,
            precision: Precision::Single,
            deterministic: false,
            stop_after_epochs: None,
            resume: None,
            force_resume: false,
            log_every: 1,
        }
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let bad = |what: &str| TrainError::Config(format!("bad value for {what}: {value:?}"));
        match key {
            "data_a" => self.data_a = PathBuf::from(value),
            "data_b" => self.data_b = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "constant_epochs" => self.constant_epochs = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "base_lr" => self.base_lr = value.parse().map_err(|_| bad(key))?,
            "lambda_cycle" => self.lambda_cycle = value.parse().map_err(|_| bad(key))?,
            "lambda_identity" => self.lambda_identity = value.parse().map_err(|_| bad(key))?,
            "pool_capacity" => self.pool_capacity = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "augment_rotations" => self.augment_rotations = value.parse().map_err(|_| bad(key))?,
            "augment_sigma" => self.augment_sigma = value.parse().map_err(|_| bad(key))?,
            "checkpoint_every" => self.checkpoint_every = value.parse().map_err(|_| bad(key))?,
            "precision" => {
                self.precision = match value {
                    "single" => Precision::Single,
                    "double" => Precision::Double,
                    _ => return Err(bad(key)),
                }
            }
            "deterministic" => self.deterministic = value.parse().map_err(|_| bad(key))?,
            "stop_after_epochs" => self.stop_after_epochs = Some(value.parse().map_err(|_| bad(key))?),
            "resume" => self.resume = Some(PathBuf::from(value)),
            "force_resume" => self.force_resume = value.parse().map_err(|_| bad(key))?,
            "log_every" => self.log_every = value.parse().map_err(|_| bad(key))?,
            other => {
                return Err(TrainError::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Parse a flat `key = value` file ('#' starts a comment).
    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::new(PathBuf::new(), PathBuf::new(), PathBuf::from("."));
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size != 1 {
            return Err(TrainError::Config(
                "only minibatch size 1 (full-volume training) is supported".into(),
            ));
        }
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.constant_epochs > self.epochs {
            return Err(TrainError::Config(
                "constant_epochs cannot exceed epochs".into(),
            ));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(TrainError::Config("base_lr must be positive".into()));
        }
        if self.lambda_cycle < 0.0 || self.lambda_identity < 0.0 {
            return Err(TrainError::Config("loss weights must be non-negative".into()));
        }
        if !self.data_a.is_dir() || !self.data_b.is_dir() {
            return Err(TrainError::Config(format!(
                "data directories must exist: {} / {}",
                self.data_a.display(),
                self.data_b.display()
            )));
        }
        let canon_a = self.data_a.canonicalize()?;
        let canon_b = self.data_b.canonicalize()?;
        if canon_a == canon_b {
            return Err(TrainError::Config(
                "domain directories must be disjoint".into(),
            ));
        }
        Ok(())
    }

    /// Canonical rendering of the fields a resumed run must agree on.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "augment_rotations={}", self.augment_rotations);
        let _ = writeln!(s, "augment_sigma={}", self.augment_sigma);
        let _ = writeln!(s, "base_lr={}", self.base_lr);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "constant_epochs={}", self.constant_epochs);
        let _ = writeln!(s, "data_a={}", self.data_a.display());
        let _ = writeln!(s, "data_b={}", self.data_b.display());
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "lambda_cycle={}", self.lambda_cycle);
        let _ = writeln!(s, "lambda_identity={}", self.lambda_identity);
        let _ = writeln!(s, "pool_capacity={}", self.pool_capacity);
        let _ = writeln!(
            s,
            "precision={}",
            match self.precision {
                Precision::Single => "single",
                Precision::Double => "double",
            }
        );
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        digest.into()
    }
}

/// Per-step losses and bookkeeping, logged as one line per step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub g_total: f64,
    pub adv_a2b: f64,
    pub adv_b2a: f64,
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub identity_a: f64,
    pub identity_b: f64,
    pub d_a: f64,
    pub d_b: f64,
    pub millis: f64,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "step={} epoch={} lr={:.6e} g_total={:.6e} adv_a2b={:.6e} adv_b2a={:.6e} cycle_a={:.6e} cycle_b={:.6e} id_a={:.6e} id_b={:.6e} d_a={:.6e} d_b={:.6e} ms={:.1}",
            self.step,
            self.epoch,
            self.lr,
            self.g_total,
            self.adv_a2b,
            self.adv_b2a,
            self.cycle_a,
            self.cycle_b,
            self.identity_a,
            self.identity_b,
            self.d_a,
            self.d_b,
            self.millis
        )
    }

    /// The weighted components must reproduce the total.
    pub fn components_consistent(&self, w: &LossWeights) -> bool {
        let sum = self.adv_a2b
            + self.adv_b2a
            + w.lambda_cycle * (self.cycle_a + self.cycle_b)
            + w.lambda_identity * (self.identity_a + self.identity_b);
        (sum - self.g_total).abs() <= 1e-5 * self.g_total.abs().max(1.0)
    }

    pub fn all_finite(&self) -> bool {
        [
            self.g_total,
            self.adv_a2b,
            self.adv_b2a,
            self.cycle_a,
            self.cycle_b,
            self.identity_a,
            self.identity_b,
            self.d_a,
            self.d_b,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Running mean of per-volume normalization windows for one domain.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub lo_sum: f64,
    pub hi_sum: f64,
    pub count: u64,
}

impl RunningStats {
    pub fn push(&mut self, stats: NormStats) {
        self.lo_sum += stats.lo as f64;
        self.hi_sum += stats.hi as f64;
        self.count += 1;
    }

    pub fn window(&self) -> Option<NormStats> {
        if self.count == 0 {
            return None;
        }
        Some(NormStats {
            lo: (self.lo_sum / self.count as f64) as f32,
            hi: (self.hi_sum / self.count as f64) as f32,
        })
    }
}

/// Complete training state, loadable to reproduce the next step bitwise.
pub struct Checkpoint<T: Scalar> {
    pub epoch: usize,
    pub seed: u64,
    pub config_fingerprint: [u8; 32],
    pub g_a2b: Network<T>,
    pub g_b2a: Network<T>,
    pub d_a: Network<T>,
    pub d_b: Network<T>,
    pub adam_g_a2b: AdamState<T>,
    pub adam_g_b2a: AdamState<T>,
    pub adam_d_a: AdamState<T>,
    pub adam_d_b: AdamState<T>,
    pub pool_a_buffer: Vec<Tensor<T>>,
    pub pool_a_rng: RngState,
    pub pool_b_buffer: Vec<Tensor<T>>,
    pub pool_b_rng: RngState,
    pub pool_capacity: usize,
    pub stats_a: RunningStats,
    pub stats_b: RunningStats,
}

const NET_PREFIXES: [&str; 4] = ["g_a2b", "g_b2a", "d_a", "d_b"];

impl<T: Scalar> Checkpoint<T> {
    pub fn to_records(&self) -> Records {
        let mut r = Records::new();
        r.push_u64s("meta.epoch", &[self.epoch as u64]);
        r.push_u64s("meta.seed", &[self.seed]);
        r.push_bytes("meta.config_fingerprint", &self.config_fingerprint);
        let nets = [&self.g_a2b, &self.g_b2a, &self.d_a, &self.d_b];
        let adams = [
            &self.adam_g_a2b,
            &self.adam_g_b2a,
            &self.adam_d_a,
            &self.adam_d_b,
        ];
        for ((prefix, net), adam) in NET_PREFIXES.iter().zip(nets).zip(adams) {
            net.for_each_param(|name, t| {
                r.push_tensor(format!("{prefix}.param.{name}"), t);
            });
            r.push_u64s(format!("{prefix}.adam.t"), &[adam.t]);
            r.push_tensor(
                format!("{prefix}.adam.hyper"),
                &Tensor::<f64>::from_vec(
                    &[4],
                    vec![
                        adam.hyper.lr,
                        adam.hyper.beta1,
                        adam.hyper.beta2,
                        adam.hyper.eps,
                    ],
                ),
            );
            for (name, m) in &adam.first {
                r.push_tensor(format!("{prefix}.adam.m.{name}"), m);
            }
            for (name, v) in &adam.second {
                r.push_tensor(format!("{prefix}.adam.v.{name}"), v);
            }
        }
        r.push_u64s("pool.capacity", &[self.pool_capacity as u64]);
        for (label, buffer, rng) in [
            ("pool_a", &self.pool_a_buffer, &self.pool_a_rng),
            ("pool_b", &self.pool_b_buffer, &self.pool_b_rng),
        ] {
            r.push_u64s(format!("{label}.count"), &[buffer.len() as u64]);
            r.push_bytes(format!("{label}.rng"), &rng.to_bytes());
            for (i, item) in buffer.iter().enumerate() {
                r.push_tensor(format!("{label}.item{i:03}"), item);
            }
        }
        for (label, stats) in [("stats.a", &self.stats_a), ("stats.b", &self.stats_b)] {
            r.push_tensor(
                format!("{label}.sums"),
                &Tensor::<f64>::from_vec(&[2], vec![stats.lo_sum, stats.hi_sum]),
            );
            r.push_u64s(format!("{label}.count"), &[stats.count]);
        }
        r
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_records().write_file(path)
    }

    fn load_network(
        records: &Records,
        prefix: &str,
        spec: NetworkSpec,
        seed: u64,
    ) -> Result<Network<T>, CheckpointError> {
        let mut net = Network::<T>::init(spec, seed).map_err(|e| CheckpointError::Truncated {
            context: format!("building architecture for {prefix}: {e}"),
        })?;
        let mut failure = None;
        net.for_each_param_mut(|name, t| {
            if failure.is_some() {
                return;
            }
            let record = format!("{prefix}.param.{name}");
            match records.tensor::<T>(&record) {
                Ok(stored) if stored.shape() == t.shape() => *t = stored,
                Ok(stored) => {
                    failure = Some(CheckpointError::ShapeMismatch {
                        name: record,
                        expected: t.shape().to_vec(),
                        got: stored.shape().to_vec(),
                    })
                }
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(net),
        }
    }

    fn load_adam(
        records: &Records,
        prefix: &str,
        net: &Network<T>,
    ) -> Result<AdamState<T>, CheckpointError> {
        let hyper_t = records.tensor::<f64>(&format!("{prefix}.adam.hyper"))?;
        let h = hyper_t.data();
        let hyper = AdamHyper {
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
        };
        let mut adam = AdamState::for_network(net, hyper);
        adam.t = records.u64_scalar(&format!("{prefix}.adam.t"))?;
        for (name, m) in adam.first.iter_mut() {
            let stored = records.tensor::<T>(&format!("{prefix}.adam.m.{name}"))?;
            if stored.shape() != m.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: format!("{prefix}.adam.m.{name}"),
                    expected: m.shape().to_vec(),
                    got: stored.shape().to_vec(),
                });
            }
            *m = stored;
        }
        for (name, v) in adam.second.iter_mut() {
            let stored = records.tensor::<T>(&format!("{prefix}.adam.v.{name}"))?;
            *v = stored;
        }
        Ok(adam)
    }

    pub fn from_records(records: &Records) -> Result<Self, CheckpointError> {
        let epoch = records.u64_scalar("meta.epoch")? as usize;
        let seed = records.u64_scalar("meta.seed")?;
        let fp_bytes = records.bytes("meta.config_fingerprint")?;
        let mut config_fingerprint = [0u8; 32];
        if fp_bytes.len() != 32 {
            return Err(CheckpointError::Truncated {
                context: "config fingerprint".into(),
            });
        }
        config_fingerprint.copy_from_slice(fp_bytes);

        let g_a2b = Self::load_network(records, "g_a2b", NetworkSpec::generator(), seed)?;
        let g_b2a = Self::load_network(records, "g_b2a", NetworkSpec::generator(), seed + 1)?;
        let d_a = Self::load_network(records, "d_a", NetworkSpec::discriminator(), seed + 2)?;
        let d_b = Self::load_network(records, "d_b", NetworkSpec::discriminator(), seed + 3)?;
        let adam_g_a2b = Self::load_adam(records, "g_a2b", &g_a2b)?;
        let adam_g_b2a = Self::load_adam(records, "g_b2a", &g_b2a)?;
        let adam_d_a = Self::load_adam(records, "d_a", &d_a)?;
        let adam_d_b = Self::load_adam(records, "d_b", &d_b)?;

        let pool_capacity = records.u64_scalar("pool.capacity")? as usize;
        let mut pools = Vec::new();
        for label in ["pool_a", "pool_b"] {
            let count = records.u64_scalar(&format!("{label}.count"))? as usize;
            let mut buffer = Vec::with_capacity(count);
            for i in 0..count {
                buffer.push(records.tensor::<T>(&format!("{label}.item{i:03}"))?);
            }
            let rng = RngState::from_bytes(records.bytes(&format!("{label}.rng"))?).ok_or(
                CheckpointError::Truncated {
                    context: format!("{label}.rng"),
                },
            )?;
            pools.push((buffer, rng));
        }
        let (pool_b_buffer, pool_b_rng) = pools.pop().unwrap();
        let (pool_a_buffer, pool_a_rng) = pools.pop().unwrap();

        let mut stats = Vec::new();
        for label in ["stats.a", "stats.b"] {
            let sums = records.tensor::<f64>(&format!("{label}.sums"))?;
            stats.push(RunningStats {
                lo_sum: sums.data()[0],
                hi_sum: sums.data()[1],
                count: records.u64_scalar(&format!("{label}.count"))?,
            });
        }
        let stats_b = stats.pop().unwrap();
        let stats_a = stats.pop().unwrap();

        Ok(Checkpoint {
            epoch,
            seed,
            config_fingerprint,
            g_a2b,
            g_b2a,
            d_a,
            d_b,
            adam_g_a2b,
            adam_g_b2a,
            adam_d_a,
            adam_d_b,
            pool_a_buffer,
            pool_a_rng,
            pool_b_buffer,
            pool_b_rng,
            pool_capacity,
            stats_a,
            stats_b,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_records(&Records::read_file(path)?)
    }
}

/// Training precision recorded in a checkpoint file, read without loading it.
pub fn peek_precision(path: &Path) -> Result<Dtype, CheckpointError> {
    let records = Records::read_file(path)?;
    let name = records
        .names()
        .find(|n| n.starts_with("g_a2b.param."))
        .map(str::to_string)
        .ok_or_else(|| CheckpointError::MissingRecord("g_a2b.param.*".into()))?;
    let tag = records.dtype_tag(&name)?;
    Dtype::from_tag(tag).ok_or(CheckpointError::UnknownDtype { name, tag })
}

/// Live training state.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub g_a2b: Network<T>,
    pub g_b2a: Network<T>,
    pub d_a: Network<T>,
    pub d_b: Network<T>,
    pub adam_g_a2b: AdamState<T>,
    pub adam_g_b2a: AdamState<T>,
    pub adam_d_a: AdamState<T>,
    pub adam_d_b: AdamState<T>,
    pub pool_a: ImagePool<T>,
    pub pool_b: ImagePool<T>,
    pub stats_a: RunningStats,
    pub stats_b: RunningStats,
    /// Completed epochs.
    pub epoch: usize,
}

fn mix_seed(seed: u64, epoch: usize, salt: u64) -> u64 {
    let mut x = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt;
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        let seed = cfg.seed;
        let g_a2b = Network::init(NetworkSpec::generator(), seed)?;
        let g_b2a = Network::init(NetworkSpec::generator(), seed + 1)?;
        let d_a = Network::init(NetworkSpec::discriminator(), seed + 2)?;
        let d_b = Network::init(NetworkSpec::discriminator(), seed + 3)?;
        let hyper = AdamHyper {
            lr: cfg.base_lr,
            ..AdamHyper::default()
        };
        Ok(Trainer {
            adam_g_a2b: AdamState::for_network(&g_a2b, hyper),
            adam_g_b2a: AdamState::for_network(&g_b2a, hyper),
            adam_d_a: AdamState::for_network(&d_a, hyper),
            adam_d_b: AdamState::for_network(&d_b, hyper),
            pool_a: ImagePool::new(cfg.pool_capacity, seed + 10),
            pool_b: ImagePool::new(cfg.pool_capacity, seed + 11),
            stats_a: RunningStats::default(),
            stats_b: RunningStats::default(),
            epoch: 0,
            g_a2b,
            g_b2a,
            d_a,
            d_b,
            cfg,
        })
    }

    pub fn from_checkpoint(cfg: TrainConfig, ckpt: Checkpoint<T>) -> Result<Self, TrainError> {
        if ckpt.config_fingerprint != cfg.fingerprint() && !cfg.force_resume {
            return Err(TrainError::FingerprintMismatch);
        }
        Ok(Trainer {
            g_a2b: ckpt.g_a2b,
            g_b2a: ckpt.g_b2a,
            d_a: ckpt.d_a,
            d_b: ckpt.d_b,
            adam_g_a2b: ckpt.adam_g_a2b,
            adam_g_b2a: ckpt.adam_g_b2a,
            adam_d_a: ckpt.adam_d_a,
            adam_d_b: ckpt.adam_d_b,
            pool_a: ImagePool::restore(ckpt.pool_capacity, ckpt.pool_a_buffer, ckpt.pool_a_rng),
            pool_b: ImagePool::restore(ckpt.pool_capacity, ckpt.pool_b_buffer, ckpt.pool_b_rng),
            stats_a: ckpt.stats_a,
            stats_b: ckpt.stats_b,
            epoch: ckpt.epoch,
            cfg,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            epoch: self.epoch,
            seed: self.cfg.seed,
            config_fingerprint: self.cfg.fingerprint(),
            g_a2b: self.g_a2b.clone(),
            g_b2a: self.g_b2a.clone(),
            d_a: self.d_a.clone(),
            d_b: self.d_b.clone(),
            adam_g_a2b: self.adam_g_a2b.clone(),
            adam_g_b2a: self.adam_g_b2a.clone(),
            adam_d_a: self.adam_d_a.clone(),
            adam_d_b: self.adam_d_b.clone(),
            pool_a_buffer: self.pool_a.buffer().to_vec(),
            pool_a_rng: self.pool_a.rng_state(),
            pool_b_buffer: self.pool_b.buffer().to_vec(),
            pool_b_rng: self.pool_b.rng_state(),
            pool_capacity: self.cfg.pool_capacity,
            stats_a: self.stats_a,
            stats_b: self.stats_b,
        }
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_cycle: self.cfg.lambda_cycle,
            lambda_identity: self.cfg.lambda_identity,
        }
    }

    /// One full CycleGAN step: generator update, pool exchange, then both
    /// discriminator updates. Logged losses are the pre-update values.
    pub fn train_step(
        &mut self,
        volume_a: &Tensor<T>,
        volume_b: &Tensor<T>,
        step: u64,
        epoch: usize,
        lr: f64,
    ) -> Result<StepMetrics, TrainError> {
        let started = Instant::now();
        let w = self.weights();
        let obj = generator_objective(
            volume_a,
            volume_b,
            &self.g_a2b,
            &self.g_b2a,
            &self.d_a,
            &self.d_b,
            &w,
        )?;
        if !obj.total.is_finite() {
            return Err(TrainError::NonFinite {
                what: "generator objective".into(),
            });
        }
        if !obj.fake_a.all_finite() {
            return Err(TrainError::NonFinite {
                what: "generated fake for domain A".into(),
            });
        }
        if !obj.fake_b.all_finite() {
            return Err(TrainError::NonFinite {
                what: "generated fake for domain B".into(),
            });
        }
        self.adam_g_a2b.step(&mut self.g_a2b, &obj.grads_a2b, lr)?;
        self.adam_g_b2a.step(&mut self.g_b2a, &obj.grads_b2a, lr)?;

        let pooled_a = self.pool_a.query(obj.fake_a);
        let pooled_b = self.pool_b.query(obj.fake_b);

        let d_a_obj = discriminator_objective(&self.d_a, volume_a, &pooled_a)?;
        if !d_a_obj.loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "discriminator A objective".into(),
            });
        }
        self.adam_d_a.step(&mut self.d_a, &d_a_obj.grads, lr)?;
        let d_b_obj = discriminator_objective(&self.d_b, volume_b, &pooled_b)?;
        if !d_b_obj.loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "discriminator B objective".into(),
            });
        }
        self.adam_d_b.step(&mut self.d_b, &d_b_obj.grads, lr)?;

        Ok(StepMetrics {
            step,
            epoch,
            lr,
            g_total: obj.total,
            adv_a2b: obj.adv_a2b,
            adv_b2a: obj.adv_b2a,
            cycle_a: obj.cycle_a,
            cycle_b: obj.cycle_b,
            identity_a: obj.identity_a,
            identity_b: obj.identity_b,
            d_a: d_a_obj.loss,
            d_b: d_b_obj.loss,
            millis: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Epoch loop over preloaded normalized datasets. Pairing truncates to
    /// the smaller domain; each epoch reshuffles both domains with seeds
    /// derived from `(config seed, epoch)` so a resumed run replays the
    /// identical order.
    pub fn run(
        &mut self,
        data_a: &[Tensor<T>],
        data_b: &[Tensor<T>],
        log: &mut MetricsLog,
    ) -> Result<Vec<PathBuf>, TrainError> {
        if data_a.is_empty() {
            return Err(TrainError::EmptyDomain(self.cfg.data_a.clone()));
        }
        if data_b.is_empty() {
            return Err(TrainError::EmptyDomain(self.cfg.data_b.clone()));
        }
        let steps = data_a.len().min(data_b.len());
        let mut written = Vec::new();
        let final_epoch = self
            .cfg
            .stop_after_epochs
            .unwrap_or(self.cfg.epochs)
            .min(self.cfg.epochs);
        while self.epoch < final_epoch {
            let epoch = self.epoch + 1;
            let lr = lr_schedule(epoch, self.cfg.base_lr, self.cfg.epochs, self.cfg.constant_epochs)?;
            let order_a = shuffled_indices(data_a.len(), mix_seed(self.cfg.seed, epoch, 0xA));
            let order_b = shuffled_indices(data_b.len(), mix_seed(self.cfg.seed, epoch, 0xB));
            for i in 0..steps {
                let step = (epoch as u64 - 1) * steps as u64 + i as u64 + 1;
                let metrics = self.train_step(
                    &data_a[order_a[i]],
                    &data_b[order_b[i]],
                    step,
                    epoch,
                    lr,
                )?;
                log.record(&metrics)?;
            }
            self.epoch = epoch;
            let due = self.cfg.checkpoint_every > 0 && epoch % self.cfg.checkpoint_every == 0;
            if due || epoch == final_epoch {
                written.push(self.save_checkpoint()?);
            }
        }
        Ok(written)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.cfg
            .out_dir
            .join(format!("checkpoint_epoch_{:04}.vxcg", self.epoch))
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf, TrainError> {
        let path = self.checkpoint_path();
        self.checkpoint().save(&path)?;
        Ok(path)
    }
}

/// Line-delimited metrics sink (file and/or stdout).
pub struct MetricsLog {
    file: Option<std::io::BufWriter<std::fs::File>>,
    echo_every: usize,
    lines: Vec<StepMetrics>,
}

impl MetricsLog {
    pub fn to_file(path: &Path, echo_every: usize) -> Result<Self, TrainError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(MetricsLog {
            file: Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
            echo_every,
            lines: Vec::new(),
        })
    }

    pub fn in_memory() -> Self {
        MetricsLog {
            file: None,
            echo_every: 0,
            lines: Vec::new(),
        }
    }

    pub fn record(&mut self, m: &StepMetrics) -> Result<(), TrainError> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", m.log_line())?;
        }
        if self.echo_every > 0 && m.step % self.echo_every as u64 == 0 {
            println!("{}", m.log_line());
        }
        self.lines.push(m.clone());
        Ok(())
    }

    pub fn history(&self) -> &[StepMetrics] {
        &self.lines
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

/// Load one domain directory: read every `.nii`/`.nii.gz` (sorted by file
/// name), optionally expand with rotations, normalize each volume, and
/// report the accumulated normalization windows.
pub fn load_domain(
    dir: &Path,
    augment_rotations: usize,
    augment_sigma: f64,
    seed: u64,
) -> Result<(Vec<Volume>, RunningStats), TrainError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".nii") || name.ends_with(".nii.gz")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(TrainError::EmptyDomain(dir.to_path_buf()));
    }
    let mut volumes = Vec::with_capacity(paths.len());
    for path in &paths {
        let (_, vol) = read_nifti_file(path)?;
        volumes.push(vol);
    }
    if augment_rotations > 0 {
        volumes = augment_dataset(&volumes, augment_rotations, augment_sigma, seed)?;
    }
    let mut stats = RunningStats::default();
    let mut normalized = Vec::with_capacity(volumes.len());
    for vol in volumes {
        let n = vol.normalize_intensity(DEFAULT_PERCENTILE)?;
        stats.push(n.norm.expect("normalize sets stats"));
        normalized.push(n);
    }
    Ok((normalized, stats))
}

fn to_tensors<T: Scalar>(volumes: &[Volume]) -> Result<Vec<Tensor<T>>, TrainError> {
    let mut out = Vec::with_capacity(volumes.len());
    let mut dims: Option<Vec<usize>> = None;
    for v in volumes {
        match &dims {
            None => dims = Some(v.data.shape().to_vec()),
            Some(d) if d == v.data.shape() => {}
            Some(d) => {
                return Err(TrainError::Config(format!(
                    "all training volumes must share one grid; found {:?} and {:?} (crop with `preprocess` first)",
                    d,
                    v.data.shape()
                )))
            }
        }
        for (axis, &n) in v.data.shape()[1..].iter().enumerate() {
            if n % 4 != 0 {
                return Err(TrainError::Config(format!(
                    "volume axis {axis} has size {n}, not divisible by 4; crop or pad first"
                )));
            }
        }
        out.push(v.data.cast::<T>());
    }
    Ok(out)
}

fn run_train<T: Scalar>(cfg: &TrainConfig) -> Result<PathBuf, TrainError> {
    let (vols_a, stats_a) = load_domain(
        &cfg.data_a,
        cfg.augment_rotations,
        cfg.augment_sigma,
        mix_seed(cfg.seed, 0, 0xAAAA),
    )?;
    let (vols_b, stats_b) = load_domain(
        &cfg.data_b,
        cfg.augment_rotations,
        cfg.augment_sigma,
        mix_seed(cfg.seed, 0, 0xBBBB),
    )?;
    let data_a = to_tensors::<T>(&vols_a)?;
    let data_b = to_tensors::<T>(&vols_b)?;
    drop(vols_a);
    drop(vols_b);

    let mut trainer = match &cfg.resume {
        Some(path) => Trainer::<T>::from_checkpoint(cfg.clone(), Checkpoint::load(path)?)?,
        None => {
            let mut t = Trainer::<T>::new(cfg.clone())?;
            t.stats_a = stats_a;
            t.stats_b = stats_b;
            t
        }
    };

    let mut log = MetricsLog::to_file(&cfg.out_dir.join("metrics.log"), cfg.log_every)?;
    trainer.run(&data_a, &data_b, &mut log)?;
    log.flush()?;
    Ok(trainer.checkpoint_path())
}

/// Full training entry point: loads both domains, runs all epochs, writes
/// checkpoints and the metrics log, and returns the final checkpoint path.
pub fn train(cfg: &TrainConfig) -> Result<PathBuf, TrainError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    match cfg.precision {
        Precision::Single => run_train::<f32>(cfg),
        Precision::Double => run_train::<f64>(cfg),
    }
}

/// Translate one volume through a trained generator: normalize, forward,
/// denormalize with the target domain's accumulated intensity window.
pub fn translate_volume<T: Scalar>(
    ckpt: &Checkpoint<T>,
    volume: &Volume,
    direction: Direction,
) -> Result<Volume, TrainError> {
    let normalized = volume.normalize_intensity(DEFAULT_PERCENTILE)?;
    let input: Tensor<T> = normalized.data.cast();
    let (generator, target_stats) = match direction {
        Direction::A2B => (&ckpt.g_a2b, &ckpt.stats_b),
        Direction::B2A => (&ckpt.g_b2a, &ckpt.stats_a),
    };
    let raw = generator.forward(&input)?;
    let window = target_stats.window().ok_or(TrainError::MissingDomainStats)?;
    let out = Volume {
        data: raw.cast::<f32>(),
        voxel_size: volume.voxel_size,
        norm: None,
        source: volume.source.clone(),
        raw_header: volume.raw_header.clone(),
    };
    Ok(out.denormalize_with(window))
}
