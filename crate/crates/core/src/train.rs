//! Epoch loop: PK batches -> forward -> batch loss -> backward -> Adam.

use std::fmt::Write as _;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, EmbeddingSet, Split};
use crate::error::{Error, Result};
use crate::geometry::MetricKind;
use crate::losses::{
    batch_loss, BatchLossConfig, LossKind, MarginSpec, SamplingScheme, SamplingVariant, CONTRASTIVE_MARGIN,
};
use crate::network::{ModelParams, DEFAULT_EMBEDDING_DIM, DEFAULT_HIDDEN};
use crate::optim::{AdamConfig, AdamState, BETA1, BETA2, EPSILON, LR_PRETRAINED, LR_SCRATCH};
use crate::rng;
use crate::sampler::{build_epoch, DEFAULT_K, DEFAULT_P};

// Stream ids for rng::derive_seed.
const INIT_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const EPOCH_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Scratch,
    Pretrained,
    Fixed(f64),
}

impl LrSchedule {
    pub fn rate(self) -> f64 {
        match self {
            LrSchedule::Scratch => LR_SCRATCH,
            LrSchedule::Pretrained => LR_PRETRAINED,
            LrSchedule::Fixed(lr) => lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub scheme: SamplingScheme,
    pub margin: MarginSpec,
    pub p: usize,
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub metric: MetricKind,
    pub normalize: bool,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Standard deviation of Gaussian noise added to training inputs; 0 disables it.
    pub feature_noise: f64,
}

impl TrainConfig {
    /// Defaults for the given loss: softplus for triplet, hard margin 1.0 for contrastive.
    pub fn new(loss_kind: LossKind, variant: SamplingVariant, seed: u64) -> Self {
        Self {
            loss_kind,
            scheme: SamplingScheme::new(variant),
            margin: match loss_kind {
                LossKind::Triplet => MarginSpec::Softplus,
                LossKind::Contrastive => MarginSpec::Hard(CONTRASTIVE_MARGIN),
            },
            p: DEFAULT_P,
            k: DEFAULT_K,
            epochs: 100,
            seed,
            lr: LrSchedule::Scratch,
            beta1: BETA1,
            beta2: BETA2,
            adam_eps: EPSILON,
            metric: MetricKind::Euclidean,
            normalize: false,
            hidden: DEFAULT_HIDDEN.to_vec(),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            feature_noise: 0.0,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr.rate(), beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn loss_config(&self) -> BatchLossConfig {
        BatchLossConfig { loss_kind: self.loss_kind, scheme: self.scheme, margin: self.margin, metric: self.metric }
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut s = vec![input_dim];
        s.extend(&self.hidden);
        s.push(self.embedding_dim);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.margin.validate()?;
        self.adam().validate()?;
        if self.p < 2 || self.k < 2 {
            return bad(format!("P and K must be >= 2 (P={}, K={})", self.p, self.k));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        if !self.feature_noise.is_finite() || self.feature_noise < 0.0 {
            return bad(format!("feature_noise must be finite and >= 0, got {}", self.feature_noise));
        }
        Ok(())
    }

    /// Fully resolved settings as `key=value` pairs, in a fixed order.
    pub fn echo(&self) -> Vec<(String, String)> {
        let margin = match self.margin {
            MarginSpec::Softplus => "softplus".to_string(),
            MarginSpec::Hard(_) => "hard".to_string(),
        };
        let alpha = match self.margin {
            MarginSpec::Hard(a) => format!("{a:?}"),
            MarginSpec::Softplus => "-".into(),
        };
        let hidden = self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        [
            ("loss", self.loss_kind.name().to_string()),
            ("sampling", self.scheme.variant.name().to_string()),
            ("ba_mode", self.scheme.ba_mode.name().to_string()),
            ("margin", margin),
            ("alpha", alpha),
            ("p", self.p.to_string()),
            ("k", self.k.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", format!("{:?}", self.lr.rate())),
            ("adam_beta1", format!("{:?}", self.beta1)),
            ("adam_beta2", format!("{:?}", self.beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            ("metric", self.metric.name().to_string()),
            ("normalize", self.normalize.to_string()),
            ("hidden", hidden),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("feature_noise", format!("{:?}", self.feature_noise)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the batches that were not skipped.
    pub mean_loss: f64,
    pub batches: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochRecord>,
}

pub fn init_params(input_dim: usize, config: &TrainConfig) -> Result<ModelParams> {
    ModelParams::init(&config.layer_sizes(input_dim), config.normalize, rng::derive_seed(config.seed, INIT_STREAM))
}

/// Seed used for the epoch's PK plan.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    rng::derive_seed(seed, EPOCH_STREAM_BASE + epoch as u64)
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let params = init_params(dataset.dim(), config)?;
    train_from(dataset, config, params)
}

/// Trains starting from the given parameters.
pub fn train_from(dataset: &Dataset, config: &TrainConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    config.validate()?;
    if params.input_dim() != dataset.dim() {
        return Err(Error::Shape(format!("network input {} vs dataset dimension {}", params.input_dim(), dataset.dim())));
    }
    let mut adam = AdamState::for_model(config.adam(), &params)?;
    let loss_cfg = config.loss_config();
    let mut sampling_rng = rng::stream(config.seed, SAMPLING_STREAM);
    let mut noise_rng = rng::stream(config.seed, NOISE_STREAM);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let plan = build_epoch(dataset, config.p, config.k, epoch_seed(config.seed, epoch))?;
        let mut total = 0.0;
        let mut done = 0;
        let mut skipped = 0;
        for batch in &plan.batches {
            let mut inputs = dataset.features(&batch.sample_indices);
            if config.feature_noise > 0.0 {
                for v in inputs.as_mut_slice() {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    *v += config.feature_noise * z;
                }
            }
            let embeddings = params.forward(&inputs)?;
            let rng: &mut dyn RngCore = &mut sampling_rng;
            let result = match batch_loss(&embeddings, &batch.labels, &loss_cfg, Some(rng)) {
                Ok(r) => r,
                Err(Error::DegenerateBatch) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let grads = params.backward(&inputs, &result.grad_embeddings)?;
            adam.step_model(&mut params, &grads)?;
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
            }
            total += result.loss;
            done += 1;
        }
        if done == 0 {
            return Err(Error::AllBatchesSkipped(epoch));
        }
        trace.push(EpochRecord { epoch, mean_loss: total / done as f64, batches: done, skipped });
    }
    Ok(TrainOutcome { params, trace })
}

/// Embeds every sample of `split` with the trained network.
pub fn embed(params: &ModelParams, dataset: &Dataset, split: Split) -> Result<EmbeddingSet> {
    let idx = dataset.indices_of(split);
    let emb = params.forward(&dataset.features(&idx))?;
    Ok(EmbeddingSet::from_samples(dataset.samples(), &idx, emb))
}

/// Embeds the whole dataset, keeping row order.
pub fn embed_all(params: &ModelParams, dataset: &Dataset) -> Result<EmbeddingSet> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let emb = params.forward(&dataset.features(&idx))?;
    Ok(EmbeddingSet::from_samples(dataset.samples(), &idx, emb))
}

/// Loss trace as text: a header, the config echo, then one CSV row per epoch.
pub fn trace_to_string(config: &TrainConfig, trace: &[EpochRecord]) -> String {
    let mut out = String::from("# reid-embed loss trace v1\n");
    for (k, v) in config.echo() {
        let _ = writeln!(out, "# {k}={v}");
    }
    out.push_str("epoch,mean_loss,batches,skipped\n");
    for r in trace {
        let _ = writeln!(out, "{},{:?},{},{}", r.epoch, r.mean_loss, r.batches, r.skipped);
    }
    out
}
