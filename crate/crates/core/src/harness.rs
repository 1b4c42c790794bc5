//! Training, evaluation and parameter sweeps at desk scale.
//!
//! A run generates its synthetic corpus from the configured seed, builds a
//! dual encoder, and trains it with the chosen contrastive loss. Every source
//! of randomness (init, batch order, corruption, random masks) draws from its
//! own seeded stream, so a [`RunConfig`] fully determines the trace.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunked::{sharded_sigmoid_loss, ShardPlan, ShardStrategy};
use crate::data::{corrupt, generate, CorruptionReport, CorruptionSpec, PairDataset, SyntheticPairSpec};
use crate::error::{Error, Result};
use crate::losses::{
    build_mask, check_normalized, sigmoid_loss_and_grads_unchecked, softmax_loss_and_grads_unchecked, LossGrads,
    LossParams, MaskSpec, MaskStrategy,
};
use crate::math::{dot, l2_normalize_rows, row_softmax, Matrix};
use crate::model::{normalize_with_grad, DualEncoder, GroupSettings, ModelConfig, ModelGrads};
use crate::optim::{
    adam_step, global_grad_norm, lr_at, monitor_update, AdamState, GradMonitor, GradStatus, OptimConfig, Schedule,
    ScheduleKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sigmoid,
    Softmax,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Sigmoid => "sigmoid",
            LossKind::Softmax => "softmax",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(LossKind::Sigmoid),
            "softmax" => Ok(LossKind::Softmax),
            other => Err(Error::config("loss", format!("unknown `{other}`"))),
        }
    }
}

/// How the image tower is initialized and updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerMode {
    /// Both towers from scratch.
    BothTrainable,
    /// Pre-trained image tower, locked.
    ImageFrozen,
    /// Pre-trained image tower, trained with no weight decay and 0.1× LR.
    ImagePretrainedUnlocked,
}

impl std::fmt::Display for TowerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TowerMode::BothTrainable => "both_trainable",
            TowerMode::ImageFrozen => "image_frozen",
            TowerMode::ImagePretrainedUnlocked => "image_pretrained_unlocked",
        })
    }
}

impl std::str::FromStr for TowerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both_trainable" => Ok(TowerMode::BothTrainable),
            "image_frozen" => Ok(TowerMode::ImageFrozen),
            "image_pretrained_unlocked" => Ok(TowerMode::ImagePretrainedUnlocked),
            other => Err(Error::config("tower", format!("unknown `{other}`"))),
        }
    }
}

impl TowerMode {
    pub fn image_settings(self) -> GroupSettings {
        match self {
            TowerMode::BothTrainable => GroupSettings::default(),
            TowerMode::ImageFrozen => GroupSettings {
                frozen: true,
                ..GroupSettings::default()
            },
            TowerMode::ImagePretrainedUnlocked => GroupSettings {
                weight_decay_multiplier: 0.0,
                lr_multiplier: 0.1,
                frozen: false,
            },
        }
    }
}

/// Temperature and bias are never decayed.
pub const LOSS_GROUP_SETTINGS: GroupSettings = GroupSettings {
    weight_decay_multiplier: 0.0,
    lr_multiplier: 1.0,
    frozen: false,
};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    pub total_examples_seen: usize,
    /// Stretch training by the masking ratio so the number of pairs seen
    /// matches an unmasked run.
    pub matched_pairs: bool,
    pub shards: usize,
    pub shard_strategy: ShardStrategy,
    pub mask: MaskSpec,
    pub corruption: CorruptionSpec,
    pub data: SyntheticPairSpec,
    pub eval_examples: usize,
    pub model: ModelConfig,
    pub init: LossParams,
    pub optim: OptimConfig,
    pub schedule: ScheduleKind,
    pub warmup_fraction: f64,
    pub tower: TowerMode,
    pub pretrain_steps: usize,
    /// Round normalized embeddings through `f32` before the loss.
    pub f32_embeddings: bool,
    pub recall_k: Vec<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            loss: LossKind::Sigmoid,
            batch_size: 32,
            total_examples_seen: 16_384,
            matched_pairs: false,
            shards: 1,
            shard_strategy: ShardStrategy::Chunked,
            mask: MaskSpec::none(),
            corruption: CorruptionSpec::default(),
            data: SyntheticPairSpec {
                latent_dim: 8,
                image_dim: 24,
                vocab: 256,
                text_len: 16,
                n_classes: 10,
                n_examples: 2304,
                latent_spread: 0.6,
                noise_sigma: 0.3,
                seed: 0,
            },
            eval_examples: 256,
            model: ModelConfig {
                image_layers: vec![24, 64, 32],
                vocab: 256,
                bottleneck: 16,
                text_width: 32,
                text_hidden: vec![64],
                disjoint_init: false,
            },
            init: LossParams::default(),
            optim: OptimConfig {
                base_lr: 1e-2,
                ..OptimConfig::default()
            },
            schedule: ScheduleKind::WarmupCosine,
            warmup_fraction: 0.1,
            tower: TowerMode::BothTrainable,
            pretrain_steps: 200,
            f32_embeddings: false,
            recall_k: vec![1, 5, 10],
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Steps before any matched-pairs stretching.
    pub fn base_steps(&self) -> Result<usize> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !self.total_examples_seen.is_multiple_of(self.batch_size) {
            return Err(Error::config(
                "total_examples_seen",
                format!(
                    "{} is not a multiple of batch_size {}",
                    self.total_examples_seen, self.batch_size
                ),
            ));
        }
        Ok(self.total_examples_seen / self.batch_size)
    }

    /// Total negatives over kept negatives per batch.
    pub fn masking_ratio(&self) -> Result<f64> {
        let n = self.batch_size;
        let kept = self.mask.kept_negatives(n)?;
        if kept == 0 {
            return Ok(1.0);
        }
        Ok((n * n - n) as f64 / kept as f64)
    }

    pub fn total_steps(&self) -> Result<usize> {
        let base = self.base_steps()?;
        if self.matched_pairs && self.mask.strategy != MaskStrategy::None {
            Ok((base as f64 * self.masking_ratio()?).round() as usize)
        } else {
            Ok(base)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.total_steps()?;
        self.optim.validate()?;
        self.corruption.validate()?;
        self.data.validate()?;
        if self.eval_examples == 0 || self.eval_examples >= self.data.n_examples {
            return Err(Error::config("eval_examples", "must leave a non-empty training split"));
        }
        if self.batch_size > self.data.n_examples - self.eval_examples {
            return Err(Error::config("batch_size", "larger than the training split"));
        }
        if self.model.image_layers.first() != Some(&self.data.image_dim) {
            return Err(Error::config(
                "model.image_layers",
                "first width must equal data.image_dim",
            ));
        }
        if self.model.vocab != self.data.vocab {
            return Err(Error::config("model.vocab", "must equal data.vocab"));
        }
        ShardPlan::new(self.batch_size, self.shards).map_err(|e| Error::config("shards", e.to_string()))?;
        if self.shards > 1 && self.mask.strategy != MaskStrategy::None {
            return Err(Error::config(
                "shards",
                "negative masking needs the whole batch on one device",
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction", "must lie in [0, 1)"));
        }
        if self.recall_k.is_empty() || self.recall_k.contains(&0) {
            return Err(Error::config("recall_k", "need at least one positive k"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let total = self.total_steps()?;
        Ok(Schedule {
            kind: self.schedule,
            warmup_steps: (self.warmup_fraction * total as f64).round() as usize,
            total_steps: total,
            peak_lr: self.optim.base_lr,
        })
    }

    /// Sets one field from its dotted key, e.g. `optim.beta2`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
        }
        fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(|v| num(key, v))
                .collect()
        }
        let v = value.trim();
        match key {
            "loss" => self.loss = v.parse()?,
            "batch_size" => self.batch_size = num(key, v)?,
            "total_examples_seen" => self.total_examples_seen = num(key, v)?,
            "matched_pairs" => self.matched_pairs = num(key, v)?,
            "shards" => self.shards = num(key, v)?,
            "shard_strategy" => self.shard_strategy = v.parse()?,
            "mask.strategy" => self.mask.strategy = v.parse()?,
            "mask.negatives_per_positive" => self.mask.negatives_per_positive = num(key, v)?,
            "mask.seed" => self.mask.seed = num(key, v)?,
            "corruption.image_noise_p" => self.corruption.image_noise_p = num(key, v)?,
            "corruption.text_scramble_p" => self.corruption.text_scramble_p = num(key, v)?,
            "corruption.misalign_p" => self.corruption.misalign_p = num(key, v)?,
            "corruption.seed" => self.corruption.seed = num(key, v)?,
            "data.latent_dim" => self.data.latent_dim = num(key, v)?,
            "data.image_dim" => self.data.image_dim = num(key, v)?,
            "data.vocab" => self.data.vocab = num(key, v)?,
            "data.text_len" => self.data.text_len = num(key, v)?,
            "data.n_classes" => self.data.n_classes = num(key, v)?,
            "data.n_examples" => self.data.n_examples = num(key, v)?,
            "data.latent_spread" => self.data.latent_spread = num(key, v)?,
            "data.noise_sigma" => self.data.noise_sigma = num(key, v)?,
            "data.seed" => self.data.seed = num(key, v)?,
            "eval_examples" => self.eval_examples = num(key, v)?,
            "model.image_layers" => self.model.image_layers = list(key, v)?,
            "model.vocab" => self.model.vocab = num(key, v)?,
            "model.bottleneck" => self.model.bottleneck = num(key, v)?,
            "model.text_width" => self.model.text_width = num(key, v)?,
            "model.text_hidden" => self.model.text_hidden = list(key, v)?,
            "model.disjoint_init" => self.model.disjoint_init = num(key, v)?,
            "init.t_prime" => self.init.t_prime = num(key, v)?,
            "init.bias" => self.init.bias = num(key, v)?,
            "optim.beta1" => self.optim.beta1 = num(key, v)?,
            "optim.beta2" => self.optim.beta2 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "optim.base_lr" => self.optim.base_lr = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "optim.grad_clip_norm" => {
                self.optim.grad_clip_norm = match v {
                    "none" | "" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "schedule" => self.schedule = v.parse()?,
            "warmup_fraction" => self.warmup_fraction = num(key, v)?,
            "tower" => self.tower = v.parse()?,
            "pretrain_steps" => self.pretrain_steps = num(key, v)?,
            "f32_embeddings" => self.f32_embeddings = num(key, v)?,
            "recall_k" => self.recall_k = list(key, v)?,
            "seed" => self.seed = num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in the order [`RunConfig::apply`]
    /// accepts them. Feeding the pairs back reproduces the config.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        vec![
            ("loss", self.loss.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("total_examples_seen", self.total_examples_seen.to_string()),
            ("matched_pairs", self.matched_pairs.to_string()),
            ("shards", self.shards.to_string()),
            ("shard_strategy", self.shard_strategy.to_string()),
            ("mask.strategy", self.mask.strategy.to_string()),
            (
                "mask.negatives_per_positive",
                self.mask.negatives_per_positive.to_string(),
            ),
            ("mask.seed", self.mask.seed.to_string()),
            ("corruption.image_noise_p", self.corruption.image_noise_p.to_string()),
            (
                "corruption.text_scramble_p",
                self.corruption.text_scramble_p.to_string(),
            ),
            ("corruption.misalign_p", self.corruption.misalign_p.to_string()),
            ("corruption.seed", self.corruption.seed.to_string()),
            ("data.latent_dim", self.data.latent_dim.to_string()),
            ("data.image_dim", self.data.image_dim.to_string()),
            ("data.vocab", self.data.vocab.to_string()),
            ("data.text_len", self.data.text_len.to_string()),
            ("data.n_classes", self.data.n_classes.to_string()),
            ("data.n_examples", self.data.n_examples.to_string()),
            ("data.latent_spread", self.data.latent_spread.to_string()),
            ("data.noise_sigma", self.data.noise_sigma.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("eval_examples", self.eval_examples.to_string()),
            ("model.image_layers", join(&self.model.image_layers)),
            ("model.vocab", self.model.vocab.to_string()),
            ("model.bottleneck", self.model.bottleneck.to_string()),
            ("model.text_width", self.model.text_width.to_string()),
            ("model.text_hidden", join(&self.model.text_hidden)),
            ("model.disjoint_init", self.model.disjoint_init.to_string()),
            ("init.t_prime", self.init.t_prime.to_string()),
            ("init.bias", self.init.bias.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("optim.base_lr", self.optim.base_lr.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            (
                "optim.grad_clip_norm",
                self.optim.grad_clip_norm.map_or("none".into(), |c| c.to_string()),
            ),
            ("schedule", self.schedule.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("tower", self.tower.to_string()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("f32_embeddings", self.f32_embeddings.to_string()),
            ("recall_k", join(&self.recall_k)),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// One JSON line of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub spike: bool,
    pub t: f64,
    pub b: f64,
    pub d_bias: f64,
    pub positive_logit_mean: f64,
    pub negative_logit_mean: f64,
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: DualEncoder,
    pub trace: Vec<StepMetrics>,
    pub eval_set: PairDataset,
    pub corruption: CorruptionReport,
}

/// SplitMix64 finalizer, used to derive per-step seeds.
fn mix_seed(base: u64, tag: u64, step: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(step.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tag, 0))
}

const INIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const PRETRAIN_STREAM: u64 = 3;
const CORRUPT_STREAM: u64 = 4;
const MASK_STREAM: u64 = 5;

/// Builds the initial model for a config, including image-tower
/// pre-training when the tower mode calls for it.
pub fn init_model(cfg: &RunConfig, train_set: &PairDataset) -> Result<DualEncoder> {
    let mut model = DualEncoder::new(&cfg.model, cfg.init, &mut rng_for(cfg.seed, INIT_STREAM))?;
    if cfg.tower != TowerMode::BothTrainable {
        pretrain_image_tower(&mut model, train_set, cfg.data.n_classes, cfg.pretrain_steps, cfg.seed)?;
    }
    Ok(model)
}

/// Trains the image tower alone on class prediction through a temporary
/// linear head, standing in for a pre-trained backbone.
pub fn pretrain_image_tower(
    model: &mut DualEncoder,
    train_set: &PairDataset,
    n_classes: usize,
    steps: usize,
    seed: u64,
) -> Result<()> {
    let d = model.embed_dim();
    let mut rng = rng_for(seed, PRETRAIN_STREAM);
    let mut head = Matrix::zeros(d, n_classes);
    let mut state = AdamState::new();
    let cfg = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let batch = 64.min(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    for _ in 0..steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let b = train_set.select(idx);
        let (emb, cache) = model.image.forward(&b.images)?;
        let probs = row_softmax(&emb.matmul(&head)?);
        let mut g = probs;
        for (i, &c) in b.classes.iter().enumerate() {
            g[(i, c as usize)] -= 1.0;
        }
        let g = g.scale(1.0 / batch as f64);
        let d_head = emb.transposed_matmul(&g)?;
        let d_emb = g.matmul_transposed(&head)?;
        let (grads, _) = model.image.backward(&cache, &d_emb)?;
        let mut tensors = model.image.tensors_mut();
        tensors.push(head.as_mut_slice());
        let mut group = vec![crate::model::ParamGroup {
            name: "pretrain".into(),
            params: tensors,
            settings: GroupSettings::default(),
        }];
        let mut flat = grads.into_tensors();
        flat.push(d_head.into_vec());
        adam_step(&mut state, &mut group, &[flat], 1e-2, &cfg)?;
    }
    Ok(())
}

/// Loss of one batch with its gradients w.r.t. the normalized embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub grads: LossGrads,
    pub positive_logit_mean: f64,
    pub negative_logit_mean: f64,
}

fn batch_loss(cfg: &RunConfig, zimg: &Matrix, ztxt: &Matrix, params: &LossParams, step: usize) -> Result<BatchLoss> {
    check_normalized(zimg)?;
    check_normalized(ztxt)?;
    match cfg.loss {
        LossKind::Softmax => {
            let (out, grads) = softmax_loss_and_grads_unchecked(zimg, ztxt, params.t_prime)?;
            Ok(BatchLoss {
                value: out.value,
                grads,
                positive_logit_mean: out.positive_logit_mean,
                negative_logit_mean: out.negative_logit_mean,
            })
        }
        LossKind::Sigmoid if cfg.shards > 1 => {
            let plan = ShardPlan::new(zimg.rows(), cfg.shards)?;
            let out = sharded_sigmoid_loss(cfg.shard_strategy, &plan, zimg, ztxt, params)?;
            Ok(BatchLoss {
                value: out.value,
                grads: out.grads,
                positive_logit_mean: out.positive_logit_mean,
                negative_logit_mean: out.negative_logit_mean,
            })
        }
        LossKind::Sigmoid => {
            let (out, mut grads) = sigmoid_loss_and_grads_unchecked(zimg, ztxt, params, None)?;
            let mut value = out.value;
            if cfg.mask.strategy != MaskStrategy::None {
                let spec = MaskSpec {
                    seed: mix_seed(cfg.mask.seed ^ cfg.seed, MASK_STREAM, step as u64),
                    ..cfg.mask
                };
                let mask = build_mask(&out.pair_losses, &spec)?;
                let (masked, masked_grads) = sigmoid_loss_and_grads_unchecked(zimg, ztxt, params, Some(&mask))?;
                value = masked.value;
                grads = masked_grads;
            }
            Ok(BatchLoss {
                value,
                grads,
                positive_logit_mean: out.positive_logit_mean,
                negative_logit_mean: out.negative_logit_mean,
            })
        }
    }
}

fn round_to_f32(m: &Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

/// Encodes a batch, evaluates the configured loss and backpropagates it
/// through normalization and both towers.
pub fn forward_backward(
    cfg: &RunConfig,
    model: &DualEncoder,
    images: &Matrix,
    tokens: &[Vec<u32>],
    step: usize,
) -> Result<(BatchLoss, ModelGrads)> {
    let (img_raw, img_cache) = model.image.forward(images)?;
    let (txt_raw, txt_cache) = model.text.forward(tokens)?;
    let mut zimg = l2_normalize_rows(&img_raw)?;
    let mut ztxt = l2_normalize_rows(&txt_raw)?;
    if cfg.f32_embeddings {
        zimg = round_to_f32(&zimg);
        ztxt = round_to_f32(&ztxt);
    }
    let loss = batch_loss(cfg, &zimg, &ztxt, &model.loss_params, step)?;
    let (_, d_img_raw) = normalize_with_grad(&img_raw, &loss.grads.d_zimg)?;
    let (_, d_txt_raw) = normalize_with_grad(&txt_raw, &loss.grads.d_ztxt)?;
    let (image, _) = model.image.backward(&img_cache, &d_img_raw)?;
    let text = model.text.backward(&txt_cache, &d_txt_raw)?;
    let grads = ModelGrads {
        image,
        text,
        d_t_prime: loss.grads.d_t_prime,
        d_bias: loss.grads.d_bias,
    };
    Ok((loss, grads))
}

/// Trains a model per `cfg` and returns it with the per-step trace.
pub fn train(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let data = generate(&cfg.data)?;
    let (train_set, eval_set) = data.split(cfg.data.n_examples - cfg.eval_examples)?;
    let mut model = init_model(cfg, &train_set)?;
    let schedule = cfg.schedule()?;
    let steps = schedule.total_steps;

    let image_settings = cfg.tower.image_settings();
    let mut state = AdamState::new();
    let mut monitor = GradMonitor::default();
    let mut order_rng = rng_for(cfg.seed, ORDER_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(steps);
    let mut corruption_total = CorruptionReport::default();

    for step in 0..steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let mut batch = train_set.select(&order[cursor..cursor + cfg.batch_size]);
        cursor += cfg.batch_size;
        if !cfg.corruption.is_clean() {
            let spec = CorruptionSpec {
                seed: mix_seed(cfg.corruption.seed ^ cfg.seed, CORRUPT_STREAM, step as u64),
                ..cfg.corruption
            };
            let (corrupted, report) = corrupt(&batch, &spec)?;
            batch = corrupted;
            corruption_total.images_replaced += report.images_replaced;
            corruption_total.texts_replaced += report.texts_replaced;
            corruption_total.pairs_shuffled += report.pairs_shuffled;
        }

        let (loss, grads) = forward_backward(cfg, &model, &batch.images, &batch.tokens, step)?;
        let mut grads = grads.into_groups();
        if image_settings.frozen {
            grads[0].iter_mut().for_each(|g| g.fill(0.0));
        }
        let grad_norm = global_grad_norm(&grads);
        let spike = monitor_update(&mut monitor, grad_norm) == GradStatus::Spike;
        let lr = lr_at(&schedule, step)?;
        trace.push(StepMetrics {
            step,
            lr,
            loss: loss.value,
            grad_norm,
            spike,
            t: model.loss_params.temperature(),
            b: model.loss_params.bias,
            d_bias: loss.grads.d_bias,
            positive_logit_mean: loss.positive_logit_mean,
            negative_logit_mean: loss.negative_logit_mean,
        });
        let mut groups = model.param_groups(image_settings, GroupSettings::default(), LOSS_GROUP_SETTINGS);
        adam_step(&mut state, &mut groups, &grads, lr, &cfg.optim)?;
    }

    Ok(TrainRun {
        model,
        trace,
        eval_set,
        corruption: corruption_total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// Retrieval, zero-shot and calibration observables of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of the two retrieval directions at k = 1.
    pub recall_at_1: f64,
    pub recall_at_1_image_to_text: f64,
    pub recall_at_1_text_to_image: f64,
    pub recall_at_k: Vec<RecallAtK>,
    pub zero_shot_accuracy: f64,
    /// Last logged training loss; zero until [`EvalReport::with_trace`].
    pub final_loss: f64,
    pub final_t: f64,
    pub final_b: f64,
    /// Mean logits of matched and unmatched eval pairs, `t·x·y + b`.
    pub positive_logit_mean: f64,
    pub negative_logit_mean: f64,
    pub grad_spikes: usize,
}

impl EvalReport {
    pub fn with_trace(mut self, trace: &[StepMetrics]) -> Self {
        if let Some(last) = trace.last() {
            self.final_loss = last.loss;
        }
        self.grad_spikes = trace.iter().filter(|m| m.spike).count();
        self
    }
}

/// Fraction of queries whose partner (same index) ranks within the top `k`
/// of their row of `sims`. Ties rank the lower index first.
fn recall(sims: &Matrix, k: usize) -> f64 {
    let n = sims.rows();
    let hits = (0..n)
        .filter(|&i| {
            let target = sims[(i, i)];
            let rank = (0..n)
                .filter(|&j| j != i && (sims[(i, j)] > target || (sims[(i, j)] == target && j < i)))
                .count();
            rank < k
        })
        .count();
    hits as f64 / n as f64
}

/// Evaluates retrieval recall@k in both directions and zero-shot accuracy
/// against mean class-text prototypes.
pub fn evaluate(model: &DualEncoder, eval_set: &PairDataset, k_values: &[usize]) -> Result<EvalReport> {
    let (img, _) = model.image.forward(&eval_set.images)?;
    let (txt, _) = model.text.forward(&eval_set.tokens)?;
    let zimg = l2_normalize_rows(&img)?;
    let ztxt = l2_normalize_rows(&txt)?;
    evaluate_embeddings(&zimg, &ztxt, &eval_set.classes, k_values, &model.loss_params)
}

/// [`evaluate`] on precomputed unit-norm embeddings; row `i` of each side
/// forms a matched pair.
pub fn evaluate_embeddings(
    zimg: &Matrix,
    ztxt: &Matrix,
    classes: &[u32],
    k_values: &[usize],
    params: &LossParams,
) -> Result<EvalReport> {
    if classes.len() != zimg.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} classes for {} images",
            classes.len(),
            zimg.rows()
        )));
    }
    let sims = zimg.matmul_transposed(ztxt)?;
    let sims_t = sims.transpose();
    let recall_at_k: Vec<RecallAtK> = k_values
        .iter()
        .map(|&k| RecallAtK {
            k,
            image_to_text: recall(&sims, k),
            text_to_image: recall(&sims_t, k),
        })
        .collect();
    let r1_i2t = recall(&sims, 1);
    let r1_t2i = recall(&sims_t, 1);
    let zero_shot_accuracy = zero_shot(zimg, ztxt, classes)?;

    let n = sims.rows();
    let t = params.temperature();
    let b = params.bias;
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let logit = t * sims[(i, j)] + b;
            if i == j {
                pos += logit;
            } else {
                neg += logit;
            }
        }
    }
    Ok(EvalReport {
        recall_at_1: 0.5 * (r1_i2t + r1_t2i),
        recall_at_1_image_to_text: r1_i2t,
        recall_at_1_text_to_image: r1_t2i,
        recall_at_k,
        zero_shot_accuracy,
        final_loss: 0.0,
        final_t: t,
        final_b: b,
        positive_logit_mean: pos / n as f64,
        negative_logit_mean: if n > 1 { neg / (n * n - n) as f64 } else { 0.0 },
        grad_spikes: 0,
    })
}

/// Classifies each image by its most similar class prototype, the
/// re-normalized mean text embedding of that class.
pub fn zero_shot(zimg: &Matrix, ztxt: &Matrix, classes: &[u32]) -> Result<f64> {
    let n_classes = classes.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let d = ztxt.cols();
    let mut protos = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (i, &c) in classes.iter().enumerate() {
        counts[c as usize] += 1;
        for (acc, &v) in protos[c as usize].iter_mut().zip(ztxt.row(i)) {
            *acc += v;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
    let rows: Vec<Vec<f64>> = present.iter().map(|&c| protos[c].clone()).collect();
    let protos = l2_normalize_rows(&Matrix::from_rows(&rows)?)?;
    let correct = (0..zimg.rows())
        .filter(|&i| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (p, &c) in present.iter().enumerate() {
                let s = dot(zimg.row(i), protos.row(p));
                if s > best.0 {
                    best = (s, c);
                }
            }
            best.1 == classes[i] as usize
        })
        .count();
    Ok(correct as f64 / zimg.rows() as f64)
}

/// Trains and evaluates in one go.
pub fn run(cfg: &RunConfig) -> Result<(TrainRun, EvalReport)> {
    let out = train(cfg)?;
    let report = evaluate(&out.model, &out.eval_set, &cfg.recall_k)?.with_trace(&out.trace);
    Ok((out, report))
}

/// Which corruption channels a sweep value drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionChannel {
    Image,
    Text,
    Alignment,
    ImageText,
    ImageTextAlignment,
}

impl CorruptionChannel {
    pub const ALL: [CorruptionChannel; 5] = [
        CorruptionChannel::Image,
        CorruptionChannel::Text,
        CorruptionChannel::Alignment,
        CorruptionChannel::ImageText,
        CorruptionChannel::ImageTextAlignment,
    ];

    pub fn spec(self, p: f64, seed: u64) -> CorruptionSpec {
        let (image, text, align) = match self {
            CorruptionChannel::Image => (p, 0.0, 0.0),
            CorruptionChannel::Text => (0.0, p, 0.0),
            CorruptionChannel::Alignment => (0.0, 0.0, p),
            CorruptionChannel::ImageText => (p, p, 0.0),
            CorruptionChannel::ImageTextAlignment => (p, p, p),
        };
        CorruptionSpec {
            image_noise_p: image,
            text_scramble_p: text,
            misalign_p: align,
            seed,
        }
    }
}

impl std::fmt::Display for CorruptionChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorruptionChannel::Image => "image",
            CorruptionChannel::Text => "text",
            CorruptionChannel::Alignment => "alignment",
            CorruptionChannel::ImageText => "image_text",
            CorruptionChannel::ImageTextAlignment => "image_text_alignment",
        })
    }
}

impl std::str::FromStr for CorruptionChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionChannel::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::config("sweep.channel", format!("unknown `{s}`")))
    }
}

/// A masking setting on the mask axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSetting {
    pub strategy: MaskStrategy,
    pub negatives_per_positive: f64,
    pub matched_pairs: bool,
}

impl std::fmt::Display for MaskSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.strategy == MaskStrategy::None {
            return f.write_str("none");
        }
        write!(f, "{}:{}", self.strategy, self.negatives_per_positive)?;
        if self.matched_pairs {
            f.write_str(":matched")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for MaskSetting {
    type Err = Error;

    /// `none`, or `strategy:ratio[:matched]`, e.g. `hard:16:matched`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::config("sweep.values", format!("bad mask setting `{s}`"));
        match parts.as_slice() {
            ["none"] => Ok(MaskSetting {
                strategy: MaskStrategy::None,
                negatives_per_positive: 1.0,
                matched_pairs: false,
            }),
            [strategy, ratio, rest @ ..] if rest.len() <= 1 => {
                let matched_pairs = match rest {
                    [] => false,
                    ["matched"] => true,
                    _ => return Err(bad()),
                };
                Ok(MaskSetting {
                    strategy: strategy.parse()?,
                    negatives_per_positive: ratio.parse().map_err(|_| bad())?,
                    matched_pairs,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// The variable a sweep moves, with its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepAxis {
    BatchSize(Vec<usize>),
    Mask(Vec<MaskSetting>),
    Corruption(CorruptionChannel, Vec<f64>),
    Beta2(Vec<f64>),
    BiasInit(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> String {
        match self {
            SweepAxis::BatchSize(_) => "batch_size".into(),
            SweepAxis::Mask(_) => "mask".into(),
            SweepAxis::Corruption(c, _) => format!("corruption.{c}"),
            SweepAxis::Beta2(_) => "beta2".into(),
            SweepAxis::BiasInit(_) => "bias_init".into(),
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepAxis::BatchSize(v) => v.len(),
            SweepAxis::Mask(v) => v.len(),
            SweepAxis::Corruption(_, v) => v.len(),
            SweepAxis::Beta2(v) => v.len(),
            SweepAxis::BiasInit(v) => v.len(),
        }
    }

    /// Applies value `i` to `cfg`, returning its label.
    fn apply(&self, i: usize, cfg: &mut RunConfig) -> String {
        match self {
            SweepAxis::BatchSize(v) => {
                cfg.batch_size = v[i];
                v[i].to_string()
            }
            SweepAxis::Mask(v) => {
                cfg.mask = MaskSpec {
                    strategy: v[i].strategy,
                    negatives_per_positive: v[i].negatives_per_positive,
                    seed: cfg.mask.seed,
                };
                cfg.matched_pairs = v[i].matched_pairs;
                v[i].to_string()
            }
            SweepAxis::Corruption(channel, v) => {
                cfg.corruption = channel.spec(v[i], cfg.corruption.seed);
                v[i].to_string()
            }
            SweepAxis::Beta2(v) => {
                cfg.optim.beta2 = v[i];
                v[i].to_string()
            }
            SweepAxis::BiasInit(v) => {
                cfg.init.bias = v[i];
                v[i].to_string()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
}

/// One run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: LossKind,
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub steps: usize,
    pub step0_loss: f64,
    pub step0_d_bias: f64,
    pub corruption: CorruptionReport,
    pub report: EvalReport,
}

/// Runs every (loss, axis value, seed) combination. Each seed fixes the
/// corpus and initialization shared by all axis values and losses.
pub fn sweep(base: &RunConfig, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(spec.losses.len() * spec.axis.len() * spec.seeds.len());
    for &loss in &spec.losses {
        for i in 0..spec.axis.len() {
            for &seed in &spec.seeds {
                let mut cfg = base.clone();
                cfg.loss = loss;
                cfg.seed = seed;
                cfg.data.seed = seed;
                let value = spec.axis.apply(i, &mut cfg);
                let (out, report) = run(&cfg)?;
                let first = out.trace.first();
                rows.push(SweepRow {
                    loss,
                    axis: spec.axis.name(),
                    value,
                    seed,
                    steps: out.trace.len(),
                    step0_loss: first.map_or(0.0, |m| m.loss),
                    step0_d_bias: first.map_or(0.0, |m| m.d_bias),
                    corruption: out.corruption,
                    report,
                });
            }
        }
    }
    Ok(rows)
}

/// Mean recall@1 over the rows matching `loss` and `value`.
pub fn mean_recall(rows: &[SweepRow], loss: LossKind, value: &str) -> f64 {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.loss == loss && r.value == value)
        .map(|r| r.report.recall_at_1)
        .collect();
    picked.iter().sum::<f64>() / picked.len().max(1) as f64
}

/// Header of [`sweep_csv`].
pub const SWEEP_CSV_HEADER: &str = "loss,axis,value,seed,steps,step0_loss,step0_d_bias,\
images_replaced,texts_replaced,pairs_shuffled,recall_at_1,recall_at_1_i2t,recall_at_1_t2i,\
zero_shot_accuracy,final_loss,final_t,final_b,positive_logit_mean,negative_logit_mean,grad_spikes";

/// Renders rows as CSV: `.` decimals, shortest round-trip floats, LF endings.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let e = &r.report;
        let fields = [
            r.loss.to_string(),
            r.axis.clone(),
            r.value.clone(),
            r.seed.to_string(),
            r.steps.to_string(),
            r.step0_loss.to_string(),
            r.step0_d_bias.to_string(),
            r.corruption.images_replaced.to_string(),
            r.corruption.texts_replaced.to_string(),
            r.corruption.pairs_shuffled.to_string(),
            e.recall_at_1.to_string(),
            e.recall_at_1_image_to_text.to_string(),
            e.recall_at_1_text_to_image.to_string(),
            e.zero_shot_accuracy.to_string(),
            e.final_loss.to_string(),
            e.final_t.to_string(),
            e.final_b.to_string(),
            e.positive_logit_mean.to_string(),
            e.negative_logit_mean.to_string(),
            e.grad_spikes.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::log_sigmoid;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.n_examples = 320;
        cfg.data.image_dim = 12;
        cfg.data.vocab = 96;
        cfg.data.latent_dim = 4;
        cfg.data.n_classes = 4;
        cfg.eval_examples = 64;
        cfg.model.image_layers = vec![12, 16, 8];
        cfg.model.vocab = 96;
        cfg.model.bottleneck = 4;
        cfg.model.text_width = 8;
        cfg.model.text_hidden = vec![16];
        cfg.batch_size = 16;
        cfg.total_examples_seen = 16 * 20;
        cfg.pretrain_steps = 10;
        cfg
    }

    fn initial_model(cfg: &RunConfig) -> DualEncoder {
        let data = generate(&cfg.data).unwrap();
        let (train_set, _) = data.split(cfg.data.n_examples - cfg.eval_examples).unwrap();
        init_model(cfg, &train_set).unwrap()
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let mut cfg = tiny();
        cfg.total_examples_seen = 0;
        let out = train(&cfg).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.model, initial_model(&cfg));
    }

    #[test]
    fn frozen_image_tower_is_untouched() {
        let mut cfg = tiny();
        cfg.tower = TowerMode::ImageFrozen;
        cfg.total_examples_seen = 16 * 100;
        let before = initial_model(&cfg);
        let out = train(&cfg).unwrap();
        assert_eq!(out.trace.len(), 100);
        for ((_, a), (_, b)) in before.image.tensors().into_iter().zip(out.model.image.tensors()) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
        assert_ne!(before.text, out.model.text);
    }

    #[test]
    fn unlocked_tower_moves_slower() {
        let mut cfg = tiny();
        cfg.tower = TowerMode::ImagePretrainedUnlocked;
        let before = initial_model(&cfg);
        let after = train(&cfg).unwrap().model;
        assert_ne!(before.image, after.image);
        assert_eq!(TowerMode::ImagePretrainedUnlocked.image_settings().lr_multiplier, 0.1);
        assert_eq!(
            TowerMode::ImagePretrainedUnlocked
                .image_settings()
                .weight_decay_multiplier,
            0.0
        );
    }

    #[test]
    fn orthogonal_init_step0_loss() {
        let mut cfg = tiny();
        cfg.batch_size = 32;
        cfg.total_examples_seen = 32;
        cfg.model.disjoint_init = true;
        let out = train(&cfg).unwrap();
        let expected = -log_sigmoid(-10.0) + 31.0 * -log_sigmoid(10.0);
        assert!((out.trace[0].loss - expected).abs() < 1e-12);
        assert!((out.trace[0].loss - (10.0 + 31.0 * 4.54e-5)).abs() < 1e-4);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut cfg = tiny();
        cfg.corruption = CorruptionChannel::ImageTextAlignment.spec(0.3, 7);
        cfg.mask = MaskSpec::new(MaskStrategy::Random, 4.0, 3);
        let (a, ra) = run(&cfg).unwrap();
        let (b, rb) = run(&cfg).unwrap();
        let line = |t: &[StepMetrics]| serde_json::to_string(t).unwrap();
        assert_eq!(line(&a.trace), line(&b.trace));
        assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
        cfg.seed += 1;
        let (c, _) = run(&cfg).unwrap();
        assert_ne!(line(&a.trace), line(&c.trace));
    }

    #[test]
    fn shard_counts_agree() {
        let mut cfg = tiny();
        cfg.total_examples_seen = 16 * 10;
        let mut step0 = Vec::new();
        let mut recalls = Vec::new();
        for shards in [1, 2, 4] {
            cfg.shards = shards;
            let (out, rep) = run(&cfg).unwrap();
            step0.push(out.trace[0].loss);
            recalls.push(rep.recall_at_1);
        }
        for i in 1..3 {
            assert!((step0[i] - step0[0]).abs() <= 1e-10);
            assert!((recalls[i] - recalls[0]).abs() <= 0.01);
        }
    }

    #[test]
    fn matched_pairs_scales_steps() {
        let mut cfg = tiny();
        cfg.batch_size = 32;
        cfg.total_examples_seen = 32 * 64;
        cfg.mask = MaskSpec::new(MaskStrategy::Hard, 16.0, 0);
        assert_eq!(cfg.total_steps().unwrap(), 64);
        cfg.matched_pairs = true;
        // 992 negatives, 512 kept.
        assert_eq!(cfg.masking_ratio().unwrap(), 992.0 / 512.0);
        assert_eq!(cfg.total_steps().unwrap(), 124);
    }

    #[test]
    fn config_errors() {
        let mut cfg = tiny();
        cfg.total_examples_seen = 100;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));

        let mut cfg = tiny();
        cfg.shards = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));

        let mut cfg = tiny();
        cfg.shards = 2;
        cfg.mask = MaskSpec::new(MaskStrategy::Random, 4.0, 0);
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));

        let mut cfg = tiny();
        assert!(matches!(cfg.apply("optim.beta3", "0.5"), Err(Error::Config { .. })));
        assert!(matches!(cfg.apply("batch_size", "many"), Err(Error::Config { .. })));
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = tiny();
        cfg.loss = LossKind::Softmax;
        cfg.optim.grad_clip_norm = Some(2.5);
        cfg.tower = TowerMode::ImagePretrainedUnlocked;
        cfg.recall_k = vec![1, 3];
        let mut back = RunConfig::default();
        for (k, v) in cfg.to_kv() {
            back.apply(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn perfect_embeddings_score_one() {
        let n = 12;
        let classes: Vec<u32> = (0..n as u32).map(|i| i % 3).collect();
        let z = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
        let rep = evaluate_embeddings(&z, &z, &classes, &[1, 5, n], &LossParams::default()).unwrap();
        assert_eq!(rep.recall_at_1, 1.0);
        // Per-instance axes are orthogonal, so class prototypes still win.
        assert_eq!(rep.zero_shot_accuracy, 1.0);
        assert!(rep
            .recall_at_k
            .iter()
            .all(|r| r.image_to_text == 1.0 && r.text_to_image == 1.0));
    }

    #[test]
    fn recall_ties_and_monotonicity() {
        // Identical embeddings everywhere: row i ranks below every j < i.
        let z = Matrix::filled(5, 2, std::f64::consts::FRAC_1_SQRT_2);
        let classes = vec![0; 5];
        let rep = evaluate_embeddings(&z, &z, &classes, &[1, 2, 5], &LossParams::default()).unwrap();
        assert_eq!(rep.recall_at_k[0].image_to_text, 0.2);
        assert_eq!(rep.recall_at_k[1].image_to_text, 0.4);
        assert_eq!(rep.recall_at_k[2].image_to_text, 1.0);
    }

    #[test]
    fn untrained_zero_shot_is_chance() {
        let mut accs = Vec::new();
        for seed in 0..10 {
            let mut cfg = tiny();
            cfg.seed = seed;
            cfg.data.seed = seed;
            cfg.data.n_classes = 4;
            cfg.total_examples_seen = 0;
            let (_, rep) = run(&cfg).unwrap();
            accs.push(rep.zero_shot_accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let sigma = (0.25f64 * 0.75 / (64.0 * 10.0)).sqrt();
        assert!((mean - 0.25).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn recall_k_nondecreasing_after_training() {
        let mut cfg = tiny();
        cfg.recall_k = vec![1, 2, 5, 10, 64];
        let (_, rep) = run(&cfg).unwrap();
        for w in rep.recall_at_k.windows(2) {
            assert!(w[0].image_to_text <= w[1].image_to_text);
            assert!(w[0].text_to_image <= w[1].text_to_image);
        }
        assert_eq!(rep.recall_at_k.last().unwrap().image_to_text, 1.0);
        assert!((0.0..=1.0).contains(&rep.recall_at_1));
    }

    #[test]
    fn bias_init_sweep_shrinks_step0_gradient() {
        let mut cfg = tiny();
        cfg.total_examples_seen = 16;
        cfg.model.disjoint_init = true;
        let spec = SweepSpec {
            axis: SweepAxis::BiasInit(vec![-10.0, 0.0]),
            losses: vec![LossKind::Sigmoid],
            seeds: vec![0, 1],
        };
        let rows = sweep(&cfg, &spec).unwrap();
        for seed in [0, 1] {
            let g = |v: &str| {
                rows.iter()
                    .find(|r| r.seed == seed && r.value == v)
                    .unwrap()
                    .step0_d_bias
                    .abs()
            };
            assert!(g("-10") < g("0") / 5.0);
        }
    }

    #[test]
    fn sweep_bookkeeping() {
        let mut cfg = tiny();
        cfg.total_examples_seen = 256;
        let spec = SweepSpec {
            axis: SweepAxis::BatchSize(vec![16, 32, 64]),
            losses: vec![LossKind::Sigmoid, LossKind::Softmax],
            seeds: (0..5).collect(),
        };
        let rows = sweep(&cfg, &spec).unwrap();
        assert_eq!(rows.len(), 30);
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 31);
        let width = SWEEP_CSV_HEADER.split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == width));
        assert!(rows.iter().all(|r| r.steps == 256 / r.value.parse::<usize>().unwrap()));
    }

    #[test]
    fn mask_setting_parses() {
        let m: MaskSetting = "hard:16:matched".parse().unwrap();
        assert_eq!(m.strategy, MaskStrategy::Hard);
        assert_eq!(m.negatives_per_positive, 16.0);
        assert!(m.matched_pairs);
        assert_eq!(m.to_string(), "hard:16:matched");
        assert!("hard".parse::<MaskSetting>().is_err());
        assert!("hard:x".parse::<MaskSetting>().is_err());
    }
}
