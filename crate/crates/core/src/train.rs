//! Training: Nadam updates on clipped, batch-averaged gradients, variational
//! dropout, learning-rate halving on stalled loss, and selection of the
//! epoch with the best validation F1.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Corpus;
use crate::decoder::{decode, DecoderConfig};
use crate::embeddings::{assemble_inputs, CharVocab, ContextualStore, EmbeddingError, EmbeddingTable, InputBundle};
use crate::eval::{triplet_prf, Metrics, TripletMap};
use crate::net::{Dims, DropoutMasks, ModelParams, NetError, Tagger};
use crate::scheme::{Sentence, Tag, TagSequence, NUM_TAGS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("epoch {epoch}: training loss is not finite")]
    NonFiniteLoss { epoch: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lstm_hidden: usize,
    pub heads: usize,
    pub head_size: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub kernel: usize,
    pub dropout_rate: f64,
    pub clip_threshold: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub anneal_patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lstm_hidden: 100,
            heads: 3,
            head_size: 8,
            char_dim: 30,
            char_filters: 30,
            kernel: 3,
            dropout_rate: 0.5,
            clip_threshold: 1.0,
            learning_rate: 0.0075,
            batch_size: 16,
            max_epochs: 200,
            anneal_patience: 5,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self, word_dim: usize, ctx_dim: usize) -> Dims {
        Dims {
            word_dim,
            ctx_dim,
            char_dim: self.char_dim,
            char_filters: self.char_filters,
            kernel: self.kernel,
            lstm_hidden: self.lstm_hidden,
            heads: self.heads,
            head_size: self.head_size,
            n_tags: NUM_TAGS,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("lstm_hidden", self.lstm_hidden),
            ("heads", self.heads),
            ("head_size", self.head_size),
            ("char_dim", self.char_dim),
            ("char_filters", self.char_filters),
            ("kernel", self.kernel),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err("kernel must be odd".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err("dropout_rate must lie in [0, 1)".into());
        }
        if !(self.clip_threshold > 0.0 && self.learning_rate > 0.0) {
            return Err("clip_threshold and learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err("validation_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
        }
        match key {
            "lstm_hidden" => self.lstm_hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "head_size" => self.head_size = parse(key, value)?,
            "char_dim" => self.char_dim = parse(key, value)?,
            "char_filters" => self.char_filters = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "clip_threshold" => self.clip_threshold = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "anneal_patience" => self.anneal_patience = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Reads `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut config = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| TrainError::Config { line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            config.set(key.trim(), value.trim()).map_err(err)?;
        }
        config.validate().map_err(|message| TrainError::Config { line: 0, message })?;
        Ok(config)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lstm_hidden = {}", self.lstm_hidden)?;
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "head_size = {}", self.head_size)?;
        writeln!(f, "char_dim = {}", self.char_dim)?;
        writeln!(f, "char_filters = {}", self.char_filters)?;
        writeln!(f, "kernel = {}", self.kernel)?;
        writeln!(f, "dropout_rate = {}", self.dropout_rate)?;
        writeln!(f, "clip_threshold = {}", self.clip_threshold)?;
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "max_epochs = {}", self.max_epochs)?;
        writeln!(f, "anneal_patience = {}", self.anneal_patience)?;
        writeln!(f, "validation_fraction = {}", self.validation_fraction)?;
        writeln!(f, "seed = {}", self.seed)
    }
}

/// Scales all gradients by `threshold / norm` when their global L2 norm
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ModelParams, threshold: f64) -> f64 {
    let norm = grads.norm();
    if norm > threshold {
        grads.scale(threshold / norm);
    }
    norm
}

/// Nesterov-accelerated Adam with the warming momentum schedule
/// `mu_t = beta1 * (1 - 0.5 * 0.96^(t * decay))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Nadam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule_decay: f64,
    pub step: u64,
    m_schedule: f64,
    m: ModelParams,
    v: ModelParams,
}

impl Nadam {
    pub fn new(params: &ModelParams) -> Self {
        Nadam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule_decay: 0.004,
            step: 0,
            m_schedule: 1.0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    fn momentum(&self, t: f64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t * self.schedule_decay))
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let mu_t = self.momentum(t);
        let mu_next = self.momentum(t + 1.0);
        self.m_schedule *= mu_t;
        let schedule_next = self.m_schedule * mu_next;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let bias2 = 1.0 - b2.powf(t);
        let schedule_now = self.m_schedule;

        let tensors =
            params.tensors_mut().into_iter().zip(grads.tensors()).zip(self.m.tensors_mut()).zip(self.v.tensors_mut());
        for (((p, (_, g)), m), v) in tensors {
            for j in 0..p.len() {
                let g = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let g_hat = g / (1.0 - schedule_now);
                let m_hat = m[j] / (1.0 - schedule_next);
                let v_hat = v[j] / bias2;
                let m_bar = (1.0 - mu_t) * g_hat + mu_next * m_hat;
                p[j] -= lr * m_bar / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Inverted dropout factors: each entry is `1 / (1 - rate)` with
/// probability `1 - rate`, else 0. All ones when `rate` is 0.
pub fn variational_dropout_mask<R: Rng>(width: usize, rate: f64, rng: &mut R) -> Array1<f64> {
    if rate <= 0.0 {
        return Array1::ones(width);
    }
    let keep = 1.0 - rate;
    Array1::from_shape_simple_fn(width, || if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
}

/// Halves the learning rate once the epoch loss has failed to drop below
/// its best value for more than `patience` epochs in a row.
#[derive(Debug, Clone, PartialEq)]
pub struct Annealer {
    pub lr: f64,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl Annealer {
    pub fn new(lr: f64, patience: usize) -> Self {
        Annealer { lr, patience, best: f64::INFINITY, stale: 0 }
    }

    pub fn observe(&mut self, epoch_loss: f64) -> f64 {
        if epoch_loss < self.best {
            self.best = epoch_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                self.lr /= 2.0;
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// One sentence ready for the network.
#[derive(Debug, Clone)]
pub struct Example {
    pub sentence: Sentence,
    pub bundle: InputBundle,
    pub gold: Vec<usize>,
}

pub fn prepare(
    corpus: &Corpus,
    words: &EmbeddingTable,
    chars: &CharVocab,
    context: Option<&ContextualStore>,
    ctx_dim: usize,
) -> Result<Vec<Example>, TrainError> {
    corpus
        .iter()
        .map(|a| {
            Ok(Example {
                sentence: a.sentence.clone(),
                bundle: assemble_inputs(&a.sentence, words, chars, context, ctx_dim)?,
                gold: a.tags.tags().iter().map(|t| t.index()).collect(),
            })
        })
        .collect()
}

pub fn indices_to_tags(indices: &[usize]) -> TagSequence {
    TagSequence(indices.iter().map(|&i| Tag::from_index(i).unwrap_or(Tag::O)).collect())
}

/// Triplet P/R/F of the tagger's predictions. Predicted sequences go through
/// the repairing decoder; gold ones through the default decoder.
pub fn evaluate(tagger: &Tagger, examples: &[Example]) -> Result<Metrics, TrainError> {
    let repair = DecoderConfig { repair: true, ..DecoderConfig::default() };
    let strict = DecoderConfig::default();
    let mut gold = TripletMap::new();
    let mut pred = TripletMap::new();
    for ex in examples {
        let id = ex.sentence.id;
        let tags = indices_to_tags(&tagger.predict(&ex.bundle)?);
        pred.insert(id, decode(&ex.sentence, &tags, &repair).map(|d| d.triplets).unwrap_or_default());
        gold.insert(
            id,
            decode(&ex.sentence, &indices_to_tags(&ex.gold), &strict).map(|d| d.triplets).unwrap_or_default(),
        );
    }
    Ok(triplet_prf(&gold, &pred).expect("both maps share ids"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val: Metrics,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{}\t{:.4}\t{:.4}\t{:.4}",
            self.epoch, self.loss, self.lr, self.val.precision, self.val.recall, self.val.f1
        )
    }
}

pub const LOG_HEADER: &str = "epoch\tloss\tlr\tvalP\tvalR\tvalF";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the initial ones when no
    /// epoch ran).
    pub tagger: Tagger,
    pub log: Vec<EpochRecord>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_f1: f64,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }
}

fn sample_masks<R: Rng>(dims: &Dims, rate: f64, rng: &mut R) -> Option<DropoutMasks> {
    (rate > 0.0).then(|| DropoutMasks {
        input: variational_dropout_mask(dims.input_width(), rate, rng),
        hidden: variational_dropout_mask(dims.hidden_width(), rate, rng),
    })
}

/// Trains from a fresh initialisation. `on_epoch` sees every record as it
/// is produced.
pub fn train(
    initial: Tagger,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(|message| TrainError::Config { line: 0, message })?;
    let mut tagger = initial;
    let mut optimizer = Nadam::new(&tagger.params);
    let mut annealer = Annealer::new(config.learning_rate, config.anneal_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a11);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut outcome =
        TrainOutcome { tagger: tagger.clone(), log: Vec::new(), best_epoch: 0, best_f1: f64::NEG_INFINITY };

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let lr = annealer.lr;
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = tagger.params.zeros_like();
            for &i in batch {
                let ex = &train_set[i];
                let masks = sample_masks(&tagger.dims, config.dropout_rate, &mut rng);
                let (loss, g) = tagger.loss_and_grad(&ex.bundle, &ex.gold, masks.as_ref())?;
                total += loss;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            clip_gradients(&mut grads, config.clip_threshold);
            optimizer.update(&mut tagger.params, &grads, lr);
        }
        let loss = total / train_set.len().max(1) as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let val = evaluate(&tagger, val_set)?;
        let record = EpochRecord { epoch, loss, lr, val };
        on_epoch(&record);
        if val.f1 > outcome.best_f1 {
            outcome.best_f1 = val.f1;
            outcome.best_epoch = epoch;
            outcome.tagger = tagger.clone();
        }
        outcome.log.push(record);
        annealer.observe(loss);
    }
    if outcome.log.is_empty() {
        outcome.best_f1 = 0.0;
    }
    Ok(outcome)
}
