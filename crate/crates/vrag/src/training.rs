//! Optimizer, the joint training loop, and decoder-only finetuning.
//!
//! Training maximizes the configured objective by gradient ascent, run as
//! descent on its negation with decoupled weight decay. The document
//! encoder stays frozen throughout: its parameters receive no gradient and
//! are never handed to the optimizer, and the index built from it at the
//! start is reused verbatim for every retrieval.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::corpus::{encode_instance, Budgets, Corpus, DocTable, DocumentRecord, InstanceEncoding, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{retrieval_metrics, RetrievalMetrics, Retriever};
use crate::index::DocumentIndex;
use crate::models::{init_bundle, Dims, GradSet, ModelBundle, ParamKey};
use crate::numerics::Tensor;
use crate::objectives::{
    elbo_with_grads, rag_objective, rag_objective_with_grads, ModelContext, Objective,
};

// Distinct salts keep the shuffle streams decorrelated from the parameter
// init, which consumes the raw seed.
const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const FINETUNE_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// Adam with decoupled weight decay. Moments are kept per parameter and
/// bias-corrected; decay multiplies the parameter directly instead of
/// entering the gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    learning_rate: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    first_moment: BTreeMap<ParamKey, Tensor>,
    second_moment: BTreeMap<ParamKey, Tensor>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate <= 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                learning_rate
            )));
        }
        if !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::invalid(format!(
                "weight decay must be non-negative, got {}",
                weight_decay
            )));
        }
        Ok(AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        })
    }

    /// One update over the listed parameters from loss gradients. Every
    /// listed key must be present in `grads`; one call is one step.
    pub fn apply(
        &mut self,
        bundle: &mut ModelBundle,
        grads: &GradSet,
        keys: &[ParamKey],
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for &key in keys {
            let grad = grads
                .get(key)
                .ok_or_else(|| Error::invalid(format!("no gradient for {:?}", key)))?;
            let param = bundle.param_mut(key);
            if !param.same_shape(grad) {
                return Err(Error::shape(format!(
                    "gradient shape {:?} does not match {:?} shape {:?}",
                    grad.shape(),
                    key,
                    param.shape()
                )));
            }
            let m = self
                .first_moment
                .entry(key)
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .second_moment
                .entry(key)
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let moments = m.values_mut().iter_mut().zip(v.values_mut().iter_mut());
            for ((theta, &g), (m, v)) in param
                .values_mut()
                .iter_mut()
                .zip(grad.values())
                .zip(moments)
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= self.learning_rate
                    * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * *theta);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Retrieval truncation used by both objectives.
    pub k: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Vrag,
            k: 5,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            max_epochs: 10,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        Ok(())
    }
}

/// A corpus readied for training: one vocabulary, encoded splits, and the
/// decoder-side document bodies. The vocabulary is built from documents
/// and the training split only, so validation and test words outside it
/// map to the unknown token.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub vocab: Vocabulary,
    pub budgets: Budgets,
    pub documents: Vec<DocumentRecord>,
    pub docs: DocTable,
    pub train: Vec<InstanceEncoding>,
    pub val: Vec<InstanceEncoding>,
    pub test: Vec<InstanceEncoding>,
}

impl TrainingData {
    pub fn prepare(corpus: &Corpus, budgets: Budgets, min_count: usize) -> Result<Self> {
        if corpus.documents.is_empty() {
            return Err(Error::invalid("corpus has no documents"));
        }
        let doc_tokens = corpus
            .documents
            .iter()
            .flat_map(|d| d.tokens.iter().map(String::as_str));
        let train_tokens = corpus.train.iter().flat_map(|inst| {
            inst.turns
                .iter()
                .flat_map(|t| t.tokens.iter().map(String::as_str))
                .chain(inst.response_tokens.iter().map(String::as_str))
        });
        let vocab = Vocabulary::build(doc_tokens.chain(train_tokens), min_count);
        let docs = DocTable::build(&corpus.documents, &vocab, &budgets)?;
        let encode = |split: &[crate::corpus::DialogInstance]| {
            split
                .iter()
                .map(|inst| encode_instance(inst, &vocab, &budgets))
                .collect()
        };
        Ok(TrainingData {
            train: encode(&corpus.train),
            val: encode(&corpus.val),
            test: encode(&corpus.test),
            docs,
            documents: corpus.documents.clone(),
            vocab,
            budgets,
        })
    }
}

/// Which loop produced a log row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Joint,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Joint => "joint",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based within its phase.
    pub epoch: usize,
    pub phase: Phase,
    /// Mean negated objective over the epoch's training instances.
    pub loss: f64,
    pub train_prior: RetrievalMetrics,
    pub val_prior: RetrievalMetrics,
    /// Populated only when the objective trains a posterior retriever.
    pub train_posterior: Option<RetrievalMetrics>,
    pub val_posterior: Option<RetrievalMetrics>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn append(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }

    /// One row per epoch. The phase column appears only when finetune rows
    /// are present.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let with_phase = self.records.iter().any(|r| r.phase == Phase::Finetune);
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(e.to_string()))?;
        let io_err = |e: csv::Error| Error::invalid(e.to_string());
        let mut header = vec![
            "epoch",
            "loss",
            "train_prior_r1",
            "train_post_r1",
            "val_prior_r1",
            "val_post_r1",
            "seconds",
        ];
        if with_phase {
            header.push("phase");
        }
        w.write_record(&header).map_err(io_err)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.loss.to_string(),
                r.train_prior.r_at_1.to_string(),
                r.train_posterior
                    .map(|m| m.r_at_1.to_string())
                    .unwrap_or_default(),
                r.val_prior.r_at_1.to_string(),
                r.val_posterior
                    .map(|m| m.r_at_1.to_string())
                    .unwrap_or_default(),
                r.seconds.to_string(),
            ];
            if with_phase {
                row.push(r.phase.to_string());
            }
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch, not the last one.
    pub bundle: ModelBundle,
    pub index: DocumentIndex,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_r1: f64,
}

fn objective_grads(
    ctx: &ModelContext,
    enc: &InstanceEncoding,
    config: &TrainConfig,
) -> Result<(f64, GradSet)> {
    match config.objective {
        Objective::Rag => rag_objective_with_grads(ctx, enc, config.k),
        Objective::Vrag => {
            let (breakdown, grads) = elbo_with_grads(ctx, enc, config.k)?;
            Ok((breakdown.elbo, grads))
        }
    }
}

/// Trains a fresh model on the prepared data. Stops early once validation
/// recall@1 of the context retriever has gone `patience` epochs without a
/// strict improvement, and returns the parameters of the best epoch.
pub fn train(data: &TrainingData, dims: Dims, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if dims.vocab != data.vocab.len() {
        return Err(Error::config(format!(
            "dims.vocab is {} but the vocabulary has {} entries",
            dims.vocab,
            data.vocab.len()
        )));
    }
    if data.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if data.val.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }

    let mut bundle = init_bundle(dims, seed)?;
    let index = bundle.build_index(&data.documents, &data.vocab, &data.budgets)?;
    let keys = config.objective.trainable_keys();
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);

    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ModelBundle)> = None;
    let mut stall = 0usize;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut acc = GradSet::new();
            for &i in chunk {
                let ctx = ModelContext::new(&bundle, &index, &data.docs);
                let (value, grads) = objective_grads(&ctx, &data.train[i], config)?;
                loss_sum -= value;
                // Ascent on the objective as descent on its mean negation.
                acc.add_scaled(&grads, -1.0 / chunk.len() as f64);
            }
            optimizer.apply(&mut bundle, &acc, &keys)?;
        }

        let ctx = ModelContext::new(&bundle, &index, &data.docs);
        let train_prior = retrieval_metrics(&ctx, &data.train, Retriever::Prior)?;
        let val_prior = retrieval_metrics(&ctx, &data.val, Retriever::Prior)?;
        let (train_posterior, val_posterior) = match config.objective {
            Objective::Vrag => (
                Some(retrieval_metrics(&ctx, &data.train, Retriever::Posterior)?),
                Some(retrieval_metrics(&ctx, &data.val, Retriever::Posterior)?),
            ),
            Objective::Rag => (None, None),
        };
        let monitor = val_prior.r_at_1;
        log.records.push(EpochRecord {
            epoch,
            phase: Phase::Joint,
            loss: loss_sum / data.train.len() as f64,
            train_prior,
            val_prior,
            train_posterior,
            val_posterior,
            seconds: started.elapsed().as_secs_f64(),
        });

        if best.as_ref().is_none_or(|(b, _, _)| monitor > *b) {
            best = Some((monitor, epoch, bundle.clone()));
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience.max(1) {
                break;
            }
        }
    }

    let (best_val_r1, best_epoch, bundle) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        bundle,
        index,
        log,
        best_epoch,
        best_val_r1,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub bundle: ModelBundle,
    pub log: TrainLog,
    /// Validation marginal objective before any finetune step.
    pub pre_value: f64,
    pub best_value: f64,
    /// 0 means no finetune epoch beat the starting parameters.
    pub best_epoch: usize,
}

/// Decoder-only refinement of a trained model against the marginal
/// objective, with the retrievers and index untouched. Monitored by the
/// validation objective itself; the starting parameters compete as the
/// epoch-0 candidate, so the returned bundle is never worse than the
/// input under that monitor.
pub fn finetune_decoder(
    data: &TrainingData,
    bundle: &ModelBundle,
    index: &DocumentIndex,
    config: &TrainConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if data.val.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }

    let monitor = |b: &ModelBundle| -> Result<f64> {
        let ctx = ModelContext::new(b, index, &data.docs);
        let mut sum = 0.0;
        for enc in &data.val {
            sum += rag_objective(&ctx, enc, config.k)?;
        }
        Ok(sum / data.val.len() as f64)
    };

    let mut current = bundle.clone();
    let pre_value = monitor(&current)?;
    let mut best = (pre_value, 0usize, current.clone());
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ FINETUNE_SALT);
    let mut stall = 0usize;
    let mut log = TrainLog::default();

    // Decoder updates cannot move any retrieval score, so the retrieval
    // metrics of every finetune epoch equal these.
    let start_ctx = ModelContext::new(&current, index, &data.docs);
    let train_prior = retrieval_metrics(&start_ctx, &data.train, Retriever::Prior)?;
    let val_prior = retrieval_metrics(&start_ctx, &data.val, Retriever::Prior)?;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut acc = GradSet::new();
            for &i in chunk {
                let ctx = ModelContext::new(&current, index, &data.docs);
                let (value, grads) = rag_objective_with_grads(&ctx, &data.train[i], config.k)?;
                loss_sum -= value;
                acc.add_scaled(&grads, -1.0 / chunk.len() as f64);
            }
            optimizer.apply(&mut current, &acc, &ParamKey::DECODER)?;
        }

        let value = monitor(&current)?;
        log.records.push(EpochRecord {
            epoch,
            phase: Phase::Finetune,
            loss: loss_sum / data.train.len() as f64,
            train_prior,
            val_prior,
            train_posterior: None,
            val_posterior: None,
            seconds: started.elapsed().as_secs_f64(),
        });

        if value > best.0 {
            best = (value, epoch, current.clone());
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience.max(1) {
                break;
            }
        }
    }

    let (best_value, best_epoch, bundle) = best;
    Ok(FinetuneOutcome {
        bundle,
        log,
        pre_value,
        best_value,
        best_epoch,
    })
}
