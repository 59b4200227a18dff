//! Experiment plumbing: the config file schema, run-directory layout, and
//! the commands the CLI dispatches to.
//!
//! Every artifact of a (config, seed) pair lands in one run directory named
//! `<hash>-seed<seed>`, where the hash digests the resolved config with the
//! seed list and output root blanked out, so reruns and seed sweeps of the
//! same experiment share a prefix. Timestamps only ever appear in the
//! per-command `meta_*.json` files; every other artifact is a pure function
//! of config plus seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{generate_synthetic, load_dataset, Budgets, SyntheticSpec, Vocabulary};
use crate::decoding::{DecodeConfig, DecodeStrategy};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, memorization_study, topk_ablation, write_ablation_csv, write_json,
    write_memorization_csv, AblationCell, EvalReport, MemorizationRow,
};
use crate::models::{load_checkpoint, save_checkpoint, Dims};
use crate::objectives::{delta_for_epsilon, exact_kl, truncated_kl_delta, ModelContext, Objective};
use crate::training::{finetune_decoder, train, TrainConfig, TrainingData};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";

/// Grid and budget for the randomized KL truncation check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlCheckConfig {
    pub trials: usize,
    pub support_sizes: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub seed: u64,
}

impl Default for KlCheckConfig {
    fn default() -> Self {
        KlCheckConfig {
            trials: 1000,
            support_sizes: vec![10, 100, 1000],
            epsilons: vec![0.5, 0.1, 0.01],
            seed: 0,
        }
    }
}

/// One experiment, fully resolved. Unknown JSON keys are rejected so typos
/// fail loudly instead of silently running defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Directory holding documents.jsonl and {train,val,test}.jsonl;
    /// generate-data writes here, everything else reads.
    pub data_dir: PathBuf,
    /// Root under which run directories are created.
    pub out_dir: PathBuf,
    /// Corpus recipe used by generate-data.
    pub synthetic: Option<SyntheticSpec>,
    pub retrieval_dim: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Minimum token count for a vocabulary entry.
    pub vocab_min_count: usize,
    pub budgets: Budgets,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// One independent run per seed.
    pub seeds: Vec<u64>,
    /// Run decoder-only refinement after joint training.
    pub finetune: bool,
    /// Decode strategies evaluated and studied.
    pub strategies: Vec<DecodeStrategy>,
    /// k values swept by the top-k ablation study.
    pub ablation_ks: Vec<usize>,
    /// Objectives swept by the top-k ablation study.
    pub ablation_objectives: Vec<Objective>,
    pub klcheck: KlCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            synthetic: Some(SyntheticSpec::default()),
            retrieval_dim: 32,
            embedding_dim: 32,
            hidden_dim: 64,
            vocab_min_count: 1,
            budgets: Budgets::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            seeds: vec![0],
            finetune: false,
            strategies: vec![DecodeStrategy::Top1, DecodeStrategy::TopK],
            ablation_ks: vec![1, 3, 5],
            ablation_objectives: vec![Objective::Vrag],
            klcheck: KlCheckConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub objective: Option<Objective>,
    pub k: Option<usize>,
    pub finetune: bool,
    pub strategy: Option<DecodeStrategy>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let body = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {}", path.display(), e)))?;
    serde_json::from_str(&body)
        .map_err(|e| Error::config(format!("{}: {}", path.display(), e)))
}

impl ExperimentConfig {
    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(objective) = o.objective {
            self.train.objective = objective;
        }
        if let Some(k) = o.k {
            self.train.k = k;
            self.decode.k = k;
        }
        if o.finetune {
            self.finetune = true;
        }
        if let Some(strategy) = o.strategy {
            self.strategies = vec![strategy];
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieval_dim == 0 || self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("model dims must all be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("at least one decode strategy is required"));
        }
        self.train.validate()?;
        self.decode.validate()
    }

    /// Digest of the experiment content: seed sweep and output root are
    /// blanked so they never move a run to a new name.
    pub fn config_hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.seeds = Vec::new();
        hashed.out_dir = PathBuf::new();
        let body = serde_json::to_string(&hashed).expect("config always serializes");
        let digest = Sha256::digest(body.as_bytes());
        digest[..4].iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("{}-seed{}", self.config_hash(), seed))
    }

    /// Directory for seed-independent study artifacts.
    pub fn study_dir(&self, study: &str) -> PathBuf {
        self.out_dir.join(format!("{}-{}", self.config_hash(), study))
    }

    fn dims_for(&self, data: &TrainingData) -> Dims {
        Dims {
            vocab: data.vocab.len(),
            retrieval: self.retrieval_dim,
            embedding: self.embedding_dim,
            hidden: self.hidden_dim,
        }
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    config_hash: String,
    seed: Option<u64>,
    /// The only timestamp any artifact carries.
    created_unix_seconds: u64,
}

fn write_meta(dir: &Path, command: &str, cfg: &ExperimentConfig, seed: Option<u64>) -> Result<()> {
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = Meta {
        command,
        config_hash: cfg.config_hash(),
        seed,
        created_unix_seconds: created,
    };
    let name = format!("meta_{}.json", command.replace('-', "_"));
    write_json(&dir.join(name), &meta)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_prepared(cfg: &ExperimentConfig) -> Result<TrainingData> {
    let (corpus, _report) = load_dataset(&cfg.data_dir)?;
    TrainingData::prepare(&corpus, cfg.budgets, cfg.vocab_min_count)
}

fn check_vocab_match(checkpoint: &Vocabulary, dataset: &Vocabulary) -> Result<()> {
    let same = checkpoint.len() == dataset.len()
        && (0..checkpoint.len()).all(|id| checkpoint.token(id) == dataset.token(id));
    if !same {
        return Err(Error::config(
            "checkpoint vocabulary does not match the dataset; \
             was the model trained on different data?",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub data_dir: PathBuf,
    pub documents: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Writes the synthetic corpus described by the config. Rerunning with the
/// same spec produces byte-identical files.
pub fn cmd_generate_data(cfg: &ExperimentConfig) -> Result<GenerateSummary> {
    cfg.validate()?;
    let spec = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::config("generate-data needs a synthetic spec in the config"))?;
    let corpus = generate_synthetic(spec)?;
    ensure_dir(&cfg.data_dir)?;
    corpus.save(&cfg.data_dir)?;
    write_meta(&cfg.data_dir, "generate-data", cfg, None)?;
    Ok(GenerateSummary {
        data_dir: cfg.data_dir.clone(),
        documents: corpus.documents.len(),
        train: corpus.train.len(),
        val: corpus.val.len(),
        test: corpus.test.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_r1: f64,
    pub finetuned: bool,
}

/// Trains one model per configured seed and writes a checkpoint plus the
/// epoch log under each seed's run directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    let data = load_prepared(cfg)?;
    let dims = cfg.dims_for(&data);
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = train(&data, dims, &cfg.train, seed)?;
        let mut bundle = outcome.bundle;
        let mut log = outcome.log;
        if cfg.finetune {
            let tuned = finetune_decoder(&data, &bundle, &outcome.index, &cfg.train, seed)?;
            bundle = tuned.bundle;
            log.append(tuned.log);
        }

        let run_dir = cfg.run_dir(seed);
        ensure_dir(&run_dir)?;
        save_checkpoint(&run_dir.join(CHECKPOINT_FILE), &bundle, &data.vocab)?;
        log.write_csv(&run_dir.join("train_log.csv"))?;
        write_meta(&run_dir, "train", cfg, Some(seed))?;
        summaries.push(TrainSummary {
            seed,
            run_dir,
            epochs: log.records.len(),
            best_epoch: outcome.best_epoch,
            best_val_r1: outcome.best_val_r1,
            finetuned: cfg.finetune,
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateSummary {
    pub seed: u64,
    pub metrics_path: PathBuf,
    pub report: EvalReport,
}

/// Evaluates each seed's checkpoint on the test split and writes the
/// report as JSON and CSV into the run directory.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<Vec<EvaluateSummary>> {
    cfg.validate()?;
    let data = load_prepared(cfg)?;
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let run_dir = cfg.run_dir(seed);
        let (bundle, vocab) = load_trained(&run_dir)?;
        check_vocab_match(&vocab, &data.vocab)?;
        let index = bundle.build_index(&data.documents, &data.vocab, &data.budgets)?;
        let ctx = ModelContext::new(&bundle, &index, &data.docs);
        let report = evaluate(&ctx, &data.vocab, &data.test, &cfg.strategies, &cfg.decode)?;

        let metrics_path = run_dir.join(METRICS_FILE);
        write_json(&metrics_path, &report)?;
        report.write_csv(&run_dir.join("metrics.csv"))?;
        write_meta(&run_dir, "evaluate", cfg, Some(seed))?;
        summaries.push(EvaluateSummary {
            seed,
            metrics_path,
            report,
        });
    }
    Ok(summaries)
}

fn load_trained(run_dir: &Path) -> Result<(crate::models::ModelBundle, Vocabulary)> {
    let path = run_dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(Error::config(format!(
            "no checkpoint at {}; run train first",
            path.display()
        )));
    }
    load_checkpoint(&path)
}

#[derive(Debug, Clone, Serialize)]
pub struct MemorizationSummary {
    pub seed: u64,
    pub report_path: PathBuf,
    pub rows: Vec<MemorizationRow>,
}

/// Runs the gold-document-removal study against each seed's checkpoint.
pub fn cmd_study_memorization(cfg: &ExperimentConfig) -> Result<Vec<MemorizationSummary>> {
    cfg.validate()?;
    let data = load_prepared(cfg)?;
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let run_dir = cfg.run_dir(seed);
        let (bundle, vocab) = load_trained(&run_dir)?;
        check_vocab_match(&vocab, &data.vocab)?;
        let index = bundle.build_index(&data.documents, &data.vocab, &data.budgets)?;
        let rows = memorization_study(&bundle, &index, &data.docs, &data.vocab, &data.test, &cfg.decode)?;

        let report_path = run_dir.join("memorization.json");
        write_json(&report_path, &rows)?;
        write_memorization_csv(&run_dir.join("memorization.csv"), &rows)?;
        write_meta(&run_dir, "study-memorization", cfg, Some(seed))?;
        summaries.push(MemorizationSummary {
            seed,
            report_path,
            rows,
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    pub study_dir: PathBuf,
    pub cells: Vec<AblationCell>,
}

/// Trains fresh models across the configured (objective, k, seed) grid and
/// writes the retrieval table.
pub fn cmd_study_topk(cfg: &ExperimentConfig) -> Result<AblationSummary> {
    cfg.validate()?;
    let data = load_prepared(cfg)?;
    let dims = cfg.dims_for(&data);
    let cells = topk_ablation(
        &data,
        dims,
        &cfg.train,
        &cfg.ablation_objectives,
        &cfg.ablation_ks,
        &cfg.seeds,
    )?;

    let study_dir = cfg.study_dir("ablation");
    ensure_dir(&study_dir)?;
    write_json(&study_dir.join("ablation.json"), &cells)?;
    write_ablation_csv(&study_dir.join("ablation.csv"), &cells)?;
    write_meta(&study_dir, "study-topk", cfg, None)?;
    Ok(AblationSummary { study_dir, cells })
}

#[derive(Debug, Clone, Serialize)]
pub struct KlCheckCell {
    pub support: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub trials: usize,
    pub violations: usize,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KlCheckReport {
    pub forced_delta: Option<f64>,
    pub cells: Vec<KlCheckCell>,
    pub total_violations: usize,
}

impl KlCheckReport {
    /// Error (exit code 4 in the CLI) when any trial broke the bound.
    pub fn check(&self) -> Result<()> {
        if self.total_violations > 0 {
            return Err(Error::StudyCheck(format!(
                "{} of the truncation trials exceeded their epsilon",
                self.total_violations
            )));
        }
        Ok(())
    }
}

fn normalize(v: &mut [f64]) {
    let sum: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..1.0)).collect();
    normalize(&mut v);
    v
}

fn sharpened(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = random_dist(rng, n);
    for x in v.iter_mut() {
        *x = x.powi(4);
    }
    normalize(&mut v);
    v
}

/// One atom hogs the first distribution while the second only half-trusts
/// it: the regime where a careless threshold drops a heavy term.
fn disagreeing(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = rng.gen_range(0..n);
    let p_peak = rng.gen_range(0.6..0.95);
    let q_peak = rng.gen_range(0.05..0.4);
    let mut p = random_dist(rng, n);
    let mut q = random_dist(rng, n);
    let rescale = |v: &mut Vec<f64>, peak: f64| {
        let rest: f64 = v
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != j)
            .map(|(_, x)| x)
            .sum();
        for (i, x) in v.iter_mut().enumerate() {
            *x = if i == j { peak } else { *x / rest * (1.0 - peak) };
        }
    };
    rescale(&mut p, p_peak);
    rescale(&mut q, q_peak);
    (q, p)
}

fn random_pair(rng: &mut ChaCha8Rng, n: usize, style: usize) -> (Vec<f64>, Vec<f64>) {
    match style % 4 {
        0 => (random_dist(rng, n), random_dist(rng, n)),
        1 => (sharpened(rng, n), random_dist(rng, n)),
        2 => (random_dist(rng, n), sharpened(rng, n)),
        _ => disagreeing(rng, n),
    }
}

/// Randomized check of the KL truncation bound over the configured grid.
/// With `forced_delta` the derived threshold is replaced wholesale, which
/// is expected to break the bound and demonstrates the check has teeth.
pub fn cmd_study_klcheck(
    cfg: &ExperimentConfig,
    forced_delta: Option<f64>,
) -> Result<KlCheckReport> {
    cfg.validate()?;
    let kc = &cfg.klcheck;
    if kc.trials == 0 || kc.support_sizes.is_empty() || kc.epsilons.is_empty() {
        return Err(Error::config(
            "klcheck needs trials >= 1 and non-empty support and epsilon grids",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(kc.seed);
    let mut cells = Vec::new();
    for &n in &kc.support_sizes {
        if n < 2 {
            return Err(Error::config("klcheck support sizes must be at least 2"));
        }
        for &epsilon in &kc.epsilons {
            let delta = match forced_delta {
                Some(d) => d,
                None => delta_for_epsilon(epsilon, n)?,
            };
            let mut violations = 0usize;
            let mut max_abs_err: f64 = 0.0;
            for trial in 0..kc.trials {
                let (q, p) = random_pair(&mut rng, n, trial);
                let exact = exact_kl(&q, &p)?;
                let approx = truncated_kl_delta(&q, &p, delta)?;
                let err = (exact - approx).abs();
                max_abs_err = max_abs_err.max(err);
                if !(err < epsilon) {
                    violations += 1;
                }
            }
            cells.push(KlCheckCell {
                support: n,
                epsilon,
                delta,
                trials: kc.trials,
                violations,
                max_abs_err,
            });
        }
    }
    let total_violations = cells.iter().map(|c| c.violations).sum();
    let report = KlCheckReport {
        forced_delta,
        cells,
        total_violations,
    };

    let study_dir = cfg.study_dir("klcheck");
    ensure_dir(&study_dir)?;
    write_json(&study_dir.join("klcheck.json"), &report)?;
    write_meta(&study_dir, "study-klcheck", cfg, None)?;
    Ok(report)
}
