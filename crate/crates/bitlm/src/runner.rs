//! End-to-end run orchestration: one training run (seed x variant) from
//! corpus to metrics log and checkpoint, and the multi-seed comparison
//! protocol over the three input parameterizations.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::codes::{effective_rank, Recoder};
use crate::config::RunConfig;
use crate::data::{
    split_documents, tokenize_bytes, validation_batches, BatchStream, DataError, Document,
};
use crate::metrics::{
    checkpoint_file_name, metrics_file_name, summarize_variant, write_metrics_file,
    MetricsError, RunReport, SeedResult, StepRecord,
};
use crate::model::{
    evaluate, init_model, tiles_per_head, EvalMetrics, InputInterface, InputKind, ModelError,
};
use crate::optim::{train_step, Schedule, TrainState};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("structural check failed: {0}")]
    Structural(String),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub input_kind: InputKind,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub final_eval: EvalMetrics,
}

impl RunOutcome {
    pub fn seed_result(&self) -> SeedResult {
        SeedResult {
            seed: self.seed,
            final_val_loss: self.final_eval.val_loss,
            final_val_ppl: self.final_eval.val_ppl,
            tokens_seen: self.records.last().map(|r| r.tokens_seen).unwrap_or(0),
        }
    }
}

/// Exhaustive input-rank assertion is only run when the vocabulary is small
/// enough to enumerate quickly.
const RANK_CHECK_VOCAB_BOUND: usize = 4096;

fn preflight_code_checks(
    interface: &InputInterface,
    config: &crate::model::ModelConfig,
) -> Result<(), RunError> {
    let Some(spec) = interface.code_spec() else {
        return Ok(());
    };
    // All token inputs must span exactly K dimensions before training.
    if spec.vocab_size() <= RANK_CHECK_VOCAB_BOUND {
        let rank = effective_rank(spec);
        let expected = if spec.vocab_size() == 1 << spec.code_width() {
            spec.code_width()
        } else {
            rank.min(spec.code_width())
        };
        if rank > spec.code_width() || rank != expected {
            return Err(RunError::Structural(format!(
                "effective input rank {rank}, expected {expected} (K={})",
                spec.code_width()
            )));
        }
    }
    // When the head dim is a whole number of tiles, every head must see the
    // complete code that many times.
    if config.head_dim() % config.code_width() == 0 && tiles_per_head(config).is_none() {
        return Err(RunError::Structural(
            "head slices do not cover the code tiles evenly".into(),
        ));
    }
    Ok(())
}

/// Builds the interface a config describes, sampling the recoder from
/// `recoder.seed` for the affine variant.
pub fn interface_for_run(config: &RunConfig) -> Result<InputInterface, ModelError> {
    let recoder = match config.model.input_kind {
        InputKind::AffineRecoded => {
            Some(Recoder::sample(config.model.code_width(), config.recoder_seed))
        }
        _ => None,
    };
    InputInterface::for_config(&config.model, recoder)
}

/// Trains one (variant, seed) run on an already-loaded corpus. Writes the
/// metrics log and final checkpoint into `out_dir` when given. The
/// validation split depends only on the data seed, so every variant and
/// every training seed sees the same held-out documents.
pub fn train_run(
    config: &RunConfig,
    seed: u64,
    corpus: &[Document],
    out_dir: Option<&Path>,
) -> Result<RunOutcome, RunError> {
    let model_config = &config.model;
    let interface = interface_for_run(config)?;
    preflight_code_checks(&interface, model_config)?;

    let split = split_documents(corpus, config.data.val_fraction, config.data.data_seed)?;
    let mut train_docs = Vec::new();
    let mut val_docs = Vec::new();
    for doc in corpus {
        match split.split_of(doc.id) {
            Some(crate::data::Split::Train) => train_docs.push(tokenize_bytes(doc)),
            Some(crate::data::Split::Validation) => val_docs.push(tokenize_bytes(doc)),
            None => {}
        }
    }
    let mut stream = BatchStream::new(
        train_docs,
        model_config.context_len,
        config.train.batch_size,
        seed,
    )?;
    let val = validation_batches(
        &val_docs,
        model_config.context_len,
        config.train.batch_size,
    )?;

    let params = init_model(model_config, seed)?;
    let schedule = Schedule::with_scaled_warmup(config.train.total_steps);
    let mut state = TrainState::new(params, config.train.optim, schedule, seed);
    state.decay_input_table = config.train.decay_input_table;

    let tokens_per_step =
        (config.train.batch_size * model_config.context_len) as u64;
    let mut records = Vec::with_capacity(config.train.total_steps as usize + 8);
    let mut final_eval = None;
    for _ in 0..config.train.total_steps {
        let batch = stream.next_batch();
        let metrics = train_step(&mut state, &interface, model_config, &batch)?;
        let step = state.step; // 1-based after the update
        let tokens_seen = step * tokens_per_step;
        records.push(StepRecord {
            step,
            tokens_seen,
            loss: metrics.loss,
            lr: metrics.lr,
            grad_norm: metrics.grad_norm,
            val: None,
        });
        if step % config.train.eval_every == 0 || step == config.train.total_steps {
            let eval = evaluate(&state.params, &interface, model_config, &val)?;
            records.push(StepRecord {
                step,
                tokens_seen,
                loss: metrics.loss,
                lr: metrics.lr,
                grad_norm: metrics.grad_norm,
                val: Some((eval.val_loss, eval.val_ppl)),
            });
            final_eval = Some(eval);
        }
    }
    let final_eval = final_eval.expect("total_steps > 0 always evaluates at the end");

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| {
            RunError::Metrics(MetricsError::Io { path: dir.display().to_string(), source })
        })?;
        let kind = model_config.input_kind;
        write_metrics_file(&dir.join(metrics_file_name(kind, seed)), &records)?;
        let recoder = interface.code_spec().and_then(|s| s.recoder().cloned());
        save_checkpoint(
            &dir.join(checkpoint_file_name(kind, seed)),
            &Checkpoint {
                config: model_config.clone(),
                params: state.params.clone(),
                recoder,
                seed,
                step: state.step,
            },
        )?;
    }
    Ok(RunOutcome { input_kind: model_config.input_kind, seed, records, final_eval })
}

/// Runs every (variant, seed) combination of the comparison protocol.
/// Runs are independent, so they execute in parallel; each run's output is
/// identical to what it would produce alone.
pub fn run_protocol(
    config: &RunConfig,
    kinds: &[InputKind],
    corpus: &[Document],
    out_dir: Option<&Path>,
) -> Result<Vec<RunOutcome>, RunError> {
    let jobs: Vec<(InputKind, u64)> = kinds
        .iter()
        .flat_map(|&kind| config.seeds.iter().map(move |&seed| (kind, seed)))
        .collect();
    let outcomes: Vec<Result<RunOutcome, RunError>> = jobs
        .par_iter()
        .map(|&(kind, seed)| train_run(&config.with_input_kind(kind), seed, corpus, out_dir))
        .collect();
    outcomes.into_iter().collect()
}

/// Aggregates protocol outcomes into the comparison report, keeping the
/// variant order of `kinds`.
pub fn report_from_outcomes(kinds: &[InputKind], outcomes: &[RunOutcome]) -> RunReport {
    let variants = kinds
        .iter()
        .map(|&kind| {
            let per_seed: Vec<SeedResult> = outcomes
                .iter()
                .filter(|o| o.input_kind == kind)
                .map(RunOutcome::seed_result)
                .collect();
            summarize_variant(kind, per_seed)
        })
        .collect();
    RunReport { variants }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_corpus;
    use crate::model::ModelConfig;

    fn small_run_config() -> RunConfig {
        let mut config = RunConfig::default();
        config.model = ModelConfig {
            vocab_size: 256,
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_len: 32,
            mlp_ratio: 2,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            input_kind: InputKind::FixedCode,
        };
        config.train.total_steps = 6;
        config.train.eval_every = 3;
        config.train.batch_size = 2;
        config.data.val_fraction = 0.2;
        config.seeds = vec![1, 2];
        config
    }

    #[test]
    fn train_run_produces_expected_record_count() {
        let config = small_run_config();
        let corpus = synthetic_corpus(20_000, 3);
        let outcome = train_run(&config, 1, &corpus, None).unwrap();
        // 6 step records + 2 eval records (steps 3 and 6).
        assert_eq!(outcome.records.len(), 8);
        assert_eq!(outcome.records.iter().filter(|r| r.val.is_some()).count(), 2);
        assert!(outcome.final_eval.val_loss.is_finite());
        let last = outcome.records.last().unwrap();
        assert_eq!(last.step, 6);
        assert_eq!(last.tokens_seen, 6 * 2 * 32);
    }

    #[test]
    fn train_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_run_config();
        let corpus = synthetic_corpus(20_000, 3);
        train_run(&config, 1, &corpus, Some(dir.path())).unwrap();
        assert!(dir.path().join("fixed_code-seed1.metrics").exists());
        assert!(dir.path().join("fixed_code-seed1.ckpt").exists());
    }

    #[test]
    fn reruns_are_bit_identical() {
        let config = small_run_config();
        let corpus = synthetic_corpus(20_000, 3);
        let a = train_run(&config, 2, &corpus, None).unwrap();
        let b = train_run(&config, 2, &corpus, None).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_eval.val_loss.to_bits(), b.final_eval.val_loss.to_bits());
    }

    #[test]
    fn protocol_covers_all_variant_seed_pairs() {
        let config = small_run_config();
        let corpus = synthetic_corpus(20_000, 3);
        let kinds = [InputKind::Learned, InputKind::FixedCode];
        let outcomes = run_protocol(&config, &kinds, &corpus, None).unwrap();
        assert_eq!(outcomes.len(), 4);
        let report = report_from_outcomes(&kinds, &outcomes);
        assert_eq!(report.variants.len(), 2);
        for v in &report.variants {
            assert_eq!(v.per_seed.len(), 2);
            assert!(v.mean_val_ppl.is_finite());
        }
    }

    #[test]
    fn parallel_runs_match_serial_runs() {
        let config = small_run_config();
        let corpus = synthetic_corpus(20_000, 3);
        let kinds = [InputKind::FixedCode];
        let parallel = run_protocol(&config, &kinds, &corpus, None).unwrap();
        for outcome in &parallel {
            let serial = train_run(&config, outcome.seed, &corpus, None).unwrap();
            assert_eq!(serial.records, outcome.records);
        }
    }
}
