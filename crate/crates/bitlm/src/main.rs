//! Command-line entry points for the code interface tools and the training
//! harness. Exit codes are a stable contract: 0 success, 1 verification
//! failure, 2 configuration error, 3 runtime training failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bitlm::checkpoint::load_checkpoint;
use bitlm::codes::{
    export_frozen_table, load_spec_file, verify_balance, verify_injectivity, write_spec_file,
    CodeError, CodeSpec, FrozenTable, RecoderSource,
};
use bitlm::config::RunConfig;
use bitlm::data::{
    load_corpus, split_documents, synthetic_corpus, tokenize_bytes, validation_batches,
    write_corpus_file, Split,
};
use bitlm::metrics::report_from_dir;
use bitlm::model::{evaluate, sample_text, InputKind};
use bitlm::runner::train_run;

#[derive(Parser)]
#[command(
    name = "bitlm",
    version,
    about = "Table-free binary-code input interfaces for byte/token language models, \
             with a matched-comparison training harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a code spec file (and optionally a frozen input table)
    Codegen {
        /// Vocabulary size V; the code width K is derived as ceil(log2 V)
        #[arg(long)]
        vocab_size: usize,
        /// Lift width d (the model width); must be a multiple of K
        #[arg(long)]
        lift_width: usize,
        /// Sample the affine recoder (A, b) from this seed; omit for the
        /// canonical code
        #[arg(long)]
        recoder_seed: Option<u64>,
        /// Where to write the spec file
        #[arg(long)]
        out: PathBuf,
        /// Also export the frozen table to this path
        #[arg(long)]
        table: Option<PathBuf>,
        /// Also write the sampled recoder matrix as a text fixture
        #[arg(long)]
        matrix_out: Option<PathBuf>,
    },
    /// Run the verification suite against a code spec file
    Verify {
        #[arg(long)]
        spec: PathBuf,
        /// Frozen table file to check for bit-exact equivalence
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Train one run (one seed) from a run config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Corpus path (directory of files, or one file with blank-line
        /// separated documents); overrides data.corpus from the config
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory for the metrics log and checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Override the config's input parameterization
        #[arg(long, value_parser = parse_input_kind)]
        input_kind: Option<InputKind>,
        /// Override the config's recoder seed (affine variant)
        #[arg(long)]
        recoder_seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the validation split of a corpus
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        val_fraction: f64,
        /// Seed of the document-level split (must match training)
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
    /// Aggregate finished runs into the three-variant comparison table
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the per-run metrics logs
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the frozen input table of a code spec
    ExportTable {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate text from a trained checkpoint
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 128)]
        n_tokens: usize,
        /// 0 means greedy argmax
        #[arg(long, default_value_t = 0.8)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a deterministic synthetic text corpus
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_input_kind(text: &str) -> Result<InputKind, String> {
    InputKind::parse(text)
        .ok_or_else(|| format!("unknown input kind {text:?} (learned|fixed|affine)"))
}

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TRAINING: u8 = 3;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl ToString) -> Self {
        CliError { code: EXIT_CONFIG, message: message.to_string() }
    }

    fn training(message: impl ToString) -> Self {
        CliError { code: EXIT_TRAINING, message: message.to_string() }
    }

    fn verification(message: impl ToString) -> Self {
        CliError { code: EXIT_VERIFY_FAILED, message: message.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Codegen { vocab_size, lift_width, recoder_seed, out, table, matrix_out } => {
            cmd_codegen(
                vocab_size,
                lift_width,
                recoder_seed,
                &out,
                table.as_deref(),
                matrix_out.as_deref(),
            )
        }
        Command::Verify { spec, table } => cmd_verify(&spec, table.as_deref()),
        Command::Train { config, seed, corpus, out, input_kind, recoder_seed } => {
            cmd_train(&config, seed, corpus, &out, input_kind, recoder_seed)
        }
        Command::Eval { checkpoint, corpus, val_fraction, data_seed, batch_size } => {
            cmd_eval(&checkpoint, &corpus, val_fraction, data_seed, batch_size)
        }
        Command::Compare { config, out } => cmd_compare(&config, &out),
        Command::ExportTable { spec, out } => cmd_export_table(&spec, &out),
        Command::Sample { checkpoint, prompt, n_tokens, temperature, seed } => {
            cmd_sample(&checkpoint, &prompt, n_tokens, temperature, seed)
        }
        Command::GenCorpus { out, bytes, seed } => cmd_gen_corpus(&out, bytes, seed),
    }
}

fn cmd_codegen(
    vocab_size: usize,
    lift_width: usize,
    recoder_seed: Option<u64>,
    out: &Path,
    table: Option<&Path>,
    matrix_out: Option<&Path>,
) -> Result<(), CliError> {
    let source = match recoder_seed {
        Some(seed) => RecoderSource::Seed(seed),
        None => RecoderSource::None,
    };
    write_spec_file(out, vocab_size, lift_width, &source).map_err(CliError::config)?;
    let spec = load_spec_file(out).map_err(CliError::config)?;
    println!("wrote {}", out.display());
    println!("K = {}", spec.code_width());
    println!(
        "trainable-param delta vs learned table (V*d) = {}",
        (spec.vocab_size() as u64) * (spec.lift_width() as u64)
    );
    if let Some(table_path) = table {
        export_frozen_table(&spec).write_to(table_path).map_err(CliError::config)?;
        println!("wrote frozen table {}", table_path.display());
    }
    if let Some(matrix_path) = matrix_out {
        match spec.recoder() {
            Some(recoder) => {
                std::fs::write(matrix_path, recoder.matrix.to_text())
                    .map_err(CliError::config)?;
                println!("wrote recoder matrix {}", matrix_path.display());
            }
            None => return Err(CliError::config("--matrix-out needs --recoder-seed")),
        }
    }
    Ok(())
}

fn cmd_verify(spec_path: &Path, table: Option<&Path>) -> Result<(), CliError> {
    let spec = load_spec_file(spec_path).map_err(CliError::config)?;
    println!(
        "spec: V={} K={} d={} recoder={}",
        spec.vocab_size(),
        spec.code_width(),
        spec.lift_width(),
        if spec.recoder().is_some() { "affine" } else { "none" }
    );
    let mut failed = false;
    let mut check = |name: &str, outcome: Result<String, String>| match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            failed = true;
            println!("FAIL {name}: {detail}");
        }
    };

    let report = verify_injectivity(&spec);
    check(
        "injectivity",
        if report.ok {
            Ok(format!("all {} encodings distinct", spec.vocab_size()))
        } else {
            let (a, b) = report.colliding_pair.unwrap();
            Err(format!("tokens {a} and {b} collide"))
        },
    );

    let full = spec.vocab_size() == 1usize << spec.code_width();
    if full {
        match verify_balance(&spec) {
            Ok(balance) => {
                let half = 1usize << (spec.code_width() - 1);
                let quarter = half / 2;
                let bits_ok = balance.per_bit_ones.iter().all(|&c| c == half);
                let pairs_ok = balance
                    .pair_pattern_counts
                    .iter()
                    .all(|(_, counts)| counts.iter().all(|&c| c == quarter));
                check(
                    "balance",
                    if bits_ok && pairs_ok {
                        Ok(format!("per-bit ones = {half}, pair patterns = {quarter}"))
                    } else {
                        Err("bit or pair counts deviate from the exact values".into())
                    },
                );
            }
            Err(e) => check("balance", Err(e.to_string())),
        }
    } else {
        println!("SKIP balance: V={} < 2^{}", spec.vocab_size(), spec.code_width());
    }

    let rank = bitlm::codes::effective_rank(&spec);
    check(
        "effective-rank",
        if full {
            if rank == spec.code_width() {
                Ok(format!("rank = K = {rank}"))
            } else {
                Err(format!("rank {rank} != K {}", spec.code_width()))
            }
        } else if rank <= spec.code_width() {
            Ok(format!("rank = {rank} <= K = {}", spec.code_width()))
        } else {
            Err(format!("rank {rank} exceeds K {}", spec.code_width()))
        },
    );

    let exported = export_frozen_table(&spec);
    check("frozen/table-free equivalence", equivalence_detail(&spec, &exported));
    if let Some(table_path) = table {
        let loaded = FrozenTable::read_from(table_path).map_err(CliError::config)?;
        check("frozen table file", equivalence_detail(&spec, &loaded));
    }

    if failed {
        Err(CliError::verification("one or more checks failed"))
    } else {
        Ok(())
    }
}

fn equivalence_detail(spec: &CodeSpec, table: &FrozenTable) -> Result<String, String> {
    if table.vocab_size != spec.vocab_size() || table.lift_width != spec.lift_width() {
        return Err(format!(
            "table is {}x{}, spec needs {}x{}",
            table.vocab_size,
            table.lift_width,
            spec.vocab_size(),
            spec.lift_width()
        ));
    }
    let mut row = vec![0f32; spec.lift_width()];
    for t in 0..spec.vocab_size() {
        spec.encode_token_into(t, &mut row).map_err(|e| e.to_string())?;
        for (column, (&a, &b)) in row.iter().zip(table.row(t)).enumerate() {
            if a.to_bits() != b.to_bits() {
                return Err(format!("first difference at token {t}, column {column}"));
            }
        }
    }
    Ok(format!("{} rows bit-identical", spec.vocab_size()))
}

fn cmd_train(
    config_path: &Path,
    seed: u64,
    corpus_override: Option<PathBuf>,
    out: &Path,
    input_kind: Option<InputKind>,
    recoder_seed: Option<u64>,
) -> Result<(), CliError> {
    let mut config = RunConfig::load(config_path).map_err(CliError::config)?;
    if let Some(kind) = input_kind {
        config.model.input_kind = kind;
    }
    if let Some(rs) = recoder_seed {
        config.recoder_seed = rs;
    }
    if let Some(corpus) = corpus_override {
        config.data.corpus = Some(corpus);
    }
    config.validate().map_err(CliError::config)?;
    let corpus_path = config
        .data
        .corpus
        .clone()
        .ok_or_else(|| CliError::config("no corpus: set data.corpus or pass --corpus"))?;
    let corpus = load_corpus(&corpus_path).map_err(CliError::config)?;
    println!(
        "training {} seed {seed}: {} docs, {} steps",
        config.model.input_kind.as_str(),
        corpus.len(),
        config.train.total_steps
    );
    let outcome = train_run(&config, seed, &corpus, Some(out)).map_err(CliError::training)?;
    let result = outcome.seed_result();
    println!(
        "done: tokens={} val_loss={:.4} val_ppl={:.4}",
        result.tokens_seen, result.final_val_loss, result.final_val_ppl
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_eval(
    checkpoint_path: &Path,
    corpus_path: &Path,
    val_fraction: f64,
    data_seed: u64,
    batch_size: usize,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint_path).map_err(CliError::config)?;
    let interface = ckpt.interface().map_err(CliError::config)?;
    let corpus = load_corpus(corpus_path).map_err(CliError::config)?;
    let split = split_documents(&corpus, val_fraction, data_seed).map_err(CliError::config)?;
    let val_docs: Vec<Vec<u32>> = corpus
        .iter()
        .filter(|d| split.split_of(d.id) == Some(Split::Validation))
        .map(tokenize_bytes)
        .collect();
    let batches = validation_batches(&val_docs, ckpt.config.context_len, batch_size)
        .map_err(CliError::config)?;
    let metrics =
        evaluate(&ckpt.params, &interface, &ckpt.config, &batches).map_err(CliError::training)?;
    println!(
        "val_loss={:.6} val_ppl={:.6} tokens_evaluated={}",
        metrics.val_loss, metrics.val_ppl, metrics.tokens_evaluated
    );
    Ok(())
}

fn cmd_compare(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let config = RunConfig::load(config_path).map_err(CliError::config)?;
    let kinds = [InputKind::Learned, InputKind::FixedCode, InputKind::AffineRecoded];
    let report = report_from_dir(out, &kinds, &config.seeds).map_err(CliError::config)?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_export_table(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let spec = load_spec_file(spec_path).map_err(CliError::config)?;
    export_frozen_table(&spec).write_to(out).map_err(|e: CodeError| CliError::config(e))?;
    println!(
        "wrote {} ({} x {} f32)",
        out.display(),
        spec.vocab_size(),
        spec.lift_width()
    );
    Ok(())
}

fn cmd_sample(
    checkpoint_path: &Path,
    prompt: &str,
    n_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint_path).map_err(CliError::config)?;
    let interface = ckpt.interface().map_err(CliError::config)?;
    let prompt_ids: Vec<u32> = prompt.bytes().map(u32::from).collect();
    let ids = sample_text(
        &ckpt.params,
        &interface,
        &ckpt.config,
        &prompt_ids,
        n_tokens,
        temperature,
        seed,
    )
    .map_err(CliError::training)?;
    let bytes: Vec<u8> = ids.iter().map(|&t| t as u8).collect();
    println!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn cmd_gen_corpus(out: &Path, bytes: usize, seed: u64) -> Result<(), CliError> {
    let docs = synthetic_corpus(bytes, seed);
    write_corpus_file(out, &docs).map_err(CliError::config)?;
    let total: usize = docs.iter().map(|d| d.bytes.len()).sum();
    println!("wrote {} ({} docs, {} bytes)", out.display(), docs.len(), total);
    Ok(())
}
