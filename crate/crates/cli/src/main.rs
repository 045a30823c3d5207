use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xdeepint::checkpoint::{Checkpoint, VocabCheck};
use xdeepint::config::RunConfig;
use xdeepint::features::{split_indices, RawTable, Schema, Vocabulary, DEFAULT_BINS, DEFAULT_MIN_COUNT};
use xdeepint::metrics::evaluate;
use xdeepint::model::forward;
use xdeepint::train::write_metrics_csv;
use xdeepint::{selfcheck, sparsity_report, train, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_SELF_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "xdeepint", version, about = "Polynomial interaction network CTR models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a vocabulary on a data file and write it out
    BuildVocab {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
        min_count: usize,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value = "label")]
        label: String,
        #[arg(long, default_value = ",")]
        delimiter: String,
    },
    /// Train a model from a config file plus `key=value` overrides
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` settings applied after the config file
        overrides: Vec<String>,
    },
    /// Print `auc=<v> logloss=<v> n=<v>` for a checkpoint on labelled data
    Evaluate(ScoreArgs),
    /// Print one click probability per input row
    Predict(ScoreArgs),
    /// Print the sparsity ratios of a checkpoint
    Sparsity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also print zeroed rows per field
        #[arg(long)]
        per_field: bool,
    },
    /// Run the built-in oracle suites
    SelfCheck,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = ",")]
    delimiter: String,
    /// Proceed even if the vocabulary differs from the one used in training
    #[arg(long)]
    allow_vocab_mismatch: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Example { source, .. } => exit_code(source),
        Error::Numeric(_) | Error::Divergence { .. } | Error::Shape { .. } | Error::Consistency(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn delimiter(text: &str) -> Result<char, Failure> {
    let mut cfg = RunConfig::default();
    cfg.set("data.delimiter", text)?;
    Ok(cfg.delimiter)
}

fn context(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure {
        code: exit_code(&e),
        message: format!("{}: {e}", path.display()),
    }
}

fn build_vocab(
    schema: &Path,
    data: &Path,
    out: &Path,
    min_count: usize,
    bins: usize,
    label: &str,
    delim: &str,
) -> Result<(), Failure> {
    let schema = Schema::load(schema, label).map_err(context(schema))?;
    let table = RawTable::load(data, delimiter(delim)?).map_err(context(data))?;
    let vocab = Vocabulary::fit(&table, &schema, min_count, bins).map_err(context(data))?;
    vocab.save(out).map_err(context(out))?;
    for (f, card) in vocab.fields.iter().zip(vocab.cardinalities()) {
        println!("{}\t{}\t{card}", f.name, f.kind().as_str());
    }
    Ok(())
}

fn cmd_train(config: Option<&Path>, overrides: &[String]) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).map_err(context(p))?,
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    print!("{}", cfg.to_text());

    let (train_table, valid_table) = match (&cfg.train, &cfg.valid, &cfg.path) {
        (Some(t), Some(v), _) => (
            RawTable::load(t, cfg.delimiter).map_err(context(t))?,
            RawTable::load(v, cfg.delimiter).map_err(context(v))?,
        ),
        (None, None, Some(p)) => {
            let all = RawTable::load(p, cfg.delimiter).map_err(context(p))?;
            let [tr, va, _] = split_indices(all.len(), cfg.split, cfg.split_seed)?;
            (all.select(&tr), all.select(&va))
        }
        _ => {
            return Err(Error::Config("set both `data.train` and `data.valid`, or `data.path`".into()).into());
        }
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let vocab = match &cfg.vocab {
        Some(p) => Vocabulary::load(p).map_err(context(p))?,
        None => {
            let schema_path = cfg
                .schema
                .as_ref()
                .ok_or_else(|| Error::Config("`data.schema` is required when `data.vocab` is unset".into()))?;
            let schema = Schema::load(schema_path, cfg.label.as_str()).map_err(context(schema_path))?;
            let vocab = Vocabulary::fit(&train_table, &schema, cfg.min_count, cfg.bins)?;
            vocab.save(cfg.out_dir.join("vocab.txt"))?;
            vocab
        }
    };
    let hash = vocab.content_hash()?;
    let train_ds = vocab.encode(&train_table)?;
    let valid_ds = vocab.encode(&valid_table)?;

    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let train_cfg = cfg.train_config(vocab.fields.len())?;
    let mut outcome = train(&train_ds, &valid_ds, &train_cfg)?;
    outcome.best.vocab_hash = hash;
    outcome.last.vocab_hash = hash;
    outcome.best.save(cfg.out_dir.join("best.ckpt"))?;
    outcome.last.save(cfg.out_dir.join("last.ckpt"))?;
    let mut csv = BufWriter::new(fs::File::create(cfg.out_dir.join("metrics.csv"))?);
    write_metrics_csv(&outcome.history, &mut csv)?;
    csv.flush()?;

    println!(
        "best step={} auc={:.6} logloss={:.6} stopped_early={}",
        outcome.best.step, outcome.best.best_auc, outcome.best.best_logloss, outcome.stopped_early
    );
    Ok(())
}

fn load_scoring(args: &ScoreArgs) -> Result<(Checkpoint, Vocabulary, RawTable), Failure> {
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(context(&args.checkpoint))?;
    let vocab = Vocabulary::load(&args.vocab).map_err(context(&args.vocab))?;
    if let VocabCheck::Mismatch { expected, found } = ckpt.check_vocab(vocab.content_hash()?) {
        eprintln!("warning: vocabulary hash {expected:016x} differs from the checkpoint's {found:016x}");
        if !args.allow_vocab_mismatch {
            return Err(Failure {
                code: EXIT_DATA,
                message: "vocabulary mismatch; pass --allow-vocab-mismatch to proceed".into(),
            });
        }
    }
    if vocab.cardinalities() != ckpt.params.cardinalities() {
        return Err(Error::Format("vocabulary sizes do not match the checkpoint's embedding tables".into()).into());
    }
    let table = RawTable::load(&args.data, delimiter(&args.delimiter)?).map_err(context(&args.data))?;
    Ok((ckpt, vocab, table))
}

fn cmd_evaluate(args: &ScoreArgs) -> Result<(), Failure> {
    let (ckpt, vocab, table) = load_scoring(args)?;
    let ds = vocab.encode(&table).map_err(context(&args.data))?;
    println!("{}", evaluate(&ckpt.params, &ckpt.model, &ds)?);
    Ok(())
}

fn cmd_predict(args: &ScoreArgs) -> Result<(), Failure> {
    let (ckpt, vocab, table) = load_scoring(args)?;
    let rows = vocab.encode_features(&table).map_err(context(&args.data))?;
    let mut out = BufWriter::new(io::stdout().lock());
    for indices in rows {
        let p = forward(&indices, &ckpt.params, &ckpt.model)?.prediction;
        writeln!(out, "{p:.10}")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_sparsity(path: &Path, per_field: bool) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(path).map_err(context(path))?;
    let r = sparsity_report(&ckpt.params);
    println!(
        "feature_sparse_ratio={:.6} weight_sparse_ratio={:.6}",
        r.feature_sparse_ratio, r.weight_sparse_ratio
    );
    if per_field {
        for (f, (z, n)) in r.zero_rows_per_field.iter().zip(&r.rows_per_field).enumerate() {
            println!("field={f} zero_rows={z} rows={n}");
        }
    }
    Ok(())
}

fn cmd_self_check() -> Result<(), Failure> {
    let results = selfcheck::run_all();
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_SELF_CHECK,
            message: format!("{failed} self-check suite(s) failed"),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::BuildVocab {
            schema,
            data,
            out,
            min_count,
            bins,
            label,
            delimiter,
        } => build_vocab(schema, data, out, *min_count, *bins, label, delimiter),
        Command::Train { config, overrides } => cmd_train(config.as_deref(), overrides),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Sparsity { checkpoint, per_field } => cmd_sparsity(checkpoint, *per_field),
        Command::SelfCheck => cmd_self_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
