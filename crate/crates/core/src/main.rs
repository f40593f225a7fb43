use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semcap::attention::Activation;
use semcap::attributes::{parse_attribute_file, RankedWords};
use semcap::checkpoint::Checkpoint;
use semcap::config::RunConfig;
use semcap::data::{generate_dataset, parse_examples, write_examples, write_references, SceneConfig, TrainingExample};
use semcap::decode::export_trace;
use semcap::gradcheck::{run_gradcheck, GradcheckOptions};
use semcap::metrics::{evaluate, parse_caption_table};
use semcap::model::Mode;
use semcap::train::{decode_examples, encode_pairs, training_vocabulary, AttributeContext, EpochStats, Member, Trainer};
use semcap::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_VOCAB: u8 = 4;
const EXIT_EVALUATE: u8 = 5;
const EXIT_GRADCHECK: u8 = 6;

#[derive(Parser)]
#[command(name = "semcap", version, about = "Image captioning with semantic attention")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (or an ensemble) and write checkpoints.
    Train(TrainArgs),
    /// Caption a dataset with one checkpoint or an ensemble.
    Caption(CaptionArgs),
    /// Score candidate captions against references.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.mode=MAX`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("run.seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides).map_err(|e| Failure(EXIT_CONFIG, e))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training records as written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; ensemble members go to `<out>.0`, `<out>.1`, ...
    #[arg(long)]
    out: PathBuf,
    /// Precomputed attributes (`id word:score ...` lines).
    #[arg(long)]
    attributes: Option<PathBuf>,
}

#[derive(Args)]
struct CaptionArgs {
    /// One checkpoint, or several for ensemble decoding.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Records to caption.
    #[arg(long)]
    data: PathBuf,
    /// Output file of `id<TAB>caption` lines.
    #[arg(long)]
    out: PathBuf,
    /// Training records, needed for k-NN attributes.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Beam width (single checkpoint only); overrides the stored config.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Average log-probabilities instead of probabilities across members.
    #[arg(long)]
    log_space: bool,
    /// Directory for one attention-trace table per example.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// `id<TAB>caption` lines or COCO result JSON.
    #[arg(long)]
    candidates: PathBuf,
    /// `id<TAB>caption` lines or COCO annotation JSON.
    #[arg(long)]
    references: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Attention or fusion mode; taken from the config when omitted.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    activation: Option<Activation>,
    /// Perturb one tensor's analytic gradient (test hook).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for train/val/test records and references.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML scene description; defaults apply when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    captions_per_scene: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

struct Failure(u8, Error);

fn with(code: u8) -> impl Fn(Error) -> Failure {
    move |e| Failure(code, e)
}

fn read_examples(path: &Path) -> Result<Vec<TrainingExample>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure(EXIT_DATA, Error::arg(format!("cannot read {}: {e}", path.display()))))?;
    let examples = parse_examples(&text).map_err(with(EXIT_DATA))?;
    if examples.is_empty() {
        return Err(Failure(EXIT_DATA, Error::arg(format!("{} has no records", path.display()))));
    }
    Ok(examples)
}

fn read_attribute_file(path: Option<&Path>) -> Result<Option<HashMap<u64, RankedWords>>, Failure> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).map_err(|e| Failure(EXIT_DATA, e.into()))?;
    let sets = parse_attribute_file(&text).map_err(with(EXIT_DATA))?;
    Ok(Some(sets.into_iter().collect()))
}

fn member_path(out: &Path, index: usize, total: usize) -> PathBuf {
    if total == 1 {
        out.to_path_buf()
    } else {
        let mut name = out.as_os_str().to_owned();
        name.push(format!(".{index}"));
        PathBuf::from(name)
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let mut config = args.config.load()?;
    let train = read_examples(&args.data)?;
    let file = read_attribute_file(args.attributes.as_deref())?;
    let feature_dim = train[0].features.len();
    let vocab = training_vocabulary(&train, config.model.min_count).map_err(with(EXIT_DATA))?;
    let model = config.model_config(vocab.len(), feature_dim).map_err(with(EXIT_CONFIG))?;
    config.model.feature_dim = Some(feature_dim);
    let ctx = AttributeContext {
        config: &config,
        vocab: &vocab,
        train: &train,
        file: file.as_ref(),
    };
    let attrs = ctx.resolve(&train, true).map_err(with(EXIT_DATA))?;
    let pairs = encode_pairs(&train, &attrs, &vocab);

    let members = config.run.ensemble;
    let mut log_path = args.out.as_os_str().to_owned();
    log_path.push(".log");
    let mut log = fs::File::create(PathBuf::from(log_path)).map_err(|e| Failure(EXIT_DATA, e.into()))?;
    for k in 0..members {
        let seed = config.run.seed.wrapping_add(k as u64);
        let path = member_path(&args.out, k, members);
        let mut trainer = Trainer::new(&config, model.clone(), &vocab, seed).map_err(with(EXIT_CONFIG))?;
        writeln!(log, "# member {k} seed {seed}\n{}", EpochStats::HEADER).map_err(|e| Failure(EXIT_DATA, e.into()))?;
        trainer
            .fit(&pairs, |stats, params| {
                let line = stats.log_line();
                eprintln!("member {k} {line}");
                writeln!(log, "{line}")?;
                Checkpoint {
                    config: config.clone(),
                    vocab: vocab.clone(),
                    params: params.clone(),
                }
                .save(&path)
            })
            .map_err(with(EXIT_DATA))?;
    }
    Ok(())
}

fn cmd_caption(args: &CaptionArgs) -> Result<(), Failure> {
    let checkpoints = args
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p).map_err(with(EXIT_DATA)))
        .collect::<Result<Vec<_>, _>>()?;
    let first = &checkpoints[0];
    if let Some(i) = checkpoints.iter().position(|c| c.vocab != first.vocab) {
        return Err(Failure(
            EXIT_VOCAB,
            Error::arg(format!(
                "{} has a different vocabulary from {}",
                args.checkpoints[i].display(),
                args.checkpoints[0].display()
            )),
        ));
    }
    let models = checkpoints
        .iter()
        .map(|c| c.model_config().map_err(with(EXIT_DATA)))
        .collect::<Result<Vec<_>, _>>()?;
    let config = &first.config;
    let max_len = args.max_len.unwrap_or(config.run.max_len);
    let beam = args.beam.unwrap_or(config.run.beam_width);
    if max_len == 0 || beam == 0 {
        return Err(Failure(EXIT_CONFIG, Error::config("run", "beam width and max length must be at least 1")));
    }

    let examples = read_examples(&args.data)?;
    let train = match &args.train {
        Some(p) => read_examples(p)?,
        None if config.attributes.source == semcap::config::AttributeSource::Knn
            && config.model.mode.uses_attributes()
            && args.attributes.is_none() =>
        {
            return Err(Failure(EXIT_DATA, Error::arg("k-NN attributes need --train")));
        }
        None => Vec::new(),
    };
    let file = read_attribute_file(args.attributes.as_deref())?;
    let ctx = AttributeContext {
        config,
        vocab: &first.vocab,
        train: &train,
        file: file.as_ref(),
    };
    let attrs = ctx.resolve(&examples, false).map_err(with(EXIT_DATA))?;
    let members: Vec<Member<'_>> = checkpoints
        .iter()
        .zip(&models)
        .map(|(c, m)| Member { params: &c.params, model: m })
        .collect();
    let decoded = decode_examples(&members, &examples, &attrs, max_len, beam, args.log_space).map_err(with(EXIT_DATA))?;

    let mut out = String::new();
    for (ex, (caption, _)) in examples.iter().zip(&decoded) {
        out.push_str(&format!("{}\t{}\n", ex.id, first.vocab.decode(&caption.tokens).join(" ")));
    }
    fs::write(&args.out, out).map_err(|e| Failure(EXIT_DATA, e.into()))?;
    if let Some(dir) = &args.trace {
        fs::create_dir_all(dir).map_err(|e| Failure(EXIT_DATA, e.into()))?;
        for (ex, (_, trace)) in examples.iter().zip(&decoded) {
            let table = export_trace(trace, &first.vocab).map_err(with(EXIT_DATA))?;
            fs::write(dir.join(format!("{}.csv", ex.id)), table).map_err(|e| Failure(EXIT_DATA, e.into()))?;
        }
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), Failure> {
    let read = |p: &Path| -> Result<_, Failure> {
        let text = fs::read_to_string(p)
            .map_err(|e| Failure(EXIT_DATA, Error::arg(format!("cannot read {}: {e}", p.display()))))?;
        parse_caption_table(&text).map_err(with(EXIT_DATA))
    };
    let candidates = read(&args.candidates)?;
    let references = read(&args.references)?;
    let report = evaluate(&candidates, &references).map_err(with(EXIT_EVALUATE))?;
    print!("{report}");
    println!("{}", report.machine_line());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let config = args.config.load()?;
    let opts = GradcheckOptions {
        seed: config.run.seed,
        mode: args.mode.unwrap_or(config.model.mode),
        activation: args.activation.unwrap_or(config.model.activation),
        tied: config.model.tied,
        freeze_embedding: config.model.freeze_embedding,
        regularizer: config.regularizer,
        corrupt: args.corrupt.clone(),
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&opts).map_err(with(EXIT_GRADCHECK))?;
    println!("{:<8} {:>6} {:>14} {:>14}  status", "tensor", "size", "max_rel_err", "max_abs_err");
    for t in &report.tensors {
        let ok = t.report.max_relative_error <= report.tolerance;
        println!(
            "{:<8} {:>6} {:>14.3e} {:>14.3e}  {}",
            t.name,
            t.size,
            t.report.max_relative_error,
            t.max_absolute_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_relative_error(), report.tolerance);
    if report.passed() {
        Ok(())
    } else {
        Err(Failure(EXIT_GRADCHECK, Error::Numeric("gradient check failed".into())))
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    let mut scene = match &args.scene {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure(EXIT_CONFIG, e.into()))?;
            toml::from_str::<SceneConfig>(&text).map_err(|e| Failure(EXIT_CONFIG, Error::config("scene", e.message())))?
        }
        None => SceneConfig::default(),
    };
    if let Some(c) = args.captions_per_scene {
        scene.captions_per_scene = c;
    }
    if let Some(n) = args.noise {
        scene.noise = n;
    }
    scene.validate().map_err(with(EXIT_CONFIG))?;
    let data = generate_dataset(&scene, args.size, args.seed).map_err(with(EXIT_CONFIG))?;
    fs::create_dir_all(&args.out).map_err(|e| Failure(EXIT_DATA, e.into()))?;
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let write = |file: String, text: String| fs::write(args.out.join(file), text).map_err(|e| Failure(EXIT_DATA, e.into()));
        write(format!("{name}.tsv"), write_examples(split))?;
        write(format!("{name}.refs"), write_references(split))?;
    }
    eprintln!(
        "wrote {} train, {} val, {} test examples to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
