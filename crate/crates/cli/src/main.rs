//! `tgdt` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or invalid parameter, 2 data or format
//! error, 3 numeric failure.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tgdt::encoder::{encode_sample, EncoderConfig, EncoderParams};
use tgdt::engine::{InferenceConfig, Query, SearchPath};
use tgdt::eval::{
    ablation, benchmark, evaluate_retrieval, sweep_inference, sweep_paths, sweep_sigma,
    GroundTruth, SweepParam,
};
use tgdt::features::{read_feature_file, read_jsonl, write_feature_file, SampleFeatures};
use tgdt::index::{load_index, save_index, GalleryIndex};
use tgdt::loss::{LossConfig, TaskMode};
use tgdt::similarity::SimilarityMode;
use tgdt::synthetic::{generate_synthetic_dataset, SyntheticDataConfig};
use tgdt::trainer::{read_pairs, train, write_history, write_pairs, PairedDataset, TrainConfig};
use tgdt::Error;

#[derive(Parser)]
#[command(
    name = "tgdt",
    version,
    about = "Cross-modal image-text retrieval with global and token-level scores"
)]
struct Cli {
    /// Worker threads; 1 keeps every run bit-reproducible on any machine.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-correspondence dataset.
    GenSynthetic(GenArgs),
    /// Convert JSON-lines samples to the binary feature format.
    Ingest(IngestArgs),
    /// Train both encoder branches on paired features.
    Train(TrainArgs),
    /// Encode raw features with a trained checkpoint.
    Encode(EncodeArgs),
    /// Build a gallery index from encoded features.
    Index(IndexArgs),
    /// Rank a gallery for each query sample.
    Search(SearchArgs),
    /// Compute R@1/5/10 in both directions.
    Eval(EvalArgs),
    /// Evaluate over a list of theta, k or sigma values.
    Sweep(SweepArgs),
    /// Time every search mode over all queries.
    Bench(BenchArgs),
    /// Train and evaluate every task mode with and without the intra-modal term.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 512)]
    pairs: usize,
    #[arg(long, default_value_t = 64)]
    concepts: usize,
    #[arg(long, default_value_t = 4)]
    concepts_per_sample: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    /// Region feature width; image tokens gain 4 box columns.
    #[arg(long, default_value_t = 32)]
    image_dim: usize,
    #[arg(long, default_value_t = 32)]
    text_dim: usize,
    #[arg(long, default_value_t = 8)]
    tokens: usize,
    #[arg(long, default_value_t = 32)]
    latent_dim: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Image feature file.
    #[arg(long)]
    images: PathBuf,
    /// Text feature file.
    #[arg(long)]
    texts: PathBuf,
    /// Ground-truth pairing, one `image_id<TAB>text_id` per line.
    #[arg(long)]
    pairs: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Global,
    Local,
    Joint,
}

#[derive(Args)]
struct TrainFlags {
    /// Triplet margin.
    #[arg(long, default_value_t = 0.2)]
    delta: f64,
    /// Intra-modal slack; `inf` disables the term.
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = Task::Joint)]
    task: Task,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 40)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Gradient-norm cap; off unless given.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    model_dim: usize,
    #[arg(long, default_value_t = 64)]
    output_dim: usize,
}

impl TrainFlags {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                delta: self.delta,
                sigma: self.sigma,
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.lr,
            seed: self.seed,
            task_mode: match self.task {
                Task::Global => TaskMode::GlobalOnly,
                Task::Local => TaskMode::LocalOnly,
                Task::Joint => TaskMode::Joint,
            },
            clip_norm: self.clip_norm,
        }
    }

    /// Input widths are filled in from the data at training time.
    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.layers,
            num_heads: self.heads,
            model_dim: self.model_dim,
            output_dim: self.output_dim,
            image_input_dim: 1,
            text_input_dim: 1,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: TrainFlags,
    /// Checkpoint output.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss and validation recall, tab-separated.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    /// Encoded feature file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Checkpoint whose digest is recorded in the index.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Global,
    Local,
    Mixed,
    TwoStage,
}

#[derive(Args)]
struct PathFlags {
    #[arg(long, value_enum, default_value_t = Mode::TwoStage)]
    mode: Mode,
    /// Candidates kept by the global stage.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Weight of the local score in mixed scoring.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
}

impl PathFlags {
    fn path(&self) -> SearchPath {
        match self.mode {
            Mode::Global => SearchPath::Exhaustive(SimilarityMode::Global),
            Mode::Local => SearchPath::Exhaustive(SimilarityMode::Local),
            Mode::Mixed => SearchPath::Exhaustive(SimilarityMode::Mixed(self.theta)),
            Mode::TwoStage => SearchPath::TwoStage(InferenceConfig {
                k: self.k,
                theta: self.theta,
            }),
        }
    }
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query feature file (encoded unless --checkpoint is given).
    #[arg(long)]
    query: PathBuf,
    /// Encode the queries with this checkpoint first.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    path: PathFlags,
    /// Entries printed per query.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct IndexPair {
    #[arg(long)]
    image_index: PathBuf,
    #[arg(long)]
    text_index: PathBuf,
    /// Ground-truth pairing file.
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    indexes: IndexPair,
    #[command(flatten)]
    path: PathFlags,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Theta,
    K,
    Sigma,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: Param,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    path: PathFlags,
    #[arg(long, required_unless_present = "images")]
    image_index: Option<PathBuf>,
    #[arg(long, required_unless_present = "images")]
    text_index: Option<PathBuf>,
    #[arg(long, required_unless_present = "images")]
    gt: Option<PathBuf>,
    /// Raw data for a sigma sweep, which retrains per value.
    #[arg(long, requires_all = ["texts", "pairs"])]
    images: Option<PathBuf>,
    #[arg(long)]
    texts: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    indexes: IndexPair,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// Queries per direction; all when omitted.
    #[arg(long)]
    max_queries: Option<usize>,
    /// Spread queries over the --threads pool instead of running them one at a time.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    path: PathFlags,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn open(path: &Path) -> tgdt::Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> tgdt::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_features(path: &Path) -> tgdt::Result<Vec<SampleFeatures>> {
    read_feature_file(open(path)?)
}

fn read_index(path: &Path) -> tgdt::Result<GalleryIndex> {
    load_index(open(path)?)
}

fn read_gt(path: &Path) -> tgdt::Result<GroundTruth> {
    GroundTruth::from_pairs(&read_pairs(open(path)?)?)
}

fn load_data(d: &DataArgs) -> tgdt::Result<PairedDataset> {
    PairedDataset::new(
        read_features(&d.images)?,
        read_features(&d.texts)?,
        &read_pairs(open(&d.pairs)?)?,
    )
}

fn write_json<T: serde::Serialize>(path: &Option<PathBuf>, value: &T) -> tgdt::Result<()> {
    if let Some(p) = path {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io(e.into()))?;
        writeln!(w)?;
        w.flush()?;
    }
    Ok(())
}

fn print(s: &str) -> tgdt::Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(s.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> tgdt::Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => {
            let ds = generate_synthetic_dataset(&SyntheticDataConfig {
                num_pairs: a.pairs,
                num_concepts: a.concepts,
                concepts_per_sample: a.concepts_per_sample,
                noise_std: a.noise_std,
                image_feature_dim: a.image_dim,
                text_input_dim: a.text_dim,
                tokens_per_sample: a.tokens,
                latent_dim: a.latent_dim,
                seed: a.seed,
            })?;
            fs::create_dir_all(&a.out_dir)?;
            write_feature_file(&ds.images, create(&a.out_dir.join("images.tgf"))?)?;
            write_feature_file(&ds.texts, create(&a.out_dir.join("texts.tgf"))?)?;
            write_pairs(&ds.pairs, create(&a.out_dir.join("pairs.tsv"))?)?;
        }
        Command::Ingest(a) => {
            let samples = read_jsonl(open(&a.input)?)?;
            write_feature_file(&samples, create(&a.output)?)?;
        }
        Command::Train(a) => {
            a.flags.train_config().validate()?;
            let data = load_data(&a.data)?;
            let out = train(&data, &a.flags.encoder_config(), &a.flags.train_config())?;
            out.params.save(create(&a.out)?)?;
            if let Some(h) = &a.history {
                write_history(&out.history, create(h)?)?;
            }
        }
        Command::Encode(a) => {
            let params = EncoderParams::load(open(&a.checkpoint)?)?;
            let raw = read_features(&a.input)?;
            let encoded = tgdt::trainer::encode_all(&params, &raw)?;
            write_feature_file(&encoded, create(&a.output)?)?;
        }
        Command::Index(a) => {
            let digest = match &a.checkpoint {
                Some(p) => EncoderParams::load(open(p)?)?.digest(),
                None => [0; 32],
            };
            let idx = GalleryIndex::build(&read_features(&a.input)?, digest)?;
            save_index(&idx, create(&a.output)?)?;
        }
        Command::Search(a) => {
            let path = a.path.path();
            path.validate()?;
            let index = read_index(&a.index)?;
            let mut queries = read_features(&a.query)?;
            if let Some(c) = &a.checkpoint {
                let params = EncoderParams::load(open(c)?)?;
                queries = queries
                    .iter()
                    .map(|q| encode_sample(&params, q))
                    .collect::<tgdt::Result<_>>()?;
            }
            let mut s = String::from("query\trank\tid\tscore\tstage\n");
            for q in &queries {
                let ranking = path.run(&Query::new(q)?, &index, a.top)?;
                for (rank, e) in ranking.entries.iter().take(a.top).enumerate() {
                    s.push_str(&format!(
                        "{}\t{}\t{}\t{:.9}\t{}\n",
                        q.id(),
                        rank + 1,
                        e.id,
                        e.score,
                        e.stage
                    ));
                }
            }
            print(&s)?;
        }
        Command::Eval(a) => {
            a.path.path().validate()?;
            let report = evaluate_retrieval(
                &read_index(&a.indexes.image_index)?,
                &read_index(&a.indexes.text_index)?,
                &read_gt(&a.indexes.gt)?,
                &a.path.path(),
            )?;
            print(&report.to_tsv())?;
            write_json(&a.json, &report)?;
        }
        Command::Sweep(a) => {
            let base = a.path.path();
            let table = match (a.param, &a.images) {
                (Param::Sigma, Some(images)) => {
                    for &sigma in &a.values {
                        LossConfig {
                            sigma,
                            ..a.flags.train_config().loss
                        }
                        .validate()?;
                    }
                    let data = DataArgs {
                        images: images.clone(),
                        texts: a.texts.clone().expect("clap enforces --texts"),
                        pairs: a.pairs.clone().expect("clap enforces --pairs"),
                    };
                    sweep_sigma(
                        &a.values,
                        &load_data(&data)?,
                        &a.flags.encoder_config(),
                        &a.flags.train_config(),
                        &base,
                    )?
                }
                (Param::Sigma, None) => {
                    return Err(Error::Domain(
                        "a sigma sweep needs --images, --texts and --pairs".into(),
                    ))
                }
                (param, _) => {
                    let param = match param {
                        Param::Theta => SweepParam::Theta,
                        _ => SweepParam::K,
                    };
                    sweep_paths(param, &base, &a.values)?;
                    let (Some(i), Some(t), Some(g)) = (&a.image_index, &a.text_index, &a.gt) else {
                        return Err(Error::Domain(
                            "theta and k sweeps need --image-index, --text-index and --gt".into(),
                        ));
                    };
                    sweep_inference(
                        param,
                        &a.values,
                        &base,
                        &read_index(i)?,
                        &read_index(t)?,
                        &read_gt(g)?,
                    )?
                }
            };
            print(&table.to_tsv())?;
            write_json(&a.json, &table)?;
        }
        Command::Bench(a) => {
            let cfg = InferenceConfig {
                k: a.k,
                theta: a.theta,
            };
            cfg.validate()?;
            let paths = [
                SearchPath::Exhaustive(SimilarityMode::Global),
                SearchPath::Exhaustive(SimilarityMode::Local),
                SearchPath::Exhaustive(SimilarityMode::Mixed(a.theta)),
                SearchPath::TwoStage(cfg),
            ];
            let report = benchmark(
                &read_index(&a.indexes.image_index)?,
                &read_index(&a.indexes.text_index)?,
                &read_gt(&a.indexes.gt)?,
                &paths,
                a.max_queries,
                a.parallel,
            )?;
            print(&report.to_tsv())?;
            write_json(&a.json, &report)?;
        }
        Command::Ablate(a) => {
            a.flags.train_config().validate()?;
            a.path.path().validate()?;
            let table = ablation(
                &load_data(&a.data)?,
                &a.flags.encoder_config(),
                &a.flags.train_config(),
                &a.path.path(),
            )?;
            print(&table.to_tsv())?;
            write_json(&a.json, &table)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Domain(_) => 1,
        Error::Numeric(_) => 3,
        Error::Format(_) | Error::Truncated { .. } | Error::Data(_) | Error::Io(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
