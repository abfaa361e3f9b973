use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use compograph::config::{EvalSection, Overrides, RunConfig};
use compograph::datasets::{generate_synthetic, load_pack, pack_stats, save_pack, FeaturePack, Split, SynthSpec};
use compograph::engine::{self, EpochLog};
use compograph::linguistic::GraphKind;
use compograph::numerics::GradCheckConfig;
use compograph::objectives::LossSet;
use compograph::{Error, Result};

/// Exit code for a gradient check that ran but exceeded its tolerance.
const EXIT_TOLERANCE: u8 = 5;

const LOSS_LOG: &str = "losses.jsonl";
const CONFIG_COPY: &str = "config.toml";

#[derive(Parser)]
#[command(name = "compograph", version, about = "Attribute-object composition recognition with a graph over concepts")]
struct Cli {
    /// Feature pack directory.
    #[arg(long, global = true, env = "COMPOGRAPH_PACK")]
    pack: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic feature pack.
    GenSynth(GenSynthArgs),
    /// Print pack statistics as JSON.
    Stats,
    /// Print a complete run configuration as TOML.
    InitConfig {
        /// Small widths for single-core runs on synthetic packs.
        #[arg(long)]
        desk: bool,
    },
    /// Train on the pack's train split and save the model.
    Train(TrainArgs),
    /// Closed/open top-1 accuracy of a saved model.
    Eval(EvalArgs),
    /// Rank test images by distance to a composition.
    Retrieve(RetrieveArgs),
    /// Finite-difference check of the training objective's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthSpec::default().attribute_count)]
    attrs: usize,
    #[arg(long, default_value_t = SynthSpec::default().object_count)]
    objs: usize,
    #[arg(long, default_value_t = SynthSpec::default().seen)]
    seen: usize,
    #[arg(long, default_value_t = SynthSpec::default().unseen)]
    unseen: usize,
    /// Images per composition.
    #[arg(long, default_value_t = SynthSpec::default().images_per_composition)]
    per_comp: usize,
    #[arg(long, default_value_t = SynthSpec::default().visual_dim)]
    visual_dim: usize,
    #[arg(long, default_value_t = SynthSpec::default().embed_dim)]
    embed_dim: usize,
    /// Std of the Gaussian noise on visual features.
    #[arg(long, default_value_t = SynthSpec::default().noise_std)]
    noise: f64,
    /// Std of the Gaussian noise on node embeddings.
    #[arg(long, default_value_t = SynthSpec::default().embed_noise_std)]
    embed_noise: f64,
    #[arg(long, default_value_t = SynthSpec::default().seed)]
    seed: u64,
}

/// Config source plus the ablation switches shared by `train` and `gradcheck`.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small single-core preset instead of the defaults.
    #[arg(long, conflicts_with = "config")]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the clustering step during training and evaluation.
    #[arg(long)]
    no_cluster: bool,
    /// Keep training clustering but skip it on test images.
    #[arg(long)]
    no_cluster_eval: bool,
    #[arg(long, value_enum)]
    graph: Option<GraphArg>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    gcn_layers: Option<u8>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphArg {
    #[value(name = "vanilla_random", alias = "vanilla")]
    VanillaRandom,
    #[value(name = "sparse_random", alias = "sparse")]
    SparseRandom,
    Link,
    Embedding,
    None,
}

impl From<GraphArg> for GraphKind {
    fn from(g: GraphArg) -> Self {
        match g {
            GraphArg::VanillaRandom => GraphKind::VanillaRandom,
            GraphArg::SparseRandom => GraphKind::SparseRandom,
            GraphArg::Link => GraphKind::Link,
            GraphArg::Embedding => GraphKind::Embedding,
            GraphArg::None => GraphKind::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Fus,
    #[value(name = "fus+tri")]
    FusTri,
    #[value(name = "fus+de")]
    FusDe,
    All,
}

impl From<LossArg> for LossSet {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Fus => LossSet::Fus,
            LossArg::FusTri => LossSet::FusTri,
            LossArg::FusDe => LossSet::FusDe,
            LossArg::All => LossSet::All,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for the model files, loss log and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Closed,
    Open,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::Both)]
    metric: MetricArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Skip clustering on test images.
    #[arg(long)]
    no_cluster_eval: bool,
    /// Images clustered together at test time.
    #[arg(long)]
    eval_batch_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    model: PathBuf,
    /// Composition as `attr1,attr2:object`.
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    topk: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Check a saved model instead of freshly initialized parameters.
    #[arg(long, conflicts_with_all = ["config", "desk"])]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Training images in the checked batch.
    #[arg(long, default_value_t = 4)]
    images: usize,
    /// Seeded subsample of parameter entries; 0 checks every entry.
    #[arg(long, default_value_t = 500)]
    max_entries: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let pack_dir = cli.pack;
    let pack = || -> Result<FeaturePack> {
        let dir = pack_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no pack given (use --pack or COMPOGRAPH_PACK)".into()))?;
        load_pack(dir)
    };
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Stats => {
            let stats = pack_stats(&pack()?);
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::InitConfig { desk } => {
            let cfg = if desk { RunConfig::desk() } else { RunConfig::default() };
            print!("{}", cfg.to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(a) => train(&pack()?, a),
        Command::Eval(a) => eval(&pack()?, a),
        Command::Retrieve(a) => retrieve(&pack()?, a),
        Command::Gradcheck(a) => gradcheck(&pack()?, a),
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        attribute_count: a.attrs,
        object_count: a.objs,
        seen: a.seen,
        unseen: a.unseen,
        images_per_composition: a.per_comp,
        visual_dim: a.visual_dim,
        embed_dim: a.embed_dim,
        noise_std: a.noise,
        embed_noise_std: a.embed_noise,
        seed: a.seed,
    };
    let pack = generate_synthetic(&spec)?;
    save_pack(&pack, &a.out)?;
    eprintln!("wrote {} images to {}", pack.images.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn resolve_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, a.desk) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, true) => RunConfig::desk(),
        (None, false) => RunConfig::default(),
    };
    cfg.apply(&overrides(a))?;
    Ok(cfg)
}

fn overrides(a: &ConfigArgs) -> Overrides {
    Overrides {
        seed: a.seed,
        no_cluster: a.no_cluster,
        no_cluster_eval: a.no_cluster_eval,
        graph: a.graph.map(Into::into),
        loss: a.loss.map(Into::into),
        gcn_layers: a.gcn_layers.map(usize::from),
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr: a.lr,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn train(pack: &FeaturePack, a: TrainArgs) -> Result<ExitCode> {
    let cfg = resolve_config(&a.cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    let log_path = a.out.join(LOSS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_error(&log_path, e))?);
    let mut write_err = None;
    let quiet = a.quiet;
    let outcome = engine::train_with(pack, &cfg, |e: &EpochLog| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  fus {:.5}  tri {:.5}  de {:.5}  l1 {:.5}  total {:.5}{}",
                e.epoch,
                e.fusion,
                e.triplet,
                e.decoding,
                e.sparsity,
                e.total,
                e.val_closed.map(|v| format!("  val {v:.2}%")).unwrap_or_default()
            );
        }
        let line = serde_json::to_string(e).expect("epoch log serializes");
        if let Err(err) = writeln!(log, "{line}") {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(io_error(&log_path, err));
    }
    log.flush().map_err(|e| io_error(&log_path, e))?;
    engine::save_model(&outcome.model, &a.out)?;
    write_file(&a.out.join(CONFIG_COPY), &cfg.to_toml()?)?;
    if let Some(best) = outcome.best_epoch {
        eprintln!("kept parameters from epoch {best}");
    }
    eprintln!("saved model to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(pack: &FeaturePack, a: EvalArgs) -> Result<ExitCode> {
    let model = engine::load_model(&a.model)?;
    let mut opts: EvalSection = model.config().eval.clone();
    if a.no_cluster_eval {
        opts.cluster = false;
    }
    if a.eval_batch_size.is_some() {
        opts.batch_size = a.eval_batch_size;
    }
    let model = model.with_eval(opts)?;
    let split = match a.split {
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let report = engine::evaluate_split(&model, pack, split)?;
    print!("{report}");
    let mut json = serde_json::json!({
        "split": report.split,
        "images": report.images,
        "eval_batch_size": report.eval_batch_size,
        "clustered": report.clustered,
    });
    let fields = json.as_object_mut().expect("object literal");
    if a.metric != MetricArg::Open {
        fields.insert("closed".into(), report.closed_top1.into());
        fields.insert("closed_candidates".into(), report.closed_candidates.into());
    }
    if a.metric != MetricArg::Closed {
        fields.insert("open".into(), report.open_top1.into());
        fields.insert("open_candidates".into(), report.open_candidates.into());
    }
    if a.metric == MetricArg::Both {
        fields.insert("h_mean".into(), report.h_mean.into());
    }
    println!("{}", serde_json::to_string(&json)?);
    Ok(ExitCode::SUCCESS)
}

fn retrieve(pack: &FeaturePack, a: RetrieveArgs) -> Result<ExitCode> {
    let model = engine::load_model(&a.model)?;
    let query = engine::parse_query(pack, &a.query)?;
    for (rank, hit) in engine::retrieve(&model, pack, &query, a.topk)?.iter().enumerate() {
        let label = pack.images[hit.index]
            .composition()
            .label(&pack.attributes, &pack.objects);
        println!("{:>3}  {}  {:.6}  {}", rank + 1, hit.id, hit.distance, label);
    }
    Ok(ExitCode::SUCCESS)
}

/// `count` training images spread evenly over the train split.
fn spread_indices(pack: &FeaturePack, count: usize) -> Result<Vec<usize>> {
    let train = pack.indices(Split::Train);
    if count == 0 || count > train.len() {
        return Err(Error::Config(format!(
            "--images must lie in 1..={}, got {count}",
            train.len()
        )));
    }
    Ok((0..count).map(|k| train[k * train.len() / count]).collect())
}

fn gradcheck(pack: &FeaturePack, a: GradcheckArgs) -> Result<ExitCode> {
    let model = match &a.model {
        Some(dir) => engine::load_model(dir)?,
        None => engine::ModelState::new(&resolve_config(&a.cfg)?, pack)?,
    };
    let indices = spread_indices(pack, a.images)?;
    let cfg = GradCheckConfig {
        eps: a.eps,
        tol: a.tol,
        max_entries: (a.max_entries > 0).then_some(a.max_entries),
        seed: model.seed(),
        ..GradCheckConfig::default()
    };
    let report = model.grad_check(pack, &indices, &cfg)?;
    println!("{report}");
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_TOLERANCE)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn graph_and_loss_names_round_trip_through_core() {
        for g in GraphArg::value_variants() {
            let name = g.to_possible_value().unwrap().get_name().to_string();
            let kind: GraphKind = name.parse().unwrap();
            assert_eq!(kind, GraphKind::from(*g));
        }
        for l in LossArg::value_variants() {
            let name = l.to_possible_value().unwrap().get_name().to_string();
            let set: LossSet = name.parse().unwrap();
            assert_eq!(set, LossSet::from(*l));
        }
    }
}
