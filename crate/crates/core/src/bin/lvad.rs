use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use lorentz_vad::data::{
    generate_synthetic_corpus, load_bag, split_corpus, write_corpus, Manifest, Split,
    SyntheticConfig,
};
use lorentz_vad::gradcheck::op_suite;
use lorentz_vad::hlgatt::{Mixing, DEFAULT_ADJACENCY_TEMPERATURE};
use lorentz_vad::model::{end_to_end_check, ModelConfig};
use lorentz_vad::train::{
    evaluate_manifest, export_score_curve, train_manifest, write_epoch_log, write_evaluation,
    write_score_curve, Checkpoint, TrainConfig,
};
use lorentz_vad::{Error, Result};

/// Weakly supervised audio-visual anomaly detection on snippet features.
#[derive(Debug, Parser)]
#[command(name = "lvad", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic feature corpus and its manifest.
    GenData(GenDataArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Score the test split of a manifest and write metrics.
    Eval(EvalArgs),
    /// Export the per-frame score curve of one feature file.
    Score(ScoreArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory for feature files and manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of normal videos.
    #[arg(long, default_value_t = 60)]
    normal: usize,
    /// Number of abnormal videos.
    #[arg(long, default_value_t = 60)]
    abnormal: usize,
    /// Visual feature width.
    #[arg(long, default_value_t = 1024)]
    dv: usize,
    /// Audio feature width.
    #[arg(long, default_value_t = 128)]
    da: usize,
    /// Fewest snippets per video.
    #[arg(long, default_value_t = 20)]
    t_min: usize,
    /// Most snippets per video.
    #[arg(long, default_value_t = 60)]
    t_max: usize,
    /// Fraction of an abnormal video's snippets that are anomalous.
    #[arg(long, default_value_t = 0.3)]
    rate: f64,
    /// Offset of anomalous snippets from the normal distribution.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Fraction of each label assigned to the test split.
    #[arg(long, default_value_t = 0.33)]
    test_fraction: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoint.json and epoch_log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Initial learning rate.
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Learning-rate floor of the cosine schedule.
    #[arg(long, default_value_t = 1e-6)]
    lr_floor: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prefix rows per attention head.
    #[arg(long, default_value_t = 64)]
    prefix_dim: usize,
    /// Adapter bottleneck width.
    #[arg(long, default_value_t = 256)]
    bottleneck: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// Hyperboloid curvature (negative).
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    eta: f64,
    /// Graph attention layers per branch.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Attention heads in the fusion adapter.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Negative slope of the leaky ReLU on node A.
    #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
    slope: f64,
    /// Softmax temperature of the snippet adjacency.
    #[arg(long, default_value_t = DEFAULT_ADJACENCY_TEMPERATURE)]
    adjacency_temperature: f64,
    /// How node A gates node B in the graph attention.
    #[arg(long, value_enum, default_value_t = MixingArg::Elementwise)]
    mixing: MixingArg,
    /// Close the audio modulation gate (visual-only ablation).
    #[arg(long, default_value_t = false)]
    visual_only: bool,
    /// File of key=value lines using these flag names; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MixingArg {
    Elementwise,
    Matrix,
}

impl From<MixingArg> for Mixing {
    fn from(m: MixingArg) -> Self {
        match m {
            MixingArg::Elementwise => Mixing::Elementwise,
            MixingArg::Matrix => Mixing::Matrix,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for metrics.txt, metrics.csv and scores/.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file to score.
    #[arg(long)]
    bag: PathBuf,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })
}

/// Turns `key=value` lines into `--key=value` arguments.
fn config_args(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        context: format!("reading {}", path.display()),
        source: e,
    })?;
    let mut args = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            field: "entry",
            detail: format!("line {}: expected key=value", n + 1),
        })?;
        let key = key.trim();
        if key == "config" {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                field: "config",
                detail: "config files cannot include other config files".into(),
            });
        }
        // Switches take no value on the command line.
        match value.trim() {
            "true" => args.push(format!("--{key}").into()),
            "false" => {}
            value => args.push(format!("--{key}={value}").into()),
        }
    }
    Ok(args)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let config = SyntheticConfig {
        seed: a.seed,
        n_normal: a.normal,
        n_abnormal: a.abnormal,
        t_range: (a.t_min, a.t_max),
        d_visual: a.dv,
        d_audio: a.da,
        anomaly_rate: a.rate,
        separation: a.separation,
        ..SyntheticConfig::default()
    };
    config.validate()?;
    let bags = generate_synthetic_corpus(&config)?;
    let splits = split_corpus(&bags, a.test_fraction, a.seed)?;
    let manifest = write_corpus(&bags, &splits, &a.out)?;
    let n_test = splits.iter().filter(|&&s| s == Split::Test).count();
    println!(
        "wrote {} bags ({} train, {} test) and {}",
        bags.len(),
        bags.len() - n_test,
        n_test,
        manifest.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        learning_rate: a.lr,
        lr_floor: a.lr_floor,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        model: ModelConfig {
            heads: a.heads,
            prefix_dim: a.prefix_dim,
            bottleneck: a.bottleneck,
            dropout: a.dropout,
            eta: a.eta,
            layers: a.layers,
            leaky_slope: a.slope,
            adjacency_temperature: a.adjacency_temperature,
            mixing: a.mixing.into(),
            visual_only: a.visual_only,
            ..ModelConfig::default()
        },
    };
    config.validate()?;
    let manifest = Manifest::load(&a.manifest)?;
    let outcome = train_manifest(&manifest, &config)?;
    create_dir(&a.out)?;
    outcome.checkpoint.save(&a.out.join("checkpoint.json"))?;
    write_epoch_log(&outcome.log, &a.out.join("epoch_log.csv"))?;
    for r in &outcome.log {
        match r.eval_ap {
            Some(ap) => println!(
                "epoch {:>3}  loss {:.6}  lr {:.3e}  ap {:.4}",
                r.epoch, r.loss, r.lr, ap
            ),
            None => println!("epoch {:>3}  loss {:.6}  lr {:.3e}", r.epoch, r.loss, r.lr),
        }
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let bags = manifest.load_split(Split::Test)?;
    let evaluation = evaluate_manifest(&checkpoint.model, &manifest)?;
    create_dir(&a.out)?;
    write_evaluation(&evaluation, &bags, &a.out)?;
    let m = evaluation.metrics;
    println!(
        "ap={:.4} accuracy={:.4} precision={:.4} recall={:.4}",
        m.ap, m.accuracy, m.precision, m.recall
    );
    Ok(())
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let bag = load_bag(&a.bag)?;
    let rows = export_score_curve(&checkpoint.model, &bag)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_score_curve(&rows, &a.out)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool> {
    let mut reports = op_suite(a.seed, a.tol)?;
    reports.push(end_to_end_check(a.seed, a.tol)?);
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(failed == 0)
}

fn parse() -> Cli {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let matches = Cli::command().get_matches_from(&argv);
    let config = matches
        .subcommand_matches("train")
        .and_then(|m| m.get_one::<PathBuf>("config").cloned());
    let Some(config) = config else {
        return Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    };
    let extra = match config_args(&config) {
        Ok(extra) => extra,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    };
    // File values go first so that repeated command-line flags override them.
    let pos = argv
        .iter()
        .position(|a| a == "train")
        .expect("train subcommand present");
    let mut merged: Vec<OsString> = argv[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[pos + 1..]);
    let matches = Cli::command().get_matches_from(merged);
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn subcommand_name(command: &Command) -> &'static str {
    match command {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Score(_) => "score",
        Command::Gradcheck(_) => "gradcheck",
    }
}

fn main() -> ExitCode {
    let cli = parse();
    let name = subcommand_name(&cli.command);
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Score(a) => score_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(Error::Config(msg)) => {
            let mut cmd = Cli::command().bin_name("lvad");
            cmd.build();
            let usage = cmd
                .find_subcommand_mut(name)
                .map(|sub| sub.render_usage().to_string())
                .unwrap_or_default();
            eprintln!("error: {msg}\n\n{usage}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
