use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use ovad::data::{generate_synthetic, write_dataset, SynthConfig};
use ovad::error::{Error, Result};
use ovad::eval::{pr_curve, roc_curve, write_curve_csv, OpenSetReport};
use ovad::pipeline::{
    ablation_table, run_grid, score_bags, write_ablation_csv, Checkpoint, ExperimentConfig, ExperimentData, Model,
    Scorer, Trainer, Variant,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "ovad", version, about = "Open-set anomaly detection on feature bags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the config seed (training and synthetic data).
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset manifest; overrides `data.manifest`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory. Defaults to `$OVAD_OUT/<command>`, or `runs/<command>`.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic dataset (features, labels, manifest).
    Synth(Common),
    /// Runs the training stages, writing a checkpoint after each.
    Train {
        #[command(flatten)]
        common: Common,
        /// Stages to run: 1, 12 or 123.
        #[arg(long, default_value = "123")]
        stages: String,
        /// Stage-boundary checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Writes the open-set report of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, value_enum, default_value_t = ScorerArg::Evidential)]
        scorer: ScorerArg,
    },
    /// Writes per-instance scores of every bag in the dataset.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Trains the ablation grid and writes the median table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Comma-separated subset of full,no_triplet,no_evidence,no_all,top_k.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Writes ROC and PR curve points as CSV.
    Curves {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScorerArg {
    Evidential,
    Flow,
}

impl From<ScorerArg> for Scorer {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::Evidential => Scorer::Evidential,
            ScorerArg::Flow => Scorer::FlowDensity,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Ingestion { .. } => 3,
        Error::Contract(_) | Error::Checkpoint(_) | Error::Dimension(_) | Error::Domain(_) => 4,
        _ => 1,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(d) = &self.data {
            cfg.data.manifest = Some(d.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, command: &str) -> Result<PathBuf> {
        let dir = match &self.out {
            Some(o) => o.clone(),
            None => std::env::var_os("OVAD_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(command),
        };
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }
}

fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())
}

/// Trained model of `ckpt`, refusing checkpoints written under another config.
fn load_model(cfg: &ExperimentConfig, data: &ExperimentData, path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::Checkpoint(format!(
            "{} was written under a different config (checkpoint hash {}, config hash {})",
            path.display(),
            hex(&ckpt.config_hash),
            cfg.hash_hex()
        )));
    }
    Ok(Trainer::resume(cfg.clone(), data, &ckpt)?.model)
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn parse_stages(s: &str) -> Result<u8> {
    match s {
        "1" => Ok(1),
        "12" => Ok(2),
        "123" => Ok(3),
        _ => Err(Error::Config(format!("--stages must be 1, 12 or 123, got {s:?}"))),
    }
}

fn split_of(data: &ExperimentData, split: Split) -> &[ovad::pipeline::GraphBag] {
    match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    }
}

fn report_line(name: &str, r: &OpenSetReport) -> String {
    let fmt = |m: &Option<ovad::eval::MetricSummary>| {
        m.as_ref()
            .map_or("n/a".to_string(), |m| format!("roc {:.4} pr {:.4}", m.auc_roc, m.auc_pr))
    };
    format!(
        "{name}: overall roc {:.4} pr {:.4} | unseen {} | seen {}",
        r.overall.auc_roc,
        r.overall.auc_pr,
        fmt(&r.unseen),
        fmt(&r.seen)
    )
}

fn synth(common: &Common) -> Result<()> {
    let mut cfg = common.resolve()?;
    if common.config.is_none() {
        cfg.data.synth = SynthConfig {
            seed: cfg.data.synth.seed,
            ..SynthConfig::default()
        };
    }
    let dir = common.out_dir("synth")?;
    echo_config(&dir, &cfg)?;
    let bags = generate_synthetic(&cfg.data.synth, &mut ChaCha8Rng::seed_from_u64(cfg.data.synth.seed))?;
    let manifest = write_dataset(&dir, &bags)?;
    println!("{} bags written to {}", bags.len(), manifest.display());
    Ok(())
}

fn train(common: &Common, stages: &str, resume: Option<&Path>) -> Result<()> {
    let last = parse_stages(stages)?;
    let cfg = common.resolve()?;
    let dir = common.out_dir("train")?;
    echo_config(&dir, &cfg)?;
    let data = ExperimentData::prepare(&cfg)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &data, &Checkpoint::read(p)?)?,
        None => Trainer::new(cfg, &data)?,
    };
    let log_path = dir.join("train.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    while trainer.stage < last {
        let report = trainer.run_next()?;
        let mut lines = String::new();
        for rec in trainer.log.drain(..) {
            lines.push_str(&serde_json::to_string(&rec).expect("log record serializes"));
            lines.push('\n');
        }
        log.write_all(lines.as_bytes()).map_err(io_err(&log_path))?;
        let path = dir.join(format!("stage{}.ckpt", report.stage));
        trainer.checkpoint().write(&path)?;
        println!(
            "stage {}: {} iterations, best val {}, checkpoint {}",
            report.stage,
            report.iterations,
            report.best_val.map_or("n/a".into(), |v| format!("{v:.4}")),
            path.display()
        );
    }
    info!("training finished at stage {}", trainer.stage);
    Ok(())
}

fn eval(common: &Common, ckpt: &Path, split: Split, scorer: ScorerArg) -> Result<()> {
    let cfg = common.resolve()?;
    let dir = common.out_dir("eval")?;
    echo_config(&dir, &cfg)?;
    let data = ExperimentData::prepare(&cfg)?;
    let model = load_model(&cfg, &data, ckpt)?;
    let scored = score_bags(&model, split_of(&data, split), &data.seen_classes, scorer.into())?;
    let report = ovad::eval::open_set_report(&scored)?;
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&path, (json + "\n").as_bytes())?;
    println!("{}", report_line(&format!("{split:?}").to_lowercase(), &report));
    for n in &report.notes {
        println!("note: {n}");
    }
    Ok(())
}

fn score(common: &Common, ckpt: &Path) -> Result<()> {
    let cfg = common.resolve()?;
    let dir = common.out_dir("score")?;
    echo_config(&dir, &cfg)?;
    let data = ExperimentData::prepare(&cfg)?;
    let model = load_model(&cfg, &data, ckpt)?;
    let path = dir.join("scores.csv");
    let mut w = create(&path)?;
    let mut bags: Vec<_> = data.train.iter().chain(&data.val).chain(&data.test).collect();
    bags.sort_by(|a, b| a.bag.id.cmp(&b.bag.id));
    let mut rows = 0usize;
    let mut out = String::from("bag,instance,score,label\n");
    for b in bags {
        let s = model.score_graph(&b.graph)?;
        for (i, v) in s.iter().enumerate() {
            let label = b.bag.instance_labels.as_ref().map_or(String::new(), |l| l[i].to_string());
            out.push_str(&format!("{},{i},{v},{label}\n", b.bag.id));
            rows += 1;
        }
    }
    w.write_all(out.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&path))?;
    println!("{rows} instance scores written to {}", path.display());
    Ok(())
}

fn ablate(common: &Common, seeds: u64, variants: &[String]) -> Result<()> {
    let cfg = common.resolve()?;
    if seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let variants: Vec<Variant> = if variants.is_empty() {
        Variant::GRID.to_vec()
    } else {
        variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
    };
    let dir = common.out_dir("ablate")?;
    echo_config(&dir, &cfg)?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
    let runs = run_grid(&cfg, &variants, &seeds)?;
    let rows = ablation_table(&runs, &variants, variants.contains(&Variant::Full));
    let path = dir.join("ablation.csv");
    let mut buf = Vec::new();
    write_ablation_csv(&mut buf, &rows).expect("in-memory write");
    write_file(&path, &buf)?;
    print!("{}", String::from_utf8(buf).expect("ascii table"));
    Ok(())
}

fn curves(common: &Common, ckpt: &Path, split: Split) -> Result<()> {
    let cfg = common.resolve()?;
    let dir = common.out_dir("curves")?;
    echo_config(&dir, &cfg)?;
    let data = ExperimentData::prepare(&cfg)?;
    let model = load_model(&cfg, &data, ckpt)?;
    let scored = score_bags(&model, split_of(&data, split), &data.seen_classes, Scorer::Evidential)?;
    for (name, pts) in [
        ("roc.csv", roc_curve(&scored.scores, &scored.labels)?),
        ("pr.csv", pr_curve(&scored.scores, &scored.labels)?),
    ] {
        let path = dir.join(name);
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &pts).expect("in-memory write");
        write_file(&path, &buf)?;
        println!("{} points written to {}", pts.len(), path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(c) => synth(c),
        Command::Train { common, stages, resume } => train(common, stages, resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            split,
            scorer,
        } => eval(common, checkpoint, *split, *scorer),
        Command::Score { common, checkpoint } => score(common, checkpoint),
        Command::Ablate {
            common,
            seeds,
            variants,
        } => ablate(common, *seeds, variants),
        Command::Curves {
            common,
            checkpoint,
            split,
        } => curves(common, checkpoint, *split),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
