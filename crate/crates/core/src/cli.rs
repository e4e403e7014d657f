//! The `planeqc` command line. Every command reads and writes fixed file
//! names inside one run directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::anchors::{embed_all, select_anchors, AnchorSet};
use crate::config::{RunConfig, RunRecord};
use crate::error::{Error, Result};
use crate::eval::{paired_ttest, pristine_bases, severity_levels, severity_sweep, EvalMetrics};
use crate::imaging::{gen_synthetic_corpus, load_pgm, read_corpus, read_manifest, write_corpus, DatasetSplit, Image, Split};
use crate::model::Model;
use crate::scoring::{calibrate, quality_score, AnchorCache, CalibrationStats, ScoreRow};
use crate::training::train;

#[derive(Debug, Parser)]
#[command(name = "planeqc", version, about = "Annotation-free plane quality control")]
pub struct Cli {
    /// Worker threads; 1 makes every output reproducible bit for bit.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run directory holding all artifacts.
    #[arg(long, default_value = "run")]
    pub run: PathBuf,
    /// Corpus directory [default: <run>/corpus].
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSON config, or a `run.json` written by an earlier run. Without it the
    /// config recorded by the latest earlier stage in `<run>/run.json` is
    /// the starting point.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set oks.r=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pick reference anchors per plane.
    SelectAnchors {
        #[command(flatten)]
        common: Common,
        /// variance, random, kmedoids or kcenter.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        k1: Option<usize>,
    },
    /// Fit the aligners and plane experts, one plane at a time
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Freeze per-plane loss ranges over the training split.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Score the query split, or the given PGM files with `--plane`.
    Score {
        #[command(flatten)]
        common: Common,
        /// Plane the given images claim to show
        #[arg(long)]
        plane: Option<String>,
        /// PGM files to score instead of the query split
        images: Vec<PathBuf>,
    },
    /// Correlate scores with the manifest's reference scores.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Scores of a competing run, compared by a paired t-test on
        /// absolute errors.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Score graded deformations of pristine query images.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Write pooled backbone embeddings of every corpus image.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::SelectAnchors { .. } => "select-anchors",
            Command::Train { .. } => "train",
            Command::Calibrate { .. } => "calibrate",
            Command::Score { .. } => "score",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::ExportEmbeddings { .. } => "export-embeddings",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::SelectAnchors { common, .. }
            | Command::Train { common }
            | Command::Calibrate { common }
            | Command::Score { common, .. }
            | Command::Eval { common, .. }
            | Command::Sweep { common }
            | Command::ExportEmbeddings { common } => common,
        }
    }

    /// Flags that are shorthands for config keys.
    fn flag_overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Command::GenData { seed: Some(s), .. } => out.push(format!("seed={s}")),
            Command::SelectAnchors { strategy, k1, .. } => {
                if let Some(s) = strategy {
                    out.push(format!("anchors.strategy={s}"));
                }
                if let Some(k) = k1 {
                    out.push(format!("corpus.k1={k}"));
                }
            }
            _ => {}
        }
        out
    }
}

/// Artifact locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub corpus: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, corpus: Option<PathBuf>) -> Self {
        let root = root.into();
        let corpus = corpus.unwrap_or_else(|| root.join("corpus"));
        Self { root, corpus }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn anchors(&self) -> PathBuf {
        self.file("anchors.csv")
    }
    pub fn model(&self) -> PathBuf {
        self.file("model.strq")
    }
    pub fn train_log(&self) -> PathBuf {
        self.file("train_log.csv")
    }
    pub fn calibration(&self) -> PathBuf {
        self.file("calib.strq")
    }
    pub fn scores(&self) -> PathBuf {
        self.file("scores.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.file("metrics.json")
    }
    pub fn sweep(&self) -> PathBuf {
        self.file("sweep.csv")
    }
    pub fn sweep_metrics(&self) -> PathBuf {
        self.file("sweep_metrics.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.file("embeddings.csv")
    }
    pub fn record(&self) -> PathBuf {
        self.file("run.json")
    }
    pub fn checkpoint(&self, plane: &str, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("{plane}_epoch{epoch:03}.strq"))
    }
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::config(format!("missing {what} {}; run `planeqc {producer}` first", path.display())));
    }
    Ok(())
}

/// Exit status for an error: 1 for invalid input, 2 for runtime failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Format(_) => 1,
        _ => 2,
    }
}

/// Resolves the config of `cmd`: defaults, then `--config`, then `--set`,
/// then flag shorthands.
/// Pipeline stages in the order they normally run.
pub const STAGES: [&str; 8] =
    ["gen-data", "select-anchors", "train", "calibrate", "score", "eval", "sweep", "export-embeddings"];

/// The config recorded by the latest stage before `command` in `run_dir`.
fn inherited(run_dir: &Path, command: &str) -> Result<Option<RunConfig>> {
    let path = run_dir.join("run.json");
    if !path.exists() {
        return Ok(None);
    }
    let mut rec = RunRecord::load(&path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let at = STAGES.iter().position(|s| *s == command).unwrap_or(STAGES.len());
    Ok(STAGES[..at].iter().rev().find_map(|s| rec.commands.remove(*s)))
}

pub fn resolve_config(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path, cmd.name())?,
        None => inherited(&common.run, cmd.name())?.unwrap_or_default(),
    };
    for s in common.set.iter().cloned().chain(cmd.flag_overrides()) {
        cfg.set(&s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(dir: &RunDir, cfg: &RunConfig) -> Result<DatasetSplit> {
    require(&dir.corpus.join("manifest.csv"), "corpus manifest", "gen-data")?;
    read_corpus(&dir.corpus, cfg.corpus.k1)
}

fn load_anchors(dir: &RunDir, data: &DatasetSplit) -> Result<AnchorSet> {
    require(&dir.anchors(), "anchor manifest", "select-anchors")?;
    AnchorSet::read_csv(dir.anchors(), data)
}

fn load_model(dir: &RunDir) -> Result<Model> {
    require(&dir.model(), "model checkpoint", "train")?;
    Model::load(dir.model())
}

fn load_stats(dir: &RunDir, model: &Model) -> Result<CalibrationStats> {
    require(&dir.calibration(), "calibration artifact", "calibrate")?;
    CalibrationStats::load(dir.calibration(), &model.planes)
}

/// Runs one parsed command.
pub fn run(cmd: &Command) -> Result<()> {
    let cfg = resolve_config(cmd)?;
    let common = cmd.common();
    let dir = RunDir::new(&common.run, common.corpus.clone());
    std::fs::create_dir_all(&dir.root)?;
    match cmd {
        Command::GenData { .. } => cmd_gen_data(&dir, &cfg)?,
        Command::SelectAnchors { .. } => cmd_select_anchors(&dir, &cfg)?,
        Command::Train { .. } => cmd_train(&dir, &cfg)?,
        Command::Calibrate { .. } => cmd_calibrate(&dir, &cfg)?,
        Command::Score { plane, images, .. } => cmd_score(&dir, &cfg, plane.as_deref(), images)?,
        Command::Eval { baseline, .. } => cmd_eval(&dir, baseline.as_deref())?,
        Command::Sweep { .. } => cmd_sweep(&dir, &cfg)?,
        Command::ExportEmbeddings { .. } => cmd_export_embeddings(&dir, &cfg)?,
    }
    RunRecord::merge_into(dir.record(), cmd.name(), &cfg)
}

pub fn cmd_gen_data(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let data = gen_synthetic_corpus(&cfg.corpus, cfg.seed)?;
    write_corpus(&data, &dir.corpus)
}

pub fn cmd_select_anchors(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let data = load_corpus(dir, cfg)?;
    let model = Model::new(plane_names(&data), &cfg.encoder, &cfg.lra, &cfg.oks)?;
    let anchors = select_anchors(&model.encoder, &data, cfg.anchors.strategy, cfg.corpus.k1, cfg.anchors.seed)?;
    anchors.write_csv(dir.anchors())
}

fn plane_names(data: &DatasetSplit) -> Vec<String> {
    data.planes.iter().map(|p| p.name.clone()).collect()
}

pub fn cmd_train(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let data = load_corpus(dir, cfg)?;
    let anchors = load_anchors(dir, &data)?;
    let mut model = Model::new(plane_names(&data), &cfg.encoder, &cfg.lra, &cfg.oks)?;
    let every = cfg.train.checkpoint_every;
    let log = train(&cfg.train_config(), &data, &anchors, &mut model, |row, m| {
        if every > 0 && (row.epoch + 1) % every == 0 {
            let path = dir.checkpoint(&row.plane, row.epoch + 1);
            std::fs::create_dir_all(path.parent().expect("checkpoint path has a parent"))?;
            m.save(path)?;
        }
        Ok(())
    })?;
    model.save(dir.model())?;
    log.write_csv(dir.train_log())
}

pub fn cmd_calibrate(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let data = load_corpus(dir, cfg)?;
    let anchors = load_anchors(dir, &data)?;
    let model = load_model(dir)?;
    let cache = AnchorCache::build(&model, &anchors, &data)?;
    calibrate(&model, &data, &cache)?.save(dir.calibration())
}

pub fn cmd_score(dir: &RunDir, cfg: &RunConfig, plane: Option<&str>, images: &[PathBuf]) -> Result<()> {
    let data = load_corpus(dir, cfg)?;
    let anchors = load_anchors(dir, &data)?;
    let model = load_model(dir)?;
    let stats = load_stats(dir, &model)?;

    let mut queries: Vec<(String, usize, Image)> = Vec::new();
    if images.is_empty() {
        for (c, split) in data.query.iter().enumerate() {
            let c = model.plane_index(&data.planes[c].name)?;
            queries.extend(split.iter().map(|(p, img)| (p.clone(), c, img.clone())));
        }
    } else {
        let name = plane.ok_or_else(|| Error::config("scoring explicit images needs --plane"))?;
        let c = model.plane_index(name)?;
        for path in images {
            require(path, "query image", "gen-data")?;
            queries.push((path.display().to_string(), c, load_pgm(path)?));
        }
    }

    let cache = AnchorCache::build(&model, &anchors, &data)?;
    let start = Instant::now();
    let rows = queries
        .par_iter()
        .map(|(id, c, img)| {
            let report = quality_score(&model, id, img, *c, cache.plane(*c)?, &stats, &cfg.score)?;
            Ok(ScoreRow::from(&report))
        })
        .collect::<Result<Vec<_>>>()?;
    let elapsed = start.elapsed();
    eprintln!(
        "scored {} images in {:.1} ms ({:.2} ms/image)",
        rows.len(),
        elapsed.as_secs_f64() * 1e3,
        elapsed.as_secs_f64() * 1e3 / rows.len().max(1) as f64
    );
    let mut w = csv::Writer::from_path(dir.scores())?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    csv::Reader::from_path(path)?.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn cmd_eval(dir: &RunDir, baseline: Option<&Path>) -> Result<()> {
    require(&dir.scores(), "score table", "score")?;
    let refs: std::collections::BTreeMap<String, f64> =
        read_manifest(&dir.corpus)?.into_iter().filter_map(|r| r.score.map(|s| (r.path, s))).collect();
    let rows: Vec<(String, f64, f64)> =
        read_scores(&dir.scores())?.into_iter().filter_map(|r| refs.get(&r.path).map(|&s| (r.path, r.q, s))).collect();
    if rows.len() < 3 {
        return Err(Error::config(format!("only {} scored images have a reference score", rows.len())));
    }
    let q: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let reference: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mut metrics = EvalMetrics::correlations(&q, &reference)?;
    if let Some(path) = baseline {
        require(path, "baseline score table", "score")?;
        let other: std::collections::BTreeMap<String, f64> = read_scores(path)?.into_iter().map(|r| (r.path, r.q)).collect();
        let (mut ours, mut theirs) = (Vec::new(), Vec::new());
        for (p, q, s) in &rows {
            if let Some(b) = other.get(p) {
                ours.push((q - s).abs());
                theirs.push((b - s).abs());
            }
        }
        let (t, p) = paired_ttest(&ours, &theirs)?;
        metrics.t = Some(t);
        metrics.p = Some(p);
    }
    metrics.write_json(dir.metrics())
}

pub fn cmd_sweep(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let data = load_corpus(dir, cfg)?;
    let anchors = load_anchors(dir, &data)?;
    let model = load_model(dir)?;
    let stats = load_stats(dir, &model)?;
    let cache = AnchorCache::build(&model, &anchors, &data)?;

    let bases = pristine_bases(&data, &model, cfg.sweep.images)?;
    let res =
        severity_sweep(&model, &stats, &cache, &bases, &cfg.sweep.kinds, &severity_levels(cfg.sweep.levels), cfg.sweep.seed, &cfg.score)?;
    res.write_csv(dir.sweep())?;
    std::fs::write(dir.sweep_metrics(), serde_json::to_string_pretty(&res.per_kind)? + "\n")?;
    Ok(())
}

pub fn cmd_export_embeddings(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let data = load_corpus(dir, cfg)?;
    let model = Model::new(plane_names(&data), &cfg.encoder, &cfg.lra, &cfg.oks)?;
    let mut w = csv::Writer::from_path(dir.embeddings())?;
    let mut header_done = false;
    for split in Split::ALL {
        for (c, images) in data.split(split).iter().enumerate() {
            for s in embed_all(&model.encoder, images)? {
                if !header_done {
                    let mut header = vec!["path".to_string(), "plane".into(), "split".into(), "sigma2".into()];
                    header.extend((0..s.embedding.len()).map(|i| format!("e{i}")));
                    w.write_record(&header)?;
                    header_done = true;
                }
                let mut rec = vec![s.id.clone(), data.planes[c].name.clone(), split.to_string(), s.sigma2.to_string()];
                rec.extend(s.embedding.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure the thread pool: {e}");
            return 2;
        }
    }
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
