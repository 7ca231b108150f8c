//! Batch front end: data generation, pre-training, fine-tuning ablations,
//! evaluation, safety-field rendering and checkpoint inspection.

pub mod config;

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;

use scenegat::field::{ego_state, render_field, scene_vif, source_of, Region};
use scenegat::heads::{evaluate, metric_csv, prepare_labeled, run_finetune, LabeledSample, MetricRow, Metrics};
use scenegat::pretrain::{loss_csv, prepare_samples, run_pretrain, PretrainConfig};
use scenegat::scenario::{balance, generate, read_dataset, write_dataset, LabeledScene};
use scenegat::scene::featurize;
use scenegat::train::{is_model_entry, steps_per_epoch};
use scenegat::{Intention, Scene, Task, TaskModel, Vec2};
use scenegat_autograd::rng::stream_rng;
use scenegat_autograd::{Checkpoint, ParamStore, TensorError};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(_) | TensorError::AllNan(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<scenegat::Error> for CliError {
    fn from(e: scenegat::Error) -> Self {
        use scenegat::Error as E;
        match e {
            E::Config(_) | E::FieldParams(_) => CliError::Usage(e.to_string()),
            E::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            E::Tensor(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::Data(format!("writing output: {e}"))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "scenegat", about = "Scene encoder pre-training and evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset.
    GenData(GenDataArgs),
    /// Pre-train the backbone with the safety-field and masked-roadmap objectives.
    Pretrain(PretrainArgs),
    /// Fine-tune a task head, optionally over a grid of pre-training modes.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint.
    Eval(EvalArgs),
    /// Render the safety field around a scene's target.
    VifRender(VifRenderArgs),
    /// List the entries of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "highway")]
    pub family: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated VIF weights; paired with --w-mrm by position.
    #[arg(long)]
    pub w_vif: Option<String>,
    /// Comma-separated MRM weights.
    #[arg(long)]
    pub w_mrm: Option<String>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated list of none, vif, mrm, both.
    #[arg(long, default_value = "none")]
    pub pretrain_mode: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Comma-separated run seeds.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the `config.txt` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VifRenderArgs {
    #[arg(long)]
    pub scene_file: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Grid cell size (m).
    #[arg(long, default_value_t = 0.5)]
    pub res: f64,
    /// Half width of the rendered square around the target (m).
    #[arg(long, default_value_t = 40.0)]
    pub extent: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli, out)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Pretrain(a) => pretrain(&a, out),
        Command::Finetune(a) => finetune(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::VifRender(a) => vif_render(&a, out),
        Command::Inspect(a) => inspect(&a, out),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_dataset(path: &Path) -> Result<Vec<LabeledScene>, CliError> {
    read_dataset(path).map_err(|e| io_err(path, e))
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    s.parse().map_err(|e: scenegat::Error| CliError::Usage(e.to_string()))
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::Usage(format!("bad value `{p}` in --{flag}"))))
        .collect()
}

pub fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.set("data.family", &a.family)?;
    cfg.gen.scene_count = a.count;
    cfg.gen.seed = a.seed;
    if let Some(n) = a.noise_std {
        cfg.gen.noise_std = n;
    }
    let report = generate(&cfg.gen)?;
    write_dataset(&a.out, &report.scenes).map_err(|e| io_err(&a.out, e))?;
    let h = report.histogram();
    for c in Intention::ALL {
        writeln!(out, "{:<8} {}", c.name(), h[c.index()]).map_err(out_err)?;
    }
    writeln!(out, "skipped  {}", report.skipped).map_err(out_err)?;
    Ok(())
}

/// Final-epoch losses of one pre-training setting.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub w_vif: f64,
    pub w_mrm: f64,
    pub l_vif: f64,
    pub l_mrm: f64,
    pub l_pre: f64,
}

fn run_pretrain_into(dir: &Path, scenes: &[Scene], cfg: &RunConfig, pc: &PretrainConfig) -> Result<(Checkpoint, PretrainSummary), CliError> {
    make_dir(dir)?;
    let samples = prepare_samples(scenes, cfg.features(), &cfg.field)?;
    let outcome = run_pretrain(&samples, &cfg.model, pc, None, None, |_| {})?;
    let ckpt = outcome.checkpoint();
    let mut resolved = cfg.clone();
    resolved.pretrain = *pc;
    resolved.seed = pc.seed;
    write_file(&dir.join("config.txt"), resolved.to_text())?;
    write_file(&dir.join("loss.csv"), loss_csv(&outcome.log))?;
    ckpt.save(&dir.join("checkpoint.pgsu"))?;
    let last = outcome.log.last().expect("at least one epoch");
    let summary = PretrainSummary {
        w_vif: pc.w_vif,
        w_mrm: pc.w_mrm,
        l_vif: last.l_vif,
        l_mrm: last.l_mrm,
        l_pre: last.l_pre,
    };
    Ok((ckpt, summary))
}

pub fn pretrain(a: &PretrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let vifs: Vec<f64> = a.w_vif.as_deref().map(|s| parse_list("w-vif", s)).transpose()?.unwrap_or(vec![cfg.pretrain.w_vif]);
    let mrms: Vec<f64> = a.w_mrm.as_deref().map(|s| parse_list("w-mrm", s)).transpose()?.unwrap_or(vec![cfg.pretrain.w_mrm]);
    let settings: Vec<(f64, f64)> = match (vifs.len(), mrms.len()) {
        (n, m) if n == m => vifs.into_iter().zip(mrms).collect(),
        (1, _) => mrms.iter().map(|&m| (vifs[0], m)).collect(),
        (_, 1) => vifs.iter().map(|&v| (v, mrms[0])).collect(),
        _ => return Err(CliError::Usage("--w-vif and --w-mrm lists differ in length".into())),
    };
    let scenes: Vec<Scene> = load_dataset(&a.data)?.into_iter().map(|s| s.scene).collect();
    make_dir(&a.out)?;
    let mut summary = String::from("w_vif,w_mrm,l_vif,l_mrm,l_pre\n");
    for &(w_vif, w_mrm) in &settings {
        let pc = PretrainConfig {
            w_vif,
            w_mrm,
            ..cfg.pretrain_config()
        };
        let dir = if settings.len() == 1 { a.out.clone() } else { a.out.join(format!("vif{w_vif}_mrm{w_mrm}")) };
        let (_, s) = run_pretrain_into(&dir, &scenes, &cfg, &pc)?;
        let row = format!("{},{},{},{},{}", s.w_vif, s.w_mrm, s.l_vif, s.l_mrm, s.l_pre);
        writeln!(out, "{row}").map_err(out_err)?;
        summary.push_str(&row);
        summary.push('\n');
    }
    write_file(&a.out.join("summary.csv"), summary)?;
    if settings.len() > 1 {
        write_file(&a.out.join("config.txt"), cfg.to_text())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainMode {
    None,
    Vif,
    Mrm,
    Both,
}

impl PretrainMode {
    pub const ALL: [PretrainMode; 4] = [PretrainMode::None, PretrainMode::Vif, PretrainMode::Mrm, PretrainMode::Both];

    pub fn name(self) -> &'static str {
        match self {
            PretrainMode::None => "none",
            PretrainMode::Vif => "vif",
            PretrainMode::Mrm => "mrm",
            PretrainMode::Both => "both",
        }
    }

    /// Loss weights for this mode given the configured pair.
    pub fn weights(self, w_vif: f64, w_mrm: f64) -> Option<(f64, f64)> {
        match self {
            PretrainMode::None => None,
            PretrainMode::Vif => Some((w_vif, 0.0)),
            PretrainMode::Mrm => Some((0.0, w_mrm)),
            PretrainMode::Both => Some((w_vif, w_mrm)),
        }
    }
}

impl std::str::FromStr for PretrainMode {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown pretrain mode `{s}` (none|vif|mrm|both)")))
    }
}

/// Holdout metrics of one fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSummary {
    pub mode: PretrainMode,
    pub seed: u64,
    pub metrics: Vec<(&'static str, f64)>,
}

/// Seeded train/holdout split.
pub fn split_dataset(scenes: Vec<LabeledScene>, holdout: f64, seed: u64) -> (Vec<LabeledScene>, Vec<LabeledScene>) {
    let mut idx: Vec<usize> = (0..scenes.len()).collect();
    idx.shuffle(&mut stream_rng(seed, "data", 0));
    let n_hold = (scenes.len() as f64 * holdout).floor() as usize;
    let mut slots: Vec<Option<LabeledScene>> = scenes.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| ids.iter().map(|&i| slots[i].take().expect("each index once")).collect::<Vec<_>>();
    let hold = take(&idx[..n_hold]);
    let train = take(&idx[n_hold..]);
    (train, hold)
}

fn labeled(scenes: &[LabeledScene], cfg: &RunConfig) -> Result<Vec<LabeledSample>, CliError> {
    scenes
        .iter()
        .map(|s| prepare_labeled(&s.scene, &s.future, s.intention, &cfg.model).map_err(CliError::from))
        .collect()
}

pub fn finetune(a: &FinetuneArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let task = parse_task(&a.task)?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.finetune_epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.finetune_batch = b;
    }
    cfg.validate()?;
    let modes: Vec<PretrainMode> = parse_list("pretrain-mode", &a.pretrain_mode)?;
    let seeds: Vec<u64> = a.seeds.as_deref().map(|s| parse_list("seeds", s)).transpose()?.unwrap_or(vec![cfg.seed]);
    let given = match &a.checkpoint {
        Some(p) => {
            if modes.len() != 1 || modes[0] == PretrainMode::None {
                return Err(CliError::Usage("--checkpoint needs exactly one pretrain mode other than none".into()));
            }
            Some(Checkpoint::load(p).map_err(|e| io_err(p, e))?)
        }
        None => None,
    };
    let data = load_dataset(&a.data)?;
    make_dir(&a.out)?;
    let single = modes.len() == 1 && seeds.len() == 1;
    let mut summaries = Vec::new();
    for &seed in &seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let pool = if cfg.balance_cap > 0 { balance(&data, cfg.balance_cap, seed) } else { data.clone() };
        let (train_scenes, hold_scenes) = split_dataset(pool, cfg.holdout, seed);
        let train = labeled(&train_scenes, &cfg)?;
        let hold = labeled(&hold_scenes, &cfg)?;
        let train_raw: Vec<Scene> = train_scenes.iter().map(|s| s.scene.clone()).collect();
        for &mode in &modes {
            let dir = if single { a.out.clone() } else { a.out.join(format!("{}_seed{seed}", mode.name())) };
            make_dir(&dir)?;
            let pretrained = match (mode.weights(cfg.pretrain.w_vif, cfg.pretrain.w_mrm), &given) {
                (None, _) => None,
                (Some(_), Some(c)) => Some(c.clone()),
                (Some((w_vif, w_mrm)), None) => {
                    let pc = PretrainConfig {
                        w_vif,
                        w_mrm,
                        ..run_cfg.pretrain_config()
                    };
                    Some(run_pretrain_into(&dir.join("pretrain"), &train_raw, &run_cfg, &pc)?.0)
                }
            };
            let fc = run_cfg.finetune_config(task);
            let outcome = run_finetune(&train, &hold, &cfg.model, &fc, pretrained.as_ref(), |_| {})?;
            let steps = (steps_per_epoch(train.len(), fc.batch_size) * fc.epochs) as u64;
            outcome.checkpoint(steps).save(&dir.join("checkpoint.pgsu"))?;
            write_file(&dir.join("metrics.csv"), metric_csv(&outcome.log))?;
            write_file(&dir.join("config.txt"), run_cfg.to_text())?;
            summaries.push(FinetuneSummary {
                mode,
                seed,
                metrics: outcome.final_metrics.values(),
            });
        }
    }
    let table = summary_table(&summaries, &modes);
    write!(out, "{table}").map_err(out_err)?;
    write_file(&a.out.join("summary.csv"), table)?;
    Ok(())
}

/// One row per run plus one mean row per mode.
pub fn summary_table(runs: &[FinetuneSummary], modes: &[PretrainMode]) -> String {
    let names: Vec<&str> = runs.first().map(|r| r.metrics.iter().map(|m| m.0).collect()).unwrap_or_default();
    let mut s = format!("mode,seed,{}\n", names.join(","));
    let value = |r: &FinetuneSummary, n: &str| r.metrics.iter().find(|m| m.0 == n).map(|m| m.1);
    for r in runs {
        let vals: Vec<String> = names.iter().map(|n| value(r, n).map(|v| v.to_string()).unwrap_or_default()).collect();
        let _ = writeln!(s, "{},{},{}", r.mode.name(), r.seed, vals.join(","));
    }
    for &m in modes {
        let rows: Vec<&FinetuneSummary> = runs.iter().filter(|r| r.mode == m).collect();
        let vals: Vec<String> = names
            .iter()
            .map(|n| {
                let v: Vec<f64> = rows.iter().filter_map(|r| value(r, n)).collect();
                if v.is_empty() {
                    String::new()
                } else {
                    (v.iter().sum::<f64>() / v.len() as f64).to_string()
                }
            })
            .collect();
        let _ = writeln!(s, "{},mean,{}", m.name(), vals.join(","));
    }
    s
}

/// Model with a fresh head for `task`, parameters replaced from `ckpt`.
pub fn load_task_model(ckpt: &Checkpoint, cfg: &RunConfig, task: Task) -> Result<(TaskModel, ParamStore), CliError> {
    let mut store = ParamStore::new();
    let model = TaskModel::new(&mut store, &cfg.model, task, 0)?;
    ckpt.load_into(&mut store, |_| true)
        .map_err(|e| CliError::Data(format!("checkpoint does not fit the {task:?} model: {e}")))?;
    Ok((model, store))
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let task = parse_task(&a.task)?;
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(|e| io_err(&a.checkpoint, e))?;
    let sibling = a.checkpoint.parent().map(|p| p.join("config.txt")).filter(|p| p.exists());
    let cfg = load_config(a.config.as_deref().or(sibling.as_deref()))?;
    cfg.validate()?;
    let (model, store) = load_task_model(&ckpt, &cfg, task)?;
    let samples = labeled(&load_dataset(&a.data)?, &cfg)?;
    let metrics = evaluate(&model, &store, &samples, 256)?;
    let rows: Vec<MetricRow> = metrics
        .values()
        .into_iter()
        .map(|(name, value)| MetricRow {
            epoch: 0,
            split: "eval",
            metric: name.into(),
            value,
        })
        .collect();
    make_dir(&a.out)?;
    write_file(&a.out.join("metrics.csv"), metric_csv(&rows))?;
    write!(out, "{}", metric_table(&metrics)).map_err(out_err)?;
    Ok(())
}

/// Printable metric table; intention results get one column per class
/// plus overall.
pub fn metric_table(m: &Metrics) -> String {
    match m {
        Metrics::Trajectory { min_ade, min_fde } => format!("minADE\tminFDE\n{min_ade:.4}\t{min_fde:.4}\n"),
        Metrics::Intention(r) => {
            let cell = |c: Intention| r.per_class[c.index()].map(|v| format!("{:.2}", 100.0 * v)).unwrap_or("-".into());
            format!(
                "straight\tleft\tright\toverall\n{}\t{}\t{}\t{:.2}\n",
                cell(Intention::Straight),
                cell(Intention::Left),
                cell(Intention::Right),
                100.0 * r.overall
            )
        }
    }
}

pub fn vif_render(a: &VifRenderArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let scenes = load_dataset(&a.scene_file)?;
    let scene = &scenes
        .get(a.index)
        .ok_or_else(|| CliError::Data(format!("index {} out of range ({} scenes)", a.index, scenes.len())))?
        .scene;
    if !(a.extent > 0.0) {
        return Err(CliError::Usage(format!("--extent {} must be positive", a.extent)));
    }
    let feats = featurize(scene, cfg.features())?;
    let vif = scene_vif(scene, &feats.agents.slots, &cfg.field)?;
    let ego = ego_state(scene);
    let sources: Vec<_> = (0..scene.agents.len()).filter(|&i| i != scene.target).map(|i| source_of(scene, i)).collect();
    let half = Vec2::new(a.extent, a.extent);
    let region = Region {
        min: ego.pose.center - half,
        max: ego.pose.center + half,
    };
    let grid = render_field(&sources, ego.velocity, &region, a.res, &cfg.field)?;
    make_dir(&a.out)?;
    write_file(&a.out.join("field.txt"), grid.to_text())?;
    write_file(&a.out.join("field.pgm"), grid.to_pgm())?;
    writeln!(out, "grid {}x{} at {} m", grid.width, grid.height, grid.resolution).map_err(out_err)?;
    writeln!(out, "slot\tagent\traw\tnormalized").map_err(out_err)?;
    for (slot, agent) in feats.agents.slots.iter().enumerate() {
        if let Some(agent) = agent.filter(|_| vif.valid_mask[slot]) {
            writeln!(out, "{slot}\t{agent}\t{:.6e}\t{:.6}", vif.raw[slot], vif.forces[slot]).map_err(out_err)?;
        }
    }
    Ok(())
}

pub fn inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| io_err(&a.checkpoint, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| io_err(&a.checkpoint, e))?;
    for (name, t) in &ckpt.entries {
        writeln!(out, "{name}\t{:?}\t{}", t.shape(), t.len()).map_err(out_err)?;
    }
    writeln!(out, "entries: {}", ckpt.entries.len()).map_err(out_err)?;
    writeln!(out, "step: {}", ckpt.step).map_err(out_err)?;
    writeln!(out, "parameters: {}", ckpt.numel(is_model_entry)).map_err(out_err)?;
    Ok(())
}
