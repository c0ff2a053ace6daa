mod config;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hierplace::checkpoint::{Checkpoint, CheckpointError, EmbeddingExport};
use hierplace::engine::{finite_difference_check, GradCheckOptions};
use hierplace::grid::HierarchicalVocabulary;
use hierplace::hier_embedding::Method;
use hierplace::model::{evaluate, ModelGradFragment};
use hierplace::probe::{
    accuracy_csv, aggregate_to_500m, evaluate_probe, predicted_classes, token_labels_500m,
    train_probe, AccuracyRow, LabelMerge, LandUseGrid, ProbeConfig, ProbeDataset, ProbeError,
    Stratum, CLASSES,
};
use hierplace::stats::{mean, std_dev};
use hierplace::synth::{synth_generate, write_ground_truth, write_staypoints};
use hierplace::training::{
    run_sessions, sessions, train, RunMetrics, Session, Summary, TrainData, TrainError,
};
use hierplace::trajectories::{parse_staypoints, visit_counts};
use serde_json::json;

use config::{ConfigError, LabelKind, RunConfig};

#[derive(Parser)]
#[command(
    name = "hierplace",
    version,
    about = "Hierarchical place embeddings for next-place prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds, e.g. `3` or `0-9` (for `synth`: the generator seed).
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Methods, comma separated.
    #[arg(long)]
    method: Option<String>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic staypoints and ground-truth place classes.
    Synth(Common),
    /// Train every (method, seed) run and write checkpoints and metrics.
    Train(Common),
    /// Recompute test loss from saved checkpoints.
    Evaluate(Common),
    /// Fit land-use probes on frozen embeddings.
    Probe(Common),
    /// Write place embeddings as text.
    Export {
        #[command(flatten)]
        common: Common,
        /// Export this checkpoint instead of the configured runs.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Destination for `--checkpoint`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference gradient check of the full model at 64-bit precision.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: u64,
        #[arg(long, default_value_t = 50)]
        places: usize,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        /// Entries checked per parameter tensor.
        #[arg(long, default_value_t = 64)]
        entries: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Data(m)
            | CliError::Divergence(m)
            | CliError::Other(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::EmptyTrain => CliError::Data(e.to_string()),
            TrainError::Model(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Divergence(_) => CliError::Divergence(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn resolve(common: &Common, seed_is_synth: bool) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("`--set {kv}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = &common.seed {
        cfg.set(
            if seed_is_synth {
                "synth.seed"
            } else {
                "run.seeds"
            },
            s,
        )?;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(m) = &common.method {
        cfg.set("run.methods", m)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes through a temporary file in the destination directory so readers
/// never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn run_id(s: Session) -> String {
    format!("{}_s{}", s.method, s.seed)
}

fn run_dir(cfg: &RunConfig, s: Session) -> PathBuf {
    cfg.out.join("runs").join(run_id(s))
}

fn checkpoint_path(cfg: &RunConfig, s: Session) -> PathBuf {
    run_dir(cfg, s).join("model.ckpt")
}

fn load_data(cfg: &RunConfig) -> Result<TrainData, CliError> {
    let path = &cfg.staypoints;
    let file =
        fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let parsed = parse_staypoints(BufReader::new(file), cfg.max_malformed)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if parsed.malformed > 0 {
        eprintln!(
            "warning: skipped {} malformed lines in {}",
            parsed.malformed,
            path.display()
        );
    }
    TrainData::prepare(
        &parsed.trajectories,
        &cfg.grid,
        &cfg.buckets,
        cfg.max_len,
        cfg.ratios,
        cfg.split_seed,
    )
    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
        .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))
}

fn check_vocab(
    ckpt: &Checkpoint,
    vocab: &HierarchicalVocabulary,
    path: &Path,
) -> Result<(), CliError> {
    if *ckpt.vocab != *vocab {
        return Err(CliError::Data(format!(
            "checkpoint {} has a vocabulary of {} places that does not match the data ({} places)",
            path.display(),
            ckpt.vocab.len(),
            vocab.len()
        )));
    }
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common, true)?;
    let out = synth_generate(&cfg.synth, &cfg.grid).map_err(|e| CliError::Config(e.to_string()))?;
    let mut stays = Vec::new();
    write_staypoints(&mut stays, &out.trajectories).map_err(|e| io_err(&cfg.staypoints, e))?;
    write_atomic(&cfg.staypoints, &stays)?;
    let mut truth = Vec::new();
    write_ground_truth(&mut truth, &out.world.ground_truth())
        .map_err(|e| io_err(&cfg.labels, e))?;
    write_atomic(&cfg.labels, &truth)?;
    let n: usize = out.trajectories.iter().map(|t| t.stays.len()).sum();
    println!(
        "wrote {} users, {n} stays to {}; {} place classes to {}",
        out.trajectories.len(),
        cfg.staypoints.display(),
        out.world.places().len(),
        cfg.labels.display()
    );
    Ok(())
}

fn metrics_jsonl(id: &str, m: &RunMetrics) -> String {
    let mut out = String::new();
    for e in &m.epochs {
        let rec = json!({
            "run_id": id,
            "method": m.method,
            "seed": m.seed,
            "epoch": e.epoch,
            "train_loss": e.train_loss,
            "val_loss": e.val_loss,
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    let last = json!({
        "run_id": id,
        "method": m.method,
        "seed": m.seed,
        "config_hash": m.config_hash,
        "selected_epoch": m.selected_epoch,
        "test_loss": m.test_loss,
    });
    out.push_str(&last.to_string());
    out.push('\n');
    out
}

fn cmd_train(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common, false)?;
    let data = load_data(&cfg)?;
    let hash = cfg.hash();
    eprintln!(
        "config {hash}: {} places, {}/{}/{} sequences",
        data.vocab.len(),
        data.split.train.len(),
        data.split.validation.len(),
        data.split.test.len()
    );
    write_atomic(&cfg.out.join("config.txt"), cfg.canonical().as_bytes())?;
    let runs = run_sessions(&sessions(&cfg.methods, &cfg.seeds), cfg.threads, |s| {
        let model_cfg = hierplace::model::ModelConfig {
            method: s.method,
            ..cfg.model.clone()
        };
        let id = run_id(s);
        let (model, metrics) = train::<f32>(&model_cfg, &data, s.seed, &hash, |e| {
            eprintln!(
                "{id} epoch {} train {:.4} val {:.4}",
                e.epoch, e.train_loss, e.val_loss
            );
        })?;
        let dir = run_dir(&cfg, s);
        write_atomic(
            &dir.join("model.ckpt"),
            &Checkpoint::from_model(&model, &hash, s.seed).to_bytes(),
        )?;
        write_atomic(
            &dir.join("metrics.jsonl"),
            metrics_jsonl(&id, &metrics).as_bytes(),
        )?;
        eprintln!(
            "{id} test {:.4} (epoch {})",
            metrics.test_loss, metrics.selected_epoch
        );
        Ok::<_, CliError>(metrics)
    })?;
    let summary = Summary::from_runs(&runs);
    write_atomic(&cfg.out.join("summary.csv"), summary.to_csv().as_bytes())?;
    print!("{}", summary.to_csv());
    Ok(())
}

fn cmd_evaluate(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common, false)?;
    let data = load_data(&cfg)?;
    let hash = cfg.hash();
    let mut csv = String::from("method,seed,test_loss\n");
    let mut runs = Vec::new();
    for s in sessions(&cfg.methods, &cfg.seeds) {
        let path = checkpoint_path(&cfg, s);
        let ckpt = load_checkpoint(&path)?;
        check_vocab(&ckpt, &data.vocab, &path)?;
        if ckpt.header.config_hash != hash {
            eprintln!(
                "warning: {} was trained with config {}, current config is {hash}",
                path.display(),
                ckpt.header.config_hash
            );
        }
        let model = ckpt
            .to_model()
            .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
        let loss =
            evaluate(&model, &data.split.test).map_err(|e| CliError::Other(e.to_string()))?;
        csv.push_str(&format!("{},{},{loss:.6}\n", s.method, s.seed));
        runs.push(RunMetrics {
            method: s.method,
            seed: s.seed,
            config_hash: ckpt.header.config_hash.clone(),
            epochs: Vec::new(),
            selected_epoch: 0,
            test_loss: loss,
            wall_time_s: 0.0,
        });
    }
    write_atomic(&cfg.out.join("evaluation.csv"), csv.as_bytes())?;
    let summary = Summary::from_runs(&runs);
    write_atomic(
        &cfg.out.join("evaluation_summary.csv"),
        summary.to_csv().as_bytes(),
    )?;
    print!("{}", summary.to_csv());
    Ok(())
}

fn export_bytes(ckpt: &Checkpoint, path: &Path) -> Result<Vec<u8>, CliError> {
    let export = EmbeddingExport::from_checkpoint(ckpt).map_err(|e: CheckpointError| {
        CliError::Data(format!("checkpoint {}: {e}", path.display()))
    })?;
    let mut buf = Vec::new();
    export.write(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(buf)
}

fn cmd_export(
    common: &Common,
    checkpoint: Option<&Path>,
    output: Option<&Path>,
) -> Result<(), CliError> {
    if let Some(path) = checkpoint {
        let dest = output
            .map(Path::to_path_buf)
            .unwrap_or_else(|| path.with_extension("embeddings.txt"));
        write_atomic(&dest, &export_bytes(&load_checkpoint(path)?, path)?)?;
        println!("{}", dest.display());
        return Ok(());
    }
    if output.is_some() {
        return Err(CliError::Config("`--output` needs `--checkpoint`".into()));
    }
    let cfg = resolve(common, false)?;
    for s in sessions(&cfg.methods, &cfg.seeds) {
        let path = checkpoint_path(&cfg, s);
        let dest = run_dir(&cfg, s).join("embeddings.txt");
        write_atomic(&dest, &export_bytes(&load_checkpoint(&path)?, &path)?)?;
        println!("{}", dest.display());
    }
    Ok(())
}

/// Per-token class labels from the configured label file.
fn token_labels(
    cfg: &RunConfig,
    vocab: &HierarchicalVocabulary,
) -> Result<Vec<Option<u8>>, CliError> {
    let path = &cfg.labels;
    let data_err = |e: &dyn std::fmt::Display| CliError::Data(format!("{}: {e}", path.display()));
    let file = fs::File::open(path).map_err(|e| data_err(&e))?;
    let cells: Vec<(u32, u32)> = vocab.tokens().iter().map(|c| (c.col, c.row)).collect();
    match cfg.label_kind {
        LabelKind::Landuse100m => {
            let merge = match &cfg.label_merge {
                Some(p) => {
                    let text = fs::read_to_string(p)
                        .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                    LabelMerge::parse(&text)
                        .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                }
                None => LabelMerge::default(),
            };
            let grid = LandUseGrid::parse(BufReader::new(file)).map_err(|e| data_err(&e))?;
            Ok(token_labels_500m(&cells, &aggregate_to_500m(&grid, &merge)))
        }
        LabelKind::Cell => {
            let text = std::io::read_to_string(file).map_err(|e| data_err(&e))?;
            let mut by_cell = HashMap::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let f: Vec<u32> = line
                    .split('\t')
                    .map(|s| s.trim().parse::<u32>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| data_err(&format!("line {}: {e}", i + 1)))?;
                match f[..] {
                    [col, row, class] if (class as usize) < CLASSES => {
                        by_cell.insert((col, row), class as u8);
                    }
                    _ => {
                        return Err(data_err(&format!(
                            "line {}: expected col, row, class < {CLASSES}",
                            i + 1
                        )))
                    }
                }
            }
            Ok(cells.iter().map(|c| by_cell.get(c).copied()).collect())
        }
    }
}

fn cmd_probe(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common, false)?;
    let data = load_data(&cfg)?;
    let n = data.vocab.len();
    // Training split only, so test trajectories do not leak into the strata.
    let visits = visit_counts(&data.split.train, n);
    let labels = token_labels(&cfg, &data.vocab)?;
    let probe_dir = cfg.out.join("probe");
    let mut acc: BTreeMap<(Method, Stratum), Vec<f64>> = BTreeMap::new();
    for s in sessions(&cfg.methods, &cfg.seeds) {
        let path = checkpoint_path(&cfg, s);
        let ckpt = load_checkpoint(&path)?;
        check_vocab(&ckpt, &data.vocab, &path)?;
        let export = EmbeddingExport::from_checkpoint(&ckpt)
            .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
        // Same split and initialization for every method at a given seed.
        let probe_seed = cfg.probe.seed.wrapping_add(s.seed);
        let ds = ProbeDataset::build(&export, &labels, &visits, probe_seed)?;
        let probe = train_probe(
            &ds,
            &ProbeConfig {
                seed: probe_seed,
                ..cfg.probe
            },
        )?;
        let id = run_id(s);
        for stratum in [Stratum::All, Stratum::Rural] {
            let ev = evaluate_probe(&probe, &ds, stratum)?;
            write_atomic(
                &probe_dir.join(format!("{id}_{stratum}_confusion.csv")),
                ev.confusion.to_csv().as_bytes(),
            )?;
            eprintln!("{id} {stratum} accuracy {:.4}", ev.accuracy);
            acc.entry((s.method, stratum))
                .or_default()
                .push(ev.accuracy);
        }
        write_atomic(
            &probe_dir.join(format!("{id}_predictions.tsv")),
            predicted_classes(&probe, &ds).as_bytes(),
        )?;
    }
    let rows: Vec<AccuracyRow> = acc
        .into_iter()
        .map(|((method, stratum), a)| AccuracyRow {
            city: cfg.city.clone(),
            method: method.to_string(),
            stratum,
            mean: mean(&a),
            std: std_dev(&a),
        })
        .collect();
    let csv = accuracy_csv(&rows);
    write_atomic(&probe_dir.join("accuracy.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(
    common: &Common,
    instances: u64,
    places: usize,
    steps: usize,
    entries: usize,
    tolerance: f64,
) -> Result<(), CliError> {
    let cfg = resolve(common, false)?;
    let mut worst: f64 = 0.0;
    for &method in &cfg.methods {
        let model_cfg = hierplace::model::ModelConfig {
            method,
            ..cfg.model.clone()
        };
        for seed in 0..instances {
            let mut frag = ModelGradFragment::random(&model_cfg, places, 2, steps, seed)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let report = finite_difference_check(
                &mut frag,
                GradCheckOptions {
                    max_entries: Some(entries),
                    seed,
                    ..GradCheckOptions::default()
                },
            );
            let err = report.max_rel_err();
            worst = worst.max(err);
            println!(
                "{method} instance {seed}: {} entries, max relative error {err:.3e}",
                report.checked()
            );
        }
    }
    if !(worst < tolerance) {
        return Err(CliError::Other(format!(
            "gradient check failed: max relative error {worst:.3e} >= {tolerance:e}"
        )));
    }
    println!("ok: max relative error {worst:.3e} < {tolerance:e}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Train(c) => cmd_train(c),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Probe(c) => cmd_probe(c),
        Command::Export {
            common,
            checkpoint,
            output,
        } => cmd_export(common, checkpoint.as_deref(), output.as_deref()),
        Command::Gradcheck {
            common,
            instances,
            places,
            steps,
            entries,
            tolerance,
        } => cmd_gradcheck(common, *instances, *places, *steps, *entries, *tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
