//! Subcommand implementations behind the `tamperscope` binary. Each command
//! returns a [`CommandResult`] listing the files it wrote; errors map to the
//! process exit codes in [`exit_code`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tamperscope::datagen::{
    generate_masks, generate_scenes, generate_tampered, list_images, load_rgb, preset,
    read_manifest, write_manifest, Inpainter, ObjectProposer, PseudoInpainter,
    PseudoInpainterParams, Segmenter, ServiceConfig, StubProposer, StubSegmenter,
};
use tamperscope::error::Error;
use tamperscope::evaluation::{
    evaluate_dataset, EvalReport, Perturbation, TamperModel, REPORT_CSV_HEADER,
};
use tamperscope::heads::{detect, detection_score};
use tamperscope::training::{train, Checkpoint, Detector, TrainConfig, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_EXTERNAL: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit code for an error.
pub fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Usage(_) => EXIT_USAGE,
        CliError::Core(Error::ExternalService(_)) => EXIT_EXTERNAL,
        CliError::Core(Error::TrainingDivergence(_)) => EXIT_DIVERGENCE,
        CliError::Core(_) => EXIT_USAGE,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts_written: Vec<PathBuf>,
    pub summary: String,
}

impl CommandResult {
    fn ok(artifacts_written: Vec<PathBuf>, summary: String) -> Self {
        CommandResult {
            exit_code: EXIT_OK,
            artifacts_written,
            summary,
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Core(Error::Parse(e.to_string())))
}

fn manifest_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn load_service_config(path: Option<&Path>) -> CliResult<ServiceConfig> {
    let cfg = match path {
        Some(p) => toml::from_str(&read_text(p)?)
            .map_err(|e| CliError::Core(Error::Parse(e.to_string())))?,
        None => ServiceConfig::default(),
    };
    Ok(cfg.with_env())
}

pub fn cmd_gen_scenes(
    out_dir: &Path,
    count: usize,
    size: u32,
    seed: u64,
) -> CliResult<CommandResult> {
    if count == 0 || size == 0 {
        return Err(CliError::Usage("count and size must be positive".into()));
    }
    let written = generate_scenes(out_dir, count, size, size, seed)?;
    let summary = format!("wrote {} scenes to {}", written.len(), out_dir.display());
    Ok(CommandResult::ok(written, summary))
}

/// Options for [`cmd_gen_masks`].
#[derive(Clone, Debug, Default)]
pub struct GenMasksOptions {
    /// Use the proposer and segmenter services instead of the stubs.
    pub remote: bool,
    /// TOML service configuration; environment variables override it.
    pub service_config: Option<PathBuf>,
    pub seed: u64,
}

/// Writes the manifest to `manifest_out`, mask files to `masks/` next to it
/// and the rejected object masks with their reasons to `rejections.json`.
pub fn cmd_gen_masks(
    input_dir: &Path,
    manifest_out: &Path,
    opts: &GenMasksOptions,
) -> CliResult<CommandResult> {
    if !input_dir.is_dir() {
        return Err(CliError::Usage(format!(
            "input directory {} does not exist",
            input_dir.display()
        )));
    }
    let images = list_images(input_dir)?;
    if images.is_empty() {
        return Err(CliError::Usage(format!(
            "no images in {}",
            input_dir.display()
        )));
    }
    let out_dir = manifest_dir(manifest_out);
    create_dir(&out_dir)?;
    let output = if opts.remote {
        let services = load_service_config(opts.service_config.as_deref())?;
        let proposer = services
            .proposer()?
            .ok_or_else(|| CliError::Usage("no proposer URL configured".into()))?;
        let segmenter = services
            .segmenter()?
            .ok_or_else(|| CliError::Usage("no segmenter URL configured".into()))?;
        generate_masks(
            &images,
            &out_dir,
            &proposer as &dyn ObjectProposer,
            &segmenter as &dyn Segmenter,
            opts.seed,
        )?
    } else {
        let segmenter = StubSegmenter { seed: opts.seed };
        generate_masks(&images, &out_dir, &StubProposer, &segmenter, opts.seed)?
    };
    let rejections_path = out_dir.join("rejections.json");
    write_manifest(&output.manifest, manifest_out)?;
    write_text(&rejections_path, &to_json(&output.rejections)?)?;
    let mut written = output.written;
    written.push(manifest_out.to_path_buf());
    written.push(rejections_path);
    let summary = format!(
        "{} entries, {} rejected object masks, manifest {}",
        output.manifest.entries.len(),
        output.rejections.len(),
        manifest_out.display()
    );
    Ok(CommandResult::ok(written, summary))
}

/// Inpainters for `gen-data`, read from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpainterConfig {
    /// Built-in pseudo-inpainter preset ids.
    pub presets: Vec<String>,
    /// Fully specified pseudo-inpainters.
    pub custom: Vec<PseudoInpainterParams>,
    /// When present and an inpainter URL is configured, adds the remote
    /// inpainting service.
    pub service: Option<ServiceConfig>,
}

impl InpainterConfig {
    pub fn default_presets() -> Self {
        InpainterConfig {
            presets: vec!["pi-smooth".into(), "pi-grain".into()],
            ..InpainterConfig::default()
        }
    }

    pub fn build(&self) -> CliResult<Vec<Box<dyn Inpainter>>> {
        let mut out: Vec<Box<dyn Inpainter>> = Vec::new();
        for id in &self.presets {
            let params = preset(id)
                .ok_or_else(|| CliError::Usage(format!("unknown pseudo-inpainter preset {id}")))?;
            out.push(Box::new(PseudoInpainter::new(params)?));
        }
        for params in &self.custom {
            out.push(Box::new(PseudoInpainter::new(params.clone())?));
        }
        if let Some(service) = &self.service {
            if let Some(remote) = service.clone().with_env().inpainter()? {
                out.push(Box::new(remote));
            }
        }
        if out.is_empty() {
            return Err(CliError::Usage("no inpainters configured".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GenDataOptions {
    pub inpainter_config: Option<PathBuf>,
    pub skip_existing: bool,
    pub seed: u64,
}

pub fn cmd_gen_data(
    manifest_path: &Path,
    out_dir: &Path,
    opts: &GenDataOptions,
) -> CliResult<CommandResult> {
    require_file(manifest_path, "manifest")?;
    let config = match &opts.inpainter_config {
        Some(p) => toml::from_str(&read_text(p)?)
            .map_err(|e| CliError::Core(Error::Parse(e.to_string())))?,
        None => InpainterConfig::default_presets(),
    };
    let inpainters = config.build()?;
    let refs: Vec<&dyn Inpainter> = inpainters.iter().map(|b| b.as_ref()).collect();
    let manifest = read_manifest(manifest_path)?;
    create_dir(out_dir)?;
    let output = generate_tampered(
        &manifest,
        &manifest_dir(manifest_path),
        &refs,
        out_dir,
        opts.skip_existing,
        opts.seed,
    )?;
    let out_manifest = out_dir.join("manifest.json");
    let failures_path = out_dir.join("failures.json");
    write_manifest(&output.manifest, &out_manifest)?;
    write_text(&failures_path, &to_json(&output.failures)?)?;
    let mut written = output.written;
    written.push(out_manifest);
    written.push(failures_path);
    let summary = format!(
        "{} tampered images written, {} reused, {} failed of {} attempts",
        written.len() - 2,
        output.skipped,
        output.failures.len(),
        output.attempts
    );
    let exit_code = if output.attempts > 0 && output.failures.len() == output.attempts {
        EXIT_EXTERNAL
    } else {
        EXIT_OK
    };
    Ok(CommandResult {
        exit_code,
        artifacts_written: written,
        summary,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainCmdOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut config = match path {
        Some(p) => {
            require_file(p, "config")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Trains and writes `checkpoint.json`, `metrics.csv` and the effective
/// `config.toml` to `out_dir`.
pub fn cmd_train(
    manifest_path: &Path,
    out_dir: &Path,
    opts: &TrainCmdOptions,
) -> CliResult<CommandResult> {
    require_file(manifest_path, "manifest")?;
    let config = load_config(opts.config.as_deref(), opts.seed)?;
    let resume = match &opts.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let manifest = read_manifest(manifest_path)?;
    train_to_dir(
        &config,
        &manifest,
        &manifest_dir(manifest_path),
        out_dir,
        resume,
    )
}

fn train_to_dir(
    config: &TrainConfig,
    manifest: &tamperscope::datagen::DatasetManifest,
    base: &Path,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> CliResult<CommandResult> {
    create_dir(out_dir)?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    let metrics_path = out_dir.join("metrics.csv");
    let config_path = out_dir.join("config.toml");
    write_text(&config_path, &config.to_toml()?)?;
    let outcome = train(
        config,
        manifest,
        base,
        TrainOptions {
            resume,
            stop_after_epoch: None,
            checkpoint_path: Some(checkpoint_path.clone()),
            metrics_path: Some(metrics_path.clone()),
        },
    )?;
    let last = outcome.checkpoint.metrics.last();
    let summary = match last {
        Some(m) => format!(
            "trained {} epochs, final loss {:.6}, val auc {}, val iou {}",
            outcome.checkpoint.epoch,
            m.loss_total,
            m.val_auc
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            m.val_iou
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a".into())
        ),
        None => format!("checkpoint at epoch {}", outcome.checkpoint.epoch),
    };
    Ok(CommandResult::ok(
        vec![checkpoint_path, metrics_path, config_path],
        summary,
    ))
}

fn load_detector(checkpoint: &Path) -> CliResult<Detector> {
    require_file(checkpoint, "checkpoint")?;
    Ok(Detector::from_checkpoint(&Checkpoint::load(checkpoint)?)?)
}

/// Writes the tamper map as a PNG (and optionally as raw JSON) and reports
/// the detection score and verdict in the summary.
pub fn cmd_infer(
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    raw_out: Option<&Path>,
) -> CliResult<CommandResult> {
    let detector = load_detector(checkpoint)?;
    require_file(image, "image")?;
    let img = load_rgb(image)?;
    let map = detector.predict(&img)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    map.save_png(out)?;
    let mut written = vec![out.to_path_buf()];
    if let Some(raw) = raw_out {
        map.save_raw(raw)?;
        written.push(raw.to_path_buf());
    }
    let summary = format!("score {:.6}\nlabel {}", detection_score(&map), detect(&map));
    Ok(CommandResult::ok(written, summary))
}

fn write_report(report: &EvalReport, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let json = out_dir.join("report.json");
    let csv = out_dir.join("report.csv");
    write_text(&json, &report.to_json()?)?;
    write_text(
        &csv,
        &format!("{REPORT_CSV_HEADER}\n{}\n", report.csv_row()),
    )?;
    Ok(vec![json, csv])
}

pub fn cmd_eval(
    checkpoint: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    perturbation: Option<Perturbation>,
    dataset_id: &str,
) -> CliResult<CommandResult> {
    let detector = load_detector(checkpoint)?;
    require_file(manifest_path, "manifest")?;
    let manifest = read_manifest(manifest_path)?;
    let report = evaluate_dataset(
        &detector,
        &manifest,
        &manifest_dir(manifest_path),
        perturbation,
        dataset_id,
    )?;
    let written = write_report(&report, out_dir)?;
    Ok(CommandResult::ok(written, report.csv_row()))
}

/// One configuration of an ablation sweep: a name plus TOML keys merged over
/// the sweep's base configuration (tables merge recursively).
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    #[serde(default)]
    base: toml::Table,
    #[serde(default)]
    row: Vec<toml::Table>,
}

fn merge(into: &mut toml::Table, from: &toml::Table) {
    for (k, v) in from {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Parses a sweep file with a `[base]` table and `[[row]]` entries.
pub fn parse_sweep(text: &str) -> CliResult<Vec<AblationRow>> {
    let sweep: SweepFile =
        toml::from_str(text).map_err(|e| CliError::Core(Error::Parse(e.to_string())))?;
    if sweep.row.is_empty() {
        return Err(CliError::Usage("sweep has no rows".into()));
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    for mut table in sweep.row {
        let name = match table.remove("name") {
            Some(toml::Value::String(s)) if !s.is_empty() => s,
            _ => {
                return Err(CliError::Usage(
                    "every sweep row needs a non-empty string `name`".into(),
                ))
            }
        };
        if name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(CliError::Usage(format!(
                "row name {name} is not a valid directory name"
            )));
        }
        if rows.iter().any(|r| r.name == name) {
            return Err(CliError::Usage(format!("duplicate row name {name}")));
        }
        let mut merged = sweep.base.clone();
        merge(&mut merged, &table);
        let config: TrainConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Core(Error::Parse(e.to_string())))?;
        config.validate()?;
        rows.push(AblationRow { name, config });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default)]
pub struct AblateOptions {
    /// Run only the row with this name.
    pub row: Option<String>,
    pub seed: Option<u64>,
}

/// Trains every selected row on `train_manifest`, evaluates it on
/// `eval_manifest` and writes `out_dir/<row>/report.json` plus a combined
/// `summary.csv`.
pub fn cmd_ablate(
    sweep_path: &Path,
    train_manifest: &Path,
    eval_manifest: &Path,
    out_dir: &Path,
    opts: &AblateOptions,
) -> CliResult<CommandResult> {
    require_file(sweep_path, "sweep config")?;
    require_file(train_manifest, "training manifest")?;
    require_file(eval_manifest, "evaluation manifest")?;
    let mut rows = parse_sweep(&read_text(sweep_path)?)?;
    if let Some(name) = &opts.row {
        rows.retain(|r| &r.name == name);
        if rows.is_empty() {
            return Err(CliError::Usage(format!("no sweep row named {name}")));
        }
    }
    let train_m = read_manifest(train_manifest)?;
    let eval_m = read_manifest(eval_manifest)?;
    let mut written = Vec::new();
    let mut summary = format!("row,{REPORT_CSV_HEADER}\n");
    for row in &rows {
        let mut config = row.config.clone();
        if let Some(seed) = opts.seed {
            config.seed = seed;
        }
        let dir = out_dir.join(&row.name);
        log::info!("ablation row {}", row.name);
        let trained = train_to_dir(&config, &train_m, &manifest_dir(train_manifest), &dir, None)?;
        written.extend(trained.artifacts_written.iter().cloned());
        let ckpt = Checkpoint::load(&dir.join("checkpoint.json"))?;
        let detector = Detector::from_checkpoint(&ckpt)?;
        let report = evaluate_dataset(
            &detector,
            &eval_m,
            &manifest_dir(eval_manifest),
            None,
            &row.name,
        )?;
        written.extend(write_report(&report, &dir)?);
        summary.push_str(&format!("{},{}\n", row.name, report.csv_row()));
    }
    let summary_path = out_dir.join("summary.csv");
    write_text(&summary_path, &summary)?;
    written.push(summary_path);
    Ok(CommandResult::ok(written, summary.trim_end().to_string()))
}

/// Parses `kind:level`, e.g. `jpeg:70`.
pub fn parse_perturbation(text: &str) -> CliResult<Perturbation> {
    text.parse::<Perturbation>()
        .map_err(|e| CliError::Usage(format!("bad --perturb value {text}: {e}")))
}
