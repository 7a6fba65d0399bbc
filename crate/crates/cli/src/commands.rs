//! The seven commands. Each reads the artifacts of earlier commands from the
//! output directory and writes its own under a subdirectory named after itself,
//! next to the resolved config and a provenance log.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use metafn_core::data::{generate_synth_suite, import_suite, load_csv, DatasetBundle, Setting, SplitKind};
use metafn_core::eval::{
    build_report, coefficient_records, score, CoefficientPhase, CoefficientRecord, MethodResults, TaskScore,
};
use metafn_core::model::Assembly;
use metafn_core::training::{
    calibrate, load_checkpoint, load_shared, pretrain, refine, save_checkpoint, train_from_scratch, Checkpoint,
    Phase, PhaseReport, PhaseSpec, ProvenanceEntry, TrainLog,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DataSource, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenSynth,
    Pretrain,
    Calibrate,
    Refine,
    Eval,
    ExportCoeffs,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenSynth => "gen-synth",
            Command::Pretrain => "pretrain",
            Command::Calibrate => "calibrate",
            Command::Refine => "refine",
            Command::Eval => "eval",
            Command::ExportCoeffs => "export-coeffs",
            Command::Report => "report",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Command::GenSynth => "data",
            Command::ExportCoeffs => "coefficients",
            other => other.name(),
        }
    }
}

/// Seed for one dataset, derived from a base seed and the dataset name.
pub fn derive_seed(base: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Serialize)]
struct Provenance<'a> {
    artifact: String,
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
}

struct Run<'a> {
    config: &'a RunConfig,
    command: Command,
    root: PathBuf,
    dir: PathBuf,
    hash: String,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl<'a> Run<'a> {
    fn new(config: &'a RunConfig, command: Command) -> Result<Self, CliError> {
        let root = config.output_root();
        let dir = root.join(command.dir());
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, config.to_json()).map_err(|e| io_err(&path, e))?;
        let prov = dir.join("provenance.jsonl");
        fs::write(&prov, "").map_err(|e| io_err(&prov, e))?;
        Ok(Self {
            config,
            command,
            root,
            dir,
            hash: config.hash(),
        })
    }

    /// Appends a provenance record for an artifact written by this command.
    fn record(&self, artifact: &Path, seed: u64) -> Result<(), CliError> {
        let path = self.dir.join("provenance.jsonl");
        let rel = artifact.strip_prefix(&self.root).unwrap_or(artifact);
        let line = serde_json::to_string(&Provenance {
            artifact: rel.display().to_string(),
            command: self.command.name(),
            config_hash: &self.hash,
            seed,
        })
        .expect("serializable");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(&path, e))
    }

    fn write(&self, path: &Path, contents: &str, seed: u64) -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(path, contents).map_err(|e| io_err(path, e))?;
        self.record(path, seed)
    }

    fn save(&self, checkpoint: &Checkpoint, path: &Path, seed: u64) -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        save_checkpoint(checkpoint, path)?;
        self.record(path, seed)
    }
}

fn task_key(name: &str, setting: Setting) -> String {
    format!("{name}__{setting}")
}

fn load_sources(sources: &[DataSource]) -> Result<Vec<DatasetBundle>, CliError> {
    sources
        .iter()
        .map(|s| load_csv(&s.csv, &s.manifest).map_err(CliError::from))
        .collect()
}

/// Raw pretraining and downstream bundles, from CSV sources or the synthetic suite.
fn load_data(config: &RunConfig, root: &Path) -> Result<(Vec<DatasetBundle>, Vec<DatasetBundle>), CliError> {
    let synth = match &config.data.synth {
        Some(spec) if config.data.pretrain.is_empty() || config.data.tasks.is_empty() => {
            let dir = root.join("data");
            if !dir.join("synth-pre-00.json").exists() {
                return Err(CliError::Runtime(format!(
                    "synthetic suite not found in {}; run gen-synth first",
                    dir.display()
                )));
            }
            Some(import_suite(&dir, spec)?)
        }
        _ => None,
    };
    let pretrain = if config.data.pretrain.is_empty() {
        synth.as_ref().map(|s| s.0.clone()).unwrap_or_default()
    } else {
        load_sources(&config.data.pretrain)?
    };
    let tasks = if config.data.tasks.is_empty() {
        synth.map(|s| s.1).unwrap_or_default()
    } else {
        load_sources(&config.data.tasks)?
    };
    Ok((pretrain, tasks))
}

fn prepare(config: &RunConfig, bundle: &mut DatasetBundle, setting: Setting) -> Result<(), CliError> {
    let name = bundle.name().to_string();
    bundle.prepare(
        derive_seed(config.seeds.split, &name),
        setting,
        derive_seed(config.seeds.setting, &name),
    )?;
    Ok(())
}

/// Prepared downstream tasks, one per (dataset, setting).
fn prepared_tasks(config: &RunConfig, root: &Path) -> Result<Vec<(DatasetBundle, Setting)>, CliError> {
    let (_, tasks) = load_data(config, root)?;
    if tasks.is_empty() {
        return Err(CliError::Usage("no downstream tasks configured".into()));
    }
    let mut out = Vec::new();
    for &setting in &config.settings {
        for t in &tasks {
            let mut b = t.clone();
            prepare(config, &mut b, setting)?;
            out.push((b, setting));
        }
    }
    Ok(out)
}

fn provenance(spec: &PhaseSpec, report: &PhaseReport, dataset: Option<&str>) -> ProvenanceEntry {
    ProvenanceEntry {
        phase: spec.phase.to_string(),
        dataset: dataset.map(str::to_string),
        epochs: spec.epochs,
        steps: report.steps,
        seed: spec.seed,
        best_epoch: report.best_epoch,
    }
}

fn finish(report: PhaseReport) -> Result<PhaseReport, CliError> {
    match report.diverged {
        Some(e) => Err(CliError::Runtime(format!("{e}; the last finite state was saved"))),
        None => Ok(report),
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Runtime(format!("missing checkpoint {}", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

pub fn run(command: Command, config: &RunConfig) -> Result<(), CliError> {
    let run = Run::new(config, command)?;
    eprintln!("metafn {}: output in {}", command.name(), run.dir.display());
    match command {
        Command::GenSynth => gen_synth(&run),
        Command::Pretrain => run_pretrain(&run),
        Command::Calibrate => run_calibrate(&run),
        Command::Refine => run_refine(&run),
        Command::Eval => run_eval(&run),
        Command::ExportCoeffs => run_export(&run),
        Command::Report => run_report(&run),
    }
}

fn gen_synth(run: &Run) -> Result<(), CliError> {
    let spec = run
        .config
        .data
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Usage("`data.synth` is not set".into()))?;
    let suite = generate_synth_suite(spec)?;
    suite.export(&run.dir)?;
    for b in suite.pretrain.iter().chain(&suite.heldout) {
        for ext in ["csv", "json"] {
            run.record(&run.dir.join(format!("{}.{ext}", b.name())), spec.seed)?;
        }
    }
    eprintln!(
        "wrote {} pretraining and {} held-out datasets",
        suite.pretrain.len(),
        suite.heldout.len()
    );
    Ok(())
}

fn run_pretrain(run: &Run) -> Result<(), CliError> {
    let config = run.config;
    let (mut suite, _) = load_data(config, &run.root)?;
    if suite.is_empty() {
        return Err(CliError::Usage("no pretraining datasets configured".into()));
    }
    let mut model = Assembly::new(config.model.clone())?;
    for b in &mut suite {
        prepare(config, b, Setting::Full)?;
        model.attach_dataset(&b.schema)?;
    }
    let spec = config.pretrain.spec(Phase::Pretrain, Setting::Full);
    let report = pretrain(&mut model, &suite, &spec)?;
    let ckpt = Checkpoint::from_assembly(
        &model,
        config.checkpoint_dtype,
        Some(report.rng.clone()),
        vec![provenance(&spec, &report, None)],
    )?;
    run.save(&ckpt, &run.dir.join("checkpoint.mfn"), spec.seed)?;
    run.write(&run.dir.join("train_log.jsonl"), &report.log.to_jsonl(true)?, spec.seed)?;
    if let Some(r) = report.log.records.last() {
        eprintln!("pretrained {} steps, final validation loss {:.4}", report.steps, r.valid_metric);
    }
    finish(report).map(|_| ())
}

fn run_calibrate(run: &Run) -> Result<(), CliError> {
    let config = run.config;
    let pretrained = read_checkpoint(&run.root.join("pretrain/checkpoint.mfn"))?;
    for (bundle, setting) in prepared_tasks(config, &run.root)? {
        let mut model = Assembly::new(config.model.clone())?;
        load_shared(&mut model, &pretrained)?;
        model.attach_dataset(&bundle.schema)?;
        let spec = config.calibrate.spec(Phase::Calibrate, setting);
        let report = calibrate(&mut model, &bundle, &spec)?;
        let key = task_key(bundle.name(), setting);
        let mut prov = pretrained.header.provenance.clone();
        prov.push(provenance(&spec, &report, Some(bundle.name())));
        let ckpt = Checkpoint::from_assembly(&model, config.checkpoint_dtype, Some(report.rng.clone()), prov)?;
        run.save(&ckpt, &run.dir.join(&key).join("checkpoint.mfn"), spec.seed)?;
        run.write(&run.dir.join(&key).join("train_log.jsonl"), &report.log.to_jsonl(true)?, spec.seed)?;
        eprintln!("{key}: best epoch {} of {}, {:.4}", report.best_epoch, spec.epochs, report.best_metric);
        finish(report)?;
    }
    Ok(())
}

fn run_refine(run: &Run) -> Result<(), CliError> {
    let config = run.config;
    for (bundle, setting) in prepared_tasks(config, &run.root)? {
        let key = task_key(bundle.name(), setting);
        let calibrated = read_checkpoint(&run.root.join("calibrate").join(&key).join("checkpoint.mfn"))?;
        let mut model = calibrated.to_assembly()?;
        let spec = config.refine.spec(Phase::Refine, setting);
        let report = refine(&mut model, &bundle, &spec)?;
        let mut prov = calibrated.header.provenance.clone();
        prov.push(provenance(&spec, &report, Some(bundle.name())));
        let ckpt = Checkpoint::from_assembly(&model, config.checkpoint_dtype, Some(report.rng.clone()), prov)?;
        run.save(&ckpt, &run.dir.join(&key).join("checkpoint.mfn"), spec.seed)?;
        run.write(&run.dir.join(&key).join("train_log.jsonl"), &report.log.to_jsonl(true)?, spec.seed)?;
        eprintln!("{key}: best epoch {} of {}, {:.4}", report.best_epoch, spec.epochs, report.best_metric);
        finish(report)?;
    }
    Ok(())
}

fn task_score(model: &Assembly, bundle: &DatasetBundle, setting: Setting) -> Result<TaskScore, CliError> {
    let id = model
        .find(bundle.name())
        .ok_or_else(|| CliError::Runtime(format!("checkpoint does not contain `{}`", bundle.name())))?;
    Ok(TaskScore {
        dataset: bundle.name().to_string(),
        setting: setting.to_string(),
        score: score(model, id, bundle, SplitKind::Test)?,
    })
}

fn run_eval(run: &Run) -> Result<(), CliError> {
    let config = run.config;
    let label = &config.label;
    let mut methods = vec![
        MethodResults {
            method: format!("{label}-cal"),
            scores: Vec::new(),
        },
        MethodResults {
            method: label.clone(),
            scores: Vec::new(),
        },
    ];
    if config.eval.scratch {
        methods.push(MethodResults {
            method: format!("{label}-scratch"),
            scores: Vec::new(),
        });
    }
    for (bundle, setting) in prepared_tasks(config, &run.root)? {
        let key = task_key(bundle.name(), setting);
        for (i, phase) in ["calibrate", "refine"].iter().enumerate() {
            let ckpt = read_checkpoint(&run.root.join(phase).join(&key).join("checkpoint.mfn"))?;
            let model = ckpt.to_assembly()?;
            methods[i].scores.push(task_score(&model, &bundle, setting)?);
        }
        if config.eval.scratch {
            let mut model = Assembly::new(config.model.clone())?;
            model.attach_dataset(&bundle.schema)?;
            let cal = config.calibrate.spec(Phase::Calibrate, setting);
            let refine = config.refine.spec(Phase::Refine, setting);
            let spec = PhaseSpec {
                phase: Phase::Scratch,
                epochs: cal.epochs + refine.epochs,
                ..cal
            };
            finish(train_from_scratch(&mut model, &bundle, &spec)?)?;
            methods[2].scores.push(task_score(&model, &bundle, setting)?);
        }
        let line: Vec<String> = methods
            .iter()
            .map(|m| format!("{} {:.4}", m.method, m.scores.last().expect("scored").score.value))
            .collect();
        eprintln!("{key}: {}", line.join(", "));
    }
    let json = serde_json::to_string_pretty(&methods).expect("serializable") + "\n";
    run.write(&run.dir.join("results.json"), &json, config.model.seed)
}

fn run_export(run: &Run) -> Result<(), CliError> {
    let config = run.config;
    let mut records: Vec<CoefficientRecord> = Vec::new();
    let pre = run.root.join("pretrain/checkpoint.mfn");
    if pre.exists() {
        let model = load_checkpoint(&pre)?.to_assembly()?;
        records.extend(coefficient_records(&model, &model.dataset_ids(), CoefficientPhase::Pretrained)?);
    }
    for (bundle, setting) in prepared_tasks(config, &run.root)? {
        let key = task_key(bundle.name(), setting);
        for (dir, phase) in [("calibrate", CoefficientPhase::Calibrated), ("refine", CoefficientPhase::Refined)] {
            let path = run.root.join(dir).join(&key).join("checkpoint.mfn");
            if path.exists() {
                let model = load_checkpoint(&path)?.to_assembly()?;
                records.extend(coefficient_records(&model, &model.dataset_ids(), phase)?);
            }
        }
    }
    if records.is_empty() {
        return Err(CliError::Runtime("no checkpoints found to export coefficients from".into()));
    }
    let json = serde_json::to_string_pretty(&records).expect("serializable") + "\n";
    run.write(&run.dir.join("coefficients.json"), &json, config.model.seed)?;
    eprintln!("exported {} coefficient records", records.len());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn collect_logs(root: &Path) -> Result<Vec<(String, TrainLog)>, CliError> {
    let mut logs = Vec::new();
    let pre = root.join("pretrain/train_log.jsonl");
    if pre.exists() {
        let text = fs::read_to_string(&pre).map_err(|e| io_err(&pre, e))?;
        logs.push(("pretrain".to_string(), TrainLog::from_jsonl(&text)?));
    }
    for phase in ["calibrate", "refine"] {
        let dir = root.join(phase);
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for n in names {
            let path = dir.join(&n).join("train_log.jsonl");
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                logs.push((format!("{phase}/{n}"), TrainLog::from_jsonl(&text)?));
            }
        }
    }
    Ok(logs)
}

fn run_report(run: &Run) -> Result<(), CliError> {
    let config = run.config;
    let inputs = if config.report.inputs.is_empty() {
        vec![run.root.join("eval/results.json")]
    } else {
        config.report.inputs.clone()
    };
    let mut results: Vec<MethodResults> = Vec::new();
    for path in &inputs {
        if !path.exists() {
            return Err(CliError::Runtime(format!("missing evaluation results {}", path.display())));
        }
        results.extend(read_json::<Vec<MethodResults>>(path)?);
    }
    let coeffs = run.root.join("coefficients/coefficients.json");
    let dumps: Vec<CoefficientRecord> = if coeffs.exists() { read_json(&coeffs)? } else { Vec::new() };
    let report = build_report(&results, &collect_logs(&run.root)?, &dumps)
        .map_err(|e| CliError::Runtime(format!("cannot build report: {e}")))?;
    run.write(&run.dir.join("report.json"), &report.to_json()?, config.model.seed)?;
    let text = report.to_text();
    run.write(&run.dir.join("report.txt"), &text, config.model.seed)?;
    eprint!("{text}");
    Ok(())
}
