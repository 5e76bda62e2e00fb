use std::fs;
use std::path::{Path, PathBuf};

use dal_core::data::{
    generate_dataset, load_model, load_sequence, save_model, save_sequence, DatasetSpec, FrameSequence, NUM_CLASSES,
};
use dal_core::network::{
    compare_modes, frame_rate_experiment, memory_overhead_estimate, per_layer_report_over, write_frame_rate_csv,
    write_per_layer_csv, EquivalenceReport, MemoryEstimate, MemorySheet, ParamSet,
};
use dal_core::presets::{toy_cnn, Preset};
use dal_core::train::{evaluate, train, write_training_log, EvalReport, LambdaSetting, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{required, GenDataConfig, ReportConfig, TrainCmdConfig, VerifyConfig};
use crate::error::{at, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Dataset index. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: usize,
    pub dataset: Option<DatasetSpec>,
    pub sequences: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_csv(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> dal_core::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<(Manifest, Vec<(FrameSequence, usize)>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("{}: malformed manifest: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut data = Vec::with_capacity(manifest.sequences.len());
    for entry in &manifest.sequences {
        if entry.label >= manifest.classes {
            return Err(CliError::Config(format!(
                "{}: label {} of {} is outside {} classes",
                path.display(),
                entry.label,
                entry.path.display(),
                manifest.classes
            )));
        }
        let p = base.join(&entry.path);
        data.push((load_sequence(&p).map_err(at(&p))?, entry.label));
    }
    Ok((manifest, data))
}

pub fn gen_data(cfg: &GenDataConfig) -> Result<(), CliError> {
    let spec = DatasetSpec {
        kind: cfg.kind,
        height: cfg.height,
        width: cfg.width,
        frames: cfg.frames,
        per_class: cfg.per_class,
        noise_amplitude: cfg.noise_amplitude,
        seed: cfg.seed,
    };
    let sequences = generate_dataset(&spec)?;
    create_dir(&cfg.out)?;
    let mut entries = Vec::with_capacity(sequences.len());
    for (i, s) in sequences.iter().enumerate() {
        let name = PathBuf::from(format!("seq_{i:05}.dseq"));
        let path = cfg.out.join(&name);
        save_sequence(&s.sequence, &path).map_err(at(&path))?;
        entries.push(ManifestEntry { path: name, label: s.label });
    }
    write_json(
        &cfg.out.join(MANIFEST_FILE),
        &Manifest { classes: NUM_CLASSES, dataset: Some(spec), sequences: entries },
    )
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    preset: Preset,
    base_lambda: Option<f64>,
    config: &'a TrainCmdConfig,
    train: EvalReport,
    test: Option<EvalReport>,
}

pub fn train_cmd(cfg: &TrainCmdConfig) -> Result<(), CliError> {
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let (manifest, data) = load_manifest(manifest_path)?;
    let Some((first, _)) = data.first() else {
        return Err(CliError::Config(format!("{} lists no sequences", manifest_path.display())));
    };
    let shape: [usize; 3] = first
        .frame_shape()
        .try_into()
        .map_err(|_| CliError::Config("frames must be height x width x channels".into()))?;
    let spec = toy_cnn(shape, manifest.classes, cfg.preset)?;
    let params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let lambda = match (cfg.preset.wants_sparsity_penalty(), cfg.base_lambda) {
        (false, _) => LambdaSetting::Keep,
        (true, Some(base)) => LambdaSetting::Fixed { base },
        (true, None) => LambdaSetting::Calibrated { ratio: cfg.sparsity_ratio },
    };
    let tc = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        lambda,
        surrogate: cfg.surrogate,
        q_lr_scale: cfg.q_lr_scale,
        seed: cfg.seed,
    };
    let outcome = train(&spec, &params, &data, &tc)?;
    let test = match &cfg.test_manifest {
        Some(p) => {
            let (_, test_data) = load_manifest(p)?;
            if test_data.is_empty() {
                None
            } else {
                Some(evaluate(&outcome.spec, &outcome.params, &test_data)?)
            }
        }
        None => None,
    };
    create_dir(&cfg.out)?;
    let model = cfg.out.join("model.dmdl");
    save_model(&model, &outcome.spec, &outcome.params, None).map_err(at(&model))?;
    write_csv(&cfg.out.join("train_log.csv"), |buf| write_training_log(&outcome.log, buf))?;
    let summary = TrainSummary {
        preset: cfg.preset,
        base_lambda: outcome.base_lambda,
        config: cfg,
        train: evaluate(&outcome.spec, &outcome.params, &data)?,
        test,
    };
    write_json(&cfg.out.join("summary.json"), &summary)
}

#[derive(Serialize)]
struct VerifyEntry {
    sequence: PathBuf,
    report: EquivalenceReport,
}

#[derive(Serialize)]
struct VerifyOutput {
    perturb_delta_q: Option<f32>,
    passed: bool,
    results: Vec<VerifyEntry>,
}

pub fn verify(cfg: &VerifyConfig) -> Result<(), CliError> {
    let model_path = required(&cfg.model, "model")?;
    let model = load_model(model_path).map_err(at(model_path))?;
    let inputs: Vec<(PathBuf, FrameSequence)> = match (&cfg.sequence, &cfg.manifest) {
        (Some(p), _) => vec![(p.clone(), load_sequence(p).map_err(at(p))?)],
        (None, Some(m)) => {
            let (manifest, data) = load_manifest(m)?;
            manifest.sequences.into_iter().map(|e| e.path).zip(data.into_iter().map(|(s, _)| s)).collect()
        }
        (None, None) => return Err(CliError::Config("`sequence` or `manifest` is required".into())),
    };
    let mut results = Vec::with_capacity(inputs.len());
    for (path, seq) in inputs {
        let report = compare_modes(&model.spec, &model.params, seq.frames(), cfg.perturb_delta_q)?;
        results.push(VerifyEntry { sequence: path, report });
    }
    let passed = results.iter().all(|r| r.report.passed);
    create_dir(&cfg.out)?;
    write_json(
        &cfg.out.join("equivalence.json"),
        &VerifyOutput { perturb_delta_q: cfg.perturb_delta_q, passed, results },
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Verification("execution modes disagree beyond tolerance; see equivalence.json".into()))
    }
}

#[derive(Serialize)]
struct MemoryReport {
    sheet: MemorySheet,
    estimate: MemoryEstimate,
}

pub fn report(cfg: &ReportConfig) -> Result<(), CliError> {
    let model_path = required(&cfg.model, "model")?;
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let model = load_model(model_path).map_err(at(model_path))?;
    let (_, data) = load_manifest(manifest_path)?;
    if data.is_empty() {
        return Err(CliError::Config(format!("{} lists no sequences", manifest_path.display())));
    }
    let sequences: Vec<FrameSequence> = data.iter().map(|(s, _)| s.clone()).collect();
    let rows = per_layer_report_over(&model.spec, &model.params, &sequences)?;
    let rates = frame_rate_experiment(&model.spec, &model.params, &sequences, &cfg.divisors)?;
    let sheet = MemorySheet::from_spec(&model.spec)?;
    let estimate = memory_overhead_estimate(&sheet, cfg.state_bits, cfg.weight_bits, cfg.state_words)?;
    let summary = evaluate(&model.spec, &model.params, &data)?;
    create_dir(&cfg.out)?;
    write_csv(&cfg.out.join("per_layer.csv"), |buf| write_per_layer_csv(&rows, buf))?;
    write_csv(&cfg.out.join("frame_rate.csv"), |buf| write_frame_rate_csv(&rates, buf))?;
    write_json(&cfg.out.join("memory.json"), &MemoryReport { sheet, estimate })?;
    write_json(&cfg.out.join("summary.json"), &summary)
}
