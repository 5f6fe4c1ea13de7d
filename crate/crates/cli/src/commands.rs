use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fringeforge::eval::{
    fold_report, identity_seed, instance_specs, report_csv, run_instances, synth_scene, Bench, InstanceRecord,
};
use fringeforge::io::{read_attack_metadata, read_json, read_model, write_attack_result, write_file, write_json, write_model, write_scene};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// How a command finished when it did not hit a hard error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Complete,
    /// Some attack instances failed; their records are still written.
    Partial,
}

fn echo_config(out: &Path, config: &RunConfig) -> Result<()> {
    write_file(&out.join("config.txt"), config.echo()?)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct SceneEntry {
    pub label: usize,
    pub identity_seed: u64,
    pub dir: String,
}

#[derive(Serialize, Deserialize)]
pub struct SceneManifest {
    pub seed: u64,
    pub count: usize,
    pub scenes: Vec<SceneEntry>,
}

/// Neutral-expression scenes for labels `0..run.count`.
pub fn scene(config: &RunConfig, out: &Path) -> Result<Status> {
    let rig = config.bench.rig.build()?;
    let calibration = rig.calibration();
    let mut scenes = Vec::with_capacity(config.run.count);
    for label in 0..config.run.count {
        let dir = format!("face_{label:03}");
        let surface = synth_scene(&config.bench, &rig, label, 0)?;
        write_scene(&out.join(&dir), &surface, &calibration)?;
        scenes.push(SceneEntry { label, identity_seed: identity_seed(config.bench.seed, label), dir });
    }
    write_json(&out.join("manifest.json"), &SceneManifest { seed: config.bench.seed, count: config.run.count, scenes })?;
    echo_config(out, config)?;
    Ok(Status::Complete)
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    train_accuracy: f64,
    validation_accuracy: f64,
    final_loss: f64,
    /// Accuracy on the held-out attack faces.
    natural_accuracy: f64,
}

pub fn train(config: &RunConfig, out: &Path) -> Result<Status> {
    let bench = Bench::new(config.bench.clone())?;
    let mut train = config.train.clone();
    train.seed = config.model.seed;
    let (model, report) = bench.train_model(config.model.architecture, config.model.scanner, &train)?;
    let labels: Vec<usize> = (0..config.bench.identities).collect();
    let natural_accuracy = bench.natural_accuracy(&model, config.model.scanner, &labels)?;
    write_model(&out.join("model.bin"), &model)?;
    let summary = TrainSummary {
        train_accuracy: report.train_accuracy,
        validation_accuracy: report.validation_accuracy,
        final_loss: report.final_loss,
        natural_accuracy,
    };
    write_json(&out.join("train_report.json"), &summary)?;
    echo_config(out, config)?;
    Ok(Status::Complete)
}

/// One line of `records.json`: the instance record and its artifact directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub record: InstanceRecord,
    pub artifact_dir: Option<String>,
}

fn write_reports(out: &Path, records: &[InstanceRecord]) -> Result<()> {
    let report = fold_report(records);
    write_json(&out.join("report.json"), &report)?;
    write_file(&out.join("report.csv"), report_csv(&report))?;
    Ok(())
}

pub fn attack(config: &RunConfig, model_path: &Path, out: &Path) -> Result<Status> {
    let bench = Bench::new(config.bench.clone())?;
    let model = read_model(model_path)?;
    if model.classes != config.bench.identities {
        bail!(
            "model {} has {} classes but bench.identities is {}",
            model_path.display(),
            model.classes,
            config.bench.identities
        );
    }
    let specs = instance_specs(&bench, config.run.method, config.attack.mode, config.run.count, &config.attack);
    let outcomes = run_instances(&bench, &model, &specs, None);
    let mut records = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let artifact_dir = match &o.result {
            Some(result) => {
                let dir = write_attack_result(&out.join("attacks"), o.spec.label, &o.spec.config, result)?;
                Some(dir.file_name().unwrap().to_string_lossy().into_owned())
            }
            None => None,
        };
        records.push(RunRecord { record: o.record.clone(), artifact_dir });
    }
    write_json(&out.join("records.json"), &records)?;
    let plain: Vec<InstanceRecord> = records.iter().map(|r| r.record.clone()).collect();
    write_reports(out, &plain)?;
    echo_config(out, config)?;
    Ok(if plain.iter().all(|r| r.success) { Status::Complete } else { Status::Partial })
}

/// Re-aggregates an attack run directory in place. Per-instance metadata is
/// cross-checked against the records first.
pub fn eval(run: &Path) -> Result<Status> {
    let records: Vec<RunRecord> = read_json(&run.join("records.json"))?;
    for r in &records {
        if let Some(dir) = &r.artifact_dir {
            let path: PathBuf = run.join("attacks").join(dir);
            let meta = read_attack_metadata(&path)?;
            if meta.success != r.record.success || meta.seed != r.record.seed || meta.label != r.record.label {
                bail!("{} disagrees with records.json for instance {}", path.display(), r.record.index);
            }
        }
    }
    let plain: Vec<InstanceRecord> = records.into_iter().map(|r| r.record).collect();
    write_reports(run, &plain).with_context(|| format!("writing reports under {}", run.display()))?;
    Ok(if plain.iter().all(|r| r.success) { Status::Complete } else { Status::Partial })
}
