//! Config-driven experiments: data generation, training, evaluation,
//! attacks, audits, and reports.

mod config;
mod report;

pub use config::{AttackConfig, DataSource, ExperimentConfig, ShadowData, SCHEMA_VERSION};
pub use report::{emit_report, Report, RunSummary, Uplift};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::attacks::{
    baseline_attack, published_targets, queryfree_attack, representative_samples, whitebox_attack, AttackError,
    AttackKind, AttackReport, PassiveMap,
};
use crate::data::{
    generate_synthetic, load_source, prepare, write_panel_files, DataError, PreparedData, Role, SplitData,
    TimeSeriesPanel,
};
use crate::models::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::protocol::{audit, AuditReport, Federation, Metrics, ProtocolError, Transcript};
use crate::seed::stream;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl ExperimentError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) => "config",
            ExperimentError::Io(_) => "io",
            ExperimentError::Data(_) => "data",
            ExperimentError::Protocol(_) => "protocol",
            ExperimentError::Attack(_) => "attack",
            ExperimentError::Checkpoint(_) => "checkpoint",
        }
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io(format!("{}: {e}", path.display()))
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRANSCRIPT_FILE: &str = "transcript.json";

/// Raw active and passive panels named by the config.
pub fn load_panels(cfg: &ExperimentConfig) -> Result<(TimeSeriesPanel, Vec<TimeSeriesPanel>), ExperimentError> {
    match &cfg.data {
        DataSource::Synthetic(s) => {
            let (a, p) = generate_synthetic(s)?;
            Ok((a, vec![p]))
        }
        DataSource::Csv { active, passives } => {
            let a = load_source(active, 0, Role::Active)?;
            let p = passives
                .iter()
                .enumerate()
                .map(|(i, src)| load_source(src, i + 1, Role::Passive))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((a, p))
        }
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    let (a, p) = load_panels(cfg)?;
    Ok(prepare(&a, &p, cfg.split, cfg.window)?)
}

/// Writes the configured panels as CSV pairs into `out`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let (a, passives) = load_panels(cfg)?;
    let mut files = Vec::new();
    let mut write = |panel: &TimeSeriesPanel, stem: &str| -> Result<(), ExperimentError> {
        let src = write_panel_files(panel, out, stem)?;
        files.push(src.series);
        files.push(src.locations);
        Ok(())
    };
    write(&a, "active")?;
    for (i, p) in passives.iter().enumerate() {
        write(p, &format!("passive{i}"))?;
    }
    Ok(files)
}

fn all_metrics(fed: &mut Federation, data: &PreparedData) -> Result<BTreeMap<String, Metrics>, ExperimentError> {
    let mut out = BTreeMap::new();
    for name in ["train", "valid", "test"] {
        let split = data.split(name).expect("known split");
        out.insert(name.to_string(), fed.evaluate(split, &data.active_scaler)?);
    }
    Ok(out)
}

fn run_one(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    label: &str,
    local_only: bool,
    timings: &mut BTreeMap<String, f64>,
) -> Result<(Federation, RunSummary), ExperimentError> {
    let mut setup = cfg.federation;
    setup.local_only = local_only;
    let start = Instant::now();
    let mut fed = Federation::new(setup, data, cfg.seed)?;
    let history = fed.train(data)?;
    timings.insert(format!("{label}/train"), start.elapsed().as_secs_f64());
    let start = Instant::now();
    let metrics = all_metrics(&mut fed, data)?;
    timings.insert(format!("{label}/evaluate"), start.elapsed().as_secs_f64());
    let summary = RunSummary {
        label: label.to_string(),
        metrics,
        audit: audit(&fed.transcript),
        history,
    };
    Ok((fed, summary))
}

/// Trains the configured federation and writes a checkpoint, the transcript,
/// and the report into `out`.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<Report, ExperimentError> {
    let mut timings = BTreeMap::new();
    let data = prepare_data(cfg)?;
    let label = if cfg.federation.local_only { "local" } else { "hstfl" };
    let (fed, run) = run_one(cfg, &data, label, cfg.federation.local_only, &mut timings)?;
    let stores = fed.stores();
    let groups: Vec<(&str, &_)> = stores.iter().map(|(n, s)| (n.as_str(), s)).collect();
    let echo = serde_json::to_value(cfg).expect("config serializes");
    save_checkpoint(&out.join(CHECKPOINT_DIR), &groups, echo)?;
    let path = out.join(TRANSCRIPT_FILE);
    let json = serde_json::to_vec(&fed.transcript).expect("transcript serializes");
    std::fs::write(&path, json).map_err(|e| io(&path, e))?;
    let report = Report::new(cfg.clone(), vec![run], timings);
    emit_report(&report, out)?;
    Ok(report)
}

/// Rebuilds the data and federation recorded in a checkpoint directory.
pub fn load_trained(checkpoint: &Path) -> Result<(ExperimentConfig, PreparedData, Federation), ExperimentError> {
    let (manifest, entries) = load_checkpoint(checkpoint)?;
    let cfg = ExperimentConfig::from_json(&manifest.config.to_string())?;
    let data = prepare_data(&cfg)?;
    let mut fed = Federation::new(cfg.federation, &data, cfg.seed)?;
    fed.active.store.restore("active", &entries)?;
    for p in &mut fed.passives {
        p.store.restore(&format!("passive{}", p.id), &entries)?;
    }
    Ok((cfg, data, fed))
}

/// Metrics of a checkpoint on one split.
pub fn evaluate(checkpoint: &Path, split: &str) -> Result<Metrics, ExperimentError> {
    let (_, data, mut fed) = load_trained(checkpoint)?;
    let s = data
        .split(split)
        .ok_or_else(|| ExperimentError::Config(format!("split: unknown split `{split}` (train, valid, test)")))?;
    Ok(fed.evaluate(s, &data.active_scaler)?)
}

/// Replaces one party's passive values with standard-normal draws.
fn noise_shadow(split: &SplitData, party: usize, seed: u64) -> SplitData {
    let mut out = split.clone();
    let mut rng = stream(seed, "attack/shadow");
    for v in &mut out.passives[party].values {
        *v = StandardNormal.sample(&mut rng);
    }
    out
}

/// Attack samples: one representative per k-means cluster of the test
/// windows of the targeted party.
pub fn attack_samples(data: &PreparedData, party: usize, clusters: usize, seed: u64) -> Vec<usize> {
    let points: Vec<Vec<f64>> = (0..data.test.len())
        .map(|i| data.test.passive_window(party, i).into_data())
        .collect();
    representative_samples(&points, clusters, &mut stream(seed, "attack/select"))
}

/// Runs one attack against the published test-split virtual nodes of a
/// trained federation.
pub fn run_attack(
    attack: &crate::experiment::AttackConfig,
    data: &PreparedData,
    fed: &mut Federation,
    seed: u64,
) -> Result<AttackReport, ExperimentError> {
    let party = attack.party;
    if party >= fed.passives.len() {
        return Err(ExperimentError::Config(format!(
            "attack.party: {party} is out of range ({} passive parties)",
            fed.passives.len()
        )));
    }
    let samples = attack_samples(data, party, attack.clusters, seed);
    let truth: Vec<Tensor> = samples.iter().map(|&s| data.test.passive_window(party, s)).collect();
    let mut rng = stream(seed, "attack");
    let report = match attack.kind {
        AttackKind::Mean | AttackKind::RandomGuess => baseline_attack(attack.kind, &truth, attack.guess, &mut rng)?,
        AttackKind::WhiteBox => {
            let targets = published_targets(fed, &data.test, party, &samples, attack.levels)?;
            let map = PassiveMap {
                party: &fed.passives[party],
                steps: data.test.passive_history[party],
                targets: attack.levels,
            };
            let recon = whitebox_attack(&map, &targets, &attack.whitebox, &mut rng)?;
            AttackReport::new(AttackKind::WhiteBox, &truth, recon)
        }
        AttackKind::QueryFree => {
            let targets = published_targets(fed, &data.test, party, &samples, attack.levels)?;
            let (train, valid) = match attack.shadow {
                ShadowData::TrainValid => (data.train.clone(), data.valid.clone()),
                ShadowData::Noise => (noise_shadow(&data.train, party, seed), noise_shadow(&data.valid, party, seed ^ 1)),
            };
            let recon = queryfree_attack(fed, party, &[&train, &valid], &targets, attack.levels, &attack.queryfree, &mut rng)?;
            AttackReport::new(AttackKind::QueryFree, &truth, recon)
        }
    };
    Ok(report)
}

/// Attack settings from `cfg`, model and data from the checkpoint.
pub fn attack(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<AttackReport, ExperimentError> {
    let (trained, data, mut fed) = load_trained(checkpoint)?;
    run_attack(&cfg.attack, &data, &mut fed, trained.seed)
}

pub fn audit_file(path: &Path) -> Result<AuditReport, ExperimentError> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    let transcript: Transcript =
        serde_json::from_slice(&bytes).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
    Ok(audit(&transcript))
}

/// Trains a local-only and a full federation on the same data and reports
/// the test-MAE ratio.
pub fn compare(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut timings = BTreeMap::new();
    let data = prepare_data(cfg)?;
    let (_, local) = run_one(cfg, &data, "local", true, &mut timings)?;
    let (_, full) = run_one(cfg, &data, "hstfl", false, &mut timings)?;
    let mut report = Report::new(cfg.clone(), vec![local, full], timings);
    report.uplift = Some(Uplift::from_runs(&report.runs[0], &report.runs[1]));
    if let Some(dir) = &cfg.output_dir {
        emit_report(&report, dir)?;
    }
    Ok(report)
}
