use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use kseg::evaluation::{
    acceleration_conditions, fold_split, noise_conditions, run_sweep, split_folds, FoldSplit, MetricRecord, MetricTable,
};
use kseg::features::{bridge_channels, gradient_modulated_sum, profiles_to_csv, radial_energy_profile, RadialProfile};
use kseg::io::{save_cvol, Checkpoint, CvolData, CvolMeta, Stamp};
use kseg::kspace::{prepare_exam, Domain, Timepoint};
use kseg::models::{build_model, patch_tensor, Model, ModelVariant};
use kseg::phantom::{generate_cohort, Exam};
use kseg::stats::{acceleration_family, bootstrap_ci, compare_models, comparisons_to_csv, ComparisonResult, Outcome};
use kseg::training::{train, TrainConfig};
use kseg::{Error, Result};

use crate::config::ExperimentConfig;
use crate::plot;
use crate::store::{self, read_sidecar, write_file, write_sidecar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    Accel,
    Noise,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Accel => "accel",
            SweepKind::Noise => "noise",
        }
    }
}

pub fn cmd_init(out: &Path, desk: bool, force: bool) -> Result<()> {
    if out.exists() && !force {
        return Err(Error::Validation(format!("{} already exists; pass --force to overwrite", out.display())));
    }
    let cfg = if desk { ExperimentConfig::desk() } else { ExperimentConfig::full() };
    write_file(out, cfg.to_toml()?)?;
    info!("wrote {} config to {}", if desk { "desk-scale" } else { "full-scale" }, out.display());
    Ok(())
}

pub fn cmd_phantom(cfg: &ExperimentConfig) -> Result<()> {
    let stamp = cfg.stamp()?;
    let exams = generate_cohort(&cfg.phantom, cfg.cohort_size, cfg.seed)?;
    let positives = exams.iter().filter(|e| e.lesion_voxels() > 0).count();
    store::save_dataset(&cfg.dataset_dir(), &exams, &stamp)?;
    info!(
        "wrote {} exams ({positives} lesion-positive) to {}",
        exams.len(),
        cfg.dataset_dir().display()
    );
    Ok(())
}

fn folds_for(cfg: &ExperimentConfig, exams: &[Exam], fold: usize) -> Result<FoldSplit> {
    let labels: Vec<bool> = exams.iter().map(|e| e.lesion_voxels() > 0).collect();
    let folds = split_folds(&labels, cfg.eval.folds, cfg.eval.fold_seed, true)?;
    fold_split(&folds, cfg.eval.folds, fold)
}

fn pick(exams: &[Exam], idx: &[usize]) -> Vec<Exam> {
    idx.iter().map(|&i| exams[i].clone()).collect()
}

pub fn checkpoint_path(cfg: &ExperimentConfig, v: ModelVariant, fold: usize) -> PathBuf {
    cfg.checkpoint_dir().join(format!("{}_fold{fold}.json", v.short_name()))
}

/// Model initialization and sampling seed of one training run.
fn run_seed(cfg: &ExperimentConfig, fold: usize) -> u64 {
    cfg.seed.wrapping_add(fold as u64)
}

pub fn cmd_train(cfg: &ExperimentConfig, v: ModelVariant, fold: usize) -> Result<()> {
    let stamp = cfg.stamp()?;
    let exams = store::load_dataset(&cfg.dataset_dir(), &stamp)?;
    let split = folds_for(cfg, &exams, fold)?;
    let seed = run_seed(cfg, fold);
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let mut model = build_model::<f32>(cfg.model(v), seed)?;
    info!(
        "training {v} fold {fold}: {} train / {} val patients, {} parameters",
        split.train.len(),
        split.val.len(),
        model.parameter_count()
    );
    let history = train(&mut model, &pick(&exams, &split.train), &pick(&exams, &split.val), &tcfg, &mut |r| {
        info!(
            "epoch {:>3} lr {:.2e} loss {:.4} val dice {}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_dice.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into())
        )
    })?;
    let path = checkpoint_path(cfg, v, fold);
    store::ensure_dir(&cfg.checkpoint_dir())?;
    Checkpoint::from_model(&model, stamp.clone(), seed).save(&path)?;
    let hist = path.with_file_name(format!("{}_fold{fold}_history.csv", v.short_name()));
    write_file(&hist, history.to_csv())?;
    write_sidecar(&hist, &stamp, "training-history")?;
    info!(
        "saved {} (best epoch {:?}, val dice {:?})",
        path.display(),
        history.best_epoch,
        history.best_val_dice
    );
    Ok(())
}

pub fn load_checkpoint(path: &Path, stamp: Option<&Stamp>) -> Result<Model<f32>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found; run `kseg train` first"),
        ));
    }
    let ck = Checkpoint::load(path)?;
    if let Some(s) = stamp {
        s.check(&ck.stamp, &path.display().to_string())?;
    }
    ck.into_model()
}

pub fn table_path(cfg: &ExperimentConfig, kind: SweepKind, fold: usize) -> PathBuf {
    cfg.results_dir().join(format!("{}_fold{fold}.csv", kind.as_str()))
}

/// Completed records of an interrupted sweep; a partially written last
/// line is discarded.
fn load_partial(path: &Path, stamp: &Stamp) -> Result<Option<MetricTable>> {
    if !path.exists() {
        return Ok(None);
    }
    let meta = read_sidecar(path)?;
    stamp.check(&meta.stamp, &format!("existing sweep {}", path.display()))?;
    let mut bytes = store::read_file(path)?;
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    bytes.truncate(keep);
    if bytes.is_empty() {
        return Ok(None);
    }
    MetricTable::read_csv(bytes.as_slice()).map(Some)
}

fn csv_line(r: &MetricRecord) -> Result<Vec<u8>> {
    let mut single = MetricTable::new();
    single.insert(r.clone())?;
    let mut buf = Vec::new();
    single.write_csv(&mut buf)?;
    let header_end = buf.iter().position(|&b| b == b'\n').map_or(0, |i| i + 1);
    Ok(buf.split_off(header_end))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, kind: SweepKind, fold: usize, workers: usize) -> Result<PathBuf> {
    let stamp = cfg.stamp()?;
    let exams = store::load_dataset(&cfg.dataset_dir(), &stamp)?;
    let split = folds_for(cfg, &exams, fold)?;
    let cohort = split
        .test
        .iter()
        .map(|&i| prepare_exam(&exams[i], Timepoint::Post2))
        .collect::<Result<Vec<_>>>()?;
    let models = ModelVariant::ALL
        .iter()
        .map(|&v| load_checkpoint(&checkpoint_path(cfg, v, fold), Some(&stamp)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let conditions = match kind {
        SweepKind::Accel => acceleration_conditions(&cfg.eval),
        SweepKind::Noise => noise_conditions(&cfg.eval),
    };
    let path = table_path(cfg, kind, fold);
    let existing = load_partial(&path, &stamp)?;
    if let Some(t) = &existing {
        info!("resuming {} with {} completed records", path.display(), t.len());
    }
    // rewrite the completed records so appends start on a clean line
    let mut seed_bytes = Vec::new();
    existing.clone().unwrap_or_default().write_csv(&mut seed_bytes)?;
    write_file(&path, &seed_bytes)?;
    write_sidecar(&path, &stamp, &format!("{}-sweep", kind.as_str()))?;
    let mut file = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let mut done = 0usize;
    let table = run_sweep(&refs, &cohort, &conditions, &cfg.eval, existing.as_ref(), workers.max(1), &mut |r| {
        file.write_all(&csv_line(r)?).map_err(|e| Error::io(&path, e))?;
        done += 1;
        if done.is_multiple_of(20) {
            info!("{done} records written");
        }
        Ok(())
    })?;
    drop(file);
    let mut out = Vec::new();
    table.write_csv(&mut out)?;
    write_file(&path, out)?;
    info!("{} records in {}", table.len(), path.display());
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub model: ModelVariant,
    pub condition_value: f64,
    pub n: usize,
    pub mean_dice: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub failure_rate: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

pub fn summarize(table: &MetricTable, condition_type: &str, seed: u64) -> Result<Vec<ConditionSummary>> {
    let mut out = Vec::new();
    for model in table.models() {
        for value in table.conditions(model, condition_type) {
            let dice: Vec<f64> = table.dice_by_patient(model, condition_type, value).into_values().collect();
            let (ci_low, ci_high) = bootstrap_ci(&dice, BOOTSTRAP_RESAMPLES, 0.05, seed)?;
            out.push(ConditionSummary {
                model,
                condition_value: value,
                n: dice.len(),
                mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
                ci_low,
                ci_high,
                failure_rate: kseg::evaluation::failure_rate(&dice)?,
            });
        }
    }
    Ok(out)
}

pub fn condition_type_of(table: &MetricTable) -> Result<String> {
    let types: std::collections::BTreeSet<&str> = table.records().map(|r| r.condition_type.as_str()).collect();
    match types.len() {
        1 => Ok(types.into_iter().next().unwrap().to_string()),
        0 => Err(Error::Validation("metric table is empty".into())),
        _ => Err(Error::Validation(format!("metric table mixes condition types {types:?}"))),
    }
}

/// Highest acceleration in the comparison family.
pub const FAMILY_MAX_R: f64 = 48.0;

pub fn family(table: &MetricTable, condition_type: &str, a: ModelVariant, b: ModelVariant) -> Vec<f64> {
    if condition_type == "acceleration" {
        acceleration_family(table, a, b, FAMILY_MAX_R)
    } else {
        let other = table.conditions(b, condition_type);
        table.conditions(a, condition_type).into_iter().filter(|v| other.contains(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsReport {
    pub table: String,
    pub stamp: Option<Stamp>,
    pub model_a: ModelVariant,
    pub model_b: ModelVariant,
    pub condition_type: String,
    pub dice: Vec<ComparisonResult>,
    pub failure: Vec<ComparisonResult>,
    pub summaries: Vec<ConditionSummary>,
}

pub fn read_table(path: &Path) -> Result<MetricTable> {
    let bytes = store::read_file(path)?;
    MetricTable::read_csv(bytes.as_slice()).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn stats_report(path: &Path, table: &MetricTable, a: ModelVariant, b: ModelVariant, seed: u64) -> Result<StatsReport> {
    if a == b {
        return Err(Error::Validation("compare two different models".into()));
    }
    let kind = condition_type_of(table)?;
    let fam = family(table, &kind, a, b);
    if fam.is_empty() {
        return Err(Error::Validation(format!("{a} and {b} share no {kind} conditions")));
    }
    Ok(StatsReport {
        table: path.display().to_string(),
        stamp: read_sidecar(path).ok().map(|s| s.stamp),
        model_a: a,
        model_b: b,
        condition_type: kind.clone(),
        dice: compare_models(table, a, b, &kind, &fam, Outcome::Dice)?,
        failure: compare_models(table, a, b, &kind, &fam, Outcome::Failure)?,
        summaries: summarize(table, &kind, seed)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, json + "\n")
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("table").to_string()
}

pub fn cmd_stats(table_path: &Path, a: ModelVariant, b: ModelVariant, out: &Path, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let table = read_table(table_path)?;
    let report = stats_report(table_path, &table, a, b, seed)?;
    let base = format!("{}_{}_vs_{}", stem(table_path), a.short_name(), b.short_name());
    let csv_path = out.join(format!("{base}.csv"));
    let json_path = out.join(format!("{base}.json"));
    write_file(&csv_path, comparisons_to_csv(&report.dice)?)?;
    write_json(&json_path, &report)?;
    if let Some(stamp) = &report.stamp {
        write_sidecar(&csv_path, stamp, "comparison")?;
    }
    let significant = report.dice.iter().filter(|r| r.significant).count();
    info!(
        "{significant} of {} {} conditions significant after Holm; wrote {}",
        report.dice.len(),
        report.condition_type,
        csv_path.display()
    );
    Ok((csv_path, json_path))
}

/// Window with the most lesion voxels (first on ties).
fn densest_window(mask: &[u8], depth: usize, plane: usize, patch: usize, stride: usize) -> Result<usize> {
    let starts = kseg::evaluation::window_starts(depth, patch, stride)?;
    let count = |z: usize| mask[z * plane..(z + patch) * plane].iter().filter(|&&m| m != 0).count();
    Ok(starts.iter().copied().fold(starts[0], |best, z| if count(z) > count(best) { z } else { best }))
}

#[derive(Serialize)]
struct FeatureSummary {
    patient: usize,
    window_start: usize,
    gradient_weights: Vec<f64>,
    stamp: Stamp,
}

pub fn cmd_features(cfg: &ExperimentConfig, checkpoint: &Path, patient: usize, out: &Path) -> Result<PathBuf> {
    let stamp = cfg.stamp()?;
    let model = load_checkpoint(checkpoint, Some(&stamp))?;
    if model.variant() != ModelVariant::HybridKspaceToImage {
        return Err(Error::Usage(format!(
            "feature analysis needs a hybrid checkpoint, {} holds {}",
            checkpoint.display(),
            model.variant()
        )));
    }
    let manifest = store::load_manifest(&cfg.dataset_dir(), &stamp)?;
    let entry = manifest
        .patients
        .iter()
        .find(|p| p.patient_index == patient)
        .ok_or_else(|| Error::Validation(format!("patient {patient} is not in the dataset")))?;
    let exam = store::load_exam(&cfg.dataset_dir(), entry, &stamp)?;
    let prepared = prepare_exam(&exam, Timepoint::Post2)?;
    let (d, h, w) = prepared.shape();
    let depth = cfg.eval.patch_depth;
    let z0 = densest_window(&prepared.lesion_mask, d, h * w, depth, cfg.eval.patch_stride)?;
    let patch = patch_tensor::<f32>(&prepared.kspace, z0, depth)?;
    let channels = bridge_channels(&model, &patch)?;
    let coherent = kseg::features::coherent_sum(&channels)?;
    let (modulated, weights) = gradient_modulated_sum(&model, &patch)?;

    let dir = out.join(format!("patient_{patient:03}"));
    store::ensure_dir(&dir)?;
    let meta = CvolMeta {
        patient_index: Some(patient),
        domain_tag: Some(Domain::Image.as_str().into()),
        timepoint: Some(Timepoint::Post2),
        stamp: Some(stamp.clone()),
    };
    save_cvol(&dir.join("coherent_sum.cvol"), &CvolData::Complex(coherent), &meta)?;
    save_cvol(&dir.join("gradient_modulated_sum.cvol"), &CvolData::Complex(modulated), &meta)?;

    let n_bins = (h.min(w) / 2).max(2);
    let input = prepared.kspace.depth_window(z0, depth)?;
    let mut profiles: Vec<(String, RadialProfile)> = vec![("input".into(), radial_energy_profile(&input, n_bins)?)];
    let mut per_channel = Vec::new();
    for (i, c) in channels.iter().enumerate() {
        let p = radial_energy_profile(&c.fft2c()?, n_bins)?;
        per_channel.push(p.clone());
        profiles.push((format!("channel_{i}"), p));
    }
    let mut mean = per_channel[0].clone();
    for (j, e) in mean.energy.iter_mut().enumerate() {
        *e = per_channel.iter().map(|p| p.energy[j]).sum::<f64>() / per_channel.len() as f64;
    }
    profiles.push(("channel_mean".into(), mean));
    let csv_path = dir.join("radial_profiles.csv");
    write_file(&csv_path, profiles_to_csv(&profiles)?)?;
    write_sidecar(&csv_path, &stamp, "radial-profiles")?;
    write_json(
        &dir.join("features.json"),
        &FeatureSummary {
            patient,
            window_start: z0,
            gradient_weights: weights,
            stamp,
        },
    )?;
    info!("wrote feature analysis of patient {patient} to {}", dir.display());
    Ok(dir)
}

pub fn cmd_plot(tables: &[PathBuf], profiles: &[PathBuf], out: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    if tables.is_empty() && profiles.is_empty() {
        return Err(Error::Validation("nothing to plot: pass --table and/or --profiles".into()));
    }
    store::ensure_dir(out)?;
    let mut written = Vec::new();
    for path in tables {
        let table = read_table(path)?;
        let kind = condition_type_of(&table)?;
        let summaries = summarize(&table, &kind, seed)?;
        let (a, b) = (ModelVariant::HybridKspaceToImage, ModelVariant::ImageMagnitude);
        let fam = family(&table, &kind, a, b);
        let significant: Vec<f64> = if fam.is_empty() {
            Vec::new()
        } else {
            compare_models(&table, a, b, &kind, &fam, Outcome::Dice)?
                .into_iter()
                .filter(|r| r.significant)
                .map(|r| r.condition_value)
                .collect()
        };
        let name = stem(path);
        let dice = out.join(format!("{name}_dice.svg"));
        plot::dice_curves(&dice, &summaries, &kind, &significant)?;
        written.push(dice);
        if kind == "acceleration" {
            let fail = out.join(format!("{name}_failure_rate.svg"));
            plot::failure_curves(&fail, &summaries)?;
            written.push(fail);
        }
    }
    for path in profiles {
        let curves = plot::read_profiles(path)?;
        let prefix = path
            .parent()
            .and_then(|d| d.file_name())
            .and_then(|n| n.to_str())
            .map(|n| format!("{n}_"))
            .unwrap_or_default();
        let target = out.join(format!("{prefix}{}.svg", stem(path)));
        plot::profile_curves(&target, &curves)?;
        written.push(target);
    }
    for p in &written {
        info!("wrote {}", p.display());
    }
    Ok(written)
}

#[derive(Serialize)]
struct Report {
    stamp: Stamp,
    comparisons: Vec<StatsReport>,
    figures: Vec<String>,
}

/// Statistics and figures for every sweep table in the results directory.
pub fn cmd_report(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let stamp = cfg.stamp()?;
    let results = cfg.results_dir();
    let mut tables: Vec<PathBuf> = fs::read_dir(&results)
        .map_err(|e| Error::io(&results, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .filter(|p| read_sidecar(p).is_ok_and(|m| m.kind.ends_with("-sweep")))
        .collect();
    tables.sort();
    if tables.is_empty() {
        return Err(Error::io(
            &results,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no sweep tables; run `kseg sweep` first"),
        ));
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("report"));
    let mut comparisons = Vec::new();
    for t in &tables {
        stamp.check(&read_sidecar(t)?.stamp, &t.display().to_string())?;
        let table = read_table(t)?;
        for b in [ModelVariant::ImageMagnitude, ModelVariant::ImageComplex, ModelVariant::NativeKspace] {
            comparisons.push(stats_report(t, &table, ModelVariant::HybridKspaceToImage, b, cfg.seed)?);
        }
    }
    let mut profiles = Vec::new();
    let features = cfg.output_dir.join("features");
    if let Ok(entries) = fs::read_dir(&features) {
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        profiles.extend(dirs.into_iter().map(|d| d.join("radial_profiles.csv")).filter(|p| p.exists()));
    }
    let figures = cmd_plot(&tables, &profiles, &dir.join("figures"), cfg.seed)?;
    let path = dir.join("report.json");
    write_json(
        &path,
        &Report {
            stamp,
            comparisons,
            figures: figures.iter().map(|p| p.display().to_string()).collect(),
        },
    )?;
    info!("wrote {}", path.display());
    Ok(path)
}
