//! Sliding-window inference with strict majority voting, patient-level
//! Dice, cross-validation folds and the undersampling/noise sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{ComplexVolume, Domain, PreparedExam};
use crate::models::{patch_tensor, Model, ModelVariant};
use crate::nn::Real;
use crate::sampling::{add_noise, apply_mask, derive_noise_seed, derive_seed, random_mask, AccelSchedule, SplitMix64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub patch_depth: usize,
    pub patch_stride: usize,
    pub schedule: AccelSchedule,
    pub snr_list: Vec<f64>,
    pub folds: usize,
    pub fold_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            patch_depth: 24,
            patch_stride: 16,
            schedule: AccelSchedule::standard(),
            snr_list: vec![20.0, 10.0, 5.0, 0.0, -5.0, -10.0, -15.0, -20.0, -25.0, -30.0],
            folds: 5,
            fold_seed: 123,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_depth == 0 || self.patch_stride == 0 {
            return Err(Error::validation("patch_depth and patch_stride must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::validation("folds must be at least 2"));
        }
        if let Some(e) = self.schedule.entries.iter().find(|e| e.0 == 0 || !(0.0..=1.0).contains(&e.1)) {
            return Err(Error::validation(format!("invalid schedule entry (R={}, cf={})", e.0, e.1)));
        }
        Ok(())
    }
}

/// Dice of the lesion class. Lesion-negative ground truth is excluded from
/// the metric and reported as [`Error::EmptyGroundTruth`].
pub fn dice_score(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("prediction has {} voxels, ground truth {}", pred.len(), gt.len())));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if b == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Window starts along depth; a final window is clamped to end at `depth`.
pub fn window_starts(depth: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::validation("patch depth and stride must be positive"));
    }
    if depth < patch {
        return Err(Error::validation(format!("volume depth {depth} is below the minimum patch depth {patch}")));
    }
    let mut starts: Vec<usize> = (0..=depth - patch).step_by(stride).collect();
    if starts.last() != Some(&(depth - patch)) {
        starts.push(depth - patch);
    }
    Ok(starts)
}

/// Per-voxel foreground votes and overlap counts.
#[derive(Clone, Debug)]
pub struct VoteTally {
    votes: Vec<u32>,
    counts: Vec<u32>,
}

impl VoteTally {
    pub fn new(voxels: usize) -> Self {
        Self {
            votes: vec![0; voxels],
            counts: vec![0; voxels],
        }
    }

    /// Adds one window's binary prediction starting at flat offset `offset`.
    pub fn add(&mut self, offset: usize, pred: &[u8]) {
        for ((v, c), &p) in self.votes[offset..].iter_mut().zip(&mut self.counts[offset..]).zip(pred) {
            *v += (p != 0) as u32;
            *c += 1;
        }
    }

    /// Strict majority: foreground iff votes exceed half the overlap count.
    pub fn finish(&self) -> Vec<u8> {
        self.votes.iter().zip(&self.counts).map(|(&v, &c)| (2 * v > c) as u8).collect()
    }
}

/// Undersampling or noise applied before inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    /// Acceleration factor with its center fraction.
    Acceleration(u32, f64),
    SnrDb(f64),
}

impl Condition {
    pub fn type_name(&self) -> &'static str {
        match self {
            Condition::Acceleration(..) => "acceleration",
            Condition::SnrDb(_) => "snr",
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Condition::Acceleration(r, _) => r as f64,
            Condition::SnrDb(s) => s,
        }
    }
}

/// Predicts a binary lesion volume from prepared k-space. With
/// `undersampling = Some((R, cf))` and `R > 1`, every window gets its own
/// mask seeded from `(R, patient_index, z)`.
pub fn sliding_infer_kspace<T: Real>(
    model: &Model<T>,
    kspace: &ComplexVolume,
    undersampling: Option<(u32, f64)>,
    patient_index: usize,
    patch_depth: usize,
    patch_stride: usize,
) -> Result<Vec<u8>> {
    if kspace.domain() != Domain::KSpace {
        return Err(Error::Usage("inference needs a prepared k-space exam, got an image-space volume".into()));
    }
    let (d, h, w) = kspace.shape();
    let plane = h * w;
    let mut tally = VoteTally::new(d * plane);
    for z in window_starts(d, patch_depth, patch_stride)? {
        let mut window = kspace.depth_window(z, patch_depth)?;
        if let Some((r, cf)) = undersampling {
            if r > 1 {
                let mask = random_mask(w, r as f64, cf, derive_seed(r, patient_index, z));
                window = apply_mask(&window, &mask)?;
            }
        }
        let probs = model.forward(&patch_tensor::<T>(&window, 0, patch_depth)?)?;
        let labels = probs.argmax_channels();
        tally.add(z * plane, &labels);
    }
    Ok(tally.finish())
}

/// [`sliding_infer_kspace`] on a prepared exam at acceleration `R`, taking
/// the center fraction from the schedule.
pub fn sliding_infer<T: Real>(model: &Model<T>, exam: &PreparedExam, acceleration: u32, cfg: &EvalConfig) -> Result<Vec<u8>> {
    let cf = cfg
        .schedule
        .center_fraction(acceleration)
        .ok_or_else(|| Error::validation(format!("acceleration {acceleration} is not in the schedule")))?;
    sliding_infer_kspace(
        model,
        &exam.kspace,
        Some((acceleration, cf)),
        exam.patient_index,
        cfg.patch_depth,
        cfg.patch_stride,
    )
}

/// Runs inference under `condition` and scores the lesion class.
pub fn evaluate_condition<T: Real>(model: &Model<T>, exam: &PreparedExam, condition: Condition, cfg: &EvalConfig) -> Result<f64> {
    let pred = match condition {
        Condition::Acceleration(r, cf) => sliding_infer_kspace(
            model,
            &exam.kspace,
            Some((r, cf)),
            exam.patient_index,
            cfg.patch_depth,
            cfg.patch_stride,
        )?,
        Condition::SnrDb(snr) => {
            let noisy = add_noise(&exam.kspace, snr, derive_noise_seed(snr.round() as i32, exam.patient_index))?;
            sliding_infer_kspace(model, &noisy, None, exam.patient_index, cfg.patch_depth, cfg.patch_stride)?
        }
    };
    dice_score(&pred, &exam.lesion_mask)
}

/// Fraction of exactly-zero Dice values.
pub fn failure_rate(dice: &[f64]) -> Result<f64> {
    if dice.is_empty() {
        return Err(Error::validation("failure rate of an empty set is undefined"));
    }
    Ok(dice.iter().filter(|&&d| d == 0.0).count() as f64 / dice.len() as f64)
}

fn shuffle<T>(items: &mut [T], rng: &mut SplitMix64) {
    for i in (1..items.len()).rev() {
        let j = rng.next_range(0, i as u64) as usize;
        items.swap(i, j);
    }
}

/// Fold index per patient. Stratified mode deals each label's shuffled
/// patients round-robin, continuing the rotation across labels so fold sizes
/// stay within one of each other.
pub fn split_folds(labels: &[bool], k: usize, seed: u64, stratified: bool) -> Result<Vec<usize>> {
    let n = labels.len();
    if k < 2 {
        return Err(Error::validation("need at least 2 folds"));
    }
    if k > n {
        return Err(Error::validation(format!("{k} folds requested for only {n} patients")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut folds = vec![0; n];
    let groups: Vec<Vec<usize>> = if stratified {
        vec![
            (0..n).filter(|&i| labels[i]).collect(),
            (0..n).filter(|&i| !labels[i]).collect(),
        ]
    } else {
        vec![(0..n).collect()]
    };
    let mut next = 0;
    for mut g in groups {
        shuffle(&mut g, &mut rng);
        for i in g {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

/// Patients of the test fold `f`, the validation fold `f + 1` and the rest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn fold_split(folds: &[usize], k: usize, f: usize) -> Result<FoldSplit> {
    if f >= k {
        return Err(Error::validation(format!("fold {f} out of range for {k} folds")));
    }
    let val_fold = (f + 1) % k;
    let mut s = FoldSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, &fi) in folds.iter().enumerate() {
        if fi == f {
            s.test.push(i);
        } else if fi == val_fold {
            s.val.push(i);
        } else {
            s.train.push(i);
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: ModelVariant,
    pub condition_type: String,
    pub condition_value: f64,
    pub patient: usize,
    pub dice: f64,
}

impl MetricRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            model: self.model,
            condition_type: self.condition_type.clone(),
            condition_value: OrderedValue(self.condition_value),
            patient: self.patient,
        }
    }
}

/// Total order wrapper for condition values (finite by construction).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderedValue(pub f64);

impl Eq for OrderedValue {}

impl PartialOrd for OrderedValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedValue {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RecordKey {
    pub model: ModelVariant,
    pub condition_type: String,
    pub condition_value: OrderedValue,
    pub patient: usize,
}

/// Per-(model, condition, patient) Dice records, kept sorted by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable {
    records: BTreeMap<RecordKey, MetricRecord>,
}

pub const METRIC_HEADER: [&str; 5] = ["model", "condition_type", "condition_value", "patient", "dice"];

impl MetricTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Inserts a record; a second record for the same key is an error.
    pub fn insert(&mut self, r: MetricRecord) -> Result<()> {
        if !(0.0..=1.0).contains(&r.dice) {
            return Err(Error::validation(format!("dice {} outside [0, 1]", r.dice)));
        }
        let key = r.key();
        if self.records.contains_key(&key) {
            return Err(Error::validation(format!(
                "duplicate record for {} {}={} patient {}",
                r.model, r.condition_type, r.condition_value, r.patient
            )));
        }
        self.records.insert(key, r);
        Ok(())
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.records.contains_key(key)
    }

    pub fn records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.values()
    }

    pub fn models(&self) -> BTreeSet<ModelVariant> {
        self.records.values().map(|r| r.model).collect()
    }

    /// Condition values present for `model`, ascending.
    pub fn conditions(&self, model: ModelVariant, condition_type: &str) -> Vec<f64> {
        let set: BTreeSet<OrderedValue> = self
            .records
            .values()
            .filter(|r| r.model == model && r.condition_type == condition_type)
            .map(|r| OrderedValue(r.condition_value))
            .collect();
        set.into_iter().map(|v| v.0).collect()
    }

    /// Patient-indexed Dice values at one condition.
    pub fn dice_by_patient(&self, model: ModelVariant, condition_type: &str, value: f64) -> BTreeMap<usize, f64> {
        self.records
            .values()
            .filter(|r| r.model == model && r.condition_type == condition_type && r.condition_value == value)
            .map(|r| (r.patient, r.dice))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        wr.write_record(METRIC_HEADER).map_err(fmt)?;
        for r in self.records.values() {
            wr.write_record([
                r.model.as_str().to_string(),
                r.condition_type.clone(),
                format_value(r.condition_value),
                r.patient.to_string(),
                r.dice.to_string(),
            ])
            .map_err(fmt)?;
        }
        wr.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
        if header.iter().ne(METRIC_HEADER) {
            return Err(Error::Format(format!(
                "metric table header must be {}, found {}",
                METRIC_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut table = Self::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let bad = |what: &str| Error::Format(format!("row {}: invalid {what}", line + 2));
            let model = ModelVariant::parse(&rec[0]).map_err(|_| bad("model"))?;
            let condition_value: f64 = rec[2].parse().map_err(|_| bad("condition_value"))?;
            let patient: usize = rec[3].parse().map_err(|_| bad("patient"))?;
            let dice: f64 = rec[4].parse().map_err(|_| bad("dice"))?;
            table.insert(MetricRecord {
                model,
                condition_type: rec[1].to_string(),
                condition_value,
                patient,
                dice,
            })?;
        }
        Ok(table)
    }
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        v.to_string()
    }
}

/// Conditions of an acceleration sweep, in schedule order.
pub fn acceleration_conditions(cfg: &EvalConfig) -> Vec<Condition> {
    cfg.schedule.entries.iter().map(|&(r, cf)| Condition::Acceleration(r, cf)).collect()
}

pub fn noise_conditions(cfg: &EvalConfig) -> Vec<Condition> {
    cfg.snr_list.iter().map(|&s| Condition::SnrDb(s)).collect()
}

/// Evaluates every (model, condition, lesion-positive patient) triple not
/// already in `existing`, calling `on_record` as each completes, and
/// returns the merged table. Work is spread over `workers` threads; the
/// result does not depend on the worker count.
pub fn run_sweep<T: Real>(
    models: &[&Model<T>],
    cohort: &[PreparedExam],
    conditions: &[Condition],
    cfg: &EvalConfig,
    existing: Option<&MetricTable>,
    workers: usize,
    on_record: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<MetricTable> {
    let mut table = existing.cloned().unwrap_or_default();
    let mut tasks = Vec::new();
    for m in models {
        for &c in conditions {
            for exam in cohort.iter().filter(|e| e.is_lesion_positive()) {
                let rec = MetricRecord {
                    model: m.variant(),
                    condition_type: c.type_name().to_string(),
                    condition_value: c.value(),
                    patient: exam.patient_index,
                    dice: 0.0,
                };
                if !table.contains(&rec.key()) {
                    tasks.push((*m, c, exam, rec));
                }
            }
        }
    }
    let workers = workers.max(1).min(tasks.len().max(1));
    let run = |(m, c, exam, mut rec): (&Model<T>, Condition, &PreparedExam, MetricRecord)| -> Result<MetricRecord> {
        rec.dice = evaluate_condition(m, exam, c, cfg)?;
        Ok(rec)
    };
    if workers == 1 {
        for t in tasks {
            let rec = run(t)?;
            on_record(&rec)?;
            table.insert(rec)?;
        }
        return Ok(table);
    }
    let (tx, rx) = std::sync::mpsc::channel();
    let queue = std::sync::Mutex::new(tasks.into_iter());
    let result: Result<()> = std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            let run = &run;
            s.spawn(move || loop {
                let Some(t) = queue.lock().expect("task queue poisoned").next() else { break };
                if tx.send(run(t)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for rec in rx {
            let rec = rec?;
            on_record(&rec)?;
            table.insert(rec)?;
        }
        Ok(())
    });
    result?;
    Ok(table)
}

pub fn acceleration_sweep<T: Real>(models: &[&Model<T>], cohort: &[PreparedExam], cfg: &EvalConfig) -> Result<MetricTable> {
    run_sweep(models, cohort, &acceleration_conditions(cfg), cfg, None, 1, &mut |_| Ok(()))
}

pub fn noise_sweep<T: Real>(models: &[&Model<T>], cohort: &[PreparedExam], cfg: &EvalConfig) -> Result<MetricTable> {
    run_sweep(models, cohort, &noise_conditions(cfg), cfg, None, 1, &mut |_| Ok(()))
}

/// Mean Dice over lesion-positive exams at full sampling.
pub fn mean_exam_dice<T: Real>(model: &Model<T>, exams: &[PreparedExam], cfg: &EvalConfig) -> Result<f64> {
    let mut scores = Vec::new();
    for e in exams.iter().filter(|e| e.is_lesion_positive()) {
        let pred = sliding_infer_kspace(model, &e.kspace, None, e.patient_index, cfg.patch_depth, cfg.patch_stride)?;
        scores.push(dice_score(&pred, &e.lesion_mask)?);
    }
    if scores.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
