use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::train::{train_student, train_teacher};
use super::TrainConfig;
use crate::distill::{GateMode, GatePolicy};
use crate::encoder::{DualEncoderModel, EncoderConfig};
use crate::error::{Error, Result};
use crate::peft::{AdapterConfig, LoraConfig, PeftVariant, PromptConfig};
use crate::synthdata::{annotate, split, Dataset, GenSpec, SplitSpec, Splits};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKind {
    Adapter,
    Prompt,
    Lora,
}

impl PeftKind {
    pub const ALL: [PeftKind; 3] = [PeftKind::Adapter, PeftKind::Prompt, PeftKind::Lora];

    pub fn tag(self) -> &'static str {
        match self {
            PeftKind::Adapter => "adapter",
            PeftKind::Prompt => "prompt",
            PeftKind::Lora => "lora",
        }
    }
}

impl FromStr for PeftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(PeftKind::Adapter),
            "prompt" => Ok(PeftKind::Prompt),
            "lora" => Ok(PeftKind::Lora),
            other => Err(Error::Config(format!("unknown PEFT method {other:?}; expected adapter, prompt or lora"))),
        }
    }
}

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentVariant {
    pub peft: PeftKind,
    pub kd: bool,
    /// Ignored when `kd` is off.
    pub gate: GateMode,
}

impl StudentVariant {
    pub fn new(peft: PeftKind, kd: bool, gate: GateMode) -> Self {
        // Without distillation the gate has no effect; normalise so equal runs compare equal.
        let gate = if kd { gate } else { GateMode::Ungated };
        Self { peft, kd, gate }
    }

    /// Every PEFT method without KD and with each of the three gates.
    pub fn full_grid() -> Vec<Self> {
        PeftKind::ALL
            .into_iter()
            .flat_map(|p| {
                [
                    Self::new(p, false, GateMode::Ungated),
                    Self::new(p, true, GateMode::Entropy),
                    Self::new(p, true, GateMode::Hard),
                    Self::new(p, true, GateMode::Ungated),
                ]
            })
            .collect()
    }

    pub fn policy(&self, base: &GatePolicy) -> GatePolicy {
        GatePolicy {
            mode: self.gate,
            kd: self.kd,
            ..base.clone()
        }
    }
}

impl fmt::Display for StudentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kd {
            write!(f, "{}/kd/{}", self.peft.tag(), self.gate.tag())
        } else {
            write!(f, "{}/nokd", self.peft.tag())
        }
    }
}

impl FromStr for StudentVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        match parts.as_slice() {
            [p, "nokd"] => Ok(Self::new(p.parse()?, false, GateMode::Ungated)),
            [p, "kd", g] => Ok(Self::new(p.parse()?, true, g.parse()?)),
            _ => Err(Error::Config(format!("cannot parse variant {s:?}; expected e.g. lora/kd/entropy or lora/nokd"))),
        }
    }
}

/// Everything that determines a protocol run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub encoder: EncoderConfig,
    pub data: GenSpec,
    pub split: SplitSpec,
    /// The teacher's `seed` is replaced by the split seed.
    pub teacher: TrainConfig,
    /// The student's `seed` is replaced by the trial seed; `gate.mode` and
    /// `gate.kd` are set per variant.
    pub student: TrainConfig,
    pub adapter: AdapterConfig,
    pub prompt: PromptConfig,
    pub lora: LoraConfig,
    /// Seed of the random initialisation shared by every teacher and student backbone.
    pub init_seed: u64,
    pub split_seeds: Vec<u64>,
    pub trial_seeds: Vec<u64>,
    pub variants: Vec<StudentVariant>,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            data: GenSpec::default(),
            split: SplitSpec::default(),
            teacher: TrainConfig::teacher(),
            student: TrainConfig::default(),
            adapter: AdapterConfig::default(),
            prompt: PromptConfig::default(),
            lora: LoraConfig::default(),
            init_seed: 0,
            split_seeds: vec![1, 2],
            trial_seeds: vec![1, 2, 3],
            variants: StudentVariant::full_grid(),
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.data.validate()?;
        self.data.check_encoder(&self.encoder)?;
        self.split.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        for v in PeftKind::ALL {
            self.peft_variant(v).validate(&self.encoder)?;
        }
        if self.split_seeds.is_empty() || self.trial_seeds.is_empty() {
            return Err(Error::Config("protocol needs at least one split seed and one trial seed".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.variants {
            if !seen.insert(*v) {
                return Err(Error::Config(format!("variant {v} listed twice")));
            }
        }
        Ok(())
    }

    pub fn peft_variant(&self, kind: PeftKind) -> PeftVariant {
        match kind {
            PeftKind::Adapter => PeftVariant::Adapter(self.adapter.clone()),
            PeftKind::Prompt => PeftVariant::Prompt(self.prompt.clone()),
            PeftKind::Lora => PeftVariant::Lora(self.lora.clone()),
        }
    }

    pub fn backbone(&self) -> Result<DualEncoderModel> {
        DualEncoderModel::new(self.encoder.clone(), self.init_seed)
    }

    pub fn teacher_config(&self, split_seed: u64) -> TrainConfig {
        TrainConfig {
            seed: split_seed,
            ..self.teacher.clone()
        }
    }

    pub fn student_config(&self, variant: StudentVariant, trial_seed: u64) -> TrainConfig {
        TrainConfig {
            seed: trial_seed,
            gate: variant.policy(&self.student.gate),
            ..self.student.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub split_seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub valid_accuracy: f64,
    pub best_epoch: Option<usize>,
    /// Test errors per true class.
    pub class_errors: Vec<usize>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: StudentVariant,
    pub split_seed: u64,
    pub trial_seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub valid_accuracy: f64,
    pub best_epoch: Option<usize>,
    /// Test errors per true class.
    pub class_errors: Vec<usize>,
    /// Per true class: student wrong where the teacher is right.
    pub student_only_errors: Vec<usize>,
    pub trainable_params: usize,
    pub wall_clock_secs: f64,
}

/// Summary of one variant over every (split, trial) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: StudentVariant,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Population standard deviation.
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    /// Summed over runs.
    pub class_errors: Vec<usize>,
    pub student_only_errors: Vec<usize>,
    pub trainable_params: usize,
}

/// A paired difference between two variants of the same PEFT method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `kd`, `gating` or `hard`.
    pub axis: String,
    pub with: StudentVariant,
    pub without: StudentVariant,
    /// `with − without` in mean accuracy, as a fraction.
    pub delta_accuracy: f64,
    pub delta_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub teachers: Vec<TeacherRecord>,
    /// Ordered by variant (as listed in the spec), then split seed, then trial seed.
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    pub comparisons: Vec<Comparison>,
}

/// Trained weights from a protocol run, aligned with the report's records.
#[derive(Clone, Debug, Default)]
pub struct ProtocolModels {
    pub teachers: Vec<DualEncoderModel>,
    /// Empty unless requested.
    pub students: Vec<DualEncoderModel>,
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Runs `f` over `items` on up to `threads` workers; output order follows `items`.
pub(crate) fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                let failed = r.is_err();
                slots.lock().expect("worker panicked")[i] = Some(r);
                if failed {
                    next.store(items.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let slots = slots.into_inner().expect("worker panicked");
    // Report the earliest failure so the error does not depend on scheduling.
    let mut out = Vec::with_capacity(items.len());
    for (i, slot) in slots.into_iter().enumerate() {
        match slot {
            Some(r) => out.push(r?),
            None => return Err(Error::invalid(format!("protocol job {i} was cancelled after an earlier failure"))),
        }
    }
    Ok(out)
}

fn class_errors(labels: &[usize], preds: &[usize], classes: usize) -> Vec<usize> {
    let mut e = vec![0; classes];
    labels.iter().zip(preds).filter(|(y, p)| y != p).for_each(|(&y, _)| e[y] += 1);
    e
}

fn student_only(labels: &[usize], preds: &[usize], teacher: &[usize], classes: usize) -> Vec<usize> {
    let mut e = vec![0; classes];
    for ((&y, &p), &t) in labels.iter().zip(preds).zip(teacher) {
        if p != y && t == y {
            e[y] += 1;
        }
    }
    e
}

pub fn aggregate(variant: StudentVariant, runs: &[&RunRecord], classes: usize) -> Aggregate {
    let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let f1: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&acc);
    let (mean_macro_f1, std_macro_f1) = mean_std(&f1);
    let sum = |get: fn(&RunRecord) -> &Vec<usize>| {
        let mut s = vec![0; classes];
        for r in runs {
            get(r).iter().enumerate().for_each(|(c, &v)| s[c] += v);
        }
        s
    };
    Aggregate {
        variant,
        runs: runs.len(),
        mean_accuracy,
        std_accuracy,
        mean_macro_f1,
        std_macro_f1,
        class_errors: sum(|r| &r.class_errors),
        student_only_errors: sum(|r| &r.student_only_errors),
        trainable_params: runs.first().map_or(0, |r| r.trainable_params),
    }
}

/// Paired rows for every PEFT method whose grid contains both sides.
pub fn comparisons(aggregates: &[Aggregate]) -> Vec<Comparison> {
    let find = |v: StudentVariant| aggregates.iter().find(|a| a.variant == v);
    let mut out = Vec::new();
    for p in PeftKind::ALL {
        let entropy = StudentVariant::new(p, true, GateMode::Entropy);
        for (axis, other) in [
            ("kd", StudentVariant::new(p, false, GateMode::Ungated)),
            ("gating", StudentVariant::new(p, true, GateMode::Ungated)),
            ("hard", StudentVariant::new(p, true, GateMode::Hard)),
        ] {
            if let (Some(w), Some(wo)) = (find(entropy), find(other)) {
                out.push(Comparison {
                    axis: axis.into(),
                    with: w.variant,
                    without: wo.variant,
                    delta_accuracy: w.mean_accuracy - wo.mean_accuracy,
                    delta_macro_f1: w.mean_macro_f1 - wo.mean_macro_f1,
                });
            }
        }
    }
    out
}

/// A trained teacher with its test-set predictions.
pub struct TeacherRun {
    pub record: TeacherRecord,
    pub model: DualEncoderModel,
    pub test_preds: Vec<usize>,
}

/// Trains and evaluates the teacher for one split. `data` must already carry
/// the annotations (see [`annotate`]) the split was drawn from.
pub fn run_teacher(spec: &ProtocolSpec, data: &Dataset, splits: &Splits, split_seed: u64) -> Result<TeacherRun> {
    let start = Instant::now();
    let test = data.test_indices();
    let labels: Vec<usize> = test.iter().map(|&i| data.examples[i].label).collect();
    let trained = train_teacher(spec.backbone()?, data, splits, &spec.teacher_config(split_seed))?;
    let eval = evaluate(&trained.model, data, &test, None)?;
    let test_preds: Vec<usize> = eval.records.iter().map(|r| r.pred).collect();
    let record = TeacherRecord {
        split_seed,
        accuracy: eval.accuracy,
        macro_f1: eval.macro_f1,
        valid_accuracy: trained.valid_accuracy,
        best_epoch: trained.best_epoch,
        class_errors: class_errors(&labels, &test_preds, spec.encoder.classes),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TeacherRun {
        record,
        model: trained.model,
        test_preds,
    })
}

/// Trains and evaluates one student against `teacher`, which must have been
/// trained on the same split.
pub fn run_student(
    spec: &ProtocolSpec,
    data: &Dataset,
    splits: &Splits,
    teacher: &TeacherRun,
    variant: StudentVariant,
    trial: u64,
) -> Result<(RunRecord, DualEncoderModel)> {
    let start = Instant::now();
    let classes = spec.encoder.classes;
    let test = data.test_indices();
    let labels: Vec<usize> = test.iter().map(|&i| data.examples[i].label).collect();
    let trained = train_student(
        &spec.backbone()?,
        spec.peft_variant(variant.peft),
        &teacher.model,
        data,
        splits,
        &spec.student_config(variant, trial),
    )?;
    let eval = evaluate(&trained.model, data, &test, Some(&teacher.test_preds))?;
    let preds: Vec<usize> = eval.records.iter().map(|r| r.pred).collect();
    let record = RunRecord {
        variant,
        split_seed: teacher.record.split_seed,
        trial_seed: trial,
        accuracy: eval.accuracy,
        macro_f1: eval.macro_f1,
        valid_accuracy: trained.valid_accuracy,
        best_epoch: trained.best_epoch,
        class_errors: class_errors(&labels, &preds, classes),
        student_only_errors: student_only(&labels, &preds, &teacher.test_preds, classes),
        trainable_params: trained.model.trainable_parameter_count(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((record, trained.model))
}

/// Trains one teacher per split seed, then every variant for every
/// (split, trial) pair, fanning runs out over `threads` workers.
pub fn run_protocol(
    spec: &ProtocolSpec,
    data: &Dataset,
    threads: usize,
    keep_students: bool,
) -> Result<(ProtocolReport, ProtocolModels)> {
    spec.validate()?;
    if data.spec != spec.data {
        return Err(Error::Config("dataset was generated from a different spec than the protocol's".into()));
    }
    let classes = spec.encoder.classes;
    let annotated = annotate(data, spec.split.label_noise)?;
    let data = &annotated;
    let splits: Vec<Splits> = spec
        .split_seeds
        .iter()
        .map(|&s| split(data, &spec.split, s))
        .collect::<Result<_>>()?;

    let jobs: Vec<usize> = (0..splits.len()).collect();
    let teachers = parallel_map(&jobs, threads, |&k| run_teacher(spec, data, &splits[k], spec.split_seeds[k]))?;

    let mut jobs = Vec::new();
    for &v in &spec.variants {
        for k in 0..splits.len() {
            for &t in &spec.trial_seeds {
                jobs.push((v, k, t));
            }
        }
    }
    let runs = parallel_map(&jobs, threads, |&(variant, k, trial)| {
        let (record, model) = run_student(spec, data, &splits[k], &teachers[k], variant, trial)?;
        Ok((record, keep_students.then_some(model)))
    })?;

    let (runs, students): (Vec<RunRecord>, Vec<Option<DualEncoderModel>>) = runs.into_iter().unzip();
    let aggregates: Vec<Aggregate> = spec
        .variants
        .iter()
        .map(|&v| {
            let rs: Vec<&RunRecord> = runs.iter().filter(|r| r.variant == v).collect();
            aggregate(v, &rs, classes)
        })
        .collect();
    let comparisons = comparisons(&aggregates);
    let (teacher_records, teacher_models): (Vec<_>, Vec<_>) = teachers.into_iter().map(|t| (t.record, t.model)).unzip();
    Ok((
        ProtocolReport {
            teachers: teacher_records,
            runs,
            aggregates,
            comparisons,
        },
        ProtocolModels {
            teachers: teacher_models,
            students: students.into_iter().flatten().collect(),
        },
    ))
}
