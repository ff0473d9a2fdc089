//! Command implementations behind the `pekd` binary.

pub mod config;
pub mod dump;
pub mod metrics;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use pekd::analysiskit::{
    cca_profile, confidence_stats, dump_activations, error_breakdown, export_embeddings, gate_curve, RIDGE,
};
use pekd::distill::GateMode;
use pekd::encoder::DualEncoderModel;
use pekd::synthdata::{
    annotate, generate, read_dataset, shifted_testset, split, write_dataset, Dataset, ShiftSpec, Splits,
};
use pekd::trainkit::{
    evaluate, run_protocol, run_student, run_teacher, ExampleRecord, PeftKind, StudentVariant, TeacherRecord,
    TeacherRun,
};
use pekd::{Error, Result};

use config::Config;
use metrics::{read_records, write_records, MetricsRecord};

#[derive(Parser, Debug)]
#[command(name = "pekd", version, about = "Entropy-gated distillation into parameter-efficient students")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenData),
    /// Fully fine-tune a teacher on its share of the pool.
    TrainTeacher(TrainTeacher),
    /// Train one PEFT student on the few-shot split.
    TrainStudent(TrainStudent),
    /// Evaluate a checkpoint on the test block.
    Eval(Eval),
    /// Run the full ablation grid over every split and trial seed.
    Protocol(Protocol),
    /// Post-hoc analyses over metrics and activation dumps.
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
    /// Pool size; overrides `data.n_examples`.
    #[arg(long)]
    pub n: Option<usize>,
    /// Test-block size; overrides `data.n_test`.
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Generator seed; overrides `data.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emit only a shifted test set of this strength in (0, 1]; needs `--base`.
    #[arg(long)]
    pub shift: Option<f64>,
    /// Seed of the shift's fresh attribute codes.
    #[arg(long, default_value_t = 0)]
    pub shift_seed: u64,
    /// Dataset whose attributes the shifted test set starts from.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Experiment config (TOML); flags win over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overwrite an existing output file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainTeacher {
    /// Dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Split seed; also seeds the teacher's shuffling. Defaults to the first configured split seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the run summary to this metrics file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GateArg {
    Entropy,
    Hard,
    None,
}

impl From<GateArg> for GateMode {
    fn from(g: GateArg) -> Self {
        match g {
            GateArg::Entropy => GateMode::Entropy,
            GateArg::Hard => GateMode::Hard,
            GateArg::None => GateMode::Ungated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PeftArg {
    Lora,
    Adapter,
    Prompt,
}

impl From<PeftArg> for PeftKind {
    fn from(p: PeftArg) -> Self {
        match p {
            PeftArg::Lora => PeftKind::Lora,
            PeftArg::Adapter => PeftKind::Adapter,
            PeftArg::Prompt => PeftKind::Prompt,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainStudent {
    /// Dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Teacher checkpoint trained on the same split seed.
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long, value_enum)]
    pub peft: PeftArg,
    /// Distil from the teacher (`off` trains on labels only).
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub kd: Switch,
    /// How to weight label loss against distillation; ignored with `--kd off`.
    #[arg(long, value_enum)]
    pub gate: Option<GateArg>,
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Trial seed: PEFT initialisation and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Split seed the teacher was trained on. Defaults to the first configured split seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Also write the run summary to this metrics file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct Eval {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset file; its test block is evaluated.
    #[arg(long)]
    pub data: PathBuf,
    /// Teacher checkpoint, recorded per example for mismatch analyses.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Tag attached to every emitted record.
    #[arg(long, default_value = "eval")]
    pub tag: String,
    /// Write per-example records (label, prediction, confidence, probabilities) here.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Write per-layer pooled activations of both branches here.
    #[arg(long)]
    pub dump_activations: Option<PathBuf>,
    /// Write the two logits of every test example here.
    #[arg(long)]
    pub export_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct Protocol {
    /// Experiment config (TOML); defaults reproduce the documented setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for metrics, timing and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Also save every student checkpoint.
    #[arg(long)]
    pub keep_students: bool,
    /// Worker threads; overrides PEKD_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Analyze {
    /// Layer-wise mean canonical correlation between two aligned activation dumps.
    Cca {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Ridge added to both covariance matrices.
        #[arg(long, default_value_t = RIDGE)]
        ridge: f64,
    },
    /// Class-wise errors and student-only errors from two per-example record files.
    Errors {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value = "student")]
        tag: String,
    },
    /// Gate weight against teacher confidence, from the teacher's per-example records.
    GateCurve {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Per-class confidence quartiles from a per-example record file.
    Confidence {
        #[arg(long)]
        records: PathBuf,
    },
}

/// Failure of a command, carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            pekd::ErrorKind::Usage => 1,
            pekd::ErrorKind::Data => 2,
            pekd::ErrorKind::Numerical => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Runs a parsed command, writing reports to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(c, out),
        Command::TrainTeacher(c) => train_teacher(c, out),
        Command::TrainStudent(c) => train_student(c, out),
        Command::Eval(c) => eval(c, out),
        Command::Protocol(c) => protocol(c, out),
        Command::Analyze(c) => analyze(c, out),
    }
}

fn create(path: &Path, force: bool) -> Result<BufWriter<File>> {
    if path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(&mut open(path)?)
}

fn load_model(path: &Path) -> Result<DualEncoderModel> {
    DualEncoderModel::load(&mut open(path)?, None)
}

fn save_model(model: &DualEncoderModel, path: &Path, force: bool) -> Result<()> {
    let mut w = create(path, force)?;
    model.save(&mut w)?;
    w.flush()?;
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_metrics(path: &Path, banner: &str, records: &[MetricsRecord], force: bool) -> Result<()> {
    let mut w = create(path, force)?;
    write!(w, "{banner}")?;
    write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

fn print_records(out: &mut dyn Write, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_line())?;
    }
    Ok(())
}

/// The config, adopting the dataset's generation spec, plus the annotated
/// dataset and the split for `split_seed`.
fn prepare(cfg: &mut Config, data: Dataset, split_seed: u64) -> Result<(Dataset, Splits)> {
    data.spec.check_encoder(&cfg.encoder)?;
    cfg.data = data.spec.clone();
    let data = annotate(&data, cfg.split.label_noise)?;
    let splits = split(&data, &cfg.split, split_seed)?;
    Ok((data, splits))
}

fn gen_data(c: GenData, out: &mut dyn Write) -> Result<()> {
    let mut cfg = config::load(c.config.as_deref())?;
    if let Some(n) = c.n {
        cfg.data.n_examples = n;
    }
    if let Some(n) = c.n_test {
        cfg.data.n_test = n;
    }
    if let Some(s) = c.seed {
        cfg.data.seed = s;
    }
    let data = match (c.shift, &c.base) {
        (Some(strength), Some(base)) => {
            let base = load_data(base)?;
            let shift = ShiftSpec {
                strength,
                seed: c.shift_seed,
            };
            cfg.data = base.spec.clone();
            shifted_testset(&base.spec, shift)?
        }
        (Some(_), None) => return Err(usage("--shift needs --base, the dataset whose attributes are shifted")),
        (None, Some(_)) => return Err(usage("--base is only meaningful with --shift")),
        (None, None) => generate(&cfg.data)?,
    };
    let mut w = create(&c.out, c.force)?;
    write_dataset(&mut w, &data)?;
    w.flush()?;
    drop(w);
    write!(out, "{}", config::banner(&cfg))?;
    let pool: Vec<usize> = (0..data.pool().len()).collect();
    let test = data.test_indices();
    let [p0, p1] = data.label_counts(&pool);
    let [t0, t1] = data.label_counts(&test);
    writeln!(out, "pool\t{}\tclass0\t{p0}\tclass1\t{p1}", pool.len())?;
    writeln!(out, "test\t{}\tclass0\t{t0}\tclass1\t{t1}", test.len())?;
    writeln!(out, "sha256\t{}", sha256_hex(&c.out)?)?;
    Ok(())
}

fn train_teacher(c: TrainTeacher, out: &mut dyn Write) -> Result<()> {
    let mut cfg = config::load(c.config.as_deref())?;
    let seed = c.seed.unwrap_or(cfg.split_seeds[0]);
    cfg.split_seeds = vec![seed];
    let (data, splits) = prepare(&mut cfg, load_data(&c.data)?, seed)?;
    let banner = config::banner(&cfg);
    write!(out, "{banner}")?;
    let run = run_teacher(&cfg, &data, &splits, seed)?;
    save_model(&run.model, &c.out, c.force)?;
    let records = [MetricsRecord::Teacher(run.record)];
    print_records(out, &records)?;
    if let Some(m) = &c.metrics {
        write_metrics(m, &banner, &records, c.force)?;
    }
    Ok(())
}

fn train_student(c: TrainStudent, out: &mut dyn Write) -> Result<()> {
    let mut cfg = config::load(c.config.as_deref())?;
    let kd = c.kd == Switch::On;
    if !kd && c.gate.is_some() {
        eprintln!("warning: --gate is ignored with --kd off");
    }
    let gate = if kd { c.gate.unwrap_or(GateArg::Entropy).into() } else { GateMode::Ungated };
    let variant = StudentVariant::new(c.peft.into(), kd, gate);
    let split_seed = c.split_seed.unwrap_or(cfg.split_seeds[0]);
    let trial = c.seed.unwrap_or(cfg.trial_seeds[0]);
    cfg.split_seeds = vec![split_seed];
    cfg.trial_seeds = vec![trial];
    cfg.variants = vec![variant];
    let (data, splits) = prepare(&mut cfg, load_data(&c.data)?, split_seed)?;
    let banner = config::banner(&cfg);
    write!(out, "{banner}")?;
    let teacher = teacher_run(load_model(&c.teacher)?, &cfg, &data, split_seed)?;
    let (record, model) = run_student(&cfg, &data, &splits, &teacher, variant, trial)?;
    save_model(&model, &c.out, c.force)?;
    let records = [MetricsRecord::Run(record)];
    print_records(out, &records)?;
    if let Some(m) = &c.metrics {
        write_metrics(m, &banner, &records, c.force)?;
    }
    Ok(())
}

/// Wraps a loaded teacher with its test predictions, so student runs can
/// count student-only errors.
fn teacher_run(model: DualEncoderModel, cfg: &Config, data: &Dataset, split_seed: u64) -> Result<TeacherRun> {
    if model.attachment().is_some() {
        return Err(usage("--teacher must be a fully fine-tuned checkpoint, not a PEFT student"));
    }
    if model.config != cfg.encoder {
        return Err(usage("teacher checkpoint does not match the configured encoder"));
    }
    let eval = evaluate(&model, data, &data.test_indices(), None)?;
    let test_preds = eval.records.iter().map(|r| r.pred).collect();
    let record = TeacherRecord {
        split_seed,
        accuracy: eval.accuracy,
        macro_f1: eval.macro_f1,
        valid_accuracy: f64::NAN,
        best_epoch: None,
        class_errors: Vec::new(),
        wall_clock_secs: 0.0,
    };
    Ok(TeacherRun {
        record,
        model,
        test_preds,
    })
}

fn eval(c: Eval, out: &mut dyn Write) -> Result<()> {
    let data = load_data(&c.data)?;
    let model = load_model(&c.model)?;
    data.spec.check_encoder(&model.config)?;
    let test = data.test_indices();
    let teacher_preds: Option<Vec<usize>> = match &c.teacher {
        Some(p) => {
            let t = load_model(p)?;
            let e = evaluate(&t, &data, &test, None)?;
            Some(e.records.iter().map(|r| r.pred).collect())
        }
        None => None,
    };
    let e = evaluate(&model, &data, &test, teacher_preds.as_deref())?;
    writeln!(out, "accuracy\t{}", metrics::float(e.accuracy))?;
    writeln!(out, "macro_f1\t{}", metrics::float(e.macro_f1))?;
    if let Some(p) = &c.records {
        let recs: Vec<MetricsRecord> = e
            .records
            .into_iter()
            .map(|record| MetricsRecord::Example {
                tag: c.tag.clone(),
                record,
            })
            .collect();
        write_metrics(p, "", &recs, c.force)?;
    }
    if let Some(p) = &c.dump_activations {
        let d = dump_activations(&model, &data, &test, &c.tag)?;
        let mut w = create(p, c.force)?;
        dump::write_dump(&mut w, &d)?;
        w.flush()?;
    }
    if let Some(p) = &c.export_embeddings {
        let recs: Vec<MetricsRecord> = export_embeddings(&model, &data, &test, &c.tag)?
            .into_iter()
            .map(MetricsRecord::Embedding)
            .collect();
        write_metrics(p, "", &recs, c.force)?;
    }
    Ok(())
}

/// Worker count: `--threads`, else PEKD_THREADS, else the available cores.
fn threads(flag: Option<usize>) -> Result<usize> {
    if let Some(t) = flag {
        return Ok(t.max(1));
    }
    match std::env::var("PEKD_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map(|t| t.max(1))
            .map_err(|_| usage(format!("PEKD_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn protocol(c: Protocol, out: &mut dyn Write) -> Result<()> {
    let mut cfg = config::load(c.config.as_deref())?;
    let data = match &c.data {
        Some(p) => {
            let d = load_data(p)?;
            cfg.data = d.spec.clone();
            d
        }
        None => generate(&cfg.data)?,
    };
    let threads = threads(c.threads)?;
    std::fs::create_dir_all(&c.out)?;
    let metrics_path = c.out.join("metrics.tsv");
    // fail before hours of training, not after
    if metrics_path.exists() && !c.force {
        return Err(usage(format!("{} exists; pass --force to overwrite", metrics_path.display())));
    }
    let banner = config::banner(&cfg);
    write!(out, "{banner}")?;
    let (report, models) = run_protocol(&cfg, &data, threads, c.keep_students)?;

    let mut records: Vec<MetricsRecord> = report.teachers.iter().cloned().map(MetricsRecord::Teacher).collect();
    records.extend(report.runs.iter().cloned().map(MetricsRecord::Run));
    records.extend(report.aggregates.iter().cloned().map(MetricsRecord::Aggregate));
    records.extend(report.comparisons.iter().cloned().map(MetricsRecord::Delta));
    write_metrics(&metrics_path, &banner, &records, c.force)?;

    let mut timing = create(&c.out.join("timing.tsv"), c.force)?;
    writeln!(timing, "# wall-clock seconds; not reproducible, kept apart from metrics.tsv")?;
    for t in &report.teachers {
        writeln!(timing, "teacher\t{}\t{:.3}", t.split_seed, t.wall_clock_secs)?;
    }
    for r in &report.runs {
        writeln!(timing, "run\t{}\t{}\t{}\t{:.3}", r.variant, r.split_seed, r.trial_seed, r.wall_clock_secs)?;
    }
    timing.flush()?;

    for (t, m) in report.teachers.iter().zip(&models.teachers) {
        save_model(m, &c.out.join(format!("teacher-split{}.ckpt", t.split_seed)), c.force)?;
    }
    if c.keep_students {
        let dir = c.out.join("students");
        std::fs::create_dir_all(&dir)?;
        for (r, m) in report.runs.iter().zip(&models.students) {
            let name = format!(
                "{}-split{}-trial{}.ckpt",
                r.variant.to_string().replace('/', "-"),
                r.split_seed,
                r.trial_seed
            );
            save_model(m, &dir.join(name), c.force)?;
        }
    }
    let summary: Vec<MetricsRecord> = report
        .aggregates
        .iter()
        .cloned()
        .map(MetricsRecord::Aggregate)
        .chain(report.comparisons.iter().cloned().map(MetricsRecord::Delta))
        .collect();
    print_records(out, &summary)
}

/// The per-example records of a metrics file and the tag of the first one.
fn example_records(path: &Path) -> Result<(String, Vec<ExampleRecord>)> {
    let mut tag = None;
    let mut out = Vec::new();
    for r in read_records(open(path)?)? {
        if let MetricsRecord::Example { tag: t, record } = r {
            tag.get_or_insert(t);
            out.push(record);
        }
    }
    match tag {
        Some(t) => Ok((t, out)),
        None => Err(Error::Format(format!("{} holds no per-example records", path.display()))),
    }
}

fn classes_of(records: &[ExampleRecord]) -> usize {
    records.iter().map(|r| r.probs.len()).max().unwrap_or(0)
}

fn analyze(c: Analyze, out: &mut dyn Write) -> Result<()> {
    let records: Vec<MetricsRecord> = match c {
        Analyze::Cca { a, b, ridge } => {
            let a = dump::read_dump(&mut open(&a)?)?;
            let b = dump::read_dump(&mut open(&b)?)?;
            let tag = format!("{}~{}", a.tag, b.tag);
            cca_profile(&a, &b, ridge)?
                .into_iter()
                .map(|row| MetricsRecord::Cca { tag: tag.clone(), row })
                .collect()
        }
        Analyze::Errors { student, teacher, tag } => {
            let (_, s) = example_records(&student)?;
            let (_, t) = example_records(&teacher)?;
            let counts = error_breakdown(&s, &t, classes_of(&s).max(classes_of(&t)))?;
            MetricsRecord::errors_rows(&tag, &counts)
        }
        Analyze::GateCurve { teacher } => gate_curve(&example_records(&teacher)?.1)?
            .into_iter()
            .map(MetricsRecord::Gate)
            .collect(),
        Analyze::Confidence { records } => {
            let (tag, r) = example_records(&records)?;
            confidence_stats(&r, classes_of(&r))
                .into_iter()
                .map(|stats| MetricsRecord::Confidence { tag: tag.clone(), stats })
                .collect()
        }
    };
    for h in metrics::HEADER {
        writeln!(out, "{h}")?;
    }
    print_records(out, &records)
}
