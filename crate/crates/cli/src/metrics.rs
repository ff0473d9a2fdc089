//! Tab-separated metrics records.
//!
//! One record per line: a kind tag followed by kind-specific fields. Floats
//! are written with 17 significant digits so they parse back bit-exactly.
//! Lines starting with `#` are header comments and skipped by the reader.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;

use pekd::analysiskit::{ClassConfidence, CcaRow, EmbeddingRecord, ErrorCounts, GatePoint};
use pekd::encoder::BranchKind;
use pekd::trainkit::{Aggregate, Comparison, ExampleRecord, RunRecord, StudentVariant, TeacherRecord};
use pekd::{Error, Result};

/// Header lines naming the conventions every metrics file follows.
pub const HEADER: &[&str] = &[
    "# pekd metrics v1",
    "# std: population standard deviation over the listed runs",
    "# quartiles: linear interpolation between order statistics",
];

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsRecord {
    Teacher(TeacherRecord),
    Run(RunRecord),
    Aggregate(Aggregate),
    Delta(Comparison),
    Example { tag: String, record: ExampleRecord },
    Cca { tag: String, row: CcaRow },
    Gate(GatePoint),
    Errors { tag: String, class: usize, errors: usize, student_only: usize },
    Confidence { tag: String, stats: ClassConfidence },
    Embedding(EmbeddingRecord),
}

pub fn float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.16e}")
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn floats(v: &[f64]) -> String {
    v.iter().map(|&x| float(x)).collect::<Vec<_>>().join(",")
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "-".into(), |e| e.to_string())
}

impl MetricsRecord {
    pub fn kind(&self) -> &'static str {
        match self {
            MetricsRecord::Teacher(_) => "teacher",
            MetricsRecord::Run(_) => "run",
            MetricsRecord::Aggregate(_) => "aggregate",
            MetricsRecord::Delta(_) => "delta",
            MetricsRecord::Example { .. } => "example",
            MetricsRecord::Cca { .. } => "cca",
            MetricsRecord::Gate(_) => "gate",
            MetricsRecord::Errors { .. } => "errors",
            MetricsRecord::Confidence { .. } => "confidence",
            MetricsRecord::Embedding(_) => "embedding",
        }
    }

    pub fn to_line(&self) -> String {
        let f: Vec<String> = match self {
            MetricsRecord::Teacher(t) => vec![
                t.split_seed.to_string(),
                float(t.accuracy),
                float(t.macro_f1),
                float(t.valid_accuracy),
                opt(t.best_epoch),
                list(&t.class_errors),
            ],
            MetricsRecord::Run(r) => vec![
                r.variant.to_string(),
                r.split_seed.to_string(),
                r.trial_seed.to_string(),
                float(r.accuracy),
                float(r.macro_f1),
                float(r.valid_accuracy),
                opt(r.best_epoch),
                list(&r.class_errors),
                list(&r.student_only_errors),
                r.trainable_params.to_string(),
            ],
            MetricsRecord::Aggregate(a) => vec![
                a.variant.to_string(),
                a.runs.to_string(),
                float(a.mean_accuracy),
                float(a.std_accuracy),
                float(a.mean_macro_f1),
                float(a.std_macro_f1),
                list(&a.class_errors),
                list(&a.student_only_errors),
                a.trainable_params.to_string(),
            ],
            MetricsRecord::Delta(c) => vec![
                c.axis.clone(),
                c.with.to_string(),
                c.without.to_string(),
                float(c.delta_accuracy),
                float(c.delta_macro_f1),
            ],
            MetricsRecord::Example { tag, record: r } => vec![
                tag.clone(),
                r.id.to_string(),
                r.label.to_string(),
                opt(r.teacher_pred),
                r.pred.to_string(),
                float(r.confidence),
                floats(&r.probs),
            ],
            MetricsRecord::Cca { tag, row } => {
                vec![tag.clone(), row.branch.tag().into(), row.layer.to_string(), float(row.mean_cca)]
            }
            MetricsRecord::Gate(g) => vec![float(g.confidence), float(g.weight)],
            MetricsRecord::Errors {
                tag,
                class,
                errors,
                student_only,
            } => vec![tag.clone(), class.to_string(), errors.to_string(), student_only.to_string()],
            MetricsRecord::Confidence { tag, stats: s } => vec![
                tag.clone(),
                s.class.to_string(),
                s.count.to_string(),
                float(s.q1),
                float(s.median),
                float(s.q3),
                float(s.iqr),
            ],
            MetricsRecord::Embedding(e) => vec![
                e.tag.clone(),
                e.id.to_string(),
                float(e.logit0),
                float(e.logit1),
                e.label.to_string(),
            ],
        };
        let mut line = self.kind().to_string();
        for field in f {
            let _ = write!(line, "\t{field}");
        }
        line
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut parts = line.split('\t');
        let kind = parts.next().unwrap_or_default();
        let f: Vec<&str> = parts.collect();
        let want = |n: usize| -> Result<()> {
            if f.len() == n {
                Ok(())
            } else {
                Err(Error::Format(format!("{kind} record has {} fields, expected {n}", f.len())))
            }
        };
        Ok(match kind {
            "teacher" => {
                want(6)?;
                MetricsRecord::Teacher(TeacherRecord {
                    split_seed: num(f[0])?,
                    accuracy: num(f[1])?,
                    macro_f1: num(f[2])?,
                    valid_accuracy: num(f[3])?,
                    best_epoch: parse_opt(f[4])?,
                    class_errors: parse_list(f[5])?,
                    wall_clock_secs: 0.0,
                })
            }
            "run" => {
                want(10)?;
                MetricsRecord::Run(RunRecord {
                    variant: variant(f[0])?,
                    split_seed: num(f[1])?,
                    trial_seed: num(f[2])?,
                    accuracy: num(f[3])?,
                    macro_f1: num(f[4])?,
                    valid_accuracy: num(f[5])?,
                    best_epoch: parse_opt(f[6])?,
                    class_errors: parse_list(f[7])?,
                    student_only_errors: parse_list(f[8])?,
                    trainable_params: num(f[9])?,
                    wall_clock_secs: 0.0,
                })
            }
            "aggregate" => {
                want(9)?;
                MetricsRecord::Aggregate(Aggregate {
                    variant: variant(f[0])?,
                    runs: num(f[1])?,
                    mean_accuracy: num(f[2])?,
                    std_accuracy: num(f[3])?,
                    mean_macro_f1: num(f[4])?,
                    std_macro_f1: num(f[5])?,
                    class_errors: parse_list(f[6])?,
                    student_only_errors: parse_list(f[7])?,
                    trainable_params: num(f[8])?,
                })
            }
            "delta" => {
                want(5)?;
                MetricsRecord::Delta(Comparison {
                    axis: f[0].to_string(),
                    with: variant(f[1])?,
                    without: variant(f[2])?,
                    delta_accuracy: num(f[3])?,
                    delta_macro_f1: num(f[4])?,
                })
            }
            "example" => {
                want(7)?;
                MetricsRecord::Example {
                    tag: f[0].to_string(),
                    record: ExampleRecord {
                        id: num(f[1])?,
                        label: num(f[2])?,
                        teacher_pred: parse_opt(f[3])?,
                        pred: num(f[4])?,
                        confidence: num(f[5])?,
                        probs: f[6].split(',').map(num).collect::<Result<_>>()?,
                    },
                }
            }
            "cca" => {
                want(4)?;
                let branch = match f[1] {
                    "vision" => BranchKind::Vision,
                    "text" => BranchKind::Text,
                    other => return Err(Error::Format(format!("unknown branch {other:?}"))),
                };
                MetricsRecord::Cca {
                    tag: f[0].to_string(),
                    row: CcaRow {
                        branch,
                        layer: num(f[2])?,
                        mean_cca: num(f[3])?,
                    },
                }
            }
            "gate" => {
                want(2)?;
                MetricsRecord::Gate(GatePoint {
                    confidence: num(f[0])?,
                    weight: num(f[1])?,
                })
            }
            "errors" => {
                want(4)?;
                MetricsRecord::Errors {
                    tag: f[0].to_string(),
                    class: num(f[1])?,
                    errors: num(f[2])?,
                    student_only: num(f[3])?,
                }
            }
            "confidence" => {
                want(7)?;
                MetricsRecord::Confidence {
                    tag: f[0].to_string(),
                    stats: ClassConfidence {
                        class: num(f[1])?,
                        count: num(f[2])?,
                        q1: num(f[3])?,
                        median: num(f[4])?,
                        q3: num(f[5])?,
                        iqr: num(f[6])?,
                    },
                }
            }
            "embedding" => {
                want(5)?;
                MetricsRecord::Embedding(EmbeddingRecord {
                    tag: f[0].to_string(),
                    id: num(f[1])?,
                    logit0: num(f[2])?,
                    logit1: num(f[3])?,
                    label: num(f[4])?,
                })
            }
            other => return Err(Error::Format(format!("unknown record kind {other:?}"))),
        })
    }

    pub fn errors_rows(tag: &str, counts: &ErrorCounts) -> Vec<Self> {
        counts
            .errors
            .iter()
            .zip(&counts.student_only)
            .enumerate()
            .map(|(class, (&errors, &student_only))| MetricsRecord::Errors {
                tag: tag.to_string(),
                class,
                errors,
                student_only,
            })
            .collect()
    }
}

fn num<T: FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("cannot parse field {s:?}")))
}

fn parse_opt(s: &str) -> Result<Option<usize>> {
    if s == "-" {
        Ok(None)
    } else {
        num(s).map(Some)
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(num).collect()
}

fn variant(s: &str) -> Result<StudentVariant> {
    s.parse().map_err(|e: Error| Error::Format(e.to_string()))
}

pub fn write_records(w: &mut impl Write, records: &[MetricsRecord]) -> Result<()> {
    for h in HEADER {
        writeln!(w, "{h}")?;
    }
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    Ok(())
}

pub fn read_records(r: impl BufRead) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(MetricsRecord::parse_line(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use pekd::distill::GateMode;
    use pekd::trainkit::PeftKind;

    use super::*;

    fn run(accuracy: f64) -> RunRecord {
        RunRecord {
            variant: StudentVariant::new(PeftKind::Lora, true, GateMode::Entropy),
            split_seed: 2,
            trial_seed: 3,
            accuracy,
            macro_f1: 0.1 + 0.2,
            valid_accuracy: 2.0 / 3.0,
            best_epoch: Some(7),
            class_errors: vec![4, 5],
            student_only_errors: vec![1, 0],
            trainable_params: 1234,
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn every_kind_round_trips() {
        let records = vec![
            MetricsRecord::Teacher(TeacherRecord {
                split_seed: 1,
                accuracy: 0.99,
                macro_f1: 0.98,
                valid_accuracy: 1.0,
                best_epoch: None,
                class_errors: vec![],
                wall_clock_secs: 0.0,
            }),
            MetricsRecord::Run(run(std::f64::consts::PI / 4.0)),
            MetricsRecord::Aggregate(Aggregate {
                variant: StudentVariant::new(PeftKind::Prompt, false, GateMode::Ungated),
                runs: 6,
                mean_accuracy: 0.7,
                std_accuracy: 1e-17,
                mean_macro_f1: f64::NAN,
                std_macro_f1: 0.0,
                class_errors: vec![10, 12],
                student_only_errors: vec![3, 4],
                trainable_params: 99,
            }),
            MetricsRecord::Delta(Comparison {
                axis: "kd".into(),
                with: StudentVariant::new(PeftKind::Adapter, true, GateMode::Hard),
                without: StudentVariant::new(PeftKind::Adapter, false, GateMode::Ungated),
                delta_accuracy: -0.015,
                delta_macro_f1: 0.02,
            }),
            MetricsRecord::Example {
                tag: "student".into(),
                record: ExampleRecord {
                    id: 20_001,
                    label: 1,
                    teacher_pred: Some(0),
                    pred: 1,
                    confidence: 0.625,
                    probs: vec![0.375, 0.625],
                },
            },
            MetricsRecord::Cca {
                tag: "a~b".into(),
                row: CcaRow {
                    branch: BranchKind::Text,
                    layer: 1,
                    mean_cca: 0.5,
                },
            },
            MetricsRecord::Gate(GatePoint {
                confidence: 0.9,
                weight: 0.531,
            }),
            MetricsRecord::Errors {
                tag: "s".into(),
                class: 1,
                errors: 12,
                student_only: 3,
            },
            MetricsRecord::Confidence {
                tag: "t".into(),
                stats: ClassConfidence {
                    class: 0,
                    count: 3,
                    q1: 0.6,
                    median: 0.7,
                    q3: 0.8,
                    iqr: 0.2,
                },
            },
            MetricsRecord::Embedding(EmbeddingRecord {
                id: 5,
                logit0: -1.5,
                logit1: 2.25,
                label: 0,
                tag: "e".into(),
            }),
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &records).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        // NaN fields defeat PartialEq, so compare the rendered lines
        let lines = |rs: &[MetricsRecord]| rs.iter().map(MetricsRecord::to_line).collect::<Vec<_>>();
        assert_eq!(lines(&back), lines(&records));
        let kinds: Vec<&str> = back.iter().map(MetricsRecord::kind).collect();
        assert_eq!(
            kinds,
            ["teacher", "run", "aggregate", "delta", "example", "cca", "gate", "errors", "confidence", "embedding"]
        );
        assert_eq!(back[1], records[1]);
    }

    #[test]
    fn reader_rejects_unknown_kinds_and_short_lines() {
        assert!(read_records("bogus\t1\n".as_bytes()).is_err());
        assert!(read_records("gate\t0.5\n".as_bytes()).is_err());
        assert!(read_records("gate\tx\t0.5\n".as_bytes()).is_err());
        assert!(read_records("# only comments\n\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn floats_carry_seventeen_significant_digits() {
        assert_eq!(float(0.1), "1.0000000000000001e-1");
        assert_eq!(float(f64::NAN), "nan");
    }

    proptest! {
        #[test]
        fn floats_parse_back_bit_exactly(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
            let line = MetricsRecord::Run(run(x)).to_line();
            match MetricsRecord::parse_line(&line).unwrap() {
                MetricsRecord::Run(r) => prop_assert_eq!(r.accuracy.to_bits(), x.to_bits()),
                other => prop_assert!(false, "parsed as {}", other.kind()),
            }
        }
    }
}
