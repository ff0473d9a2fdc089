use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// Share of the pool the teacher may use (train plus validation).
    pub teacher_fraction: f64,
    /// Share of the pool given to the student, split equally by class.
    pub student_fraction: f64,
    /// Share of the teacher's portion held out for its validation.
    pub teacher_valid_fraction: f64,
    /// Rate at which pool labels are flipped to model annotation noise.
    /// Test labels always stay gold.
    pub label_noise: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            teacher_fraction: 0.99,
            student_fraction: 0.01,
            teacher_valid_fraction: 0.1,
            label_noise: 0.05,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.student_fraction) || !unit(self.teacher_valid_fraction) || !(self.teacher_fraction > 0.0) {
            return Err(Error::Config(format!("split fractions must lie in (0, 1): {self:?}")));
        }
        if self.teacher_fraction + self.student_fraction > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "teacher ({}) and student ({}) fractions exceed the pool",
                self.teacher_fraction, self.student_fraction
            )));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!("label noise must lie in [0, 0.5): {}", self.label_noise)));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Copy of `data` with each pool label flipped with probability `rate`.
/// Whether an example flips depends only on its id and the dataset seed,
/// so every split of the same dataset sees the same annotations.
pub fn annotate(data: &Dataset, rate: f64) -> Result<Dataset> {
    if !(0.0..0.5).contains(&rate) {
        return Err(Error::Config(format!("label noise must lie in [0, 0.5): {rate}")));
    }
    let mut out = data.clone();
    let n = data.pool().len();
    let salt = splitmix(data.spec.seed ^ 0x0a11_07a7_e000_0000);
    for ex in &mut out.examples[..n] {
        let u = (splitmix(ex.id ^ salt) >> 11) as f64 / (1u64 << 53) as f64;
        if u < rate {
            ex.label = 1 - ex.label;
        }
    }
    Ok(out)
}

/// Indices into [`Dataset::examples`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub teacher_train: Vec<usize>,
    pub valid_teacher: Vec<usize>,
    /// Class-balanced, disjoint from everything the teacher trains on.
    pub student_train: Vec<usize>,
    /// Class-balanced and the same size as `student_train`, drawn from the
    /// teacher's validation part.
    pub valid_student: Vec<usize>,
    /// The dataset's test block; does not depend on `seed`.
    pub test: Vec<usize>,
}

/// Partitions the pool; `seed` picks which examples the student gets.
pub fn split(data: &Dataset, spec: &SplitSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    let n = data.pool().len();
    let student = (spec.student_fraction * n as f64).round() as usize;
    let per_class = student / 2;
    if per_class == 0 {
        return Err(Error::invalid(format!(
            "{n} examples give no student examples at fraction {}",
            spec.student_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5011_7000_0000);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    data.pool().iter().enumerate().for_each(|(i, ex)| by_class[ex.label].push(i));
    for c in &mut by_class {
        if c.len() < 2 * per_class {
            return Err(Error::invalid(format!(
                "class has {} examples, {} needed for the student splits",
                c.len(),
                2 * per_class
            )));
        }
        c.shuffle(&mut rng);
    }
    let mut student_train: Vec<usize> = by_class.iter().flat_map(|c| c[..per_class].to_vec()).collect();
    let mut rest: Vec<usize> = by_class.iter().flat_map(|c| c[per_class..].to_vec()).collect();
    rest.shuffle(&mut rng);
    let teacher = ((spec.teacher_fraction * n as f64).round() as usize).min(rest.len());
    rest.truncate(teacher);
    let n_valid = (spec.teacher_valid_fraction * teacher as f64).round() as usize;
    let mut valid_teacher = rest[..n_valid].to_vec();
    let mut teacher_train = rest[n_valid..].to_vec();

    let mut valid_student = Vec::with_capacity(student);
    for class in 0..2 {
        let picked: Vec<usize> = valid_teacher
            .iter()
            .copied()
            .filter(|&i| data.examples[i].label == class)
            .take(per_class)
            .collect();
        if picked.len() < per_class {
            return Err(Error::invalid(format!(
                "teacher validation holds {} of class {class}, student validation needs {per_class}",
                picked.len()
            )));
        }
        valid_student.extend(picked);
    }
    for v in [&mut student_train, &mut valid_student, &mut valid_teacher, &mut teacher_train] {
        v.sort_unstable();
    }
    Ok(Splits {
        teacher_train,
        valid_teacher,
        student_train,
        valid_student,
        test: data.test_indices(),
    })
}
