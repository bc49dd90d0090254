//! Sine-regression task family `y = A·sin(x − φ) + b`, with range partitions
//! for out-of-distribution exclusions, conditional resampling of selected
//! factors, shot sampling and label corruption.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Rejection attempts before a sampler gives up.
pub const MAX_REJECTIONS: usize = 10_000;

/// Inputs are drawn uniformly from this interval.
pub const X_RANGE: (f64, f64) = (-5.0, 5.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    /// Amplitude terms are summed, so a family may split `A` into several.
    Amplitude,
    Phase,
    YShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub name: String,
    pub kind: FactorKind,
    pub low: f64,
    pub high: f64,
    /// Inactive factors are pinned at `low`.
    #[serde(default = "default_true")]
    pub active: bool,
}

fn default_true() -> bool {
    true
}

impl FactorSpec {
    pub fn new(name: &str, kind: FactorKind, low: f64, high: f64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            low,
            high,
            active: true,
        }
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    /// Bounds of interval `i` when the range is split into `n` equal parts.
    pub fn interval(&self, i: usize, n: usize) -> (f64, f64) {
        let w = self.width() / n as f64;
        (self.low + w * i as f64, self.low + w * (i + 1) as f64)
    }

    pub fn interval_of(&self, value: f64, n: usize) -> usize {
        let t = (value - self.low) / self.width() * n as f64;
        (t.floor().max(0.0) as usize).min(n - 1)
    }

    pub fn contains(&self, value: f64) -> bool {
        if self.active {
            value >= self.low && value <= self.high
        } else {
            value == self.low
        }
    }
}

/// Factor values of one task, aligned with the family's factor list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineTask {
    pub values: Vec<f64>,
    pub kinds: Vec<FactorKind>,
}

impl SineTask {
    pub fn amplitude(&self) -> f64 {
        self.sum_of(FactorKind::Amplitude)
    }

    pub fn phase(&self) -> f64 {
        self.sum_of(FactorKind::Phase)
    }

    pub fn y_shift(&self) -> f64 {
        self.sum_of(FactorKind::YShift)
    }

    fn sum_of(&self, kind: FactorKind) -> f64 {
        self.values
            .iter()
            .zip(&self.kinds)
            .filter(|(_, &k)| k == kind)
            .map(|(v, _)| v)
            .sum()
    }

    /// Exact target value at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude() * (x - self.phase()).sin() + self.y_shift()
    }
}

/// `sine_eval(task, x)`.
pub fn sine_eval(task: &SineTask, x: f64) -> f64 {
    task.eval(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub factors: Vec<FactorSpec>,
}

impl TaskFamily {
    /// Amplitude `[0.1, 5.0]` and phase `[0, π]`.
    pub fn sine2() -> Self {
        Self {
            factors: vec![
                FactorSpec::new("A", FactorKind::Amplitude, 0.1, 5.0),
                FactorSpec::new("P", FactorKind::Phase, 0.0, PI),
            ],
        }
    }

    /// Amplitude, phase and y-shift `[-2, 2]`.
    pub fn sine3() -> Self {
        let mut f = Self::sine2();
        f.factors
            .push(FactorSpec::new("Y", FactorKind::YShift, -2.0, 2.0));
        f
    }

    /// Three-factor family with the amplitude split into two summed halves
    /// `A1, A2 ∈ [0.05, 2.5]`.
    pub fn sine3_split_amplitude() -> Self {
        Self {
            factors: vec![
                FactorSpec::new("A1", FactorKind::Amplitude, 0.05, 2.5),
                FactorSpec::new("A2", FactorKind::Amplitude, 0.05, 2.5),
                FactorSpec::new("P", FactorKind::Phase, 0.0, PI),
                FactorSpec::new("Y", FactorKind::YShift, -2.0, 2.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::config("factors", "at least one factor is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, f) in self.factors.iter().enumerate() {
            if !(f.low < f.high) || !f.low.is_finite() || !f.high.is_finite() {
                return Err(Error::config(
                    format!("factors[{i}]"),
                    format!("range [{}, {}] must satisfy low < high", f.low, f.high),
                ));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::config(
                    format!("factors[{i}].name"),
                    format!("duplicate factor name {}", f.name),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    pub fn kinds(&self) -> Vec<FactorKind> {
        self.factors.iter().map(|f| f.kind).collect()
    }

    pub fn task(&self, values: Vec<f64>) -> Result<SineTask> {
        if values.len() != self.factors.len() {
            return Err(Error::shape(
                "task",
                format!("{} values for {} factors", values.len(), self.factors.len()),
            ));
        }
        for (f, v) in self.factors.iter().zip(&values) {
            if !f.contains(*v) {
                return Err(Error::Sampling(format!(
                    "{} = {v} outside [{}, {}]",
                    f.name, f.low, f.high
                )));
            }
        }
        Ok(SineTask {
            values,
            kinds: self.kinds(),
        })
    }

    fn draw<R: Rng + ?Sized>(f: &FactorSpec, rng: &mut R) -> f64 {
        if f.active {
            rng.gen_range(f.low..f.high)
        } else {
            f.low
        }
    }

    /// Uniform draw over the admissible cells of `partition`, by rejection.
    pub fn sample_task<R: Rng + ?Sized>(
        &self,
        partition: &RangePartition,
        rng: &mut R,
    ) -> Result<SineTask> {
        partition.check_for(self)?;
        for _ in 0..MAX_REJECTIONS {
            let values: Vec<f64> = self.factors.iter().map(|f| Self::draw(f, rng)).collect();
            if partition.admits(self, &values) {
                return Ok(SineTask {
                    values,
                    kinds: self.kinds(),
                });
            }
        }
        Err(Error::Sampling(format!(
            "no admissible task after {MAX_REJECTIONS} draws"
        )))
    }

    /// Redraws the factors listed in `changing`, keeping every other value of
    /// `prev` exactly, such that the joint cell stays admissible.
    pub fn sample_conditional<R: Rng + ?Sized>(
        &self,
        prev: &SineTask,
        changing: &[usize],
        partition: &RangePartition,
        rng: &mut R,
    ) -> Result<SineTask> {
        partition.check_for(self)?;
        if let Some(&bad) = changing.iter().find(|&&i| i >= self.factors.len()) {
            return Err(Error::Sampling(format!("factor index {bad} out of range")));
        }
        let mut values = prev.values.clone();
        for _ in 0..MAX_REJECTIONS {
            for &i in changing {
                values[i] = Self::draw(&self.factors[i], rng);
            }
            if partition.admits(self, &values) {
                return Ok(SineTask {
                    values,
                    kinds: self.kinds(),
                });
            }
        }
        Err(Error::Sampling(format!(
            "no admissible value for factors {changing:?} after {MAX_REJECTIONS} draws"
        )))
    }
}

/// Equal-width grid over factor ranges with a set of excluded cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangePartition {
    /// Interval count per factor.
    pub intervals: Vec<usize>,
    /// Excluded cells as per-factor interval indices.
    #[serde(default)]
    pub excluded_cells: BTreeSet<Vec<usize>>,
}

impl RangePartition {
    /// One interval per factor, nothing excluded.
    pub fn full(num_factors: usize) -> Self {
        Self {
            intervals: vec![1; num_factors],
            excluded_cells: BTreeSet::new(),
        }
    }

    pub fn new(intervals: Vec<usize>, excluded_cells: BTreeSet<Vec<usize>>) -> Result<Self> {
        let p = Self {
            intervals,
            excluded_cells,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn num_cells(&self) -> usize {
        self.intervals.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.intervals.iter().position(|&n| n == 0) {
            return Err(Error::config(
                format!("partition.intervals[{i}]"),
                "interval count must be at least 1",
            ));
        }
        for cell in &self.excluded_cells {
            if cell.len() != self.intervals.len()
                || cell.iter().zip(&self.intervals).any(|(c, n)| c >= n)
            {
                return Err(Error::config(
                    "partition.excluded_cells",
                    format!("cell {cell:?} does not fit grid {:?}", self.intervals),
                ));
            }
        }
        if self.excluded_cells.len() >= self.num_cells() {
            return Err(Error::config(
                "partition.excluded_cells",
                "every cell is excluded",
            ));
        }
        Ok(())
    }

    fn check_for(&self, family: &TaskFamily) -> Result<()> {
        if self.intervals.len() != family.len() {
            return Err(Error::config(
                "partition.intervals",
                format!(
                    "{} interval counts for {} factors",
                    self.intervals.len(),
                    family.len()
                ),
            ));
        }
        if self.excluded_cells.len() >= self.num_cells() {
            return Err(Error::Sampling("every cell is excluded".into()));
        }
        Ok(())
    }

    pub fn cell_of(&self, family: &TaskFamily, values: &[f64]) -> Vec<usize> {
        family
            .factors
            .iter()
            .zip(values)
            .zip(&self.intervals)
            .map(|((f, &v), &n)| f.interval_of(v, n))
            .collect()
    }

    pub fn admits(&self, family: &TaskFamily, values: &[f64]) -> bool {
        self.excluded_cells.is_empty()
            || !self.excluded_cells.contains(&self.cell_of(family, values))
    }

    /// All cells in row-major order.
    pub fn cells(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for &n in &self.intervals {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..n).map(move |i| {
                        let mut c = prefix.clone();
                        c.push(i);
                        c
                    })
                })
                .collect();
        }
        out
    }

    /// `count` cells chosen uniformly without replacement are excluded.
    pub fn random_exclusion<R: Rng + ?Sized>(
        intervals: Vec<usize>,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self {
            intervals,
            excluded_cells: BTreeSet::new(),
        };
        let cells = p.cells();
        if count >= cells.len() {
            return Err(Error::config(
                "partition.excluded_cells",
                format!("cannot exclude {count} of {} cells", cells.len()),
            ));
        }
        p.excluded_cells = sample(rng, cells.len(), count)
            .into_iter()
            .map(|i| cells[i].clone())
            .collect();
        Ok(p)
    }

    /// Per factor, `keep` of the intervals are chosen at random; every cell
    /// outside their product is excluded.
    pub fn random_per_factor<R: Rng + ?Sized>(
        intervals: Vec<usize>,
        keep: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let kept: Vec<BTreeSet<usize>> = intervals
            .iter()
            .map(|&n| sample(rng, n, keep.min(n)).into_iter().collect())
            .collect();
        let mut p = Self {
            intervals,
            excluded_cells: BTreeSet::new(),
        };
        p.excluded_cells = p
            .cells()
            .into_iter()
            .filter(|c| c.iter().zip(&kept).any(|(i, k)| !k.contains(i)))
            .collect();
        p.validate()?;
        Ok(p)
    }

    /// Fraction of cells that remain admissible.
    pub fn coverage(&self) -> f64 {
        1.0 - self.excluded_cells.len() as f64 / self.num_cells() as f64
    }
}

/// Serializable description of a task set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSetManifest {
    pub factors: Vec<FactorSpec>,
    pub partition: Vec<usize>,
    pub excluded_cells: BTreeSet<Vec<usize>>,
    pub seed: u64,
}

impl TaskSetManifest {
    pub fn new(family: &TaskFamily, partition: &RangePartition, seed: u64) -> Self {
        Self {
            factors: family.factors.clone(),
            partition: partition.intervals.clone(),
            excluded_cells: partition.excluded_cells.clone(),
            seed,
        }
    }

    pub fn split(&self) -> Result<(TaskFamily, RangePartition)> {
        let family = TaskFamily {
            factors: self.factors.clone(),
        };
        family.validate()?;
        let partition = RangePartition::new(self.partition.clone(), self.excluded_cells.clone())?;
        Ok((family, partition))
    }
}

/// Input/target pairs, each stored as an `(n, 1)` column.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub x: Array,
    pub y: Array,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_inputs(task: &SineTask, xs: Vec<f64>) -> Self {
        let ys = xs.iter().map(|&x| task.eval(x)).collect();
        Self {
            x: Array::column(xs),
            y: Array::column(ys),
        }
    }
}

/// `n` inputs uniform on [`X_RANGE`] with exact targets.
pub fn sample_shots<R: Rng + ?Sized>(task: &SineTask, n: usize, rng: &mut R) -> Result<TaskDataset> {
    if n == 0 {
        return Err(Error::config("shots", "shot count must be at least 1"));
    }
    let xs = (0..n).map(|_| rng.gen_range(X_RANGE.0..X_RANGE.1)).collect();
    Ok(TaskDataset::from_inputs(task, xs))
}

/// Independent train and test draws of `n` shots each.
pub fn sample_split<R: Rng + ?Sized>(
    task: &SineTask,
    n: usize,
    rng: &mut R,
) -> Result<(TaskDataset, TaskDataset)> {
    Ok((sample_shots(task, n, rng)?, sample_shots(task, n, rng)?))
}

/// With probability `p` replaces factor index `s` by a different index drawn
/// uniformly from `0..k`. Draws nothing when `p == 0`.
pub fn mislabel<R: Rng + ?Sized>(s: usize, p: f64, k: usize, rng: &mut R) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("mislabel_rate", format!("{p} is not a probability")));
    }
    if s >= k {
        return Err(Error::config("mislabel", format!("index {s} out of 0..{k}")));
    }
    if p == 0.0 {
        return Ok(s);
    }
    if k < 2 {
        return Err(Error::config(
            "mislabel_rate",
            "mislabeling needs at least two contexts",
        ));
    }
    if rng.gen::<f64>() >= p {
        return Ok(s);
    }
    let other = rng.gen_range(0..k - 1);
    Ok(if other >= s { other + 1 } else { other })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn task3(a: f64, p: f64, b: f64) -> SineTask {
        TaskFamily::sine3().task(vec![a, p, b]).unwrap()
    }

    #[test]
    fn eval_examples() {
        let f = TaskFamily::sine3();
        let t = f.task(vec![1.0, 0.0, 0.0]);
        assert_eq!(t.unwrap().eval(0.0), 0.0);
        assert_eq!(task3(3.0, 0.0, 1.5).eval(PI / 2.0), 4.5);
        assert_eq!(task3(2.5, PI / 2.0, 0.0).eval(PI / 2.0), 0.0);
    }

    #[test]
    fn split_amplitude_sums() {
        let f = TaskFamily::sine3_split_amplitude();
        let t = f.task(vec![1.0, 2.0, 0.0, 0.5]).unwrap();
        assert!((t.eval(1.0) - (3.0 * 1.0f64.sin() + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn amplitude_interval_width() {
        let a = &TaskFamily::sine2().factors[0];
        for i in 0..5 {
            let (lo, hi) = a.interval(i, 5);
            assert!((hi - lo - 0.98).abs() < 1e-12);
        }
        assert_eq!(a.interval_of(0.1, 5), 0);
        assert_eq!(a.interval_of(1.07, 5), 0);
        assert_eq!(a.interval_of(1.09, 5), 1);
        assert_eq!(a.interval_of(5.0, 5), 4);
    }

    #[test]
    fn exclusion_of_corner_cell_is_respected() {
        let f = TaskFamily::sine2();
        let p = RangePartition::new(vec![5, 5], [vec![0, 0]].into_iter().collect()).unwrap();
        let mut r = rng(1);
        for _ in 0..5000 {
            let t = f.sample_task(&p, &mut r).unwrap();
            assert_ne!(p.cell_of(&f, &t.values), vec![0, 0]);
        }
    }

    #[test]
    fn sixty_percent_exclusion_leaves_ten_cells() {
        let p = RangePartition::random_exclusion(vec![5, 5], 15, &mut rng(2)).unwrap();
        assert_eq!(p.excluded_cells.len(), 15);
        assert_eq!(p.num_cells() - p.excluded_cells.len(), 10);
        assert!((p.coverage() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn per_factor_exclusion_covers_an_eighth() {
        let p = RangePartition::random_per_factor(vec![4, 4, 4], 2, &mut rng(3)).unwrap();
        assert_eq!(p.num_cells() - p.excluded_cells.len(), 8);
        assert!((p.coverage() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn all_excluded_is_rejected() {
        let all: BTreeSet<_> = RangePartition::full(2).cells().into_iter().collect();
        assert!(RangePartition::new(vec![1, 1], all).is_err());
        assert!(RangePartition::random_exclusion(vec![5, 5], 25, &mut rng(0)).is_err());
    }

    #[test]
    fn conditional_keeps_other_factors_exactly() {
        let f = TaskFamily::sine3();
        let prev = task3(2.0, 1.0, 0.0);
        let next = f
            .sample_conditional(&prev, &[0], &RangePartition::full(3), &mut rng(4))
            .unwrap();
        assert_eq!(next.values[1], 1.0);
        assert_eq!(next.values[2], 0.0);
        assert_ne!(next.values[0], 2.0);
    }

    #[test]
    fn shots_follow_the_formula() {
        let t = task3(1.7, 0.4, -0.3);
        let d = sample_shots(&t, 10, &mut rng(5)).unwrap();
        assert_eq!(d.len(), 10);
        for (x, y) in d.x.data().iter().zip(d.y.data()) {
            assert_eq!(*y, sine_eval(&t, *x));
            assert!((-5.0..5.0).contains(x));
        }
        assert_eq!(d, sample_shots(&t, 10, &mut rng(5)).unwrap());
        assert_eq!(sample_shots(&t, 5, &mut rng(6)).unwrap().len(), 5);
        assert!(sample_shots(&t, 0, &mut rng(6)).is_err());
    }

    #[test]
    fn mislabel_edges() {
        let mut r = rng(7);
        for s in 0..3 {
            assert_eq!(mislabel(s, 0.0, 3, &mut r).unwrap(), s);
        }
        for _ in 0..100 {
            assert_eq!(mislabel(0, 1.0, 2, &mut r).unwrap(), 1);
        }
        assert!(mislabel(0, 0.5, 1, &mut r).is_err());
        assert!(mislabel(0, 1.5, 3, &mut r).is_err());
    }

    #[test]
    fn manifest_json_field_names() {
        let f = TaskFamily::sine2();
        let p = RangePartition::new(vec![5, 5], [vec![1, 2]].into_iter().collect()).unwrap();
        let json = serde_json::to_value(TaskSetManifest::new(&f, &p, 9)).unwrap();
        for key in ["factors", "partition", "excluded_cells", "seed"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let back: TaskSetManifest = serde_json::from_value(json).unwrap();
        assert_eq!(back.split().unwrap(), (f, p));
    }
}
