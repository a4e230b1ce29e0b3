//! Black-box search over thread and task allocations.
//!
//! An evaluation takes the median of repeated measurements. The first
//! half of the budget spreads Latin-hypercube samples over the space; the
//! rest refines the incumbent by coordinate descent with step halving.
//! Spaces no larger than the budget are enumerated.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::EventBatch;
use crate::peakfind::PeakList;
use crate::pipeline::{self, RoibinConfig, StageThreads};

pub const TASKS: &str = "tasks";
const LHS_CANDIDATES: usize = 16;

/// One tunable integer axis, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub lo: usize,
    pub hi: usize,
}

impl Axis {
    pub fn new(name: &str, lo: usize, hi: usize) -> Self {
        Axis {
            name: name.to_string(),
            lo,
            hi,
        }
    }

    fn size(&self) -> usize {
        self.hi - self.lo + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneSpace {
    pub axes: Vec<Axis>,
}

impl Default for TuneSpace {
    /// Tasks in [1, 40] and 1 to 8 threads for each parallel stage.
    fn default() -> Self {
        TuneSpace {
            axes: vec![
                Axis::new(TASKS, 1, 40),
                Axis::new("roi", 1, 8),
                Axis::new("bin", 1, 8),
                Axis::new("codec", 1, 8),
                Axis::new("roi_codec", 1, 8),
            ],
        }
    }
}

impl TuneSpace {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        let space = TuneSpace { axes };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Config("tuning space has no axes".into()));
        }
        for a in &self.axes {
            if a.lo > a.hi || a.lo == 0 {
                return Err(Error::Config(format!(
                    "axis {} has invalid range [{}, {}]",
                    a.name, a.lo, a.hi
                )));
            }
        }
        Ok(())
    }

    /// Number of points in the whole space.
    pub fn size(&self) -> u128 {
        self.axes.iter().map(|a| a.size() as u128).product()
    }

    /// Number of points when the task axis is left out.
    pub fn non_task_size(&self) -> u128 {
        self.axes
            .iter()
            .filter(|a| a.name != TASKS)
            .map(|a| a.size() as u128)
            .product()
    }

    pub fn contains(&self, assignment: &[usize]) -> bool {
        assignment.len() == self.axes.len()
            && self
                .axes
                .iter()
                .zip(assignment)
                .all(|(a, &v)| (a.lo..=a.hi).contains(&v))
    }

    /// Maps an assignment onto stage threads; axes not named after a stage
    /// are ignored and stages without an axis keep `base`.
    pub fn to_threads(&self, assignment: &[usize], base: StageThreads) -> StageThreads {
        let mut t = base;
        for (a, &v) in self.axes.iter().zip(assignment) {
            match a.name.as_str() {
                TASKS => t.tasks = v,
                "roi" => t.roi = v,
                "bin" => t.bin = v,
                "codec" => t.codec = v,
                "roi_codec" => t.roi_codec = v,
                _ => {}
            }
        }
        t
    }

    fn point(&self, mut index: u128) -> Vec<usize> {
        let mut p = vec![0; self.axes.len()];
        for (i, a) in self.axes.iter().enumerate().rev() {
            let s = a.size() as u128;
            p[i] = a.lo + (index % s) as usize;
            index /= s;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneBudget {
    pub max_evals: usize,
    /// Measurements per evaluation; the median is used.
    pub repeats: usize,
    /// Stop once an evaluation is at or below this many seconds.
    pub early_stop: Option<f64>,
}

impl TuneBudget {
    /// `max(8, ceil(sqrt(n)))` evaluations for a non-task space of size `n`.
    pub fn for_space(space: &TuneSpace) -> Self {
        let n = space.non_task_size();
        let mut root = (n as f64).sqrt().ceil() as u128;
        while root * root < n {
            root += 1;
        }
        while root > 0 && (root - 1) * (root - 1) >= n {
            root -= 1;
        }
        TuneBudget {
            max_evals: (root as usize).max(8),
            repeats: 3,
            early_stop: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_evals == 0 || self.repeats == 0 {
            return Err(Error::Config("tuning budget and repeats must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub assignment: Vec<usize>,
    /// Median seconds, or `None` when the objective failed.
    pub seconds: Option<f64>,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedAllocation {
    pub assignment: Vec<usize>,
    pub objective: f64,
    pub trials: Vec<Trial>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Search<'a, F> {
    space: &'a TuneSpace,
    budget: TuneBudget,
    objective: F,
    trials: Vec<Trial>,
    seen: HashMap<Vec<usize>, Option<f64>>,
    best: Option<(Vec<usize>, f64)>,
}

impl<F: FnMut(&[usize]) -> Result<f64>> Search<'_, F> {
    fn exhausted(&self) -> bool {
        self.trials.len() >= self.budget.max_evals
            || matches!((&self.best, self.budget.early_stop), (Some((_, b)), Some(s)) if *b <= s)
    }

    /// Evaluates `p` unless already known. Returns its median time.
    fn eval(&mut self, p: &[usize]) -> Option<f64> {
        if let Some(v) = self.seen.get(p) {
            return *v;
        }
        if self.exhausted() {
            return None;
        }
        let mut samples = Vec::with_capacity(self.budget.repeats);
        let mut failed = false;
        for _ in 0..self.budget.repeats {
            match (self.objective)(p) {
                Ok(s) if s.is_finite() => samples.push(s),
                Ok(_) | Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        let seconds = (!failed).then(|| median(&mut samples.clone()));
        log::debug!("tune {p:?} -> {seconds:?}");
        self.trials.push(Trial {
            assignment: p.to_vec(),
            seconds,
            samples,
        });
        self.seen.insert(p.to_vec(), seconds);
        if let Some(s) = seconds {
            if self.best.as_ref().is_none_or(|(_, b)| s < *b) {
                self.best = Some((p.to_vec(), s));
            }
        }
        seconds
    }

    /// Evaluates `k` Latin-hypercube samples, choosing the design with the
    /// largest minimum pairwise distance among a few random candidates.
    fn latin_hypercube(&mut self, rng: &mut ChaCha8Rng, k: usize) {
        let design = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
            let columns: Vec<Vec<usize>> = self
                .space
                .axes
                .iter()
                .map(|a| {
                    let mut strata: Vec<usize> = (0..k).collect();
                    strata.shuffle(rng);
                    strata
                        .into_iter()
                        .map(|s| {
                            let u: f64 = rng.random();
                            let x = ((s as f64 + u) / k as f64 * a.size() as f64) as usize;
                            a.lo + x.min(a.size() - 1)
                        })
                        .collect()
                })
                .collect();
            (0..k).map(|i| columns.iter().map(|c| c[i]).collect()).collect()
        };
        let spread = |pts: &[Vec<usize>]| -> f64 {
            let mut min = f64::INFINITY;
            for (i, p) in pts.iter().enumerate() {
                for q in &pts[i + 1..] {
                    let d: f64 = self
                        .space
                        .axes
                        .iter()
                        .zip(p.iter().zip(q))
                        .map(|(a, (&x, &y))| ((x as f64 - y as f64) / a.size() as f64).powi(2))
                        .sum();
                    min = min.min(d);
                }
            }
            min
        };
        let mut best = design(rng);
        let mut best_spread = spread(&best);
        for _ in 1..LHS_CANDIDATES {
            let d = design(rng);
            let s = spread(&d);
            if s > best_spread {
                best = d;
                best_spread = s;
            }
        }
        for p in best {
            self.eval(&p);
        }
    }

    /// Direction along axis `d` toward the best other trial that differs
    /// from the incumbent on that axis.
    fn hint(&self, inc: &[usize], d: usize) -> isize {
        self.trials
            .iter()
            .filter_map(|t| Some((t, t.seconds?)))
            .filter(|(t, _)| t.assignment[d] != inc[d])
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(1, |(t, _)| if t.assignment[d] > inc[d] { 1 } else { -1 })
    }

    fn coordinate_descent(&mut self, rng: &mut ChaCha8Rng, strata: usize) {
        let mut steps: Vec<usize> = self
            .space
            .axes
            .iter()
            .map(|a| (a.size() / strata / 2).max(1))
            .collect();
        while !self.exhausted() {
            let Some((start, _)) = self.best.clone() else {
                // Nothing feasible yet: keep sampling.
                if self.seen.len() as u128 >= self.space.size() {
                    return;
                }
                let p = self.space.point(rng.random_range(0..self.space.size()));
                self.eval(&p);
                continue;
            };
            for (d, a) in self.space.axes.iter().enumerate() {
                let inc = self.best.clone().unwrap().0;
                let first = self.hint(&inc, d);
                for dir in [first, -first] {
                    let mut moved = false;
                    // Keep stepping while it helps.
                    loop {
                        let (inc, inc_val) = self.best.clone().unwrap();
                        let v = (inc[d] as isize + dir * steps[d] as isize)
                            .clamp(a.lo as isize, a.hi as isize) as usize;
                        if v == inc[d] {
                            break;
                        }
                        let mut cand = inc;
                        cand[d] = v;
                        match self.eval(&cand) {
                            Some(s) if s < inc_val => moved = true,
                            _ => break,
                        }
                    }
                    if moved || self.exhausted() {
                        break;
                    }
                }
            }
            if self.best.as_ref().unwrap().0 != start {
                continue;
            }
            if steps.iter().all(|&s| s == 1) {
                // Local minimum at unit steps; spend what is left exploring.
                self.explore(rng);
                return;
            }
            for s in &mut steps {
                *s = (*s / 2).max(1);
            }
        }
    }

    fn explore(&mut self, rng: &mut ChaCha8Rng) {
        let size = self.space.size();
        while !self.exhausted() && (self.seen.len() as u128) < size {
            let p = self.space.point(rng.random_range(0..size));
            self.eval(&p);
        }
    }
}

/// Minimizes `objective` over `space`. Failing assignments are logged as
/// infeasible and skipped.
pub fn tune<F>(
    space: &TuneSpace,
    objective: F,
    budget: &TuneBudget,
    seed: u64,
) -> Result<TunedAllocation>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    space.validate()?;
    budget.validate()?;
    let mut search = Search {
        space,
        budget: *budget,
        objective,
        trials: Vec::new(),
        seen: HashMap::new(),
        best: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if space.size() <= budget.max_evals as u128 {
        for i in 0..space.size() {
            search.eval(&space.point(i));
        }
    } else {
        let k = budget.max_evals.div_ceil(2);
        search.latin_hypercube(&mut rng, k);
        search.coordinate_descent(&mut rng, k);
    }
    let trials = search.trials;
    let (assignment, objective) = search.best.ok_or_else(|| {
        Error::Tuning(format!(
            "all {} evaluated assignments failed",
            trials.len()
        ))
    })?;
    Ok(TunedAllocation {
        assignment,
        objective,
        trials,
    })
}

/// The most frequent assignment; ties go to the lowest mean objective,
/// then to the lexicographically smallest assignment.
pub fn aggregate_mode(allocations: &[TunedAllocation]) -> Result<Vec<usize>> {
    if allocations.is_empty() {
        return Err(Error::Tuning("no allocations to aggregate".into()));
    }
    let mut groups: HashMap<&[usize], (usize, f64)> = HashMap::new();
    for a in allocations {
        let g = groups.entry(&a.assignment).or_insert((0, 0.0));
        g.0 += 1;
        g.1 += a.objective;
    }
    let best = groups
        .into_iter()
        .map(|(k, (n, sum))| (k, n, sum / n as f64))
        .min_by(|a, b| {
            b.1.cmp(&a.1)
                .then(a.2.total_cmp(&b.2))
                .then_with(|| a.0.cmp(b.0))
        })
        .unwrap();
    Ok(best.0.to_vec())
}

/// Machine description stored with tuning results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostInfo {
    pub hostname: String,
    pub os: String,
    pub arch: String,
    pub cores: usize,
}

impl HostInfo {
    pub fn current() -> Self {
        let hostname = std::env::var("HOSTNAME")
            .ok()
            .or_else(|| std::fs::read_to_string("/etc/hostname").ok())
            .map(|s| s.trim().to_string())
            .unwrap_or_default();
        HostInfo {
            hostname,
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cores: crate::parallel::available_cores(),
        }
    }
}

/// Persisted result of a tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub version: u16,
    pub space: TuneSpace,
    pub budget: TuneBudget,
    pub seed: u64,
    pub host: HostInfo,
    /// Free-form key describing the configuration that was tuned.
    pub config_key: String,
    pub trials: Vec<Trial>,
    pub winner: Vec<usize>,
    pub objective: f64,
    pub threads: StageThreads,
}

impl TuneRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    /// True when the record can stand in for a fresh tuning run.
    pub fn reusable_for(&self, host: &HostInfo, space: &TuneSpace, config_key: &str) -> bool {
        self.version == crate::pipeline::VERSION
            && &self.host == host
            && &self.space == space
            && self.config_key == config_key
    }
}

/// Objective timing one compression of `batch` per call.
pub fn pipeline_objective<'a>(
    space: &'a TuneSpace,
    batch: &'a EventBatch,
    peaks: &'a PeakList,
    cfg: &'a RoibinConfig,
) -> impl FnMut(&[usize]) -> Result<f64> + 'a {
    move |assignment| {
        let run = RoibinConfig {
            threads: space.to_threads(assignment, cfg.threads),
            measure_errors: false,
            ..*cfg
        };
        let t = std::time::Instant::now();
        pipeline::compress(batch, peaks, &run)?;
        Ok(t.elapsed().as_secs_f64())
    }
}

/// Tunes `runs` times with consecutive seeds and returns the modal
/// assignment with the record of the first run.
pub fn tune_pipeline(
    space: &TuneSpace,
    budget: &TuneBudget,
    batch: &EventBatch,
    peaks: &PeakList,
    cfg: &RoibinConfig,
    seed: u64,
    runs: usize,
) -> Result<(StageThreads, Vec<TunedAllocation>)> {
    let mut allocations = Vec::with_capacity(runs.max(1));
    for r in 0..runs.max(1) {
        let obj = pipeline_objective(space, batch, peaks, cfg);
        allocations.push(tune(space, obj, budget, seed.wrapping_add(r as u64))?);
    }
    let mode = aggregate_mode(&allocations)?;
    Ok((space.to_threads(&mode, cfg.threads), allocations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn alloc(a: &[usize], objective: f64) -> TunedAllocation {
        TunedAllocation {
            assignment: a.to_vec(),
            objective,
            trials: vec![],
        }
    }

    #[test]
    fn singleton_space() {
        let space = TuneSpace::new(vec![Axis::new("roi", 3, 3)]).unwrap();
        let mut calls = 0;
        let r = tune(
            &space,
            |_| {
                calls += 1;
                Ok(1.0)
            },
            &TuneBudget::for_space(&space),
            0,
        )
        .unwrap();
        assert_eq!(r.assignment, vec![3]);
        assert_eq!(r.trials.len(), 1);
        assert_eq!(calls, 3);
    }

    #[test]
    fn finds_minimum_of_absolute_distance() {
        let space = TuneSpace::new(vec![Axis::new("bin", 1, 8)]).unwrap();
        let budget = TuneBudget::for_space(&space);
        assert_eq!(budget.max_evals, 8);
        let r = tune(&space, |p| Ok((p[0] as f64 - 5.0).abs()), &budget, 1).unwrap();
        assert_eq!(r.assignment, vec![5]);
    }

    #[test]
    fn budget_of_one() {
        let space = TuneSpace::new(vec![Axis::new("bin", 1, 8), Axis::new("roi", 1, 8)]).unwrap();
        let budget = TuneBudget {
            max_evals: 1,
            repeats: 3,
            early_stop: None,
        };
        let r = tune(&space, |p| Ok(p[0] as f64), &budget, 9).unwrap();
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r.trials[0].assignment, r.assignment);
        assert_eq!(r.trials[0].seconds, Some(r.objective));
    }

    #[test]
    fn budget_from_space_size() {
        assert_eq!(TuneBudget::for_space(&TuneSpace::default()).max_evals, 64);
        let s = TuneSpace::new(vec![Axis::new(TASKS, 1, 40), Axis::new("a", 1, 10), Axis::new("b", 1, 10)])
            .unwrap();
        assert_eq!(TuneBudget::for_space(&s).max_evals, 10);
        let s = TuneSpace::new(vec![Axis::new("a", 1, 101)]).unwrap();
        assert_eq!(TuneBudget::for_space(&s).max_evals, 11);
    }

    #[test]
    fn median_of_repeats() {
        let space = TuneSpace::new(vec![Axis::new("a", 1, 1)]).unwrap();
        let mut seq = [5.0, 1.0, 3.0].into_iter();
        let r = tune(&space, |_| Ok(seq.next().unwrap()), &TuneBudget::for_space(&space), 0).unwrap();
        assert_eq!(r.objective, 3.0);
    }

    #[test]
    fn infeasible_points_are_skipped() {
        let space = TuneSpace::new(vec![Axis::new("a", 1, 4)]).unwrap();
        let r = tune(
            &space,
            |p| {
                if p[0] == 1 {
                    Err(Error::Config("no".into()))
                } else {
                    Ok(p[0] as f64)
                }
            },
            &TuneBudget::for_space(&space),
            0,
        )
        .unwrap();
        assert_eq!(r.assignment, vec![2]);
        assert_eq!(r.trials[0].seconds, None);
        let all_bad = tune(
            &space,
            |_| Err(Error::Config("no".into())),
            &TuneBudget::for_space(&space),
            0,
        );
        assert!(matches!(all_bad, Err(Error::Tuning(_))));
    }

    #[test]
    fn mode_and_tie_breaks() {
        let a = [2, 4];
        let b = [1, 8];
        assert_eq!(
            aggregate_mode(&[alloc(&a, 1.0), alloc(&a, 1.0), alloc(&b, 0.1)]).unwrap(),
            a
        );
        assert_eq!(aggregate_mode(&[alloc(&a, 1.0), alloc(&b, 2.0)]).unwrap(), a);
        assert_eq!(aggregate_mode(&[alloc(&a, 3.0), alloc(&b, 2.0)]).unwrap(), b);
        assert_eq!(aggregate_mode(&[alloc(&a, 2.0), alloc(&b, 2.0)]).unwrap(), b);
        assert_eq!(aggregate_mode(&[alloc(&a, 7.0)]).unwrap(), a);
        assert!(aggregate_mode(&[]).is_err());
    }

    #[test]
    fn threads_mapping() {
        let space = TuneSpace::default();
        let t = space.to_threads(&[30, 2, 4, 1, 3], StageThreads::default());
        assert_eq!(
            t,
            StageThreads {
                tasks: 30,
                roi: 2,
                bin: 4,
                codec: 1,
                roi_codec: 3
            }
        );
    }

    #[test]
    fn pipeline_objective_runs() {
        use crate::frames::Dims4;
        let dims = Dims4::new(4, 1, 32, 32).unwrap();
        let batch = EventBatch::new(dims, vec![1.0; dims.len()]).unwrap();
        let peaks = PeakList::empty(4);
        let cfg = RoibinConfig {
            chunk_events: 1,
            ..RoibinConfig::default()
        };
        let space = TuneSpace::new(vec![Axis::new(TASKS, 1, 2), Axis::new("bin", 1, 2)]).unwrap();
        let budget = TuneBudget::for_space(&space);
        let (threads, runs) = tune_pipeline(&space, &budget, &batch, &peaks, &cfg, 3, 3).unwrap();
        assert_eq!(runs.len(), 3);
        assert!((1..=2).contains(&threads.tasks) && (1..=2).contains(&threads.bin));
    }

    fn arb_space() -> impl Strategy<Value = TuneSpace> {
        proptest::collection::vec((1usize..5, 0usize..9), 1..4).prop_map(|v| TuneSpace {
            axes: v
                .into_iter()
                .enumerate()
                .map(|(i, (lo, w))| Axis::new(&format!("a{i}"), lo, lo + w))
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn search_invariants(space in arb_space(), seed in any::<u64>(), weights in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let f = |p: &[usize]| -> Result<f64> {
                Ok(p.iter().zip(&weights).map(|(&x, w)| ((x as f64) - 4.0 * w).powi(2)).sum())
            };
            let budget = TuneBudget::for_space(&space);
            let r = tune(&space, f, &budget, seed).unwrap();
            prop_assert!(r.trials.len() <= budget.max_evals);
            prop_assert!(space.contains(&r.assignment));
            for t in &r.trials {
                prop_assert!(space.contains(&t.assignment));
                prop_assert!(r.objective <= t.seconds.unwrap());
            }
            prop_assert!(r.trials.iter().any(|t| t.assignment == r.assignment && t.seconds == Some(r.objective)));
            let again = tune(&space, f, &budget, seed).unwrap();
            prop_assert_eq!(again, r);
        }
    }
}

