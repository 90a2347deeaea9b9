//! Non-specific fixed-vs-random leakage assessment with Welch's t-test.

use crate::error::{Error, Result};
use crate::leakage::{Label, TraceSet};

pub const DEFAULT_THRESHOLD: f64 = 4.5;

/// Streaming per-point mean and variance.
#[derive(Debug, Clone)]
pub struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(points: usize) -> Self {
        Self { n: 0, mean: vec![0.0; points], m2: vec![0.0; points] }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn points(&self) -> usize {
        self.mean.len()
    }

    pub fn push<T: Copy + Into<f64>>(&mut self, sample: &[T]) {
        debug_assert_eq!(sample.len(), self.mean.len());
        self.n += 1;
        let n = self.n as f64;
        for ((&x, mean), m2) in sample.iter().zip(&mut self.mean).zip(&mut self.m2) {
            let x: f64 = x.into();
            let d = x - *mean;
            *mean += d / n;
            *m2 += d * (x - *mean);
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sample variance (`n - 1` denominator).
    pub fn variance(&self, p: usize) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            (self.m2[p] / (self.n - 1) as f64).max(0.0)
        }
    }
}

/// Welch's t per point. With zero variance in both groups the score is 0
/// for equal means and an infinite sentinel otherwise.
pub fn t_scores(a: &Welford, b: &Welford) -> Result<Vec<f64>> {
    if a.count() < 2 || b.count() < 2 {
        return Err(Error::InvalidArgument(format!(
            "each group needs at least 2 traces, got {} and {}",
            a.count(),
            b.count()
        )));
    }
    if a.points() != b.points() {
        return Err(Error::Shape(format!("trace lengths {} and {}", a.points(), b.points())));
    }
    let (na, nb) = (a.count() as f64, b.count() as f64);
    Ok((0..a.points())
        .map(|p| {
            let diff = a.mean[p] - b.mean[p];
            let denom = (a.variance(p) / na + b.variance(p) / nb).sqrt();
            if denom > 0.0 {
                diff / denom
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(diff)
            }
        })
        .collect())
}

/// Welch's t between two groups of equal-length traces.
pub fn welch_t<T, S>(group_a: &[S], group_b: &[S]) -> Result<Vec<f64>>
where
    T: Copy + Into<f64>,
    S: AsRef<[T]>,
{
    let points = group_a.first().or(group_b.first()).map_or(0, |t| t.as_ref().len());
    let mut acc = [Welford::new(points), Welford::new(points)];
    for (group, w) in [group_a, group_b].into_iter().zip(&mut acc) {
        for trace in group {
            let trace = trace.as_ref();
            if trace.len() != points {
                return Err(Error::Shape(format!("trace of length {} among traces of length {points}", trace.len())));
            }
            w.push(trace);
        }
    }
    t_scores(&acc[0], &acc[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvlaResult {
    pub t_scores: Vec<f64>,
    pub max_abs_t: f64,
    pub threshold: f64,
    /// Points with `|t| > threshold`.
    pub leaky_points: Vec<usize>,
    /// Points where both groups had zero variance and different means.
    pub degenerate_points: Vec<usize>,
}

impl TvlaResult {
    pub fn from_scores(t_scores: Vec<f64>, threshold: f64) -> Self {
        let max_abs_t = t_scores.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        let leaky_points = (0..t_scores.len()).filter(|&i| t_scores[i].abs() > threshold).collect();
        let degenerate_points = (0..t_scores.len()).filter(|&i| t_scores[i].is_infinite()).collect();
        Self { t_scores, max_abs_t, threshold, leaky_points, degenerate_points }
    }

    pub fn argmax(&self) -> Option<usize> {
        (0..self.t_scores.len()).max_by(|&a, &b| self.t_scores[a].abs().total_cmp(&self.t_scores[b].abs()))
    }
}

fn accumulate(ts: &TraceSet, upto: usize, acc: &mut [Welford; 2], from: usize) {
    for trace in &ts.traces()[from..upto] {
        let group = match trace.label {
            Label::Fixed => 0,
            Label::Random => 1,
        };
        acc[group].push(&trace.samples);
    }
}

/// Fixed group minus random group.
pub fn run_tvla(ts: &TraceSet, threshold: f64) -> Result<TvlaResult> {
    let mut acc = [Welford::new(ts.trace_len()), Welford::new(ts.trace_len())];
    accumulate(ts, ts.len(), &mut acc, 0);
    Ok(TvlaResult::from_scores(t_scores(&acc[0], &acc[1])?, threshold))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionCurve {
    /// `(traces used, max |t|)`, in increasing trace count.
    pub checkpoints: Vec<(usize, f64)>,
}

impl EvolutionCurve {
    /// Last over first max |t|.
    pub fn growth_ratio(&self) -> Option<f64> {
        let first = self.checkpoints.first()?.1;
        let last = self.checkpoints.last()?.1;
        Some(last / first)
    }
}

/// Max |t| over growing prefixes of the trace set, in generation order.
pub fn t_evolution(ts: &TraceSet, checkpoints: &[usize]) -> Result<EvolutionCurve> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints".into()));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("checkpoints must increase strictly: {checkpoints:?}")));
    }
    if let Some(&last) = checkpoints.last().filter(|&&c| c > ts.len()) {
        return Err(Error::InvalidArgument(format!("checkpoint {last} exceeds {} traces", ts.len())));
    }
    let mut acc = [Welford::new(ts.trace_len()), Welford::new(ts.trace_len())];
    let mut done = 0;
    let mut out = Vec::with_capacity(checkpoints.len());
    for &c in checkpoints {
        accumulate(ts, c, &mut acc, done);
        done = c;
        let scores = t_scores(&acc[0], &acc[1])?;
        out.push((c, TvlaResult::from_scores(scores, DEFAULT_THRESHOLD).max_abs_t));
    }
    Ok(EvolutionCurve { checkpoints: out })
}
