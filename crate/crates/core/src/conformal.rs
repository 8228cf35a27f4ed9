//! Split conformal calibration of the raw evidential intervals.
//!
//! Each grid element keeps its own sorted arrays of lower and upper
//! non-conformity scores collected on the calibration split. A calibrated
//! interval at miscoverage `a` widens (or tightens) the raw interval by the
//! finite-sample quantiles of those arrays.
//!
//! By default the miscoverage budget is split evenly between the two tails:
//! each side uses the quantile at `a / 2`, so the union bound gives coverage
//! of at least `1 - a`. [`TailAllocation::PerSide`] instead uses `a` on each
//! side, which only guarantees `1 - 2a` for the two-sided interval.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, PayloadReader, PayloadWriter};
use crate::data::{EnsembleDataset, EnsembleMember, Split};
use crate::error::{Error, Result};
use crate::evidential::RawInterval;
use crate::numeric::{median, pairwise_mean};
use crate::predict::raw_intervals;
use crate::training::Checkpoint;

pub const TABLE_KIND: &str = "calibration-table";

/// Conformal miscoverage `a`: target coverage is `1 - a`. Not to be confused
/// with the NIG shape parameter.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MiscoverageLevel(f64);

impl MiscoverageLevel {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::domain(
                "MiscoverageLevel",
                format!("level must lie in (0, 1), got {value}"),
            ))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn confidence(self) -> f64 {
        1.0 - self.0
    }
}

impl TryFrom<f64> for MiscoverageLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MiscoverageLevel> for f64 {
    fn from(l: MiscoverageLevel) -> f64 {
        l.0
    }
}

/// How the miscoverage budget is divided between the two bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailAllocation {
    /// Each side at `a / 2`; two-sided coverage `>= 1 - a`.
    #[default]
    Split,
    /// Each side at `a`; two-sided coverage `>= 1 - 2a`.
    PerSide,
}

impl TailAllocation {
    /// Miscoverage applied to each one-sided score array.
    pub fn side_level(self, level: f64) -> f64 {
        match self {
            TailAllocation::Split => 0.5 * level,
            TailAllocation::PerSide => level,
        }
    }

    fn code(self) -> u64 {
        match self {
            TailAllocation::Split => 0,
            TailAllocation::PerSide => 1,
        }
    }

    fn from_code(c: u64) -> Option<Self> {
        match c {
            0 => Some(TailAllocation::Split),
            1 => Some(TailAllocation::PerSide),
            _ => None,
        }
    }
}

impl fmt::Display for TailAllocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TailAllocation::Split => "split",
            TailAllocation::PerSide => "per-side",
        })
    }
}

impl FromStr for TailAllocation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(TailAllocation::Split),
            "per-side" => Ok(TailAllocation::PerSide),
            _ => Err(Error::Config(format!(
                "unknown tail allocation '{s}' (split | per-side)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Pool scores of all elements into one array. Off by default: the
    /// guarantee then holds marginally over elements, not per element.
    pub pooled: bool,
    pub tails: TailAllocation,
}

/// `(E_lo, E_hi) = (lo - y, y - hi)`; both negative iff `y` is strictly inside.
pub fn nonconformity_scores(raw: &RawInterval, y: f64) -> (f64, f64) {
    (raw.lo - y, y - raw.hi)
}

/// `k = ceil((n + 1)(1 - level))`, at least 1. Products within rounding
/// noise of an integer are snapped so that e.g. `20 * 0.9` yields 18.
pub fn quantile_rank(n: usize, level: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - level);
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).max(1)
}

/// Result of a finite-sample quantile lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quantile {
    Finite(f64),
    /// `k > n`: the level cannot be certified with this many scores.
    Unattainable,
}

impl Quantile {
    /// The threshold, with `+inf` as the unattainable sentinel.
    pub fn value(self) -> f64 {
        match self {
            Quantile::Finite(v) => v,
            Quantile::Unattainable => f64::INFINITY,
        }
    }

    pub fn is_attainable(self) -> bool {
        matches!(self, Quantile::Finite(_))
    }
}

/// k-th smallest of ascending `sorted` with `k = ceil((n + 1)(1 - level))`.
pub fn finite_sample_quantile(sorted: &[f64], level: MiscoverageLevel) -> Result<Quantile> {
    if sorted.is_empty() {
        return Err(Error::EmptySplit("calibration scores"));
    }
    debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    let k = quantile_rank(sorted.len(), level.value());
    Ok(if k > sorted.len() {
        Quantile::Unattainable
    } else {
        Quantile::Finite(sorted[k - 1])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibratedInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: MiscoverageLevel,
    /// Bounds crossed and were collapsed to their midpoint.
    pub clamped: bool,
}

impl CalibratedInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

/// `[lo - q_lo, hi + q_hi]`, collapsed to the midpoint if the bounds cross.
pub fn calibrate(raw: &RawInterval, q_lo: f64, q_hi: f64, level: MiscoverageLevel) -> CalibratedInterval {
    let lo = raw.lo - q_lo;
    let hi = raw.hi + q_hi;
    if lo > hi {
        let mid = 0.5 * (lo + hi);
        CalibratedInterval {
            lo: mid,
            hi: mid,
            level,
            clamped: true,
        }
    } else {
        CalibratedInterval {
            lo,
            hi,
            level,
            clamped: false,
        }
    }
}

/// Sorted non-conformity scores for every grid element.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    grid_shape: Vec<usize>,
    n: usize,
    delta: f64,
    options: CalibrationOptions,
    member_ids: Vec<u64>,
    /// Element-major, `n` ascending scores per element; one array of
    /// `n * elements` scores when pooled.
    lo_scores: Vec<f64>,
    hi_scores: Vec<f64>,
}

/// Per-element thresholds for one miscoverage level.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSet {
    pub level: MiscoverageLevel,
    pub k: usize,
    pub attainable: bool,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl QuantileSet {
    /// `(Q_lo, Q_hi)` for element `i`.
    pub fn at(&self, i: usize) -> (f64, f64) {
        if self.lo.len() == 1 {
            (self.lo[0], self.hi[0])
        } else {
            (self.lo[i], self.hi[i])
        }
    }
}

impl CalibrationTable {
    /// Builds a table from per-member score rows (`scores[m][i]`).
    pub fn from_member_scores(
        grid_shape: Vec<usize>,
        delta: f64,
        options: CalibrationOptions,
        member_ids: Vec<u64>,
        lo_rows: &[Vec<f64>],
        hi_rows: &[Vec<f64>],
    ) -> Result<Self> {
        let n = lo_rows.len();
        if n == 0 {
            return Err(Error::EmptySplit("calibration"));
        }
        if hi_rows.len() != n || member_ids.len() != n {
            return Err(Error::Shape("score rows and member ids disagree in count".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::domain(
                "CalibrationTable",
                format!("delta must lie in (0, 1), got {delta}"),
            ));
        }
        let n_elem: usize = grid_shape.iter().product();
        if lo_rows.iter().chain(hi_rows).any(|r| r.len() != n_elem) {
            return Err(Error::Shape(format!("score rows must have {n_elem} entries")));
        }
        if lo_rows.iter().chain(hi_rows).flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("CalibrationTable", "non-finite non-conformity score"));
        }
        let gather = |rows: &[Vec<f64>]| -> Vec<f64> {
            if options.pooled {
                let mut all: Vec<f64> = rows.iter().flatten().copied().collect();
                all.sort_by(f64::total_cmp);
                all
            } else {
                let mut out = vec![0.0; n * n_elem];
                out.par_chunks_mut(n).enumerate().for_each(|(i, col)| {
                    for (m, row) in rows.iter().enumerate() {
                        col[m] = row[i];
                    }
                    col.sort_by(f64::total_cmp);
                });
                out
            }
        };
        Ok(Self {
            grid_shape,
            n,
            delta,
            options,
            member_ids,
            lo_scores: gather(lo_rows),
            hi_scores: gather(hi_rows),
        })
    }

    pub fn grid_shape(&self) -> &[usize] {
        &self.grid_shape
    }

    /// Number of calibration members.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Raw-interval miscoverage the scores were computed at.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn options(&self) -> CalibrationOptions {
        self.options
    }

    pub fn member_ids(&self) -> &[u64] {
        &self.member_ids
    }

    /// Length of each score array.
    pub fn scores_per_array(&self) -> usize {
        if self.options.pooled {
            self.lo_scores.len()
        } else {
            self.n
        }
    }

    pub fn element_count(&self) -> usize {
        self.grid_shape.iter().product()
    }

    /// Sorted `(E_lo, E_hi)` arrays for element `i` (the shared pool when pooled).
    pub fn element_scores(&self, i: usize) -> (&[f64], &[f64]) {
        if self.options.pooled {
            (&self.lo_scores, &self.hi_scores)
        } else {
            let s = i * self.n..(i + 1) * self.n;
            (&self.lo_scores[s.clone()], &self.hi_scores[s])
        }
    }

    /// Highest two-sided confidence `1 - a` for which the rank stays within the array.
    pub fn max_attainable_confidence(&self) -> f64 {
        let inv = 1.0 / (self.scores_per_array() as f64 + 1.0);
        match self.options.tails {
            TailAllocation::Split => 1.0 - 2.0 * inv,
            TailAllocation::PerSide => 1.0 - inv,
        }
    }

    pub fn is_attainable(&self, level: MiscoverageLevel) -> bool {
        quantile_rank(self.scores_per_array(), self.options.tails.side_level(level.value())) <= self.scores_per_array()
    }

    /// Coverage band `[lower, upper)` implied by exchangeability for the
    /// two-sided calibrated interval. The two miss events are disjoint, so
    /// each side contributes between `s - 1/(m+1)` and `s` of miscoverage,
    /// where `s` is the per-side level and `m` the score count.
    pub fn coverage_band(&self, level: MiscoverageLevel) -> (f64, f64) {
        let s = self.options.tails.side_level(level.value());
        let lower = (1.0 - 2.0 * s).max(0.0);
        let upper = (1.0 - 2.0 * s + 2.0 / (self.scores_per_array() as f64 + 1.0)).min(1.0);
        (lower, upper)
    }

    /// Rank lookup of the thresholds for every element.
    pub fn quantiles(&self, level: MiscoverageLevel) -> QuantileSet {
        let m = self.scores_per_array();
        let k = quantile_rank(m, self.options.tails.side_level(level.value()));
        let attainable = k <= m;
        let pick = |s: &[f64]| if attainable { s[k - 1] } else { f64::INFINITY };
        let arrays = if self.options.pooled { 1 } else { self.element_count() };
        let (lo, hi) = (0..arrays)
            .map(|i| {
                let (l, h) = self.element_scores(i);
                (pick(l), pick(h))
            })
            .unzip();
        QuantileSet {
            level,
            k,
            attainable,
            lo,
            hi,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(TABLE_KIND);
        c.push(
            b"META",
            PayloadWriter::new()
                .usizes(&self.grid_shape)
                .u64(self.n as u64)
                .f64(self.delta)
                .u64(self.options.pooled as u64)
                .u64(self.options.tails.code()),
        );
        let ids: Vec<usize> = self.member_ids.iter().map(|&i| i as usize).collect();
        c.push(b"MIDS", PayloadWriter::new().usizes(&ids));
        c.push(b"ELO_", PayloadWriter::new().f64s(&self.lo_scores));
        c.push(b"EHI_", PayloadWriter::new().f64s(&self.hi_scores));
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind(TABLE_KIND, path)?;
        let need = |tag: &'static [u8; 4]| {
            c.section(tag)
                .ok_or_else(|| Error::corrupt(path, format!("missing section {}", String::from_utf8_lossy(tag))))
        };
        let mut r = PayloadReader::section(need(b"META")?, path);
        let grid_shape = r.usizes()?;
        let n = r.usize()?;
        let delta = r.f64()?;
        let pooled = r.u64()? != 0;
        let tails =
            TailAllocation::from_code(r.u64()?).ok_or_else(|| Error::corrupt(path, "unknown tail allocation"))?;
        r.finish()?;
        let mut r = PayloadReader::section(need(b"MIDS")?, path);
        let member_ids: Vec<u64> = r.usizes()?.into_iter().map(|i| i as u64).collect();
        r.finish()?;
        let mut r = PayloadReader::section(need(b"ELO_")?, path);
        let lo_scores = r.f64s()?;
        r.finish()?;
        let mut r = PayloadReader::section(need(b"EHI_")?, path);
        let hi_scores = r.f64s()?;
        r.finish()?;

        let n_elem: usize = grid_shape.iter().product();
        let ok = n > 0
            && member_ids.len() == n
            && lo_scores.len() == n * n_elem
            && hi_scores.len() == lo_scores.len()
            && delta > 0.0
            && delta < 1.0;
        if !ok {
            return Err(Error::corrupt(path, "calibration table sizes are inconsistent"));
        }
        let t = Self {
            grid_shape,
            n,
            delta,
            options: CalibrationOptions { pooled, tails },
            member_ids,
            lo_scores,
            hi_scores,
        };
        let arrays = if pooled { 1 } else { n_elem };
        for i in 0..arrays {
            let (l, h) = t.element_scores(i);
            if !(l.windows(2).all(|w| w[0] <= w[1]) && h.windows(2).all(|w| w[0] <= w[1])) {
                return Err(Error::corrupt(path, format!("score array {i} is not sorted")));
            }
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?, path)
    }
}

fn check_disjoint(what: &str, ids: impl IntoIterator<Item = u64>, forbidden: &BTreeSet<u64>) -> Result<()> {
    for id in ids {
        if forbidden.contains(&id) {
            return Err(Error::Split(format!(
                "member {id} of the {what} split was also used earlier in the pipeline; \
                 calibration and evaluation data must be independent of training"
            )));
        }
    }
    Ok(())
}

/// Scores the calibration split of `ds` against `ckpt` at raw miscoverage `delta`.
pub fn build_table(
    ckpt: &Checkpoint,
    ds: &EnsembleDataset,
    delta: f64,
    options: CalibrationOptions,
) -> Result<CalibrationTable> {
    let cal = ds.split(Split::Calibration);
    if cal.is_empty() {
        return Err(Error::EmptySplit("calibration"));
    }
    ds.ensure_split(&cal, Split::Calibration)?;
    let trained: BTreeSet<u64> = ckpt.train_member_ids.iter().copied().collect();
    check_disjoint("calibration", cal.iter().map(|m| m.member_id), &trained)?;
    build_table_from_members(ckpt, &cal, delta, options)
}

/// Table from an explicit member list; split labels are not consulted.
pub fn build_table_from_members(
    ckpt: &Checkpoint,
    members: &[&EnsembleMember],
    delta: f64,
    options: CalibrationOptions,
) -> Result<CalibrationTable> {
    if ckpt.grid_shape().iter().product::<usize>() != members.first().map_or(0, |m| m.field.len()) {
        return Err(Error::Shape("calibration members do not match the model grid".into()));
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = members
        .par_iter()
        .map(|m| {
            let field = ckpt.forward(&m.params)?;
            let raw = raw_intervals(&field, &ckpt.transform, delta)?;
            if m.field.len() != raw.len() {
                return Err(Error::Shape(format!(
                    "member {} does not match the model grid",
                    m.member_id
                )));
            }
            Ok(raw
                .iter()
                .zip(&m.field)
                .map(|(r, &y)| nonconformity_scores(r, y as f64))
                .unzip())
        })
        .collect::<Result<_>>()?;
    let (lo, hi): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    CalibrationTable::from_member_scores(
        ckpt.grid_shape().to_vec(),
        delta,
        options,
        members.iter().map(|m| m.member_id).collect(),
        &lo,
        &hi,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalKind {
    Calibrated,
    Uncalibrated,
}

impl fmt::Display for IntervalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntervalKind::Calibrated => "calibrated",
            IntervalKind::Uncalibrated => "uncalibrated",
        })
    }
}

/// How (element, member) outcomes are summarized into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// All (element, member) pairs pooled.
    Overall,
    /// Median over members of each member's coverage; widths are member means.
    PerMember,
    /// Median over elements of each element's coverage; widths are element means.
    PerElement,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Overall => "overall",
            Aggregation::PerMember => "per-member",
            Aggregation::PerElement => "per-element",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRecord {
    pub level: f64,
    pub kind: IntervalKind,
    pub aggregation: Aggregation,
    pub coverage: f64,
    pub mean_width: f64,
    pub median_width: f64,
    /// Elements whose bounds were clamped for some member, or every element
    /// when the level is unattainable.
    pub flagged_elements: usize,
    pub unattainable: bool,
}

/// Per-element coverage for one (level, kind), row-major over the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageMap {
    pub level: f64,
    pub kind: IntervalKind,
    pub coverage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub grid_shape: Vec<usize>,
    pub n_test: usize,
    pub n_calibration: Option<usize>,
    pub delta: Option<f64>,
    pub records: Vec<CoverageRecord>,
    pub maps: Vec<CoverageMap>,
}

impl CoverageReport {
    pub fn record(&self, level: f64, kind: IntervalKind, aggregation: Aggregation) -> Option<&CoverageRecord> {
        self.records
            .iter()
            .find(|r| r.level == level && r.kind == kind && r.aggregation == aggregation)
    }

    /// One JSON object per record.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>12} {:>12} {:>9} {:>12} {:>12} {:>8}",
            "level", "kind", "aggregation", "coverage", "mean_width", "median_width", "flagged"
        );
        for r in &self.records {
            let _ = writeln!(
                s,
                "{:>8.4} {:>12} {:>12} {:>9.4} {:>12.6} {:>12.6} {:>8}{}",
                r.level,
                r.kind.to_string(),
                r.aggregation.to_string(),
                r.coverage,
                r.mean_width,
                r.median_width,
                r.flagged_elements,
                if r.unattainable { "  (unattainable)" } else { "" }
            );
        }
        s
    }
}

/// Outcome grid for one member under one (level, kind).
struct MemberOutcome {
    covered: Vec<bool>,
    widths: Vec<f64>,
    clamped: Vec<bool>,
}

fn summarize(
    level: MiscoverageLevel,
    kind: IntervalKind,
    outcomes: &[MemberOutcome],
    unattainable: bool,
    records: &mut Vec<CoverageRecord>,
    maps: &mut Vec<CoverageMap>,
) {
    let n_elem = outcomes[0].covered.len();
    let mut elem_hits = vec![0usize; n_elem];
    let mut elem_width = vec![Vec::with_capacity(outcomes.len()); n_elem];
    let mut clamped = vec![false; n_elem];
    let mut member_cov = Vec::with_capacity(outcomes.len());
    let mut member_width = Vec::with_capacity(outcomes.len());
    let mut all_widths = Vec::with_capacity(outcomes.len() * n_elem);
    for o in outcomes {
        let hits = o.covered.iter().filter(|&&c| c).count();
        member_cov.push(hits as f64 / n_elem as f64);
        member_width.push(pairwise_mean(&o.widths));
        for i in 0..n_elem {
            elem_hits[i] += o.covered[i] as usize;
            elem_width[i].push(o.widths[i]);
            clamped[i] |= o.clamped[i];
        }
        all_widths.extend_from_slice(&o.widths);
    }
    let elem_cov: Vec<f64> = elem_hits.iter().map(|&h| h as f64 / outcomes.len() as f64).collect();
    let elem_mean_width: Vec<f64> = elem_width.iter().map(|w| pairwise_mean(w)).collect();
    let flagged = if unattainable {
        n_elem
    } else {
        clamped.iter().filter(|&&c| c).count()
    };
    let total_hits: usize = elem_hits.iter().sum();
    let lv = level.value();
    records.push(CoverageRecord {
        level: lv,
        kind,
        aggregation: Aggregation::Overall,
        coverage: total_hits as f64 / (n_elem * outcomes.len()) as f64,
        mean_width: pairwise_mean(&all_widths),
        median_width: median(&all_widths),
        flagged_elements: flagged,
        unattainable,
    });
    records.push(CoverageRecord {
        level: lv,
        kind,
        aggregation: Aggregation::PerMember,
        coverage: median(&member_cov),
        mean_width: pairwise_mean(&member_width),
        median_width: median(&member_width),
        flagged_elements: flagged,
        unattainable,
    });
    records.push(CoverageRecord {
        level: lv,
        kind,
        aggregation: Aggregation::PerElement,
        coverage: median(&elem_cov),
        mean_width: pairwise_mean(&elem_mean_width),
        median_width: median(&elem_mean_width),
        flagged_elements: flagged,
        unattainable,
    });
    maps.push(CoverageMap {
        level: lv,
        kind,
        coverage: elem_cov,
    });
}

/// Empirical coverage and width on the test split, calibrated (when a table
/// is given) and uncalibrated, for every level.
pub fn coverage_audit(
    ckpt: &Checkpoint,
    table: Option<&CalibrationTable>,
    ds: &EnsembleDataset,
    levels: &[MiscoverageLevel],
) -> Result<CoverageReport> {
    let test = ds.split(Split::Test);
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    ds.ensure_split(&test, Split::Test)?;
    let mut used: BTreeSet<u64> = ckpt.train_member_ids.iter().copied().collect();
    if let Some(t) = table {
        used.extend(t.member_ids().iter().copied());
        if t.grid_shape() != ckpt.grid_shape() {
            return Err(Error::Shape(
                "calibration table grid does not match the checkpoint".into(),
            ));
        }
    }
    check_disjoint("test", test.iter().map(|m| m.member_id), &used)?;
    coverage_audit_members(ckpt, table, &test, levels)
}

/// Audit over an explicit member list; split labels are not consulted.
pub fn coverage_audit_members(
    ckpt: &Checkpoint,
    table: Option<&CalibrationTable>,
    members: &[&EnsembleMember],
    levels: &[MiscoverageLevel],
) -> Result<CoverageReport> {
    if members.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let quantiles: Vec<QuantileSet> = table
        .map(|t| levels.iter().map(|&l| t.quantiles(l)).collect())
        .unwrap_or_default();

    // Per member: calibrated outcomes per level, then uncalibrated per level.
    let per_member: Vec<(Vec<MemberOutcome>, Vec<MemberOutcome>)> = members
        .par_iter()
        .map(|m| {
            let field = ckpt.forward(&m.params)?;
            let truth = m.field_f64();
            if truth.len() != field.len() {
                return Err(Error::Shape(format!(
                    "member {} does not match the model grid",
                    m.member_id
                )));
            }
            let mut cal = Vec::new();
            if let Some(t) = table {
                let raw = raw_intervals(&field, &ckpt.transform, t.delta())?;
                for q in &quantiles {
                    let mut o = MemberOutcome {
                        covered: Vec::with_capacity(raw.len()),
                        widths: Vec::with_capacity(raw.len()),
                        clamped: Vec::with_capacity(raw.len()),
                    };
                    for (i, (r, &y)) in raw.iter().zip(&truth).enumerate() {
                        let (ql, qh) = q.at(i);
                        let c = calibrate(r, ql, qh, q.level);
                        o.covered.push(c.contains(y));
                        o.widths.push(c.width());
                        o.clamped.push(c.clamped);
                    }
                    cal.push(o);
                }
            }
            let mut uncal = Vec::new();
            for &l in levels {
                let raw = raw_intervals(&field, &ckpt.transform, l.value())?;
                uncal.push(MemberOutcome {
                    covered: raw.iter().zip(&truth).map(|(r, &y)| r.contains(y)).collect(),
                    widths: raw.iter().map(|r| r.width()).collect(),
                    clamped: vec![false; raw.len()],
                });
            }
            Ok((cal, uncal))
        })
        .collect::<Result<_>>()?;

    let mut cal_levels: Vec<Vec<MemberOutcome>> = levels.iter().map(|_| Vec::with_capacity(members.len())).collect();
    let mut uncal_levels: Vec<Vec<MemberOutcome>> = levels.iter().map(|_| Vec::with_capacity(members.len())).collect();
    for (cal, uncal) in per_member {
        for (j, o) in cal.into_iter().enumerate() {
            cal_levels[j].push(o);
        }
        for (j, o) in uncal.into_iter().enumerate() {
            uncal_levels[j].push(o);
        }
    }
    let mut records = Vec::new();
    let mut maps = Vec::new();
    for (j, &level) in levels.iter().enumerate() {
        if table.is_some() {
            let unattainable = !quantiles[j].attainable;
            summarize(
                level,
                IntervalKind::Calibrated,
                &cal_levels[j],
                unattainable,
                &mut records,
                &mut maps,
            );
        }
        summarize(
            level,
            IntervalKind::Uncalibrated,
            &uncal_levels[j],
            false,
            &mut records,
            &mut maps,
        );
    }

    Ok(CoverageReport {
        grid_shape: ckpt.grid_shape().to_vec(),
        n_test: members.len(),
        n_calibration: table.map(|t| t.n()),
        delta: table.map(|t| t.delta()),
        records,
        maps,
    })
}
