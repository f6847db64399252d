//! Cell metrics, deviation scores and the dummy-coded OLS regression.
//!
//! Deviation samples are kept in hundredths of a dollar as integers, so
//! every sample is exact and cell means need a single division.

use crate::game::{Stake, Verdict};
use crate::orchestrator::{CellKey, Transcript};
use crate::profile::{Belief, ReasoningMethod, Role, UnknownName};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Marks an undefined deviation mean (no samples).
pub const SENTINEL: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("cell {0} has no valid games")]
    EmptyCell(String),
    #[error("transcripts from more than one cell: {0} and {1}")]
    MixedCells(String, String),
    #[error("invalid expectation interval for {0}")]
    InvalidInterval(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectationVariant {
    PointwiseFair,
    RangeFair,
    /// Point targets that reproduce all six worked transcript cases.
    CaseCalibrated,
}

impl ExpectationVariant {
    pub const ALL: [ExpectationVariant; 3] = [
        ExpectationVariant::PointwiseFair,
        ExpectationVariant::RangeFair,
        ExpectationVariant::CaseCalibrated,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ExpectationVariant::PointwiseFair => "pointwise-fair",
            ExpectationVariant::RangeFair => "range-fair",
            ExpectationVariant::CaseCalibrated => "case-calibrated",
        }
    }
}

impl fmt::Display for ExpectationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ExpectationVariant {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExpectationVariant::ALL
            .into_iter()
            .find(|v| v.key().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownName::new("expectation variant", s))
    }
}

/// One end of an expected-share interval, in percent of the stake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bound {
    pub percent: u32,
    pub open: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareInterval {
    pub lower: Bound,
    pub upper: Bound,
}

impl ShareInterval {
    pub const fn closed(lo: u32, hi: u32) -> Self {
        ShareInterval {
            lower: Bound { percent: lo, open: false },
            upper: Bound { percent: hi, open: false },
        }
    }

    pub const fn open(lo: u32, hi: u32) -> Self {
        ShareInterval {
            lower: Bound { percent: lo, open: true },
            upper: Bound { percent: hi, open: true },
        }
    }

    pub const fn point(p: u32) -> Self {
        ShareInterval::closed(p, p)
    }

    pub fn is_valid(&self) -> bool {
        let ordered = if self.lower.open || self.upper.open {
            self.lower.percent < self.upper.percent
        } else {
            self.lower.percent <= self.upper.percent
        };
        ordered && self.upper.percent <= 100
    }

    /// Distance from a dollar share to the interval, in hundredths of a
    /// dollar. Zero inside; open ends are measured to the bound value.
    pub fn distance_hundredths(&self, share: u64, stake: Stake) -> u64 {
        let s = share * 100;
        let lo = u64::from(self.lower.percent) * stake.total();
        let hi = u64::from(self.upper.percent) * stake.total();
        lo.saturating_sub(s).max(s.saturating_sub(hi))
    }

    pub fn contains(&self, share: u64, stake: Stake) -> bool {
        let s = share * 100;
        let lo = u64::from(self.lower.percent) * stake.total();
        let hi = u64::from(self.upper.percent) * stake.total();
        let above = if self.lower.open { s > lo } else { s >= lo };
        let below = if self.upper.open { s < hi } else { s <= hi };
        above && below
    }
}

impl fmt::Display for ShareInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lower == self.upper {
            return write!(f, "{}%", self.lower.percent);
        }
        write!(
            f,
            "{}{}%, {}%{}",
            if self.lower.open { '(' } else { '[' },
            self.lower.percent,
            self.upper.percent,
            if self.upper.open { ')' } else { ']' }
        )
    }
}

/// Expected kept share per role and belief, as a fraction of the stake.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectationTable {
    pub variant: ExpectationVariant,
    /// Indexed Greedy, Fair, Selfless.
    pub proposer: [ShareInterval; 3],
    pub responder: [ShareInterval; 3],
}

impl ExpectationTable {
    pub fn new(variant: ExpectationVariant) -> Self {
        let mut table = ExpectationTable {
            variant,
            proposer: [
                ShareInterval::closed(70, 100),
                ShareInterval::point(50),
                ShareInterval::closed(0, 30),
            ],
            responder: [
                ShareInterval::closed(60, 100),
                ShareInterval::point(50),
                ShareInterval::closed(0, 40),
            ],
        };
        match variant {
            ExpectationVariant::PointwiseFair => {}
            ExpectationVariant::RangeFair => {
                table.proposer[1] = ShareInterval::open(30, 70);
                table.responder[1] = ShareInterval::open(40, 60);
            }
            ExpectationVariant::CaseCalibrated => {
                table.proposer[2] = ShareInterval::point(20);
                table.responder[0] = ShareInterval::point(70);
            }
        }
        table
    }

    pub fn interval(&self, role: Role, belief: Belief) -> ShareInterval {
        let i = match belief {
            Belief::Greedy => 0,
            Belief::Fair => 1,
            Belief::Selfless => 2,
        };
        match role {
            Role::Proposer => self.proposer[i],
            Role::Responder => self.responder[i],
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        for role in [Role::Proposer, Role::Responder] {
            for belief in Belief::ALL {
                if !self.interval(role, belief).is_valid() {
                    return Err(AnalysisError::InvalidInterval(format!("{role} {belief}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub cell: CellKey,
    /// Percent of valid games ending in Accept.
    pub ac: f64,
    pub avg_turns: f64,
    pub payout_proposer: u64,
    pub payout_responder: u64,
    pub accepted_games: u32,
    pub valid_games: u32,
    pub invalid_games: u32,
    pub retries: u32,
}

fn single_cell<'a>(transcripts: &[&'a Transcript]) -> Result<&'a CellKey, AnalysisError> {
    let first = &transcripts
        .first()
        .ok_or_else(|| AnalysisError::EmptyCell("(none)".into()))?
        .cell;
    if let Some(other) = transcripts.iter().find(|t| &t.cell != first) {
        return Err(AnalysisError::MixedCells(first.to_string(), other.cell.to_string()));
    }
    Ok(first)
}

fn valid_games<'a>(transcripts: &[&'a Transcript]) -> Result<Vec<&'a Transcript>, AnalysisError> {
    let cell = single_cell(transcripts)?;
    let valid: Vec<&Transcript> = transcripts.iter().copied().filter(|t| t.valid).collect();
    if valid.is_empty() {
        return Err(AnalysisError::EmptyCell(cell.to_string()));
    }
    Ok(valid)
}

/// Percent of valid games ending in Accept.
pub fn acceptance_rate(transcripts: &[&Transcript]) -> Result<f64, AnalysisError> {
    let valid = valid_games(transcripts)?;
    let accepted = valid.iter().filter(|t| t.accepted()).count();
    Ok(100.0 * accepted as f64 / valid.len() as f64)
}

/// Summed accepted splits; exhausted games contribute nothing.
pub fn payouts(transcripts: &[&Transcript]) -> Result<(u64, u64), AnalysisError> {
    let valid = valid_games(transcripts)?;
    Ok(valid.iter().fold((0, 0), |(p, r), t| {
        (p + t.payout.proposer, r + t.payout.responder)
    }))
}

pub fn cell_metrics(transcripts: &[&Transcript]) -> Result<CellMetrics, AnalysisError> {
    let valid = valid_games(transcripts)?;
    let (payout_proposer, payout_responder) = payouts(transcripts)?;
    let turns: u64 = valid.iter().map(|t| u64::from(t.rounds_played())).sum();
    Ok(CellMetrics {
        cell: valid[0].cell.clone(),
        ac: acceptance_rate(transcripts)?,
        avg_turns: turns as f64 / valid.len() as f64,
        payout_proposer,
        payout_responder,
        accepted_games: valid.iter().filter(|t| t.accepted()).count() as u32,
        valid_games: valid.len() as u32,
        invalid_games: (transcripts.len() - valid.len()) as u32,
        retries: transcripts
            .iter()
            .map(|t| t.retries.proposal + t.retries.decision)
            .sum(),
    })
}

/// Deviation samples of one game, in hundredths of a dollar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameDeviation {
    pub game_index: u32,
    pub p: u64,
    pub r_a: Option<u64>,
    pub r_r: Vec<u64>,
}

pub fn game_deviation(t: &Transcript, table: &ExpectationTable) -> Option<GameDeviation> {
    if !t.valid || t.rounds.is_empty() {
        return None;
    }
    let stake = t.config.stake;
    let proposer = table.interval(Role::Proposer, t.cell.proposer_belief);
    let responder = table.interval(Role::Responder, t.cell.responder_belief);
    let mut r_a = None;
    let mut r_r = Vec::new();
    for round in &t.rounds {
        let share = round.offer().responder_share;
        match round.verdict() {
            Verdict::Accept => r_a = Some(responder.distance_hundredths(share, stake)),
            Verdict::Reject => r_r.push(responder.distance_hundredths(share, stake)),
        }
    }
    Some(GameDeviation {
        game_index: t.game_index,
        p: proposer.distance_hundredths(t.rounds[0].offer().proposer_share, stake),
        r_a,
        r_r,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub cell: CellKey,
    pub variant: ExpectationVariant,
    /// Mean round-1 proposer deviation, dollars.
    pub p: f64,
    /// Mean accepted-share deviation, dollars, or -1 with no accepted game.
    pub r_a: f64,
    /// Mean over rejection events, dollars, or -1 with no rejection.
    pub r_r: f64,
    /// Mean over games with at least one rejection of each game's mean.
    pub r_r_per_game: f64,
    pub p_samples: u32,
    pub r_a_samples: u32,
    pub r_r_samples: u32,
    pub r_r_games: u32,
}

fn mean_hundredths(sum: u64, n: usize) -> f64 {
    if n == 0 {
        SENTINEL
    } else {
        sum as f64 / (100 * n) as f64
    }
}

pub fn deviation_scores(
    transcripts: &[&Transcript],
    table: &ExpectationTable,
) -> Result<DeviationReport, AnalysisError> {
    let valid = valid_games(transcripts)?;
    let games: Vec<GameDeviation> = valid.iter().filter_map(|t| game_deviation(t, table)).collect();
    let p: Vec<u64> = games.iter().map(|g| g.p).collect();
    let r_a: Vec<u64> = games.iter().filter_map(|g| g.r_a).collect();
    let r_r: Vec<u64> = games.iter().flat_map(|g| g.r_r.iter().copied()).collect();
    let per_game: Vec<f64> = games
        .iter()
        .filter(|g| !g.r_r.is_empty())
        .map(|g| mean_hundredths(g.r_r.iter().sum(), g.r_r.len()))
        .collect();
    Ok(DeviationReport {
        cell: valid[0].cell.clone(),
        variant: table.variant,
        p: mean_hundredths(p.iter().sum(), p.len()),
        r_a: mean_hundredths(r_a.iter().sum(), r_a.len()),
        r_r: mean_hundredths(r_r.iter().sum(), r_r.len()),
        r_r_per_game: if per_game.is_empty() {
            SENTINEL
        } else {
            per_game.iter().sum::<f64>() / per_game.len() as f64
        },
        p_samples: p.len() as u32,
        r_a_samples: r_a.len() as u32,
        r_r_samples: r_r.len() as u32,
        r_r_games: per_game.len() as u32,
    })
}

/// Deviation scores under range-based Fair expectations.
pub fn sensitivity_variant(transcripts: &[&Transcript]) -> Result<DeviationReport, AnalysisError> {
    deviation_scores(transcripts, &ExpectationTable::new(ExpectationVariant::RangeFair))
}

/// Groups transcripts by cell, keeping game order within each cell.
pub fn group_by_cell(transcripts: &[Transcript]) -> BTreeMap<CellKey, Vec<&Transcript>> {
    let mut cells: BTreeMap<CellKey, Vec<&Transcript>> = BTreeMap::new();
    for t in transcripts {
        cells.entry(t.cell.clone()).or_default().push(t);
    }
    for games in cells.values_mut() {
        games.sort_by_key(|t| t.game_index);
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub metrics: Vec<CellMetrics>,
    pub deviations: BTreeMap<ExpectationVariant, Vec<DeviationReport>>,
    /// Cells where every game was invalid, with their game count.
    pub empty_cells: Vec<(CellKey, u32)>,
}

pub fn analyze(transcripts: &[Transcript], variants: &[ExpectationVariant]) -> RunAnalysis {
    let mut analysis = RunAnalysis {
        metrics: Vec::new(),
        deviations: variants.iter().map(|&v| (v, Vec::new())).collect(),
        empty_cells: Vec::new(),
    };
    for (cell, games) in group_by_cell(transcripts) {
        match cell_metrics(&games) {
            Ok(m) => analysis.metrics.push(m),
            Err(_) => {
                analysis.empty_cells.push((cell, games.len() as u32));
                continue;
            }
        }
        for (&variant, reports) in analysis.deviations.iter_mut() {
            let table = ExpectationTable::new(variant);
            reports.push(deviation_scores(&games, &table).expect("cell has valid games"));
        }
    }
    analysis
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dependent {
    #[serde(rename = "P")]
    P,
    #[serde(rename = "R_A")]
    RA,
    #[serde(rename = "R_R")]
    RR,
}

impl Dependent {
    pub const ALL: [Dependent; 3] = [Dependent::P, Dependent::RA, Dependent::RR];

    pub fn label(self) -> &'static str {
        match self {
            Dependent::P => "P",
            Dependent::RA => "R_A",
            Dependent::RR => "R_R",
        }
    }

    pub fn of(self, report: &DeviationReport) -> f64 {
        match self {
            Dependent::P => report.p,
            Dependent::RA => report.r_a,
            Dependent::RR => report.r_r,
        }
    }
}

impl fmt::Display for Dependent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Dependent {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "p" => Ok(Dependent::P),
            "r_a" | "ra" => Ok(Dependent::RA),
            "r_r" | "rr" => Ok(Dependent::RR),
            _ => Err(UnknownName::new("dependent variable", s)),
        }
    }
}

pub const FACTORS: [&str; 4] = ["Model", "Reasoning", "Proposer Belief", "Responder Belief"];

/// One observation: a deviation value and the level of each factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub value: f64,
    pub model: String,
    pub reasoning: String,
    pub proposer_belief: String,
    pub responder_belief: String,
}

impl RegressionRow {
    pub fn levels(&self) -> [&str; 4] {
        [
            &self.model,
            &self.reasoning,
            &self.proposer_belief,
            &self.responder_belief,
        ]
    }

    fn from_cell(cell: &CellKey, value: f64) -> Self {
        RegressionRow {
            value,
            model: cell.model.clone(),
            reasoning: cell.reasoning_label(),
            proposer_belief: cell.proposer_belief.label().to_string(),
            responder_belief: cell.responder_belief.label().to_string(),
        }
    }
}

/// One row per cell.
pub fn cell_rows(reports: &[DeviationReport], dependent: Dependent) -> Vec<RegressionRow> {
    reports
        .iter()
        .map(|r| RegressionRow::from_cell(&r.cell, dependent.of(r)))
        .collect()
}

/// One row per game (R_R uses each game's mean over its rejections).
pub fn game_rows(
    transcripts: &[Transcript],
    table: &ExpectationTable,
    dependent: Dependent,
) -> Vec<RegressionRow> {
    transcripts
        .iter()
        .filter_map(|t| {
            let g = game_deviation(t, table)?;
            let value = match dependent {
                Dependent::P => mean_hundredths(g.p, 1),
                Dependent::RA => g.r_a.map_or(SENTINEL, |v| mean_hundredths(v, 1)),
                Dependent::RR => mean_hundredths(g.r_r.iter().sum(), g.r_r.len()),
            };
            Some(RegressionRow::from_cell(&t.cell, value))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressionError {
    #[error("insufficient observations: {n} usable rows for {k} design columns")]
    InsufficientObservations { n: usize, k: usize },
    #[error("rank-deficient design: column `{0}` is collinear with earlier columns")]
    RankDeficient(String),
    #[error("non-finite value in regression input")]
    NonFinite,
}

/// Reference levels per factor. `None` for the model picks the first
/// level mentioning "distill", else the first level in sort order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignSpec {
    pub reference_model: Option<String>,
    pub reference_reasoning: String,
    pub reference_proposer_belief: String,
    pub reference_responder_belief: String,
    /// Levels each factor is declared to have. Declared levels that never
    /// occur give all-zero columns.
    pub declared_levels: [Option<Vec<String>>; 4],
}

impl Default for DesignSpec {
    fn default() -> Self {
        DesignSpec {
            reference_model: None,
            reference_reasoning: ReasoningMethod::Cot.label().to_string(),
            reference_proposer_belief: Belief::Fair.label().to_string(),
            reference_responder_belief: Belief::Fair.label().to_string(),
            declared_levels: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    /// `None` for the intercept.
    pub factor: Option<String>,
    pub level: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t: f64,
    pub p: f64,
}

impl Term {
    pub fn marker(&self) -> &'static str {
        significance_marker(self.p)
    }
}

/// `∗` for p < 0.01, `†` for p < 0.05.
pub fn significance_marker(p: f64) -> &'static str {
    if p < 0.01 {
        "∗"
    } else if p < 0.05 {
        "†"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub dependent: Dependent,
    pub n: usize,
    pub k: usize,
    pub df: usize,
    pub r_squared: f64,
    pub rss: f64,
    pub sigma2: f64,
    pub intercept: Term,
    pub terms: Vec<Term>,
    /// (factor, reference level) for every factor kept in the design.
    pub references: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl RegressionResult {
    pub fn term(&self, factor: &str, level: &str) -> Option<&Term> {
        self.terms
            .iter()
            .find(|t| t.factor.as_deref() == Some(factor) && t.level == level)
    }
}

/// Raw least-squares fit of `y` on the columns of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub beta: DVector<f64>,
    pub std_errors: DVector<f64>,
    pub t: DVector<f64>,
    pub p: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rss: f64,
    pub tss: f64,
    pub sigma2: f64,
    pub df: usize,
}

impl OlsFit {
    pub fn r_squared(&self) -> f64 {
        if self.tss == 0.0 {
            if self.rss == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 - self.rss / self.tss
        }
    }
}

const RANK_TOLERANCE: f64 = 1e-10;

/// Solves least squares through a QR factorisation; standard errors come
/// from sigma^2 (X'X)^-1 with sigma^2 = RSS / (n - k), p-values are two-sided
/// Student t with n - k degrees of freedom.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<OlsFit, RegressionError> {
    let (n, k) = x.shape();
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(RegressionError::NonFinite);
    }
    if n <= k {
        return Err(RegressionError::InsufficientObservations { n, k });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..k)
        .map(|j| x.column(j).norm())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for j in 0..k {
        if r[(j, j)].abs() <= RANK_TOLERANCE * scale {
            let name = names.get(j).cloned().unwrap_or_else(|| format!("#{j}"));
            return Err(RegressionError::RankDeficient(name));
        }
    }
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .expect("triangular factor has a nonzero diagonal");
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .expect("triangular factor has a nonzero diagonal");
    let xtx_inv = &r_inv * r_inv.transpose();

    let residuals = y - x * &beta;
    let rss = residuals.norm_squared();
    let mean = y.mean();
    let tss = y.iter().map(|v| (v - mean).powi(2)).sum();
    let df = n - k;
    let sigma2 = rss / df as f64;
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    let std_errors = DVector::from_iterator(k, (0..k).map(|j| (sigma2 * xtx_inv[(j, j)]).sqrt()));
    let t = beta.component_div(&std_errors);
    let p = t.map(|t| if t.is_nan() { f64::NAN } else { 2.0 * dist.sf(t.abs()) });
    Ok(OlsFit {
        beta,
        std_errors,
        t,
        p,
        residuals,
        rss,
        tss,
        sigma2,
        df,
    })
}

const REASONING_ORDER: [&str; 5] = ["Vanilla", "CoT", "ToM Zero", "ToM First", "ToM Both"];
const BELIEF_ORDER: [&str; 3] = ["Greedy", "Fair", "Selfless"];

fn level_rank(factor: usize, level: &str) -> usize {
    let order: &[&str] = match factor {
        1 => &REASONING_ORDER,
        2 | 3 => &BELIEF_ORDER,
        _ => &[],
    };
    order.iter().position(|l| *l == level).unwrap_or(order.len())
}

fn sorted_levels(factor: usize, levels: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut v: Vec<String> = levels.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    v.sort_by(|a, b| level_rank(factor, a).cmp(&level_rank(factor, b)).then(a.cmp(b)));
    v
}

/// Fits `DS = Model + Reasoning + ProposerBelief + ResponderBelief` with
/// one indicator column per non-reference level.
///
/// Rows whose value is the -1 sentinel are dropped for R_A and R_R. A factor
/// seen at a single level, and not declared with more, is left out with a
/// warning.
pub fn fit_ols(
    rows: &[RegressionRow],
    dependent: Dependent,
    spec: &DesignSpec,
) -> Result<RegressionResult, RegressionError> {
    let rows: Vec<&RegressionRow> = rows
        .iter()
        .filter(|r| dependent == Dependent::P || r.value != SENTINEL)
        .collect();
    let mut warnings = Vec::new();
    let mut columns: Vec<(usize, String)> = Vec::new();
    let mut references = Vec::new();
    for (f, name) in FACTORS.iter().enumerate() {
        let observed: BTreeSet<String> = rows.iter().map(|r| r.levels()[f].to_string()).collect();
        let levels = match &spec.declared_levels[f] {
            Some(declared) => sorted_levels(f, declared.iter().cloned().chain(observed.iter().cloned())),
            None => sorted_levels(f, observed.iter().cloned()),
        };
        if levels.len() < 2 {
            if !rows.is_empty() {
                warnings.push(format!("{name} has a single level; dropped from the design"));
            }
            continue;
        }
        let wanted = match f {
            0 => spec.reference_model.clone().or_else(|| {
                levels
                    .iter()
                    .find(|l| l.to_ascii_lowercase().contains("distill"))
                    .cloned()
            }),
            1 => Some(spec.reference_reasoning.clone()),
            2 => Some(spec.reference_proposer_belief.clone()),
            _ => Some(spec.reference_responder_belief.clone()),
        };
        let reference = match wanted {
            Some(w) if levels.contains(&w) => w,
            Some(w) => {
                warnings.push(format!(
                    "{name} reference `{w}` not present; using `{}`",
                    levels[0]
                ));
                levels[0].clone()
            }
            None => levels[0].clone(),
        };
        for level in levels.iter().filter(|l| **l != reference) {
            columns.push((f, level.clone()));
        }
        references.push((name.to_string(), reference));
    }

    let n = rows.len();
    let k = columns.len() + 1;
    let x = DMatrix::from_fn(n, k, |i, j| {
        if j == 0 {
            1.0
        } else {
            let (f, level) = &columns[j - 1];
            f64::from(rows[i].levels()[*f] == level.as_str())
        }
    });
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.value));
    let names: Vec<String> = std::iter::once("Intercept".to_string())
        .chain(columns.iter().map(|(f, l)| format!("{}: {l}", FACTORS[*f])))
        .collect();
    let fit = ols(&x, &y, &names)?;

    let term = |j: usize| Term {
        factor: (j > 0).then(|| FACTORS[columns[j - 1].0].to_string()),
        level: if j == 0 {
            "Intercept".to_string()
        } else {
            columns[j - 1].1.clone()
        },
        estimate: fit.beta[j],
        std_error: fit.std_errors[j],
        t: fit.t[j],
        p: fit.p[j],
    };
    Ok(RegressionResult {
        dependent,
        n,
        k,
        df: fit.df,
        r_squared: fit.r_squared(),
        rss: fit.rss,
        sigma2: fit.sigma2,
        intercept: term(0),
        terms: (1..k).map(term).collect(),
        references,
        warnings,
    })
}
