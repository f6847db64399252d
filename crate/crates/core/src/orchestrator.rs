//! Running games and experiment grids.
//!
//! Each round follows the same order: proposer reasoning (unless Vanilla),
//! proposal, the offer is relayed to the responder, responder reasoning
//! (unless Vanilla), decision, the verdict is relayed back. Agents keep one
//! growing session per game. Only the harness-rendered public line of the
//! counterpart's move ever crosses between sessions; reasoning and strategy
//! indices stay with their author.

use crate::backend::{Author, BackendConfig, BackendError, ChatBackend, ChatMessage, Purpose};
use crate::game::{GameError, GameState, GameStatus, Offer, Payout, Stake, Verdict};
use crate::profile::{AgentProfile, Belief, ReasoningMethod, Role, TemplateSet};
use crate::protocol::{parse_with_retry, protocol_line, Action, ActionKind, FailedAttempt, ParsedAction, RetryError};
use crate::store::TranscriptStore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

pub const HARNESS_VERSION: &str = concat!("ugsim ", env!("CARGO_PKG_VERSION"));

/// Default number of re-prompts after a malformed action reply.
pub const DEFAULT_MAX_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid game configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSetup {
    pub profile: AgentProfile,
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub stake: Stake,
    pub max_rounds: u32,
    pub proposer: AgentSetup,
    pub responder: AgentSetup,
    pub seed: u64,
    pub max_retries: u32,
    pub template_checksum: String,
    /// The strategy menu is part of every action prompt, every round.
    pub menu_every_round: bool,
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.proposer.profile.role != Role::Proposer {
            return Err(RunError::InvalidConfig(
                "proposer profile must have the proposer role".into(),
            ));
        }
        if self.responder.profile.role != Role::Responder {
            return Err(RunError::InvalidConfig(
                "responder profile must have the responder role".into(),
            ));
        }
        GameState::new(self.stake, self.max_rounds)?;
        Ok(())
    }
}

/// Identifies one experiment condition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub proposer_belief: Belief,
    pub responder_belief: Belief,
    pub proposer_reasoning: ReasoningMethod,
    pub responder_reasoning: ReasoningMethod,
}

impl CellKey {
    pub fn is_symmetric(&self) -> bool {
        self.proposer_reasoning == self.responder_reasoning
    }

    /// `Greedy-Fair`
    pub fn belief_pair_label(&self) -> String {
        format!("{}-{}", self.proposer_belief, self.responder_belief)
    }

    /// `ToM First`, or `CoT/Vanilla` for asymmetric cells.
    pub fn reasoning_label(&self) -> String {
        if self.is_symmetric() {
            self.proposer_reasoning.label().to_string()
        } else {
            format!(
                "{}/{}",
                self.proposer_reasoning.label(),
                self.responder_reasoning.label()
            )
        }
    }

    /// File stem for this cell's transcripts.
    pub fn file_stem(&self) -> String {
        let model: String = self
            .model
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect();
        format!(
            "{model}__{}-{}__{}-{}",
            self.proposer_belief.word(),
            self.responder_belief.word(),
            self.proposer_reasoning.key(),
            self.responder_reasoning.key()
        )
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}",
            self.model,
            self.belief_pair_label(),
            self.reasoning_label()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    ProposerReasoning,
    Proposal,
    ResponderReasoning,
    Decision,
}

/// Wall-clock placement of one pipeline step, relative to game start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTiming {
    pub round: u32,
    pub step: Step,
    pub start_us: u64,
    pub duration_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Private to the proposer.
    pub proposer_reasoning: Option<String>,
    /// Offer is public; strategy index and raw text are private.
    pub proposal: ParsedAction,
    pub responder_reasoning: Option<String>,
    pub decision: ParsedAction,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub proposal_failures: Vec<FailedAttempt>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub decision_failures: Vec<FailedAttempt>,
}

impl RoundRecord {
    pub fn offer(&self) -> Offer {
        self.proposal.offer().expect("proposal carries an offer")
    }

    pub fn verdict(&self) -> Verdict {
        self.decision.verdict().expect("decision carries a verdict")
    }
}

/// Why a game was excluded from metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolViolation {
    pub round: u32,
    pub kind: ActionKind,
    pub attempts: Vec<FailedAttempt>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryCounts {
    pub proposal: u32,
    pub decision: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub cell: CellKey,
    pub game_index: u32,
    pub config: GameConfig,
    pub rounds: Vec<RoundRecord>,
    #[serde(flatten)]
    pub terminal: GameStatus,
    pub payout: Payout,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<ProtocolViolation>,
    pub retries: RetryCounts,
    pub timing: Vec<StepTiming>,
    pub template_checksum: String,
    pub harness_version: String,
}

impl Transcript {
    /// Completed rounds, |G|.
    pub fn rounds_played(&self) -> u32 {
        self.rounds.len() as u32
    }

    pub fn accepted(&self) -> bool {
        matches!(self.terminal, GameStatus::AcceptedAtRound { .. })
    }

    /// Replays the recorded rounds through a fresh game state.
    pub fn replay(&self) -> Result<GameState, GameError> {
        GameState::replay(
            self.config.stake,
            self.config.max_rounds,
            self.rounds.iter().map(|r| (r.offer(), r.verdict())),
        )
    }

    /// Copy with run-dependent fields (wall-clock timing) cleared.
    pub fn canonical(&self) -> Transcript {
        Transcript {
            timing: Vec::new(),
            ..self.clone()
        }
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(&self.canonical()).expect("transcript serializes")
    }

    /// Builds a valid transcript from explicit rounds, without any backend.
    /// Play stops at the first Accept; later rounds are ignored.
    pub fn from_rounds(
        cell: CellKey,
        game_index: u32,
        stake: Stake,
        max_rounds: u32,
        rounds: &[(Offer, Verdict)],
    ) -> Result<Transcript, GameError> {
        let mut state = GameState::new(stake, max_rounds)?;
        let mut records = Vec::new();
        for &(offer, verdict) in rounds {
            if state.status().is_terminal() {
                break;
            }
            let round = state.round_index();
            state = state.apply_round(offer, verdict)?;
            let proposal = Action::Proposal { offer };
            let decision = Action::Decision { verdict };
            records.push(RoundRecord {
                round,
                proposer_reasoning: None,
                proposal: ParsedAction {
                    action: proposal,
                    strategy_index: 1,
                    raw_text: protocol_line(proposal, 1),
                },
                responder_reasoning: None,
                decision: ParsedAction {
                    action: decision,
                    strategy_index: 1,
                    raw_text: protocol_line(decision, 1),
                },
                proposal_failures: Vec::new(),
                decision_failures: Vec::new(),
            });
        }
        let payout = state.settle()?;
        let backend = BackendConfig::oracle(cell.model.clone(), "fair-fair", 0);
        let config = GameConfig {
            stake,
            max_rounds,
            proposer: AgentSetup {
                profile: AgentProfile::new(Role::Proposer, cell.proposer_belief, cell.proposer_reasoning),
                backend: backend.clone(),
            },
            responder: AgentSetup {
                profile: AgentProfile::new(Role::Responder, cell.responder_belief, cell.responder_reasoning),
                backend,
            },
            seed: 0,
            max_retries: DEFAULT_MAX_RETRIES,
            template_checksum: TemplateSet::builtin().checksum().to_string(),
            menu_every_round: true,
        };
        Ok(Transcript {
            cell,
            game_index,
            config,
            rounds: records,
            terminal: state.status(),
            payout,
            valid: true,
            violation: None,
            retries: RetryCounts::default(),
            timing: Vec::new(),
            template_checksum: TemplateSet::builtin().checksum().to_string(),
            harness_version: HARNESS_VERSION.to_string(),
        })
    }
}

/// A finished game together with both agents' final sessions.
#[derive(Debug, Clone)]
pub struct GameRun {
    pub transcript: Transcript,
    pub proposer_session: Vec<ChatMessage>,
    pub responder_session: Vec<ChatMessage>,
}

impl GameRun {
    /// Lists every place where one agent's private content shows up in the
    /// other agent's session, by plain substring search over the serialized
    /// session. Text the viewer itself wrote verbatim is not counted. Every
    /// relayed message must be exactly the public line of a counterpart move.
    pub fn privacy_violations(&self) -> Vec<String> {
        let mut found = Vec::new();
        for (viewer, session) in [
            (Role::Proposer, &self.proposer_session),
            (Role::Responder, &self.responder_session),
        ] {
            let other = viewer.counterpart();
            let visible = |secret: &str| {
                let shown: Vec<&ChatMessage> = session
                    .iter()
                    .filter(|m| !(m.author == Author::Agent && m.text == secret))
                    .collect();
                let serialized = serde_json::to_string(&shown).expect("session serializes");
                !secret.is_empty() && serialized.contains(&json_escape(secret))
            };
            let mut public_lines = Vec::new();
            for round in &self.transcript.rounds {
                let (reasoning, action) = match other {
                    Role::Proposer => (&round.proposer_reasoning, &round.proposal),
                    Role::Responder => (&round.responder_reasoning, &round.decision),
                };
                if reasoning.as_deref().is_some_and(visible) {
                    found.push(format!("{viewer} sees {other} reasoning of round {}", round.round));
                }
                if visible(&action.raw_text) {
                    found.push(format!("{viewer} sees raw {other} reply of round {}", round.round));
                }
                public_lines.push(format!("{}: {}", other.display_name(), action.public_line()));
            }
            for msg in session.iter().filter(|m| m.purpose == Purpose::Relay) {
                if !public_lines.contains(&msg.text) || msg.text.to_ascii_lowercase().contains("strateg") {
                    found.push(format!("{viewer} receives `{}`", msg.text));
                }
            }
        }
        found
    }
}

fn json_escape(text: &str) -> String {
    let quoted = serde_json::to_string(text).expect("string serializes");
    quoted[1..quoted.len() - 1].to_string()
}

/// Stable 64-bit seed from labelled parts.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn call_seed(game_seed: u64, round: u32, step: Step) -> u64 {
    derive_seed(&[
        &game_seed.to_le_bytes(),
        &round.to_le_bytes(),
        &[step as u8],
    ])
}

struct Clock(Instant);

impl Clock {
    fn time<T>(&self, round: u32, step: Step, log: &mut Vec<StepTiming>, f: impl FnOnce() -> T) -> T {
        let start = self.0.elapsed();
        let out = f();
        let end = self.0.elapsed();
        log.push(StepTiming {
            round,
            step,
            start_us: start.as_micros() as u64,
            duration_us: (end - start).as_micros() as u64,
        });
        out
    }
}

fn reason(
    session: &mut Vec<ChatMessage>,
    backend: &dyn ChatBackend,
    prompt: &Option<String>,
    seed: u64,
) -> Result<Option<String>, BackendError> {
    let Some(prompt) = prompt else {
        return Ok(None);
    };
    let owner = session[0].owner;
    session.push(ChatMessage::new(owner, Purpose::ReasoningPrompt, prompt.clone()));
    let reply = backend.complete(session, seed)?;
    session.push(ChatMessage::new(owner, Purpose::Reasoning, reply.clone()));
    Ok(Some(reply))
}

enum ActionResult {
    Parsed(ParsedAction, Vec<FailedAttempt>),
    Violation(Vec<FailedAttempt>),
}

fn act(
    session: &mut Vec<ChatMessage>,
    backend: &dyn ChatBackend,
    prompt: &str,
    kind: ActionKind,
    config: &GameConfig,
    seed: u64,
) -> Result<ActionResult, BackendError> {
    let owner = session[0].owner;
    session.push(ChatMessage::new(owner, Purpose::ActionPrompt, prompt));
    match parse_with_retry(session, backend, kind, config.stake, config.max_retries, seed) {
        Ok(outcome) => Ok(ActionResult::Parsed(outcome.action, outcome.failed_attempts)),
        Err(RetryError::ProtocolViolation { attempts, .. }) => Ok(ActionResult::Violation(attempts)),
        Err(RetryError::Backend(e)) => Err(e),
    }
}

/// Plays one game.
///
/// A protocol violation ends the game early and marks the transcript invalid;
/// a backend failure aborts the game with an error.
pub fn run_game(
    cell: CellKey,
    game_index: u32,
    config: &GameConfig,
    templates: &TemplateSet,
    proposer: &dyn ChatBackend,
    responder: &dyn ChatBackend,
) -> Result<GameRun, RunError> {
    config.validate()?;
    let clock = Clock(Instant::now());
    let p_bundle = templates.bundle(&config.proposer.profile, config.stake);
    let r_bundle = templates.bundle(&config.responder.profile, config.stake);
    let mut p_session = vec![ChatMessage::new(Role::Proposer, Purpose::System, p_bundle.system_prompt)];
    let mut r_session = vec![ChatMessage::new(Role::Responder, Purpose::System, r_bundle.system_prompt)];

    let mut state = GameState::new(config.stake, config.max_rounds)?;
    let mut rounds = Vec::new();
    let mut timing = Vec::new();
    let mut retries = RetryCounts::default();
    let mut violation = None;

    while !state.status().is_terminal() {
        let t = state.round_index();
        let seed = |step| call_seed(config.seed, t, step);

        let proposer_reasoning = clock.time(t, Step::ProposerReasoning, &mut timing, || {
            reason(&mut p_session, proposer, &p_bundle.reasoning_prompt, seed(Step::ProposerReasoning))
        })?;
        let proposal = clock.time(t, Step::Proposal, &mut timing, || {
            act(&mut p_session, proposer, &p_bundle.action_prompt, ActionKind::Proposal, config, seed(Step::Proposal))
        })?;
        let (proposal, proposal_failures) = match proposal {
            ActionResult::Parsed(action, failures) => (action, failures),
            ActionResult::Violation(attempts) => {
                retries.proposal += attempts.len().saturating_sub(1) as u32;
                violation = Some(ProtocolViolation { round: t, kind: ActionKind::Proposal, attempts });
                break;
            }
        };
        retries.proposal += proposal_failures.len() as u32;
        r_session.push(ChatMessage::new(
            Role::Responder,
            Purpose::Relay,
            format!("{}: {}", Role::Proposer.display_name(), proposal.public_line()),
        ));

        let responder_reasoning = clock.time(t, Step::ResponderReasoning, &mut timing, || {
            reason(&mut r_session, responder, &r_bundle.reasoning_prompt, seed(Step::ResponderReasoning))
        })?;
        let decision = clock.time(t, Step::Decision, &mut timing, || {
            act(&mut r_session, responder, &r_bundle.action_prompt, ActionKind::Decision, config, seed(Step::Decision))
        })?;
        let (decision, decision_failures) = match decision {
            ActionResult::Parsed(action, failures) => (action, failures),
            ActionResult::Violation(attempts) => {
                retries.decision += attempts.len().saturating_sub(1) as u32;
                violation = Some(ProtocolViolation { round: t, kind: ActionKind::Decision, attempts });
                break;
            }
        };
        retries.decision += decision_failures.len() as u32;
        p_session.push(ChatMessage::new(
            Role::Proposer,
            Purpose::Relay,
            format!("{}: {}", Role::Responder.display_name(), decision.public_line()),
        ));

        let record = RoundRecord {
            round: t,
            proposer_reasoning,
            proposal,
            responder_reasoning,
            decision,
            proposal_failures,
            decision_failures,
        };
        state = state.apply_round(record.offer(), record.verdict())?;
        rounds.push(record);
    }

    let valid = violation.is_none();
    let payout = if valid { state.settle()? } else { Payout::default() };
    let transcript = Transcript {
        cell,
        game_index,
        config: config.clone(),
        rounds,
        terminal: state.status(),
        payout,
        valid,
        violation,
        retries,
        timing,
        template_checksum: templates.checksum().to_string(),
        harness_version: HARNESS_VERSION.to_string(),
    };
    let run = GameRun {
        transcript,
        proposer_session: p_session,
        responder_session: r_session,
    };
    debug_assert!(run.privacy_violations().is_empty(), "{:?}", run.privacy_violations());
    Ok(run)
}

/// The full factorial design: models × belief pairs × reasoning assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub models: Vec<BackendConfig>,
    pub belief_pairs: Vec<(Belief, Belief)>,
    /// Reasoning methods; both agents use the same one unless
    /// `responder_reasonings` is set.
    pub reasonings: Vec<ReasoningMethod>,
    /// When set, every proposer method is crossed with every responder method.
    #[serde(default)]
    pub responder_reasonings: Option<Vec<ReasoningMethod>>,
    pub games_per_cell: u32,
    pub stake: Stake,
    pub max_rounds: u32,
    pub seed: u64,
    pub max_retries: u32,
}

pub fn all_belief_pairs() -> Vec<(Belief, Belief)> {
    Belief::ALL
        .into_iter()
        .flat_map(|p| Belief::ALL.into_iter().map(move |r| (p, r)))
        .collect()
}

impl ExperimentGrid {
    /// 9 belief pairs × 5 reasoning methods × 10 games, $10 stake, 5 rounds.
    pub fn standard(models: Vec<BackendConfig>, seed: u64) -> Self {
        ExperimentGrid {
            models,
            belief_pairs: all_belief_pairs(),
            reasonings: ReasoningMethod::ALL.to_vec(),
            responder_reasonings: None,
            games_per_cell: 10,
            stake: Stake::default(),
            max_rounds: 5,
            seed,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::InvalidConfig(m.to_string()));
        if self.models.is_empty() {
            return bad("grid has no models");
        }
        if self.belief_pairs.is_empty() || self.reasonings.is_empty() {
            return bad("grid has no belief pairs or reasoning methods");
        }
        if self.responder_reasonings.as_ref().is_some_and(Vec::is_empty) {
            return bad("responder_reasonings is empty");
        }
        if self.games_per_cell < 1 {
            return bad("games_per_cell must be at least 1");
        }
        let mut ids = BTreeSet::new();
        for model in &self.models {
            model.validate()?;
            if !ids.insert(model.model_id()) {
                return Err(RunError::InvalidConfig(format!(
                    "duplicate model id `{}`",
                    model.model_id()
                )));
            }
        }
        GameState::new(self.stake, self.max_rounds)?;
        Ok(())
    }

    /// Every cell, in canonical order.
    pub fn cells(&self) -> Vec<CellKey> {
        let pairs: Vec<(ReasoningMethod, ReasoningMethod)> = match &self.responder_reasonings {
            None => self.reasonings.iter().map(|&m| (m, m)).collect(),
            Some(rs) => self
                .reasonings
                .iter()
                .flat_map(|&p| rs.iter().map(move |&r| (p, r)))
                .collect(),
        };
        let cells: BTreeSet<CellKey> = self
            .models
            .iter()
            .flat_map(|m| {
                self.belief_pairs.iter().flat_map({
                    let pairs = &pairs;
                    move |&(pb, rb)| {
                        pairs.iter().map(move |&(pr, rr)| CellKey {
                            model: m.model_id().to_string(),
                            proposer_belief: pb,
                            responder_belief: rb,
                            proposer_reasoning: pr,
                            responder_reasoning: rr,
                        })
                    }
                })
            })
            .collect();
        cells.into_iter().collect()
    }

    pub fn total_games(&self) -> usize {
        self.cells().len() * self.games_per_cell as usize
    }

    pub fn game_seed(&self, cell: &CellKey, game_index: u32) -> u64 {
        derive_seed(&[
            &self.seed.to_le_bytes(),
            cell.model.as_bytes(),
            &[
                cell.proposer_belief as u8,
                cell.responder_belief as u8,
                cell.proposer_reasoning as u8,
                cell.responder_reasoning as u8,
            ],
            &game_index.to_le_bytes(),
        ])
    }

    pub fn game_config(&self, cell: &CellKey, game_index: u32, templates: &TemplateSet) -> GameConfig {
        let backend = self
            .models
            .iter()
            .find(|m| m.model_id() == cell.model)
            .expect("cell model belongs to grid")
            .clone();
        GameConfig {
            stake: self.stake,
            max_rounds: self.max_rounds,
            proposer: AgentSetup {
                profile: AgentProfile::new(Role::Proposer, cell.proposer_belief, cell.proposer_reasoning),
                backend: backend.clone(),
            },
            responder: AgentSetup {
                profile: AgentProfile::new(Role::Responder, cell.responder_belief, cell.responder_reasoning),
                backend,
            },
            seed: self.game_seed(cell, game_index),
            max_retries: self.max_retries,
            template_checksum: templates.checksum().to_string(),
            menu_every_round: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(#[from] RunError),
    #[error("backend setup failed: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error("partial run: {} cells completed, {} remaining; first failure: {first_failure}", completed.len(), remaining.len())]
    PartialRun {
        completed: Vec<CellKey>,
        remaining: Vec<CellKey>,
        first_failure: String,
    },
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// Sorted by cell key, then game index.
    pub transcripts: Vec<Transcript>,
    pub executed_games: usize,
    pub resumed_cells: usize,
}

/// Runs every cell of `grid` on a pool of `parallelism` workers.
///
/// With a store, each finished cell is written as one JSONL file and cells
/// already complete in the store are loaded instead of re-run.
pub fn run_grid(
    grid: &ExperimentGrid,
    parallelism: usize,
    templates: &TemplateSet,
    store: Option<&TranscriptStore>,
) -> Result<GridOutcome, GridError> {
    if parallelism < 1 {
        return Err(RunError::InvalidConfig("parallelism must be at least 1".into()).into());
    }
    grid.validate()?;
    let backends: BTreeMap<String, Arc<dyn ChatBackend>> = grid
        .models
        .iter()
        .map(|m| Ok((m.model_id().to_string(), Arc::from(m.build()?))))
        .collect::<Result<_, BackendError>>()?;
    let cells = grid.cells();
    if let Some(store) = store {
        store.begin(grid, &cells, templates)?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| RunError::InvalidConfig(e.to_string()))?;

    type CellResult = (CellKey, Result<(Vec<Transcript>, bool), String>);
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let result = run_cell(grid, cell, templates, &backends, store);
                (cell.clone(), result)
            })
            .collect()
    });

    let mut transcripts = Vec::new();
    let mut completed = Vec::new();
    let mut remaining = Vec::new();
    let mut first_failure = None;
    let mut executed_games = 0;
    let mut resumed_cells = 0;
    for (cell, result) in results {
        match result {
            Ok((games, resumed)) => {
                if resumed {
                    resumed_cells += 1;
                } else {
                    executed_games += games.len();
                }
                transcripts.extend(games);
                completed.push(cell);
            }
            Err(message) => {
                first_failure.get_or_insert(format!("{cell}: {message}"));
                remaining.push(cell);
            }
        }
    }
    if let Some(first_failure) = first_failure {
        return Err(GridError::PartialRun {
            completed,
            remaining,
            first_failure,
        });
    }
    transcripts.sort_by(|a, b| a.cell.cmp(&b.cell).then(a.game_index.cmp(&b.game_index)));
    Ok(GridOutcome {
        transcripts,
        executed_games,
        resumed_cells,
    })
}

fn run_cell(
    grid: &ExperimentGrid,
    cell: &CellKey,
    templates: &TemplateSet,
    backends: &BTreeMap<String, Arc<dyn ChatBackend>>,
    store: Option<&TranscriptStore>,
) -> Result<(Vec<Transcript>, bool), String> {
    if let Some(store) = store {
        if let Some(done) = store
            .load_complete_cell(cell, grid.games_per_cell)
            .map_err(|e| e.to_string())?
        {
            return Ok((done, true));
        }
    }
    let backend = backends[&cell.model].as_ref();
    let games: Vec<Transcript> = (0..grid.games_per_cell)
        .into_par_iter()
        .map(|i| {
            let config = grid.game_config(cell, i, templates);
            run_game(cell.clone(), i, &config, templates, backend, backend).map(|run| run.transcript)
        })
        .collect::<Result<_, RunError>>()
        .map_err(|e| e.to_string())?;
    if let Some(store) = store {
        store.write_cell(cell, &games).map_err(|e| e.to_string())?;
    }
    Ok((games, false))
}
