//! Parsing of agent utterances against the proposal/decision line formats.
//!
//! The canonical lines are
//!
//! ```text
//! Proposal: I get $8 and you get $2. | Strategy 2
//! Decision: Accept | Strategy 1
//! ```
//!
//! Accepted drift: letter case, extra whitespace (including a line break in
//! place of the `|`), trailing punctuation, a colon after `Strategy`, a
//! missing `$`, and a dropped `get` after `you`. The marker must start a
//! line; earlier lines are ignored.
//! Anything that needs interpretation ("half each", "$4.50") is a failure.

use crate::backend::{BackendError, ChatBackend, ChatMessage, Purpose};
use crate::game::{Offer, Stake, Verdict};
use crate::profile::{Role, StrategyInventory};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::LazyLock;
use thiserror::Error;

static PROPOSAL_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[ \t]*proposal[ \t]*:").unwrap());
static DECISION_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[ \t]*decision[ \t]*:").unwrap());
static STRATEGY_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bstrategy\b").unwrap());
static SPLIT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*i\s+get\s+\$?\s*([0-9]+(?:\.[0-9]+)?)\s+and\s+you\s+(?:get\s+)?\$?\s*([0-9]+(?:\.[0-9]+)?)\s*[.!;,]*\s*\|?\s*$",
    )
    .unwrap()
});
static STRATEGY_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*:?\s*([0-9]+)\s*[.!;,]*\s*$").unwrap());
static VERDICT_WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(accept|reject)\b").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Proposal,
    Decision,
}

impl ActionKind {
    pub fn role(self) -> Role {
        match self {
            ActionKind::Proposal => Role::Proposer,
            ActionKind::Decision => Role::Responder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Action {
    Proposal { offer: Offer },
    Decision { verdict: Verdict },
}

/// A validated protocol line together with the verbatim text it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAction {
    #[serde(flatten)]
    pub action: Action,
    pub strategy_index: u32,
    pub raw_text: String,
}

impl ParsedAction {
    pub fn kind(&self) -> ActionKind {
        match self.action {
            Action::Proposal { .. } => ActionKind::Proposal,
            Action::Decision { .. } => ActionKind::Decision,
        }
    }

    pub fn offer(&self) -> Option<Offer> {
        match self.action {
            Action::Proposal { offer } => Some(offer),
            Action::Decision { .. } => None,
        }
    }

    pub fn verdict(&self) -> Option<Verdict> {
        match self.action {
            Action::Decision { verdict } => Some(verdict),
            Action::Proposal { .. } => None,
        }
    }

    /// The part of the action the counterpart may see, without the strategy.
    pub fn public_line(&self) -> String {
        match self.action {
            Action::Proposal { offer } => format!("Proposal: {offer}"),
            Action::Decision { verdict } => format!("Decision: {verdict}"),
        }
    }
}

/// Renders the canonical protocol line for an action.
pub fn protocol_line(action: Action, strategy_index: u32) -> String {
    match action {
        Action::Proposal { offer } => format!("Proposal: {offer} | Strategy {strategy_index}"),
        Action::Decision { verdict } => format!("Decision: {verdict} | Strategy {strategy_index}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    FormatMismatch,
    SumMismatch,
    StrategyOutOfRange,
    AmbiguousVerdict,
}

impl FailureReason {
    /// Every failure can be repaired by asking again.
    pub fn is_retryable(self) -> bool {
        true
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureReason::FormatMismatch => "format mismatch",
            FailureReason::SumMismatch => "sum mismatch",
            FailureReason::StrategyOutOfRange => "strategy out of range",
            FailureReason::AmbiguousVerdict => "ambiguous verdict",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{reason}: {detail}")]
pub struct ParseFailure {
    pub reason: FailureReason,
    pub detail: String,
}

impl ParseFailure {
    fn new(reason: FailureReason, detail: impl Into<String>) -> Self {
        ParseFailure {
            reason,
            detail: detail.into(),
        }
    }
}

/// Splits `text` after `marker` into (body before `Strategy`, text after it).
fn split_line<'a>(
    text: &'a str,
    marker: &Regex,
    name: &str,
) -> Result<(&'a str, &'a str), ParseFailure> {
    let found = marker.find(text).ok_or_else(|| {
        ParseFailure::new(
            FailureReason::FormatMismatch,
            format!("no line starting with `{name}:`"),
        )
    })?;
    let body = &text[found.end()..];
    let strategy = STRATEGY_MARKER.find(body).ok_or_else(|| {
        ParseFailure::new(FailureReason::FormatMismatch, "missing `Strategy [number]`")
    })?;
    Ok((&body[..strategy.start()], &body[strategy.end()..]))
}

fn parse_strategy(rest: &str, role: Role) -> Result<u32, ParseFailure> {
    let caps = STRATEGY_NUMBER.captures(rest).ok_or_else(|| {
        ParseFailure::new(
            FailureReason::FormatMismatch,
            format!("strategy is not a plain number: `{}`", rest.trim()),
        )
    })?;
    let inventory = StrategyInventory::for_role(role);
    let out_of_range = || {
        ParseFailure::new(
            FailureReason::StrategyOutOfRange,
            format!(
                "strategy {} outside 1..={}",
                caps[1].trim_start_matches('0'),
                inventory.len()
            ),
        )
    };
    let index: u32 = caps[1].parse().map_err(|_| out_of_range())?;
    if !inventory.contains(index) {
        return Err(out_of_range());
    }
    Ok(index)
}

fn parse_dollars(digits: &str) -> Result<u64, ParseFailure> {
    if digits.contains('.') {
        return Err(ParseFailure::new(
            FailureReason::FormatMismatch,
            format!("fractional amount `{digits}`"),
        ));
    }
    digits.parse().map_err(|_| {
        ParseFailure::new(
            FailureReason::FormatMismatch,
            format!("amount `{digits}` is too large"),
        )
    })
}

/// Reads the split from a proposal line, ignoring any strategy part.
pub fn parse_split(text: &str, stake: Stake) -> Result<Offer, ParseFailure> {
    let found = PROPOSAL_MARKER.find(text).ok_or_else(|| {
        ParseFailure::new(FailureReason::FormatMismatch, "no line starting with `Proposal:`")
    })?;
    let body = &text[found.end()..];
    let end = STRATEGY_MARKER
        .find(body)
        .map(|m| m.start())
        .or_else(|| body.find('\n'))
        .unwrap_or(body.len());
    split_offer(&body[..end], stake)
}

fn split_offer(body: &str, stake: Stake) -> Result<Offer, ParseFailure> {
    let caps = SPLIT.captures(body).ok_or_else(|| {
        ParseFailure::new(
            FailureReason::FormatMismatch,
            format!("expected `I get $X and you get $Y`, found `{}`", body.trim()),
        )
    })?;
    let keep = parse_dollars(&caps[1])?;
    let give = parse_dollars(&caps[2])?;
    let offer = Offer {
        proposer_share: keep,
        responder_share: give,
    };
    if offer.check_sum(stake).is_err() {
        return Err(ParseFailure::new(
            FailureReason::SumMismatch,
            format!("${keep} + ${give} is not the ${} stake", stake.total()),
        ));
    }
    Ok(offer)
}

pub fn parse_proposal(text: &str, stake: Stake) -> Result<ParsedAction, ParseFailure> {
    let (body, rest) = split_line(text, &PROPOSAL_MARKER, "Proposal")?;
    let offer = split_offer(body, stake)?;
    let strategy_index = parse_strategy(rest, Role::Proposer)?;
    Ok(ParsedAction {
        action: Action::Proposal { offer },
        strategy_index,
        raw_text: text.to_string(),
    })
}

pub fn parse_decision(text: &str) -> Result<ParsedAction, ParseFailure> {
    let (body, rest) = split_line(text, &DECISION_MARKER, "Decision")?;
    let mut verdicts = VERDICT_WORD
        .find_iter(body)
        .map(|m| m.as_str().to_ascii_lowercase());
    let verdict = match (verdicts.next(), verdicts.next()) {
        (Some(first), None) if first == "accept" => Verdict::Accept,
        (Some(_), None) => Verdict::Reject,
        (None, _) => {
            return Err(ParseFailure::new(
                FailureReason::AmbiguousVerdict,
                format!("neither Accept nor Reject in `{}`", body.trim()),
            ))
        }
        (Some(_), Some(_)) => {
            return Err(ParseFailure::new(
                FailureReason::AmbiguousVerdict,
                format!("more than one verdict in `{}`", body.trim()),
            ))
        }
    };
    let strategy_index = parse_strategy(rest, Role::Responder)?;
    Ok(ParsedAction {
        action: Action::Decision { verdict },
        strategy_index,
        raw_text: text.to_string(),
    })
}

pub fn parse_action(
    text: &str,
    kind: ActionKind,
    stake: Stake,
) -> Result<ParsedAction, ParseFailure> {
    match kind {
        ActionKind::Proposal => parse_proposal(text, stake),
        ActionKind::Decision => parse_decision(text),
    }
}

/// Harness message sent after a malformed reply.
pub fn correction_prompt(kind: ActionKind, failure: &ParseFailure) -> String {
    let format = match kind {
        ActionKind::Proposal => "Proposal: I get $X and you get $Y. | Strategy [number]",
        ActionKind::Decision => "Decision: [Accept or Reject] | Strategy [number]",
    };
    format!(
        "Your previous reply could not be read ({failure}). Reply again using exactly this format and nothing else: {format}"
    )
}

/// One rejected reply kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedAttempt {
    pub raw_text: String,
    pub failure: ParseFailure,
}

/// A reply that parsed, plus the bad replies that preceded it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryOutcome {
    pub action: ParsedAction,
    pub failed_attempts: Vec<FailedAttempt>,
}

impl RetryOutcome {
    pub fn retries(&self) -> usize {
        self.failed_attempts.len()
    }
}

#[derive(Debug, Error)]
pub enum RetryError {
    #[error("protocol violation: {} malformed {kind:?} replies", attempts.len())]
    ProtocolViolation {
        kind: ActionKind,
        attempts: Vec<FailedAttempt>,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Asks `backend` for an action, re-prompting with a correction after each
/// malformed reply.
///
/// Every reply and correction is appended to `session`. At most
/// `max_retries + 1` completions are requested.
pub fn parse_with_retry(
    session: &mut Vec<ChatMessage>,
    backend: &dyn ChatBackend,
    kind: ActionKind,
    stake: Stake,
    max_retries: u32,
    seed: u64,
) -> Result<RetryOutcome, RetryError> {
    let owner = kind.role();
    let mut failed = Vec::new();
    for attempt in 0..=max_retries {
        let reply = backend.complete(session, seed.wrapping_add(attempt as u64))?;
        session.push(ChatMessage::new(owner, Purpose::Action, reply.clone()));
        match parse_action(&reply, kind, stake) {
            Ok(action) => {
                return Ok(RetryOutcome {
                    action,
                    failed_attempts: failed,
                })
            }
            Err(failure) => {
                tracing::debug!(%failure, attempt, "malformed {kind:?} reply");
                if attempt < max_retries {
                    session.push(ChatMessage::new(
                        owner,
                        Purpose::Correction,
                        correction_prompt(kind, &failure),
                    ));
                }
                failed.push(FailedAttempt {
                    raw_text: reply,
                    failure,
                });
            }
        }
    }
    Err(RetryError::ProtocolViolation {
        kind,
        attempts: failed,
    })
}
