//! Chat backends: a remote chat-completions client and scripted oracles.
//!
//! Both implement [`ChatBackend`]. A session is the ordered list of messages
//! one agent has seen; it always starts with that agent's system prompt and
//! never contains messages owned by the other agent.

use crate::game::{Offer, Stake};
use crate::profile::{Belief, Role};
use crate::protocol::{protocol_line, Action};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::sync::{Condvar, LazyLock, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Author {
    System,
    Agent,
    Harness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Public,
    Private,
}

/// What a message is for. Author and visibility follow from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    System,
    ReasoningPrompt,
    Reasoning,
    ActionPrompt,
    Action,
    Correction,
    /// The counterpart's public move, re-rendered by the harness.
    Relay,
}

impl Purpose {
    pub fn author(self) -> Author {
        match self {
            Purpose::System => Author::System,
            Purpose::Reasoning | Purpose::Action => Author::Agent,
            Purpose::ReasoningPrompt
            | Purpose::ActionPrompt
            | Purpose::Correction
            | Purpose::Relay => Author::Harness,
        }
    }

    pub fn visibility(self) -> Visibility {
        match self {
            Purpose::Relay => Visibility::Public,
            _ => Visibility::Private,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    /// The agent whose session this message belongs to.
    pub owner: Role,
    pub author: Author,
    pub visibility: Visibility,
    pub purpose: Purpose,
    pub text: String,
}

impl ChatMessage {
    pub fn new(owner: Role, purpose: Purpose, text: impl Into<String>) -> Self {
        ChatMessage {
            owner,
            author: purpose.author(),
            visibility: purpose.visibility(),
            purpose,
            text: text.into(),
        }
    }
}

/// Checks the structural rules every session must satisfy before it is sent.
pub fn validate_session(session: &[ChatMessage]) -> Result<Role, BackendError> {
    let first = session
        .first()
        .ok_or_else(|| BackendError::InvalidSession("empty session".into()))?;
    if first.author != Author::System {
        return Err(BackendError::InvalidSession(
            "session must start with a system message".into(),
        ));
    }
    let owner = first.owner;
    for (i, msg) in session.iter().enumerate().skip(1) {
        if msg.author == Author::System {
            return Err(BackendError::InvalidSession(format!(
                "system message at position {i}"
            )));
        }
        if msg.owner != owner {
            return Err(BackendError::InvalidSession(format!(
                "message {i} belongs to the {} session",
                msg.owner
            )));
        }
    }
    Ok(owner)
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("credential environment variable `{0}` is not set")]
    CredentialMissing(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid session: {0}")]
    InvalidSession(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
}

impl BackendError {
    /// Errors that abort a run rather than invalidating a single game.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            BackendError::RateLimited { .. }
                | BackendError::Transport { .. }
                | BackendError::Rejected { .. }
                | BackendError::CredentialMissing(_)
        )
    }
}

/// Anything that can produce the next utterance of an agent.
pub trait ChatBackend: Send + Sync {
    fn model_id(&self) -> &str;

    /// Returns the agent's reply to `session`. `seed` is a per-call seed
    /// derived from the game seed; remote endpoints receive it as a hint.
    fn complete(&self, session: &[ChatMessage], seed: u64) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    /// Request field carrying `max_tokens`; some endpoints want
    /// `max_completion_tokens`.
    pub max_tokens_field: String,
    /// Forward the per-call seed to the endpoint.
    pub send_seed: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: Some(1.0),
            max_tokens: Some(1024),
            max_tokens_field: "max_tokens".into(),
            send_seed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_delay_ms: u64,
    pub multiplier: f64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            initial_delay_ms: 500,
            multiplier: 2.0,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_attempts < 1 {
            return Err(BackendError::InvalidConfig(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        if self.multiplier.is_nan() || self.multiplier < 1.0 {
            return Err(BackendError::InvalidConfig(
                "retry.multiplier must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Delay before retry number `retry` (0-based); nondecreasing in `retry`.
    pub fn delay(&self, retry: u32) -> Duration {
        let scaled = self.initial_delay_ms as f64 * self.multiplier.powi(retry.min(64) as i32);
        let capped = scaled.min(self.max_delay_ms as f64).max(0.0);
        Duration::from_millis(capped as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub model_id: String,
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub credential_ref: String,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub model_id: String,
    pub policy: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Remote(RemoteConfig),
    Oracle(OracleConfig),
}

impl BackendConfig {
    pub fn oracle(model_id: impl Into<String>, policy: impl Into<String>, seed: u64) -> Self {
        BackendConfig::Oracle(OracleConfig {
            model_id: model_id.into(),
            policy: policy.into(),
            seed,
        })
    }

    pub fn model_id(&self) -> &str {
        match self {
            BackendConfig::Remote(r) => &r.model_id,
            BackendConfig::Oracle(o) => &o.model_id,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.model_id().trim().is_empty() {
            return Err(BackendError::InvalidConfig("model_id is empty".into()));
        }
        match self {
            BackendConfig::Remote(r) => {
                if r.endpoint.trim().is_empty() {
                    return Err(BackendError::InvalidConfig("remote endpoint is empty".into()));
                }
                if r.credential_ref.trim().is_empty() {
                    return Err(BackendError::InvalidConfig(
                        "remote credential_ref is empty".into(),
                    ));
                }
                if r.max_in_flight < 1 {
                    return Err(BackendError::InvalidConfig(
                        "max_in_flight must be at least 1".into(),
                    ));
                }
                r.retry.validate()
            }
            BackendConfig::Oracle(o) => OraclePolicy::from_name(&o.policy, o.seed).map(|_| ()),
        }
    }

    /// Builds a ready-to-use backend. Remote backends read their credential here.
    pub fn build(&self) -> Result<Box<dyn ChatBackend>, BackendError> {
        self.validate()?;
        Ok(match self {
            BackendConfig::Remote(r) => Box::new(RemoteBackend::new(r.clone())?),
            BackendConfig::Oracle(o) => Box::new(OracleBackend::new(o.clone())?),
        })
    }
}

/// One-shot completion for callers that do not keep a backend around.
pub fn complete(
    session: &[ChatMessage],
    config: &BackendConfig,
    seed: u64,
) -> Result<String, BackendError> {
    config.build()?.complete(session, seed)
}

struct Secret(String);

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

/// Counting semaphore bounding concurrent requests to one endpoint.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct InFlightPermit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        InFlight {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightPermit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightPermit(self)
    }
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    content: Option<String>,
}

enum AttemptError {
    Retryable { rate_limited: bool, message: String },
    Fatal(BackendError),
}

/// Client for any endpoint speaking the common chat-completions JSON shape.
#[derive(Debug)]
pub struct RemoteBackend {
    config: RemoteConfig,
    token: Secret,
    client: reqwest::blocking::Client,
    in_flight: InFlight,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let token = std::env::var(&config.credential_ref)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| BackendError::CredentialMissing(config.credential_ref.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
        let in_flight = InFlight::new(config.max_in_flight);
        Ok(RemoteBackend {
            config,
            token: Secret(token),
            client,
            in_flight,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// The JSON body sent for `session`.
    pub fn request_body(&self, session: &[ChatMessage], seed: u64) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = session
            .iter()
            .map(|m| {
                let role = match m.author {
                    Author::System => "system",
                    Author::Agent => "assistant",
                    Author::Harness => "user",
                };
                serde_json::json!({ "role": role, "content": m.text })
            })
            .collect();
        let mut body = serde_json::Map::new();
        body.insert("model".into(), self.config.model_id.clone().into());
        body.insert("messages".into(), messages.into());
        let sampling = &self.config.sampling;
        if let Some(t) = sampling.temperature {
            body.insert("temperature".into(), t.into());
        }
        if let Some(n) = sampling.max_tokens {
            body.insert(sampling.max_tokens_field.clone(), n.into());
        }
        if sampling.send_seed {
            // Many endpoints only accept signed 64-bit seeds.
            body.insert("seed".into(), (seed >> 1).into());
        }
        serde_json::Value::Object(body)
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, AttemptError> {
        let _permit = self.in_flight.acquire();
        let response = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(&self.token.0)
            .json(body)
            .send()
            .map_err(|e| AttemptError::Retryable {
                rate_limited: false,
                message: e.without_url().to_string(),
            })?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(AttemptError::Retryable {
                rate_limited: true,
                message: "429 Too Many Requests".into(),
            });
        }
        if status.is_server_error() {
            return Err(AttemptError::Retryable {
                rate_limited: false,
                message: format!("server error {status}"),
            });
        }
        let text = response.text().map_err(|e| AttemptError::Retryable {
            rate_limited: false,
            message: e.without_url().to_string(),
        })?;
        if !status.is_success() {
            return Err(AttemptError::Fatal(BackendError::Rejected {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            }));
        }
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| {
            AttemptError::Fatal(BackendError::Rejected {
                status: status.as_u16(),
                body: format!("unreadable response: {e}"),
            })
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| {
                AttemptError::Fatal(BackendError::Rejected {
                    status: status.as_u16(),
                    body: "response has no message content".into(),
                })
            })
    }
}

impl ChatBackend for RemoteBackend {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn complete(&self, session: &[ChatMessage], seed: u64) -> Result<String, BackendError> {
        validate_session(session)?;
        let body = self.request_body(session, seed);
        let retry = &self.config.retry;
        let mut last_rate_limited = false;
        let mut last_message = String::new();
        for attempt in 0..retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(retry.delay(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable {
                    rate_limited,
                    message,
                }) => {
                    tracing::warn!(
                        model = %self.config.model_id,
                        attempt = attempt + 1,
                        "{message}"
                    );
                    last_rate_limited = rate_limited;
                    last_message = message;
                }
            }
        }
        Err(if last_rate_limited {
            BackendError::RateLimited {
                attempts: retry.max_attempts,
            }
        } else {
            BackendError::Transport {
                attempts: retry.max_attempts,
                message: last_message,
            }
        })
    }
}

/// Scripted policies standing in for a language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OraclePolicyKind {
    /// Offers half; accepts at least half.
    FairFair,
    /// Opens keeping 80%, concedes $1 per round down to half; accepts at least 60%.
    GreedyAnchor,
    /// Opens keeping 20%; accepts anything.
    Selfless,
    /// Offers half; the responder rejects everything.
    AlwaysReject,
    /// Offers half; accepts a share of at least this many percent.
    AcceptAtLeast(u8),
    /// Samples belief-typical offers and thresholds from the seed.
    BeliefDriven,
    /// Fair-fair, but the first action reply of a game is malformed.
    MalformedOnce,
    /// Never produces a valid action line.
    AlwaysMalformed,
}

const BUILTIN_ORACLES: [&str; 8] = [
    "fair-fair",
    "greedy-anchor",
    "selfless",
    "always-reject",
    "accept-at-least-40",
    "belief-driven",
    "malformed-once",
    "always-malformed",
];

/// Names accepted by [`OraclePolicy::from_name`]. `accept-at-least-<pct>`
/// takes any percentage from 0 to 100.
pub fn list_builtin_oracles() -> Vec<&'static str> {
    BUILTIN_ORACLES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OraclePolicy {
    pub name: String,
    pub kind: OraclePolicyKind,
    pub seed: u64,
}

/// The current turn as the oracle reads it from its session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnView {
    pub role: Role,
    pub belief: Belief,
    pub stake: Stake,
    /// 1-based round of the pending request.
    pub round: u32,
    pub request: Purpose,
    /// Offers relayed to this agent (responder) so far, in order.
    pub offers_seen: Vec<Offer>,
    /// Corrections received during the current action step.
    pub corrections: u32,
    /// Corrections received over the whole session.
    pub total_corrections: u32,
}

static BELIEF_WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\byou are (greedy|fair|selfless)\b").unwrap());
static STAKE_AMOUNT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\$([0-9]+)").unwrap());
static RELAYED_OFFER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)I get \$?([0-9]+) and you get \$?([0-9]+)").unwrap()
});

impl TurnView {
    pub fn read(session: &[ChatMessage]) -> Result<Self, BackendError> {
        let role = validate_session(session)?;
        let system = &session[0].text;
        let belief = BELIEF_WORD
            .captures(system)
            .and_then(|c| c[1].parse().ok())
            .unwrap_or(Belief::Fair);
        let stake = STAKE_AMOUNT
            .captures(system)
            .and_then(|c| c[1].parse().ok())
            .and_then(|n| Stake::new(n).ok())
            .unwrap_or_default();
        let request = session
            .iter()
            .rev()
            .find(|m| m.author == Author::Harness && m.purpose != Purpose::Relay)
            .map(|m| m.purpose)
            .ok_or_else(|| BackendError::InvalidSession("no pending request".into()))?;
        let action_prompts = session
            .iter()
            .filter(|m| m.purpose == Purpose::ActionPrompt)
            .count() as u32;
        let round = match request {
            Purpose::ReasoningPrompt => action_prompts + 1,
            _ => action_prompts.max(1),
        };
        let corrections = session
            .iter()
            .rev()
            .take_while(|m| m.purpose != Purpose::ActionPrompt)
            .filter(|m| m.purpose == Purpose::Correction)
            .count() as u32;
        let total_corrections = session
            .iter()
            .filter(|m| m.purpose == Purpose::Correction)
            .count() as u32;
        let offers_seen = session
            .iter()
            .filter(|m| m.purpose == Purpose::Relay)
            .filter_map(|m| RELAYED_OFFER.captures(&m.text))
            .filter_map(|c| Some(Offer {
                proposer_share: c[1].parse().ok()?,
                responder_share: c[2].parse().ok()?,
            }))
            .collect();
        Ok(TurnView {
            role,
            belief,
            stake,
            round,
            request: if request == Purpose::Correction {
                Purpose::ActionPrompt
            } else {
                request
            },
            offers_seen,
            corrections,
            total_corrections,
        })
    }
}

/// Share of `stake` rounded to the nearest dollar.
fn percent_of(stake: Stake, pct: u64) -> u64 {
    (stake.total() * pct + 50) / 100
}

fn proposer_strategy(keep: u64, stake: Stake) -> u32 {
    let (keep2, total) = (keep * 2, stake.total());
    if keep2 == total {
        3
    } else if keep * 10 >= total * 9 {
        1
    } else if keep2 > total {
        2
    } else if keep * 10 <= total {
        5
    } else {
        4
    }
}

fn responder_strategy(accept: bool, share: u64, stake: Stake) -> u32 {
    let twice = share * 2;
    let favourable = twice > stake.total();
    let fair = twice == stake.total();
    match (accept, favourable, fair) {
        (true, true, _) => 1,
        (true, _, true) => 2,
        (true, _, _) => 3,
        (false, true, _) => 4,
        (false, _, true) => 5,
        (false, _, _) => 6,
    }
}

impl OraclePolicy {
    pub fn from_name(name: &str, seed: u64) -> Result<Self, BackendError> {
        let kind = match name {
            "fair-fair" => OraclePolicyKind::FairFair,
            "greedy-anchor" => OraclePolicyKind::GreedyAnchor,
            "selfless" => OraclePolicyKind::Selfless,
            "always-reject" => OraclePolicyKind::AlwaysReject,
            "belief-driven" => OraclePolicyKind::BeliefDriven,
            "malformed-once" => OraclePolicyKind::MalformedOnce,
            "always-malformed" => OraclePolicyKind::AlwaysMalformed,
            other => match other
                .strip_prefix("accept-at-least-")
                .and_then(|p| p.parse::<u8>().ok())
            {
                Some(pct) if pct <= 100 => OraclePolicyKind::AcceptAtLeast(pct),
                _ => {
                    return Err(BackendError::InvalidConfig(format!(
                        "unknown oracle policy `{name}`"
                    )))
                }
            },
        };
        Ok(OraclePolicy {
            name: name.to_string(),
            kind,
            seed,
        })
    }

    fn rng(&self, call_seed: u64, view: &TurnView) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(call_seed.to_le_bytes());
        hasher.update(view.round.to_le_bytes());
        hasher.update([view.role as u8, view.request as u8]);
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Proposer rule: the offer for `round` and the strategy it reports.
    pub fn propose(&self, belief: Belief, round: u32, stake: Stake, rng: &mut impl Rng) -> (Offer, u32) {
        let half = stake.total() / 2;
        let keep = match self.kind {
            OraclePolicyKind::GreedyAnchor => percent_of(stake, 80)
                .saturating_sub(u64::from(round.saturating_sub(1)))
                .max(stake.total() - half),
            OraclePolicyKind::Selfless => percent_of(stake, 20),
            OraclePolicyKind::BeliefDriven => {
                let (lo, hi) = match belief {
                    Belief::Greedy => (60, 90),
                    Belief::Fair => (40, 60),
                    Belief::Selfless => (10, 40),
                };
                let open = percent_of(stake, rng.random_range(lo..=hi));
                // Concede a random $0-$1 per rejected round toward an even split.
                let conceded: u64 = (1..round).map(|_| rng.random_range(0..=1u64)).sum();
                if open > half {
                    open.saturating_sub(conceded).max(half)
                } else {
                    (open + conceded).min(half)
                }
            }
            _ => half,
        };
        let offer = Offer::keeping(keep.min(stake.total()), stake).expect("keep within stake");
        (offer, proposer_strategy(offer.proposer_share, stake))
    }

    /// Responder rule: whether to accept `offer` and the strategy reported.
    pub fn respond(&self, belief: Belief, offer: Offer, round: u32, stake: Stake, rng: &mut impl Rng) -> (bool, u32) {
        let share = offer.responder_share;
        let at_least = |pct: u64| share * 100 >= pct * stake.total();
        let accept = match self.kind {
            OraclePolicyKind::FairFair | OraclePolicyKind::MalformedOnce => share * 2 >= stake.total(),
            OraclePolicyKind::GreedyAnchor => at_least(60),
            OraclePolicyKind::Selfless => true,
            OraclePolicyKind::AlwaysReject | OraclePolicyKind::AlwaysMalformed => false,
            OraclePolicyKind::AcceptAtLeast(pct) => at_least(u64::from(pct)),
            OraclePolicyKind::BeliefDriven => {
                let (lo, hi): (u64, u64) = match belief {
                    Belief::Greedy => (45, 70),
                    Belief::Fair => (35, 50),
                    Belief::Selfless => (0, 30),
                };
                // Thresholds soften as the game nears its end.
                let threshold = rng.random_range(lo..=hi).saturating_sub(5 * u64::from(round - 1));
                at_least(threshold)
            }
        };
        (accept, responder_strategy(accept, share, stake))
    }

    /// Produces the reply for the pending request in `session`.
    pub fn reply(&self, session: &[ChatMessage], call_seed: u64) -> Result<String, BackendError> {
        let view = TurnView::read(session)?;
        let mut rng = self.rng(call_seed, &view);
        let nonce: u64 = rng.random();
        if view.request == Purpose::ReasoningPrompt {
            return Ok(format!(
                "[{}:{nonce:016x}] As a {} {} in round {}, I will act on my belief.",
                self.name,
                view.belief.word(),
                view.role,
                view.round
            ));
        }
        let malformed = match self.kind {
            OraclePolicyKind::AlwaysMalformed => true,
            OraclePolicyKind::MalformedOnce => view.total_corrections == 0,
            _ => false,
        };
        if malformed {
            return Ok("I think we should split evenly".to_string());
        }
        let line = match view.role {
            Role::Proposer => {
                let (offer, strategy) = self.propose(view.belief, view.round, view.stake, &mut rng);
                protocol_line(Action::Proposal { offer }, strategy)
            }
            Role::Responder => {
                let offer = *view.offers_seen.last().ok_or_else(|| {
                    BackendError::InvalidSession("decision requested before any offer".into())
                })?;
                let (accept, strategy) =
                    self.respond(view.belief, offer, view.round, view.stake, &mut rng);
                let verdict = if accept {
                    crate::game::Verdict::Accept
                } else {
                    crate::game::Verdict::Reject
                };
                protocol_line(Action::Decision { verdict }, strategy)
            }
        };
        Ok(line)
    }
}

/// Backend answering from an [`OraclePolicy`]. Pure: the same session and
/// seed always yield the same bytes.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    model_id: String,
    policy: OraclePolicy,
}

impl OracleBackend {
    pub fn new(config: OracleConfig) -> Result<Self, BackendError> {
        let policy = OraclePolicy::from_name(&config.policy, config.seed)?;
        Ok(OracleBackend {
            model_id: config.model_id,
            policy,
        })
    }

    pub fn policy(&self) -> &OraclePolicy {
        &self.policy
    }
}

impl ChatBackend for OracleBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, session: &[ChatMessage], seed: u64) -> Result<String, BackendError> {
        self.policy.reply(session, seed)
    }
}
