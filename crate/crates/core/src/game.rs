//! Ultimatum-game state machine.
//!
//! A game is a single stake negotiated over up to `max_rounds` rounds. Each
//! round is one proposal followed by one decision. The game ends on the first
//! `Accept`, paying out that round's offer, or after the last round is
//! rejected, in which case both players receive nothing.
//!
//! Every value here is plain data: [`GameState::apply_round`] consumes a state
//! and returns the next one, so the same recorded history always replays to
//! the same terminal status.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GameError {
    #[error("invalid game configuration: {0}")]
    InvalidConfig(String),
    #[error("game already finished ({0})")]
    AlreadyFinished(GameStatus),
    #[error("offer {proposer}+{responder} does not sum to stake {stake}")]
    OfferSumMismatch {
        proposer: u64,
        responder: u64,
        stake: u64,
    },
    #[error("game is still in progress")]
    NotFinished,
}

/// Total amount of money on the table, in whole dollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct Stake(u64);

impl Stake {
    pub fn new(total: u64) -> Result<Self, GameError> {
        if total < 1 {
            return Err(GameError::InvalidConfig("stake must be at least $1".into()));
        }
        Ok(Stake(total))
    }

    pub fn total(self) -> u64 {
        self.0
    }
}

impl Default for Stake {
    fn default() -> Self {
        Stake(10)
    }
}

impl TryFrom<u64> for Stake {
    type Error = GameError;

    fn try_from(total: u64) -> Result<Self, Self::Error> {
        Stake::new(total)
    }
}

impl From<Stake> for u64 {
    fn from(stake: Stake) -> u64 {
        stake.0
    }
}

impl fmt::Display for Stake {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}", self.0)
    }
}

/// A proposed split: what the proposer keeps and what the responder gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Offer {
    pub proposer_share: u64,
    pub responder_share: u64,
}

impl Offer {
    /// Builds an offer and checks it splits exactly `stake`.
    pub fn new(proposer_share: u64, responder_share: u64, stake: Stake) -> Result<Self, GameError> {
        let offer = Offer {
            proposer_share,
            responder_share,
        };
        offer.check_sum(stake)?;
        Ok(offer)
    }

    /// The offer where the proposer keeps `keep` and the rest goes to the responder.
    pub fn keeping(keep: u64, stake: Stake) -> Result<Self, GameError> {
        if keep > stake.total() {
            return Err(GameError::OfferSumMismatch {
                proposer: keep,
                responder: 0,
                stake: stake.total(),
            });
        }
        Ok(Offer {
            proposer_share: keep,
            responder_share: stake.total() - keep,
        })
    }

    pub fn check_sum(&self, stake: Stake) -> Result<(), GameError> {
        match self.proposer_share.checked_add(self.responder_share) {
            Some(sum) if sum == stake.total() => Ok(()),
            _ => Err(GameError::OfferSumMismatch {
                proposer: self.proposer_share,
                responder: self.responder_share,
                stake: stake.total(),
            }),
        }
    }
}

impl fmt::Display for Offer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "I get ${} and you get ${}.",
            self.proposer_share, self.responder_share
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Accept => "Accept",
            Verdict::Reject => "Reject",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GameStatus {
    InProgress,
    AcceptedAtRound { round: u32 },
    ExhaustedRounds,
}

impl GameStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, GameStatus::InProgress)
    }
}

impl fmt::Display for GameStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GameStatus::InProgress => f.write_str("in progress"),
            GameStatus::AcceptedAtRound { round } => write!(f, "accepted at round {round}"),
            GameStatus::ExhaustedRounds => f.write_str("exhausted rounds"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameState {
    stake: Stake,
    round_index: u32,
    max_rounds: u32,
    history: Vec<(Offer, Verdict)>,
    status: GameStatus,
}

impl GameState {
    pub fn new(stake: Stake, max_rounds: u32) -> Result<Self, GameError> {
        if max_rounds < 1 {
            return Err(GameError::InvalidConfig(
                "max_rounds must be at least 1".into(),
            ));
        }
        Ok(GameState {
            stake,
            round_index: 1,
            max_rounds,
            history: Vec::new(),
            status: GameStatus::InProgress,
        })
    }

    pub fn stake(&self) -> Stake {
        self.stake
    }

    /// The round currently being played, or the last round played once terminal.
    pub fn round_index(&self) -> u32 {
        self.round_index
    }

    pub fn max_rounds(&self) -> u32 {
        self.max_rounds
    }

    pub fn history(&self) -> &[(Offer, Verdict)] {
        &self.history
    }

    pub fn status(&self) -> GameStatus {
        self.status
    }

    /// Number of completed rounds.
    pub fn rounds_played(&self) -> u32 {
        self.history.len() as u32
    }

    pub fn apply_round(mut self, offer: Offer, verdict: Verdict) -> Result<Self, GameError> {
        if self.status.is_terminal() {
            return Err(GameError::AlreadyFinished(self.status));
        }
        offer.check_sum(self.stake)?;
        self.history.push((offer, verdict));
        match verdict {
            Verdict::Accept => {
                self.status = GameStatus::AcceptedAtRound {
                    round: self.round_index,
                }
            }
            Verdict::Reject if self.round_index < self.max_rounds => self.round_index += 1,
            Verdict::Reject => self.status = GameStatus::ExhaustedRounds,
        }
        Ok(self)
    }

    pub fn settle(&self) -> Result<Payout, GameError> {
        match self.status {
            GameStatus::InProgress => Err(GameError::NotFinished),
            GameStatus::ExhaustedRounds => Ok(Payout::default()),
            GameStatus::AcceptedAtRound { round } => {
                let (offer, _) = self.history[(round - 1) as usize];
                Ok(Payout {
                    proposer: offer.proposer_share,
                    responder: offer.responder_share,
                })
            }
        }
    }

    /// Replays a recorded sequence of rounds from a fresh game.
    pub fn replay(
        stake: Stake,
        max_rounds: u32,
        rounds: impl IntoIterator<Item = (Offer, Verdict)>,
    ) -> Result<Self, GameError> {
        rounds
            .into_iter()
            .try_fold(GameState::new(stake, max_rounds)?, |state, (offer, verdict)| {
                state.apply_round(offer, verdict)
            })
    }
}

/// Money each side takes home from one game.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payout {
    pub proposer: u64,
    pub responder: u64,
}
