//! Dialogue sessions and their HTTP interface.

pub mod http;
pub mod session;

pub use session::{
    truncate_history, DialogueService, Health, ServiceConfig, SessionOptions, Transcript, TranscriptRound, TurnInput,
    TurnResponse,
};
