//! Decoding the hidden meaning of messages in a goal-signalling gridworld.
//!
//! Two decoders are provided. [`exact_decoder`] filters (start, goal)
//! hypotheses by requiring every observed listener action to be optimal.
//! [`state_decoder`] learns to generate the hidden initial state from a message
//! and an action sequence by backpropagating an action-reconstruction loss
//! through a frozen optimal policy ([`planner`]) and a learned dynamics model
//! ([`transition`]).

pub mod demos;
pub mod env;
pub mod equiv;
pub mod error;
pub mod exact_decoder;
pub mod nn;
pub mod planner;
pub mod rng;
pub mod state_decoder;
pub mod transition;

pub use env::{Action, Cell, GridConfig, Message, State, StepOutcome};
pub use error::{Error, Result};
