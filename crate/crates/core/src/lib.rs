//! Budget-constrained auto-bidding.
//!
//! The crate is organised bottom-up:
//!
//! - [`mechanisms`]: win probability and expected cost for first/second-price auctions.
//! - [`bid_engine`]: optimal bids from a multiplier vector.
//! - [`coldstart`]: closed-form initial multiplier under log-normal priors.
//! - [`oracle`]: hindsight-optimal multipliers from a complete opportunity log.
//! - [`pacing`]: online multiplier updates (FTL, additive and multiplicative mirror descent).
//! - [`sim`]: seeded multi-placement marketplace and episode runner.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bid_engine;
pub mod coldstart;
pub mod constraints;
pub mod error;
pub mod mechanisms;
pub mod normal;
pub mod oracle;
pub mod pacing;
pub mod sim;

pub use bid_engine::{BidDecision, BidEngine, MultiplierVector, LAMBDA_MIN};
pub use error::{Error, Result};
pub use mechanisms::{AuctionType, CompetitorModel, MechanismSpec, RealizedLandscape};
