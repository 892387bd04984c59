//! Semantic basic block vectors.
//!
//! Stage 1 embeds each normalized basic block with a small linear-recurrent
//! encoder; stage 2 folds an interval's frequency-weighted block embeddings
//! into an order-invariant signature with a set transformer co-trained on
//! CPI. Signatures from many programs share one space, so a single global
//! clustering plus a handful of simulated representatives estimates the CPI
//! of every program. A deterministic cost-model oracle stands in for the
//! cycle-accurate simulator.

pub mod aggregator;
pub mod artifact;
pub mod asmnorm;
pub mod autograd;
pub mod blockstore;
pub mod config;
pub mod encoder;
pub mod estimator;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod phases;
pub mod pipeline;
pub mod tensor;
