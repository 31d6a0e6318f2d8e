//! Fine-tuning a tiny dialogue language model with PPO against rewards
//! drawn from the valence/arousal circumplex of affect.
//!
//! Layers, bottom-up:
//! - [`tensor`], [`autodiff`], [`optim`], [`gradcheck`]: dense `f64` tensors,
//!   a reverse-mode tape, Adam and finite-difference checking.
//! - [`text`]: tokenizer, vocabulary, MELD-style CSV ingestion and a
//!   synthetic emotion-labelled dialogue corpus.
//! - [`lm`]: a decoder-only transformer with sampling and checkpoints.
//! - [`affect`]: circumplex coordinates, the signed distance reward, fusion.
//! - [`reward_model`]: a linear emotion/affect head over LM embeddings.
//! - [`sim_env`]: a lexicon-driven simulated user.
//! - [`ppo`]: KL-shaped rewards, GAE, clipped-surrogate updates, the loop.
//! - [`cli`]: the staged command-line pipeline.

pub mod affect;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod optim;
pub mod ppo;
pub mod reward_model;
pub mod seed;
pub mod sim_env;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
