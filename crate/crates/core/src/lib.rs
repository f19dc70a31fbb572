//! Hybrid generative-retrieval few-shot dialogue response model.

pub mod baselines;
pub mod corpus;
pub mod decoding;
pub mod eval;
pub mod hybrid;
pub mod nnet;
pub mod seed;
pub mod tokenizer;
pub mod training;
