pub mod config;
pub mod gateway;
pub mod prompts;
pub mod rationale;
pub mod reward;
pub mod variational;
pub mod nft;
pub mod gcr;
pub mod pipeline;
