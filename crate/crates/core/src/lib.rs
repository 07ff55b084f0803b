//! Deterministic, desk-scale simulation of the machinery used to train very
//! large autoregressive models on sharded, mixed-precision clusters: emulated
//! narrow float formats, per-resblock gradient scaling, low-rank gradient
//! compression with error feedback, simulated collectives with bandwidth
//! accounting, parameter shard planning, an optimizer with low-precision
//! moments, and a toy transformer/discrete-VAE pair that exercises the whole
//! pipeline end to end.
//!
//! Everything runs on plain `f64` arithmetic with quantization at storage
//! boundaries, single-threaded and bit-reproducible for a given seed.

pub mod cluster;
pub mod gradscale;
pub mod harness;
pub mod lowp;
pub mod optim;
pub mod powersgd;
pub mod shardplan;
pub mod tensor;
pub mod toymodel;
