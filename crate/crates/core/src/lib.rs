//! Hierarchical convolutional self-attention networks for long-form video
//! question answering, built on a small reverse-mode autodiff tape.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;
pub mod vocab;
