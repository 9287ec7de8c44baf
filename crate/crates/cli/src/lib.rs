//! Command-line driver: configs, presets, and the five commands.

pub mod commands;
pub mod config;
pub mod writer;
