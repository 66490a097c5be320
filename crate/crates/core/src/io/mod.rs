//! Media ingestion, configuration files, output trees and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod media;
pub mod output;
pub mod pipeline;
