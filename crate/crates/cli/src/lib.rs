//! File formats, the training driver and command implementations around
//! `graphdec-core`.

pub mod app;
pub mod checkpoint;
pub mod config_file;
pub mod corpus_io;
