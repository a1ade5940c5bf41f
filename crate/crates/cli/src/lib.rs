//! Command line front end and HTTP label service for the auto4d pipeline.

pub mod commands;
pub mod service;
