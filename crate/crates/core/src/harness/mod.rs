pub mod calibration_file;
pub mod cli;
pub mod config;
pub mod report;
pub mod study;
