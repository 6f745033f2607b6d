//! Camera-based heart rate, respiration rate and SpO2 estimation from paired RGB and IR video.

pub mod cli;
pub mod dataio;
pub mod dataset;
pub mod model;
pub mod sigproc;
pub mod synth;
pub mod timeline;
pub mod train;
