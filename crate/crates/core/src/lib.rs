pub mod calibration;
pub mod corpus;
pub mod decision;
pub mod evaluation;
pub mod prompting;
pub mod runner;
pub mod scoring;
