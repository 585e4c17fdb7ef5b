pub mod cli;
pub mod fibers;
pub mod kernel;
pub mod measures;
pub mod models;
pub mod montecarlo;
