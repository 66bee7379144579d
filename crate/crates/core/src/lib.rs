pub mod cli;
pub mod constrained;
pub mod filter;
pub mod harness;
pub mod integrator;
pub mod patient_data;
pub mod qp;
pub mod seed;
pub mod ultradian;
