pub mod authority;
pub mod driver;
pub mod env;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod par;
pub mod reach;
pub mod rl;
pub mod scenario;
pub mod service;
pub mod value;
pub mod vehicle;
