//! GRU-ODE context encoders for recurrent TD3 and SAC on partially
//! observable, irregularly sampled continuous-control tasks.

pub mod agents;
pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod odeint;
pub mod replay;
pub mod run;
pub mod trace;

pub use error::{Error, Result};
