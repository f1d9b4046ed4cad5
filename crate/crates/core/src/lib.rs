//! Ross recovery for one-dimensional diffusion markets.

pub mod boundary;
pub mod cli;
pub mod expr;
pub mod mc;
pub mod model;
pub mod ode;
pub mod oracles;
pub mod quad;
pub mod recovery;
pub mod sturm;
