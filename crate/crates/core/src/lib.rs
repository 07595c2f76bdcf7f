//! Discrete wave turbulence on a finite lattice: resonant quadruplets, the
//! effective stochastic equation, its moment hierarchy and the continuum
//! kinetic equation.

pub mod lattice;
pub mod stats;
pub mod effective;
pub mod moments;
pub mod kinetic;
