pub mod autodiff;
pub mod cli;
pub mod data;
pub mod decoding;
pub mod losses;
pub mod model;
pub mod rouge;
pub mod seed;
pub mod training;
