#![allow(dead_code)]

pub mod cic_grid;
pub mod feeders;
