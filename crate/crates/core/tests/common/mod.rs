#![allow(dead_code)]

pub mod datasets;
pub mod gradcheck;
pub mod oracles;
pub mod reference;
