// Each test crate uses a different subset.
#![allow(dead_code)]

pub mod fuzz;
pub mod gradcheck;
