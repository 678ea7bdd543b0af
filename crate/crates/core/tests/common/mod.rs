#![allow(dead_code)]

pub mod gradcheck;
pub mod npz;
pub mod oracles;
pub mod registry;
pub mod selection;
pub mod service;
