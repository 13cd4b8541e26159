#![allow(dead_code)]

pub mod gradcheck;
pub mod ntxent;
pub mod tables;
