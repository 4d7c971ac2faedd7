#![cfg_attr(not(test), no_std)]

//! Hierarchical threaded-conversation sequence labeling with multitask and
//! multidomain learning through composed recurrent parameters.

extern crate alloc;

pub mod diff;
pub mod corpus;
pub mod synthgen;
pub mod encoders;
pub mod model;
pub mod reparam;
pub mod metrics;
pub mod trainer;
pub mod downstream;
