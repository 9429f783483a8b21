//! Grounded word learning from paired frame/utterance episodes.
//!
//! The pipeline runs transcript records through [`corpus`] cleaning and
//! vocabulary building, joins them to frozen frame features in [`pairing`],
//! trains one of three dual-encoder variants ([`encoders`], [`objectives`],
//! [`trainer`]) and scores word-referent mappings with 4-way
//! looking-while-listening trials in [`evalharness`]. [`synthworld`]
//! generates corpora with known ground truth so every stage can be checked.

pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evalharness;
pub mod objectives;
pub mod pairing;
pub mod seed;
pub mod simfilter;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
