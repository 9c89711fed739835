pub mod action;
pub mod analysis;
pub mod data;
pub mod episode;
pub mod experiment;
pub mod geometry;
pub mod mixture;
pub mod policy;
pub mod tokenizer;
pub mod world;
