//! Evaluation harness for creative, instruction-driven image editing.
//!
//! Generates Yes/No evaluation questions per benchmark sample, asks a multimodal
//! judge to answer them for each edited image, and turns the verdicts into
//! Instruction Following (IF), Visual Consistency (VC) and Visual Quality (VQ)
//! scores, combined and aggregated over the editing taxonomy. Agreement with human
//! ratings is measured by rank correlation.

pub mod alignment;
pub mod decimal;
pub mod harness;
pub mod jsonl;
pub mod judge;
pub mod model;
pub mod qagen;
pub mod scoring;

pub use decimal::Percent;
