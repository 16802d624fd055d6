//! Fully distributed k-means over a network graph.
//!
//! Cluster centers are updated through additive-secret-sharing average
//! consensus so no node reveals its observation or label to its neighbors.
//! The crate also contains the centralized Lloyd reference used to check
//! exactness and an auditor for what a passive coalition of nodes learns.

pub mod adversary;
pub mod averaging;
pub mod field;
pub mod harness;
pub mod kmeans;
pub mod seed;
pub mod sharing;
pub mod topology;
pub mod transcript;
