//! Planning and simulation for distributed training jobs on heterogeneous,
//! geo-distributed and dynamically available GPU clusters.
//!
//! The crate is organised bottom-up:
//!
//! * [`domain`] holds the shared vocabulary (jobs, clusters, pools, plans)
//!   and structural plan validation.
//! * [`profiles`] ingests job/cluster profile files, fits bandwidth curves
//!   and generates synthetic fixtures.
//! * [`simulator`] estimates per-worker memory, iteration time under a 1F1B
//!   pipeline schedule, and monetary cost per iteration.
//! * [`planner`] searches resource allocations and parallelization plans
//!   with pruning heuristics and a dynamic program over pipeline stages.
//! * [`oracle`] is an exhaustive reference search used to check the planner
//!   on small instances.

pub mod domain;
pub mod fixtures;
pub mod oracle;
pub mod planner;
pub mod profiles;
pub mod simulator;

pub use domain::{
    ClusterSpec, Constraint, GpuTypeSpec, JobSpec, LayerRef, Locality, Objective, Plan, PoolKey,
    Replica, ResourcePool, SearchRequest, StageAssignment, Violation, WorkerId, Zone,
};
pub use profiles::{BandwidthModel, ProfileRecord, ProfileStore};
pub use simulator::{simulate, SimReport};
