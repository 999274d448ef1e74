//! The 14 augmentation operations, their discretized parameterization and
//! policy application.

pub mod baseline;
pub mod kernels;
pub mod policy;

pub use baseline::Normalizer;
pub use policy::{
    apply_op, apply_policy, search_space_cardinality, OpKind, OpSpec, Policy, SearchSpace, SubPolicy,
    MAG_BINS, OPS_PER_SUB, PROB_BINS, SUBS_PER_POLICY,
};
