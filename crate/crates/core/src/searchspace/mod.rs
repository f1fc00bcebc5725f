//! Candidate operations, cell topology, the super-net and genotypes.

mod arch;
mod genotype;
mod network;
mod ops;
mod topology;

pub use arch::ArchParams;
pub use genotype::{count_skip_connect, derive_genotype, Genotype, SkipCounts};
pub use network::{
    mixture_weights, subgraph_forward, supernet_teacher_forward, CellLayout, EdgePlan, NetPlan, Network, NetworkSpec,
    NoMask, SkipMasker, SubGraphMasks,
};
pub use ops::{apply_op, make_op, op_param_shapes, OpKind, Operation, NUM_OPS};
pub use topology::{CellTopology, CellType, Edge, NUM_EDGES, NUM_INPUT_NODES, NUM_INTERMEDIATE_NODES};
