//! Phone inventory, HMM state graphs, and search over them.

pub mod alignment;
pub mod graph;
pub mod phones;
pub mod search;

pub use alignment::{phone_spans, Alignment, Alignments, PhoneSpan, Segment};
pub use graph::{
    bootstrap_state_chain, build_denominator_graph, build_numerator_graph, GraphStage, NodeKind,
    StateGraph,
};
pub use phones::{Lexicon, PhoneSet};
pub use search::{
    decoded_phones, forward_backward, occupancy_from_alignment, viterbi, viterbi_path, BestPath,
    OccupancyMatrix,
};
