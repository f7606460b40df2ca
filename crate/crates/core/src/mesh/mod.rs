//! Face mesh as a graph: topology, vertex-animation sequences and the
//! graph-attention encoder that mixes features between neighbouring vertices.

mod gat;
mod sequence;
mod topology;

pub use gat::{GatLayer, GraphEncoder, GraphIndex, GAT_NEGATIVE_SLOPE};
pub use sequence::{MotionSequence, Template, MESH_MAGIC, MESH_VERSION};
pub use topology::{derive_edges, MeshTopology, TopologyFile};
