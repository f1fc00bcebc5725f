use core::ops::Range;

use serde::{Deserialize, Serialize};

pub const NUM_INPUT_NODES: usize = 2;
pub const NUM_INTERMEDIATE_NODES: usize = 4;
/// `2 + 3 + 4 + 5`
pub const NUM_EDGES: usize = 14;

/// Nodes `0` and `1` are the cell inputs, `2..6` the intermediate nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellType {
    Normal,
    Reduce,
}

impl CellType {
    pub const BOTH: [CellType; 2] = [CellType::Normal, CellType::Reduce];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The fixed cell DAG: every intermediate node receives one edge from each
/// input node and each earlier intermediate node, and sums them.
pub struct CellTopology;

impl CellTopology {
    /// Edges grouped by destination node, sources ascending.
    pub fn edges() -> impl Iterator<Item = Edge> {
        (0..NUM_INTERMEDIATE_NODES).flat_map(|j| {
            (0..NUM_INPUT_NODES + j).map(move |from| Edge {
                from,
                to: NUM_INPUT_NODES + j,
            })
        })
    }

    /// Edge indices entering intermediate node `j` (0-based among the four).
    pub fn incoming(j: usize) -> Range<usize> {
        let start: usize = (0..j).map(|i| NUM_INPUT_NODES + i).sum();
        start..start + NUM_INPUT_NODES + j
    }

    pub fn edge_index(from: usize, to: usize) -> Option<usize> {
        if !(NUM_INPUT_NODES..NUM_INPUT_NODES + NUM_INTERMEDIATE_NODES).contains(&to) || from >= to {
            return None;
        }
        Some(Self::incoming(to - NUM_INPUT_NODES).start + from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn fourteen_acyclic_edges() {
        let edges: Vec<Edge> = CellTopology::edges().collect();
        assert_eq!(edges.len(), NUM_EDGES);
        assert!(edges.iter().all(|e| e.from < e.to));
        for (i, e) in edges.iter().enumerate() {
            assert_eq!(CellTopology::edge_index(e.from, e.to), Some(i));
        }
        assert_eq!(CellTopology::incoming(3), 9..14);
        assert_eq!(CellTopology::edge_index(2, 2), None);
    }
}
