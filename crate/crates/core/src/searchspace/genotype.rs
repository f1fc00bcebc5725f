use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::arch::ArchParams;
use super::ops::{OpKind, NUM_OPS};
use super::topology::{CellTopology, CellType, NUM_INPUT_NODES, NUM_INTERMEDIATE_NODES};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Discrete architecture: for each intermediate node (in order) two
/// `(predecessor, op)` pairs, predecessors ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<(usize, OpKind)>,
    pub reduce: Vec<(usize, OpKind)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub normal: usize,
    pub reduce: usize,
}

impl Genotype {
    pub fn cell(&self, cell: CellType) -> &[(usize, OpKind)] {
        match cell {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn uniform(pairs: [(usize, OpKind); 2]) -> Self {
        let cell: Vec<(usize, OpKind)> = (0..NUM_INTERMEDIATE_NODES).flat_map(|_| pairs).collect();
        Self {
            normal: cell.clone(),
            reduce: cell,
        }
    }

    /// Checks two distinct earlier predecessors per node and no `Zero`.
    pub fn validate(&self) -> Result<()> {
        for cell in CellType::BOTH {
            let pairs = self.cell(cell);
            if pairs.len() != 2 * NUM_INTERMEDIATE_NODES {
                return Err(Error::Input(format!(
                    "{cell:?} cell has {} entries, expected {}",
                    pairs.len(),
                    2 * NUM_INTERMEDIATE_NODES
                )));
            }
            for (j, node) in pairs.chunks(2).enumerate() {
                let to = NUM_INPUT_NODES + j;
                if node[0].0 == node[1].0 {
                    return Err(Error::Input(format!("{cell:?} node {to} repeats predecessor {}", node[0].0)));
                }
                for &(pred, op) in node {
                    if pred >= to {
                        return Err(Error::Input(format!("{cell:?} node {to} has predecessor {pred}")));
                    }
                    if op == OpKind::Zero {
                        return Err(Error::Input(format!("{cell:?} node {to} uses Zero")));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn count_skip_connect(g: &Genotype) -> SkipCounts {
    let count = |c: &[(usize, OpKind)]| c.iter().filter(|(_, op)| *op == OpKind::SkipConnect).count();
    SkipCounts {
        normal: count(&g.normal),
        reduce: count(&g.reduce),
    }
}

fn softmax_f64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| num_traits::Float::exp(v - m)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Best non-`Zero` operation of one edge and its softmax weight.
fn best_op(row: &[f64]) -> (OpKind, f64) {
    let p = softmax_f64(row);
    let mut best = 1;
    for o in 2..NUM_OPS {
        if p[o] > p[best] {
            best = o;
        }
    }
    (OpKind::ALL[best], p[best])
}

fn derive_cell<T: Real>(table: &Tensor<T>) -> Vec<(usize, OpKind)> {
    let rows: Vec<f64> = table.data().iter().map(|v| v.as_f64()).collect();
    let mut out = Vec::with_capacity(2 * NUM_INTERMEDIATE_NODES);
    for j in 0..NUM_INTERMEDIATE_NODES {
        let mut cands: Vec<(usize, OpKind, f64)> = CellTopology::incoming(j)
            .enumerate()
            .map(|(pred, e)| {
                let (op, strength) = best_op(&rows[e * NUM_OPS..(e + 1) * NUM_OPS]);
                (pred, op, strength)
            })
            .collect();
        // Stable sort keeps lower predecessors first on equal strength.
        cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(core::cmp::Ordering::Equal));
        let mut kept = [(cands[0].0, cands[0].1), (cands[1].0, cands[1].1)];
        kept.sort_by_key(|p| p.0);
        out.extend(kept);
    }
    out
}

/// Keeps the two strongest incoming edges per node, where an edge's strength
/// is the largest softmax weight among its non-`Zero` operations, and labels
/// each kept edge with that operation. Ties go to the lower operation index,
/// then the lower predecessor.
pub fn derive_genotype<T: Real>(alpha: &ArchParams<T>) -> Genotype {
    Genotype {
        normal: derive_cell(alpha.normal()),
        reduce: derive_cell(alpha.reduce()),
    }
}
