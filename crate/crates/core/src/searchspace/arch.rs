use serde::{Deserialize, Serialize};

use super::ops::NUM_OPS;
use super::topology::{CellType, NUM_EDGES};
use crate::params::{Param, ParamGroup};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Architecture logits `[14, 8]` for normal and reduction cells, shared by
/// every cell of the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams<T> {
    tables: [Param<T>; 2],
}

impl<T: Real> ArchParams<T> {
    pub fn zeros() -> Self {
        let table = |name: &str| Param::new(name, ParamGroup::Arch, Tensor::zeros(&[NUM_EDGES, NUM_OPS]));
        Self {
            tables: [table("alpha_normal"), table("alpha_reduce")],
        }
    }

    pub fn from_tables(normal: Tensor<T>, reduce: Tensor<T>) -> crate::Result<Self> {
        let mut a = Self::zeros();
        for (slot, t) in a.tables.iter_mut().zip([normal, reduce]) {
            if t.shape() != [NUM_EDGES, NUM_OPS] {
                return Err(crate::Error::Input(alloc::format!(
                    "architecture table must be [{NUM_EDGES}, {NUM_OPS}], got {:?}",
                    t.shape()
                )));
            }
            slot.value = t;
        }
        Ok(a)
    }

    pub fn table(&self, cell: CellType) -> &Tensor<T> {
        &self.tables[cell.index()].value
    }

    pub fn normal(&self) -> &Tensor<T> {
        self.table(CellType::Normal)
    }

    pub fn reduce(&self) -> &Tensor<T> {
        self.table(CellType::Reduce)
    }

    pub fn param(&self, cell: CellType) -> &Param<T> {
        &self.tables[cell.index()]
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.tables
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tables {
            t.grad = None;
        }
    }
}
