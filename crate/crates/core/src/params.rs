//! Named traversal over learnable tensors.
//!
//! Every parameter struct doubles as its own gradient accumulator: a
//! zero-filled clone has the same layout, so optimisers, checkpoints and the
//! gradient checker work on the flat visit order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::{Matrix, Real};

pub trait ParamVisit<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, m| out.extend_from_slice(m.data()));
        out
    }

    fn unflatten(&mut self, flat: &[T]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, m| {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// `(name, offset, len, shape)` for every tensor in visit order.
    fn layout(&self) -> Vec<TensorSlot> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit("", &mut |name, m| {
            out.push(TensorSlot {
                name,
                offset,
                rows: m.rows(),
                cols: m.cols(),
            });
            offset += m.len();
        });
        out
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, m| m.fill(T::zero()));
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}
