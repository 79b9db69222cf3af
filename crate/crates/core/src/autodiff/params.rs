//! Flat parameter storage with a named tensor layout.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
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

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named row-major tensors packed into one contiguous vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    slots: Vec<TensorSlot>,
    data: Vec<f64>,
}

impl ParamVector {
    /// Zero-filled vector with the given `(name, rows, cols)` layout.
    pub fn zeros(layout: &[(&str, usize, usize)]) -> Self {
        let mut slots = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for &(name, rows, cols) in layout {
            slots.push(TensorSlot {
                name: name.to_string(),
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        }
        Self {
            slots,
            data: vec![0.0; offset],
        }
    }

    /// Packs named tensors, validating sizes and finiteness.
    pub fn pack(tensors: Vec<(String, usize, usize, Vec<f64>)>) -> Result<Self> {
        let mut slots = Vec::with_capacity(tensors.len());
        let mut data = Vec::new();
        for (name, rows, cols, values) in tensors {
            if values.len() != rows * cols {
                return Err(Error::invalid(format!(
                    "tensor {name}: {} values for {rows}x{cols}",
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "tensor {name} has non-finite entries"
                )));
            }
            if slots.iter().any(|s: &TensorSlot| s.name == name) {
                return Err(Error::invalid(format!("duplicate tensor name {name}")));
            }
            slots.push(TensorSlot {
                name,
                offset: data.len(),
                rows,
                cols,
            });
            data.extend(values);
        }
        Ok(Self { slots, data })
    }

    pub fn unpack(&self) -> Vec<(String, usize, usize, Vec<f64>)> {
        self.slots
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    s.rows,
                    s.cols,
                    self.data[s.range()].to_vec(),
                )
            })
            .collect()
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&TensorSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.slot(name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.slot(name)?.range();
        Some(&mut self.data[r])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same layout, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.data.len(),
                data.len()
            )));
        }
        Ok(Self {
            slots: self.slots.clone(),
            data,
        })
    }
}
