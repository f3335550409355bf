use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named rectangular slice of a flat parameter vector (row-major).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
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

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    blocks: Vec<Block>,
    offset: usize,
}

impl LayoutBuilder {
    pub fn push(mut self, name: impl Into<String>, rows: usize, cols: usize) -> Self {
        self.blocks.push(Block {
            name: name.into(),
            offset: self.offset,
            rows,
            cols,
        });
        self.offset += rows * cols;
        self
    }

    pub fn finish(self) -> Vec<Block> {
        self.blocks
    }
}

/// Flat parameter vector whose layout partitions it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Block>,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    layout: Vec<Block>,
    #[serde(with = "super::hexf64")]
    values: Vec<f64>,
}

impl TryFrom<RawParams> for ParamVector {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        ParamVector::from_parts(raw.values, raw.layout)
    }
}

impl From<ParamVector> for RawParams {
    fn from(p: ParamVector) -> Self {
        RawParams {
            layout: p.layout,
            values: p.values,
        }
    }
}

impl ParamVector {
    pub fn zeros(layout: Vec<Block>) -> Result<Self> {
        let n = layout.iter().map(Block::len).sum();
        Self::from_parts(vec![0.0; n], layout)
    }

    pub fn from_parts(values: Vec<f64>, layout: Vec<Block>) -> Result<Self> {
        let mut expected = 0;
        for b in &layout {
            if b.offset != expected {
                return Err(Error::rejected(format!("block {} starts at {} not {expected}", b.name, b.offset)));
            }
            expected += b.len();
        }
        if expected != values.len() {
            return Err(Error::rejected(format!(
                "layout covers {expected} values but vector has {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_parts(values, self.layout.clone())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[Block] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.layout.iter().find(|b| b.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.block(name).map(|b| &self.values[b.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.block(name)?.range();
        Some(&mut self.values[range])
    }
}
