use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named block of the flat parameter vector. Complex blocks store each entry as
/// an adjacent `(re, im)` pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub complex: bool,
    pub offset: usize,
}

impl ParameterBlock {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of real coordinates.
    pub fn len(&self) -> usize {
        self.elements() * if self.complex { 2 } else { 1 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of parameter blocks; the manifest stored in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub blocks: Vec<ParameterBlock>,
}

impl ParameterLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, complex: bool) -> usize {
        let offset = self.n_params();
        self.blocks.push(ParameterBlock { name: name.into(), shape, complex, offset });
        offset
    }

    pub fn n_params(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn block(&self, name: &str) -> Option<&ParameterBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Block containing real coordinate `index`.
    pub fn block_of(&self, index: usize) -> Option<&ParameterBlock> {
        self.blocks.iter().find(|b| b.range().contains(&index))
    }

    /// Checks offsets are contiguous and start at zero.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for b in &self.blocks {
            if b.offset != next {
                return Err(Error::Invalid(format!("block `{}` starts at {} instead of {next}", b.name, b.offset)));
            }
            next += b.len();
        }
        Ok(())
    }
}

/// Flat real parameter vector together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct WavefunctionParameters {
    layout: ParameterLayout,
    values: Vec<f64>,
}

impl WavefunctionParameters {
    pub fn new(layout: ParameterLayout, values: Vec<f64>) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.n_params() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.n_params()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: ParameterLayout) -> Self {
        let n = layout.n_params();
        Self { layout, values: vec![0.0; n] }
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn unflatten(layout: &ParameterLayout, flat: &[f64]) -> Result<Self> {
        Self::new(layout.clone(), flat.to_vec())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.values[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.block(name)?.range();
        Some(&mut self.values[r])
    }
}
