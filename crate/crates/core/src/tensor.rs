use std::fmt;

/// Dense row-major `f32` array with a name and shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("tensor `{name}`: shape must have 1 to 4 dimensions, got {rank}")]
    Rank { name: String, rank: usize },
    #[error("tensor `{name}`: zero-sized dimension in shape {shape:?}")]
    ZeroDim { name: String, shape: Vec<usize> },
    #[error("tensor `{name}`: shape {shape:?} holds {expected} elements but data has {actual}")]
    Length {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, ShapeError> {
        let name = name.into();
        check_shape(&name, &shape)?;
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(ShapeError::Length {
                name,
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self, ShapeError> {
        let len = shape.iter().product();
        Self::new(name, shape, vec![0.0; len])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, ShapeError> {
        Self::new(self.name, shape, self.data)
    }

    /// Bitwise equality, so NaN payloads and signed zeros count.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn check_shape(name: &str, shape: &[usize]) -> Result<(), ShapeError> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(ShapeError::Rank {
            name: name.to_string(),
            rank: shape.len(),
        });
    }
    if shape.contains(&0) {
        return Err(ShapeError::ZeroDim {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("name", &self.name)
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}
