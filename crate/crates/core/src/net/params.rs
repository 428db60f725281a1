use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Location of one named tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.offset..self.offset + self.len]
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
    /// Frozen tensors (the Fourier frequencies) are stored but never updated.
    pub trainable: bool,
}

/// Every weight of the denoiser in one flat `f64` vector.
///
/// `version` increases with each in-place update so that activation records
/// taken before an update are recognized as stale.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
    version: u64,
}

impl Parameters {
    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access bumps the version.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.specs.iter().filter(|s| s.trainable).map(|s| s.slot.len).sum()
    }

    /// Zeroed gradient buffer with the same layout.
    pub fn gradient_buffer(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    /// Per-element mask, `true` where the value is trainable.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for s in &self.specs {
            if s.trainable {
                mask[s.slot.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| s.slot.of(&self.values))
    }

    /// Overwrite a named tensor; the shape must match exactly.
    pub fn set_tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let spec = self
            .spec(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name:?}")))?
            .clone();
        if spec.shape != shape || data.len() != spec.slot.len {
            return Err(Error::Shape(format!(
                "parameter {name:?} has shape {:?}, got {shape:?}",
                spec.shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("parameter {name:?} contains non-finite values")));
        }
        self.values_mut()[spec.slot.range()].copy_from_slice(data);
        Ok(())
    }
}

/// Weight initializers.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Normal { std: f64 },
    Const(f64),
}

pub(crate) struct ParamBuilder<'r, R: Rng> {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub(crate) fn new(rng: &'r mut R) -> Self {
        ParamBuilder {
            specs: Vec::new(),
            values: Vec::new(),
            rng,
        }
    }

    pub(crate) fn add(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.values.len(),
            len,
        };
        for _ in 0..len {
            let v = match init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    self.rng.random_range(-bound..bound)
                }
                Init::Normal { std } => {
                    let z: f64 = StandardNormal.sample(self.rng);
                    std * z
                }
                Init::Const(c) => c,
            };
            self.values.push(v);
        }
        self.specs.push(ParamSpec {
            name,
            shape,
            slot,
            trainable,
        });
        slot
    }

    pub(crate) fn finish(self) -> Parameters {
        Parameters {
            specs: self.specs,
            values: self.values,
            version: 0,
        }
    }
}
