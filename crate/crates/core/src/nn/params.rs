//! Flat parameter vector with named segments.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Location of one named segment inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn get<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.len]
    }

    pub fn get_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    inits: Vec<Init>,
    total: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamRef {
        let len = shape.iter().product();
        let r = ParamRef {
            offset: self.total,
            len,
        };
        self.segments.push(Segment {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            len,
        });
        self.inits.push(init);
        self.total += len;
        r
    }

    /// Variance-scaling uniform init: `scale * sqrt(3 / fan_in)`.
    pub fn add_weight(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, scale: f64) -> ParamRef {
        let bound = scale * (3.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, shape, Init::Uniform(bound))
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.total];
        for (seg, init) in self.segments.iter().zip(&self.inits) {
            let dst = &mut params[seg.offset..seg.offset + seg.len];
            match *init {
                Init::Zeros => {}
                Init::Ones => dst.fill(1.0),
                Init::Uniform(b) => dst.iter_mut().for_each(|v| *v = rng.random_range(-b..=b)),
            }
        }
        params
    }
}
