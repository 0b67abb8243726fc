use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;
use crate::numerics::{Parameter, Real, Tape, Tensor, Var};

/// Running batch-norm statistics, updated in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Tensor<f32>,
    pub var: Tensor<f32>,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Named parameters and normalization buffers of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Parameter<f32>>,
    pub running: Vec<RunningStats>,
    names: HashSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, name: &str) -> Result<(), ModelError> {
        if !self.names.insert(name.to_string()) {
            return Err(ModelError::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    pub fn add(&mut self, name: String, value: Tensor<f32>) -> Result<usize, ModelError> {
        self.claim(&name)?;
        self.params.push(Parameter::new(name, value));
        Ok(self.params.len() - 1)
    }

    /// He-normal initialised convolution kernel.
    pub fn add_kernel<R: Rng>(
        &mut self,
        name: String,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<usize, ModelError> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = Tensor::from_fn(&[cout, cin, k, k], |_| normal.sample(rng) as f32);
        self.add(name, value)
    }

    pub fn add_running(&mut self, name: String, channels: usize) -> Result<usize, ModelError> {
        self.claim(&name)?;
        self.running.push(RunningStats {
            name,
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        });
        Ok(self.running.len() - 1)
    }

    /// One tape leaf per parameter, in store order.
    pub fn bind<S: Real>(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.cast())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<&Parameter<f32>> {
        self.params.iter().find(|p| p.name == name)
    }
}
