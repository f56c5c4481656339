//! Named-parameter registry with deterministic initialization.
//!
//! Parameters are created in a fixed order from a single seeded stream, so a
//! given (config, seed) always produces bitwise-identical weights. The
//! registry order also fixes optimizer iteration and checkpoint layout.

use crate::error::Result;
use crate::tensor::{Element, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct ParamBuilder<E: Element> {
    rng: ChaCha8Rng,
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Element> ParamBuilder<E> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            entries: Vec::new(),
        }
    }

    fn register(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<E>> {
        let t = Tensor::param(data.into_iter().map(E::from_f64).collect(), shape)?;
        self.entries.push((name, t.clone()));
        Ok(t)
    }

    /// Normal(0, std) truncated to ±2 std, the usual projection init.
    pub fn trunc_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller; draws come in pairs but are consumed one at a time
            // through the rejection filter to keep the stream deterministic.
            let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = self.rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            for z in [r * theta.cos(), r * theta.sin()] {
                if data.len() < n && z.abs() <= 2.0 {
                    data.push(z * std);
                }
            }
        }
        self.register(name.into(), data, shape)
    }

    /// Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)), the conv kernel init.
    pub fn he_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> Result<Tensor<E>> {
        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect();
        self.register(name.into(), data, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        self.register(name.into(), vec![value; n], shape)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor<E>> {
        self.constant(name, shape, 0.0)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor<E>> {
        self.constant(name, shape, 1.0)
    }

    pub fn finish(self) -> Vec<(String, Tensor<E>)> {
        self.entries
    }
}
