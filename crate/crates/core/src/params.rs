//! Named parameter tensors and the decoupled-weight-decay Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±gain·sqrt(6 / (fan_in + fan_out))`.
    Glorot(f64),
    /// `ln` of a value log-uniform in `[lo, hi]`.
    LogUniform(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        let mut m = Mat::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Const(c) => m.data.iter_mut().for_each(|x| *x = c),
            Init::Glorot(gain) => {
                let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
                m.data.iter_mut().for_each(|x| *x = rng.random_range(-bound..=bound));
            }
            Init::LogUniform(lo, hi) => {
                let (a, b) = (lo.ln(), hi.ln());
                m.data.iter_mut().for_each(|x| *x = rng.random_range(a..=b));
            }
        }
        self.names.push(name);
        self.values.push(m);
        self.values.len() - 1
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replaces every value by its nearest `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for m in &mut self.values {
            m.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// Overwrites values from `(name, data)` pairs; every parameter must be present.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<(Vec<usize>, Vec<f64>)>) -> Result<()> {
        for (name, m) in self.names.iter().zip(&mut self.values) {
            let (shape, data) = lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if shape != [m.rows, m.cols] {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, model expects [{}, {}]",
                    m.rows, m.cols
                )));
            }
            m.data = data;
        }
        Ok(())
    }

    /// Registers every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|m| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect()
    }

    /// Collects gradients of bound parameters (zeros where unreached).
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Grads) -> Result<Vec<Mat>> {
        let mut out = Vec::with_capacity(self.len());
        for ((name, m), &v) in self.names.iter().zip(&self.values).zip(vars) {
            let g = grads.take(v).unwrap_or_else(|| Mat::zeros(m.rows, m.cols));
            if !g.all_finite() {
                return Err(Error::numeric(format!("gradient of `{name}`"), "non-finite value"));
            }
            out.push(g);
        }
        Ok(out)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 8e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.values().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Weight decay is applied to the parameter directly, not
    /// folded into the gradient moments. Returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Mat]) -> f64 {
        let c = self.config;
        let norm = grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = g.data[k] * scale;
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                let decay = c.weight_decay * p.data[k];
                p.data[k] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + decay);
            }
        }
        norm
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_parameter_still_decays() {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::new();
        store.add("w", 1, 1, Init::Const(2.0), &mut rng);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.update(&mut store, &[Mat::scalar(0.0)]);
        let expected = 2.0 - 8e-4 * 0.01 * 2.0;
        assert!((store.get(0).data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::new();
        store.add("x", 1, 2, Init::Zeros, &mut rng);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        let target = [1.5, -0.5];
        for _ in 0..500 {
            let x = &store.get(0).data;
            let g = Mat::row_vec(vec![2.0 * (x[0] - target[0]), 2.0 * (x[1] - target[1])]);
            opt.update(&mut store, &[g]);
        }
        let x = &store.get(0).data;
        assert!((x[0] - 1.5).abs() < 1e-2 && (x[1] + 0.5).abs() < 1e-2);
    }
}
