//! The learnable control potential `V_θ: ℝ² → ℝ`, a one-hidden-layer tanh network
//! with a linear output, together with the analytic derivatives that
//! backpropagation through the closed-loop dynamics needs.
//!
//! Flat parameter layout (length `4·width + 1`):
//!
//! | block | shape        | offset        |
//! |-------|--------------|---------------|
//! | `W1`  | width × 2, row-major | `0`   |
//! | `b1`  | width        | `2·width`     |
//! | `W2`  | 1 × width    | `3·width`     |
//! | `b2`  | 1            | `4·width`     |
//!
//! # Checkpoint format
//!
//! Checkpoints are UTF-8 JSON objects:
//!
//! ```json
//! {
//!   "format": "modectl-potential-net",
//!   "version": 1,
//!   "input_dim": 2,
//!   "hidden": 256,
//!   "seed": 0,
//!   "layout": "w1_row_major,b1,w2,b2",
//!   "params": [ ... 4*hidden+1 numbers ... ]
//! }
//! ```
//!
//! `seed` is `null` for networks not produced by seeded initialization.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "modectl-potential-net";
pub const CHECKPOINT_VERSION: u32 = 1;
const LAYOUT: &str = "w1_row_major,b1,w2,b2";

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialNet {
    width: usize,
    seed: Option<u64>,
    params: Vec<f64>,
}

impl PotentialNet {
    pub fn param_count_for(width: usize) -> usize {
        4 * width + 1
    }

    /// All parameters zero; `V_θ ≡ 0`.
    pub fn zeros(width: usize) -> Result<Self> {
        Self::from_flat(width, vec![0.0; Self::param_count_for(width)])
    }

    /// Uniform `(-1/√fan_in, 1/√fan_in)` per layer, seeded.
    pub fn init(width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidParameter("hidden width must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden_bound = 1.0 / 2f64.sqrt();
        let out_bound = 1.0 / (width as f64).sqrt();
        let mut params = Vec::with_capacity(Self::param_count_for(width));
        for _ in 0..3 * width {
            params.push(rng.gen_range(-hidden_bound..hidden_bound));
        }
        for _ in 0..width + 1 {
            params.push(rng.gen_range(-out_bound..out_bound));
        }
        Ok(PotentialNet {
            width,
            seed: Some(seed),
            params,
        })
    }

    pub fn from_flat(width: usize, params: Vec<f64>) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidParameter("hidden width must be at least 1".into()));
        }
        if params.len() != Self::param_count_for(width) {
            return Err(Error::ShapeMismatch(format!(
                "width {width} needs {} parameters, got {}",
                Self::param_count_for(width),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("network parameters must be finite".into()));
        }
        Ok(PotentialNet {
            width,
            seed: None,
            params,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable flat parameters, for in-place optimizer updates.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w1(&self, j: usize) -> Vector2<f64> {
        Vector2::new(self.params[2 * j], self.params[2 * j + 1])
    }

    fn b1(&self, j: usize) -> f64 {
        self.params[2 * self.width + j]
    }

    fn w2(&self, j: usize) -> f64 {
        self.params[3 * self.width + j]
    }

    fn b2(&self) -> f64 {
        self.params[4 * self.width]
    }

    fn hidden(&self, j: usize, q: &Vector2<f64>) -> f64 {
        (self.w1(j).dot(q) + self.b1(j)).tanh()
    }

    pub fn value(&self, q: &Vector2<f64>) -> f64 {
        (0..self.width).map(|j| self.w2(j) * self.hidden(j, q)).sum::<f64>() + self.b2()
    }

    /// `∇_q V_θ`, the control force of the learned potential.
    pub fn input_gradient(&self, q: &Vector2<f64>) -> Vector2<f64> {
        let mut g = Vector2::zeros();
        for j in 0..self.width {
            let t = self.hidden(j, q);
            g += self.w1(j) * (self.w2(j) * (1.0 - t * t));
        }
        g
    }

    pub fn input_hessian(&self, q: &Vector2<f64>) -> Matrix2<f64> {
        let mut h = Matrix2::zeros();
        for j in 0..self.width {
            let t = self.hidden(j, q);
            let ds = -2.0 * t * (1.0 - t * t);
            let w = self.w1(j);
            h += (w * w.transpose()) * (self.w2(j) * ds);
        }
        h
    }

    /// `c_v · ∂V/∂θ + c_gᵀ · ∂(∇_q V)/∂θ` as a fresh flat vector.
    pub fn parameter_jacobian_products(
        &self,
        q: &Vector2<f64>,
        cotangent_value: f64,
        cotangent_grad: &Vector2<f64>,
    ) -> Vec<f64> {
        let mut out = vec![0.0; self.param_count()];
        self.accumulate_parameter_products(q, cotangent_value, cotangent_grad, &mut out);
        out
    }

    /// Same as [`parameter_jacobian_products`](Self::parameter_jacobian_products) but adds into `out`.
    pub fn accumulate_parameter_products(
        &self,
        q: &Vector2<f64>,
        cotangent_value: f64,
        cotangent_grad: &Vector2<f64>,
        out: &mut [f64],
    ) {
        assert_eq!(out.len(), self.param_count());
        let w = self.width;
        for j in 0..w {
            let w1 = self.w1(j);
            let w2 = self.w2(j);
            let t = self.hidden(j, q);
            let s = 1.0 - t * t;
            let ds = -2.0 * t * s;
            let a = cotangent_grad.dot(&w1);

            let dz = cotangent_value * w2 * s + w2 * a * ds;
            out[2 * j] += dz * q[0] + w2 * s * cotangent_grad[0];
            out[2 * j + 1] += dz * q[1] + w2 * s * cotangent_grad[1];
            out[2 * w + j] += dz;
            out[3 * w + j] += cotangent_value * t + s * a;
        }
        out[4 * w] += cotangent_value;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            input_dim: 2,
            hidden: self.width,
            seed: self.seed,
            layout: LAYOUT.to_string(),
            params: self.params.clone(),
        };
        let text = serde_json::to_string_pretty(&ck).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format {} v{}", ck.format, ck.version)));
        }
        if ck.input_dim != 2 || ck.layout != LAYOUT {
            return Err(bad("unsupported input dimension or layout".into()));
        }
        let mut net = Self::from_flat(ck.hidden, ck.params).map_err(|e| bad(e.to_string()))?;
        net.seed = ck.seed;
        Ok(net)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    input_dim: usize,
    hidden: usize,
    seed: Option<u64>,
    layout: String,
    params: Vec<f64>,
}
