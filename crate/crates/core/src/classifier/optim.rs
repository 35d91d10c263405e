use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::Rmsprop];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            other => Err(format!("unknown optimizer `{other}` (expected sgd, adam or rmsprop)")),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const RHO: f64 = 0.9;
const EPSILON: f64 = 1e-7;

/// Scalars the optimizer can update in place.
pub(crate) trait Param: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Param for f32 {
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Param for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Per-run optimizer state. Tensors are registered implicitly by the order
/// in which [`Optimizer::update`] is called within a step; that order must
/// be the same every step.
pub(crate) struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    cursor: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            cursor: 0,
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
        self.cursor = 0;
    }

    pub fn update<T: Param>(&mut self, params: &mut [T], grads: &[T]) {
        debug_assert_eq!(params.len(), grads.len());
        let slot = self.cursor;
        self.cursor += 1;
        if self.first.len() <= slot {
            let n = params.len();
            self.first.push(vec![0.0; if self.kind == OptimizerKind::Adam { n } else { 0 }]);
            self.second.push(vec![0.0; if self.kind == OptimizerKind::Sgd { 0 } else { n }]);
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p = T::from_f64(p.to_f64() - self.lr * g.to_f64());
                }
            }
            OptimizerKind::Adam => {
                let t = self.step;
                let lr_t = self.lr * (1.0 - BETA2.powi(t)).sqrt() / (1.0 - BETA1.powi(t));
                let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                for i in 0..params.len() {
                    let g = grads[i].to_f64();
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                    params[i] = T::from_f64(params[i].to_f64() - lr_t * m[i] / (v[i].sqrt() + EPSILON));
                }
            }
            OptimizerKind::Rmsprop => {
                let v = &mut self.second[slot];
                for i in 0..params.len() {
                    let g = grads[i].to_f64();
                    v[i] = RHO * v[i] + (1.0 - RHO) * g * g;
                    params[i] = T::from_f64(params[i].to_f64() - self.lr * g / (v[i].sqrt() + EPSILON));
                }
            }
        }
    }
}
