//! Classification head: two ReLU dense layers carrying the L2 penalty and a
//! single sigmoid output unit. Computed in f64.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// (out, in)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Dense {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        Dense {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || dist.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn zeros_like(&self) -> Dense {
        Dense {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden1: Dense,
    pub hidden2: Dense,
    pub output: Dense,
}

/// Gradients with the same layout as [`Head`].
pub type HeadGrads = Head;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Mean binary cross-entropy over the batch.
    pub bce: f64,
    /// `lambda * (sum of squared hidden-layer kernel weights)`.
    pub l2_penalty: f64,
    pub total: f64,
}

struct Activations {
    h1: Array2<f64>,
    h2: Array2<f64>,
    logits: Array1<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit, evaluated without forming the probability.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl Head {
    pub fn init(input_dim: usize, widths: (usize, usize), seed: u64) -> Head {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Head {
            hidden1: Dense::glorot(input_dim, widths.0, &mut rng),
            hidden2: Dense::glorot(widths.0, widths.1, &mut rng),
            output: Dense::glorot(widths.1, 1, &mut rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden1.weight.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.parameter_count()).sum()
    }

    pub fn layers(&self) -> [&Dense; 3] {
        [&self.hidden1, &self.hidden2, &self.output]
    }

    pub fn layers_mut(&mut self) -> [&mut Dense; 3] {
        [&mut self.hidden1, &mut self.hidden2, &mut self.output]
    }

    pub fn zeros_like(&self) -> Head {
        Head {
            hidden1: self.hidden1.zeros_like(),
            hidden2: self.hidden2.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Activations {
        let h1 = self.hidden1.affine(x).mapv_into(|v| v.max(0.0));
        let h2 = self.hidden2.affine(h1.view()).mapv_into(|v| v.max(0.0));
        let logits = self.output.affine(h2.view()).index_axis_move(Axis(1), 0);
        Activations { h1, h2, logits }
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.forward(x).logits
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        self.forward(x).logits.iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn l2_penalty(&self, lambda: f64) -> f64 {
        let sq = |d: &Dense| d.weight.iter().map(|w| w * w).sum::<f64>();
        lambda * (sq(&self.hidden1) + sq(&self.hidden2))
    }

    pub fn loss(&self, x: ArrayView2<f64>, y: &[f64], lambda: f64) -> LossBreakdown {
        let logits = self.logits(x);
        self.breakdown(&logits, y, lambda)
    }

    fn breakdown(&self, logits: &Array1<f64>, y: &[f64], lambda: f64) -> LossBreakdown {
        let n = y.len().max(1) as f64;
        let bce = logits
            .iter()
            .zip(y)
            .map(|(&z, &t)| bce_from_logit(z, t))
            .sum::<f64>()
            / n;
        let l2_penalty = self.l2_penalty(lambda);
        LossBreakdown {
            bce,
            l2_penalty,
            total: bce + l2_penalty,
        }
    }

    /// Loss, parameter gradients, and the gradient with respect to the
    /// input features (needed when the backbone is trainable).
    pub fn loss_and_grads(
        &self,
        x: ArrayView2<f64>,
        y: &[f64],
        lambda: f64,
    ) -> (LossBreakdown, HeadGrads, Array2<f64>) {
        let acts = self.forward(x);
        let loss = self.breakdown(&acts.logits, y, lambda);
        let n = y.len().max(1) as f64;

        let dz3 = Array1::from_iter(
            acts.logits
                .iter()
                .zip(y)
                .map(|(&z, &t)| (sigmoid(z) - t) / n),
        )
        .insert_axis(Axis(1));
        let output = Dense {
            weight: dz3.t().dot(&acts.h2),
            bias: dz3.sum_axis(Axis(0)),
        };

        let mut dz2 = dz3.dot(&self.output.weight);
        dz2.zip_mut_with(&acts.h2, |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        let hidden2 = Dense {
            weight: dz2.t().dot(&acts.h1) + &(&self.hidden2.weight * (2.0 * lambda)),
            bias: dz2.sum_axis(Axis(0)),
        };

        let mut dz1 = dz2.dot(&self.hidden2.weight);
        dz1.zip_mut_with(&acts.h1, |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        let hidden1 = Dense {
            weight: dz1.t().dot(&x) + &(&self.hidden1.weight * (2.0 * lambda)),
            bias: dz1.sum_axis(Axis(0)),
        };
        let dx = dz1.dot(&self.hidden1.weight);

        (
            loss,
            Head {
                hidden1,
                hidden2,
                output,
            },
            dx,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!(sigmoid(-1000.0).is_finite());
    }

    #[test]
    fn bce_matches_probability_form() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (-0.7, 1.0)] {
            let p: f64 = sigmoid(z);
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_from_logit(z, y) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_init() {
        assert_eq!(Head::init(10, (4, 3), 5), Head::init(10, (4, 3), 5));
        assert_ne!(Head::init(10, (4, 3), 5), Head::init(10, (4, 3), 6));
    }

    #[test]
    fn l2_excludes_output_layer_and_biases() {
        let mut h = Head::init(2, (2, 2), 0);
        for l in h.layers_mut() {
            l.weight.fill(1.0);
            l.bias.fill(3.0);
        }
        // 4 + 4 unit kernel weights in the two hidden layers.
        assert_eq!(h.l2_penalty(0.5), 4.0);
        let x = array![[1.0, 2.0]];
        let loss = h.loss(x.view(), &[1.0], 0.5);
        assert_eq!(loss.total, loss.bce + 4.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut h = Head::init(3, (4, 3), 2);
        let x = array![[0.5, -1.0, 2.0], [1.5, 0.3, -0.2], [-0.4, 0.9, 0.1]];
        let y = [1.0, 0.0, 1.0];
        let lambda = 0.01;
        let (_, grads, dx) = h.loss_and_grads(x.view(), &y, lambda);
        let eps = 1e-6;
        for li in 0..3 {
            let shape = h.layers()[li].weight.dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = h.layers()[li].weight[[r, c]];
                    h.layers_mut()[li].weight[[r, c]] = orig + eps;
                    let up = h.loss(x.view(), &y, lambda).total;
                    h.layers_mut()[li].weight[[r, c]] = orig - eps;
                    let down = h.loss(x.view(), &y, lambda).total;
                    h.layers_mut()[li].weight[[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let analytic = grads.layers()[li].weight[[r, c]];
                    assert!((numeric - analytic).abs() < 1e-6, "layer {li} [{r},{c}]");
                }
            }
            for r in 0..h.layers()[li].bias.len() {
                let orig = h.layers()[li].bias[r];
                h.layers_mut()[li].bias[r] = orig + eps;
                let up = h.loss(x.view(), &y, lambda).total;
                h.layers_mut()[li].bias[r] = orig - eps;
                let down = h.loss(x.view(), &y, lambda).total;
                h.layers_mut()[li].bias[r] = orig;
                assert!(((up - down) / (2.0 * eps) - grads.layers()[li].bias[r]).abs() < 1e-6);
            }
        }
        let mut xp = x.clone();
        xp[[1, 2]] += eps;
        let mut xm = x.clone();
        xm[[1, 2]] -= eps;
        let numeric = (h.loss(xp.view(), &y, lambda).total - h.loss(xm.view(), &y, lambda).total) / (2.0 * eps);
        assert!((numeric - dx[[1, 2]]).abs() < 1e-6);
    }

    #[test]
    fn loss_is_bce_plus_penalty() {
        let h = Head::init(3, (5, 2), 9);
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]];
        let l = h.loss(x.view(), &[0.0, 1.0], 0.003);
        let probs = h.predict_proba(x.view());
        let bce = -((1.0 - probs[0]).ln() + probs[1].ln()) / 2.0;
        assert!((l.bce - bce).abs() < 1e-12);
        assert!((l.total - (l.bce + l.l2_penalty)).abs() < 1e-12);
        assert!((l.l2_penalty - h.l2_penalty(0.003)).abs() < 1e-15);
    }
}
