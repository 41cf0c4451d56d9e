//! L∞ signed-gradient attacks on the clean classification loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::convnet::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ budget in pixel units ([0, 1] scale).
    pub epsilon: f32,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f32,
    #[serde(default = "default_random_start")]
    pub random_start: bool,
}

fn default_steps() -> usize {
    1
}

fn default_step_size() -> f32 {
    2.0 / 255.0
}

fn default_random_start() -> bool {
    true
}

impl AttackConfig {
    pub fn fgsm(epsilon: f32) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
        }
    }

    /// K-step PGD with a `2/255` step and random start.
    pub fn pgd(epsilon: f32, steps: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            step_size: default_step_size(),
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.kind == AttackKind::Pgd && (self.steps == 0 || !(self.step_size >= 0.0)) {
            return Err(Error::Config("pgd needs steps >= 1 and a non-negative step size".into()));
        }
        Ok(())
    }

    /// `attack:<kind>:<eps>:<steps>` label used in evaluation output.
    pub fn label(&self) -> String {
        let kind = match self.kind {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        };
        let steps = if self.kind == AttackKind::Fgsm { 1 } else { self.steps };
        format!("attack:{kind}:{}:{steps}", self.epsilon)
    }
}

/// Gradient of the summed cross-entropy `Σ_n L_c(y_n, D(F(x_n)))` with
/// respect to the input batch.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let n = *x.shape().first().unwrap_or(&0);
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false)?;
    let xv = tape.param(x.clone())?;
    let logits = model.forward(&mut tape, &params, xv)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss = tape.scale(loss, n as f32)?;
    let mut grads = tape.backward(loss)?;
    grads
        .take(xv)
        .ok_or_else(|| Error::InvalidArgument("no input gradient".into()))
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `v` into `[x − ε, x + ε] ∩ [0, 1]`, with the ball bounds rounded
/// inward so the constraint also holds in exact arithmetic.
fn project(v: f32, x: f32, eps: f32) -> f32 {
    let mut hi = x + eps;
    if f64::from(hi) > f64::from(x) + f64::from(eps) {
        hi = hi.next_down();
    }
    let mut lo = x - eps;
    if f64::from(lo) < f64::from(x) - f64::from(eps) {
        lo = lo.next_up();
    }
    v.clamp(lo, hi).clamp(0.0, 1.0)
}

fn check_range(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("attack input must lie in [0, 1]".into()));
    }
    Ok(())
}

/// `clip(x + ε·sign(∇_x L_c), 0, 1)`.
pub fn fgsm(model: &Model, x: &Tensor, labels: &[usize], epsilon: f32) -> Result<Tensor> {
    AttackConfig::fgsm(epsilon).validate()?;
    check_range(x)?;
    let g = input_gradient(model, x, labels)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xi, &gi)| project(xi + epsilon * sign(gi), xi, epsilon))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Projected signed-gradient ascent. Every iterate stays inside the ε-ball
/// around `x` and inside `[0, 1]`.
pub fn pgd(model: &Model, x: &Tensor, labels: &[usize], config: &AttackConfig, seed: u64) -> Result<Tensor> {
    config.validate()?;
    check_range(x)?;
    let eps = config.epsilon;
    let mut cur = x.clone();
    if config.random_start && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (c, &xi) in cur.data_mut().iter_mut().zip(x.data()) {
            *c = project(xi + rng.gen_range(-eps..=eps), xi, eps);
        }
    }
    for _ in 0..config.steps {
        let g = input_gradient(model, &cur, labels)?;
        for ((c, &xi), &gi) in cur.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
            *c = project(*c + config.step_size * sign(gi), xi, eps);
        }
    }
    Ok(cur)
}

/// Dispatches on `config.kind`.
pub fn attack(model: &Model, x: &Tensor, labels: &[usize], config: &AttackConfig, seed: u64) -> Result<Tensor> {
    match config.kind {
        AttackKind::Fgsm => fgsm(model, x, labels, config.epsilon),
        AttackKind::Pgd => pgd(model, x, labels, config, seed),
    }
}
