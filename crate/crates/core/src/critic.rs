//! Twin Q-networks with Polyak-averaged targets.

use rand::Rng;

use crate::envs::TransitionBatch;
use crate::error::{Error, Result};
use crate::nn::{polyak_update, Checkpoint, Mlp, MlpSpec, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Min,
}

impl Aggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "min" => Ok(Aggregation::Min),
            _ => Err(Error::config(format!("aggregation must be mean or min, got `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Min => "min",
        }
    }

    pub fn apply(&self, q1: f64, q2: f64) -> f64 {
        match self {
            Aggregation::Mean => 0.5 * (q1 + q2),
            Aggregation::Min => q1.min(q2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub aggregation: Aggregation,
    pub gamma: f64,
    state_dim: usize,
    action_dim: usize,
}

impl CriticPair {
    /// Fresh heads with layer norm; targets start as exact copies.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        aggregation: Aggregation,
        gamma: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::config(format!("discount must lie in [0, 1], got {gamma}")));
        }
        let spec = MlpSpec::new(state_dim + action_dim, hidden, 1).with_layer_norm(true);
        let q1 = Mlp::new(spec.clone(), rng);
        let q2 = Mlp::new(spec, rng);
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            aggregation,
            gamma,
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn heads(&self, use_target: bool) -> (&Mlp, &Mlp) {
        if use_target {
            (&self.q1_target, &self.q2_target)
        } else {
            (&self.q1, &self.q2)
        }
    }

    /// Both heads on the tape, `[n, 1]` each. `trainable` decides whether the
    /// weights receive gradients; the inputs always do.
    pub fn heads_on(
        &self,
        tape: &mut Tape,
        s: Var,
        a: Var,
        use_target: bool,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let x = tape.concat(&[s, a])?;
        let (h1, h2) = self.heads(use_target);
        Ok((h1.forward(tape, x, trainable)?, h2.forward(tape, x, trainable)?))
    }

    /// Aggregated Q on the tape, `[n, 1]`.
    pub fn q_on(
        &self,
        tape: &mut Tape,
        s: Var,
        a: Var,
        use_target: bool,
        trainable: bool,
    ) -> Result<Var> {
        let (q1, q2) = self.heads_on(tape, s, a, use_target, trainable)?;
        Ok(match self.aggregation {
            Aggregation::Mean => {
                let sum = tape.add(q1, q2)?;
                tape.scale(sum, 0.5)
            }
            Aggregation::Min => tape.minimum(q1, q2)?,
        })
    }

    /// Aggregated Q values without a graph.
    pub fn q_value(&self, s: &Tensor, a: &Tensor, use_target: bool) -> Result<Vec<f64>> {
        let x = concat_cols(s, a)?;
        let (h1, h2) = self.heads(use_target);
        let (q1, q2) = (h1.predict(&x)?, h2.predict(&x)?);
        Ok(q1
            .data()
            .iter()
            .zip(q2.data())
            .map(|(&a, &b)| self.aggregation.apply(a, b))
            .collect())
    }

    /// `r + gamma (1 - done) Q_target(s', a')`. With every row terminal,
    /// `next_actions` may be `None` and no target network is evaluated.
    pub fn td_targets(&self, batch: &TransitionBatch, next_actions: Option<&Tensor>) -> Result<Vec<f64>> {
        if batch.done.iter().all(|&d| d == 1.0) {
            return Ok(batch.r.clone());
        }
        let a2 = next_actions.ok_or_else(|| {
            Error::contract("non-terminal transitions need next actions for the TD target")
        })?;
        let q = self.q_value(&batch.s2, a2, true)?;
        Ok(batch
            .r
            .iter()
            .zip(&batch.done)
            .zip(&q)
            .map(|((r, d), q)| r + self.gamma * (1.0 - d) * q)
            .collect())
    }

    /// Sum over the two online heads of the mean squared TD error against a
    /// shared, constant target.
    pub fn td_loss(
        &self,
        tape: &mut Tape,
        batch: &TransitionBatch,
        next_actions: Option<&Tensor>,
    ) -> Result<Var> {
        let y = self.td_targets(batch, next_actions)?;
        let n = y.len();
        let y = tape.constant(Tensor::matrix(n, 1, y));
        let s = tape.constant(batch.s.clone());
        let a = tape.constant(batch.a.clone());
        let (q1, q2) = self.heads_on(tape, s, a, false, true)?;
        let e1 = tape.sub(q1, y)?;
        let e2 = tape.sub(q2, y)?;
        let e1 = tape.square(e1);
        let e2 = tape.square(e2);
        let l1 = tape.mean_all(e1);
        let l2 = tape.mean_all(e2);
        tape.add(l1, l2)
    }

    pub fn update_targets(&mut self, tau: f64) -> Result<()> {
        for (t, o) in [(&mut self.q1_target, &self.q1), (&mut self.q2_target, &self.q2)] {
            polyak_update(&mut t.params_mut(), &o.params(), tau)?;
        }
        Ok(())
    }

    pub fn export(&self, ckpt: &mut Checkpoint) {
        self.q1.export("q1", ckpt);
        self.q2.export("q2", ckpt);
        self.q1_target.export("q1_target", ckpt);
        self.q2_target.export("q2_target", ckpt);
    }

    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.q1.load("q1", ckpt)?;
        self.q2.load("q2", ckpt)?;
        self.q1_target.load("q1_target", ckpt)?;
        self.q2_target.load("q2_target", ckpt)
    }
}

/// Row-wise `[a | b]`.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::shape(format!(
            "cannot join {:?} and {:?} column-wise",
            a.shape(),
            b.shape()
        )));
    }
    let cols = a.cols() + b.cols();
    let mut data = Vec::with_capacity(a.rows() * cols);
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Ok(Tensor::matrix(a.rows(), cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregation_examples() {
        assert_eq!(Aggregation::Mean.apply(-3.0, -5.0), -4.0);
        assert_eq!(Aggregation::Min.apply(-3.0, -5.0), -5.0);
        assert_eq!(Aggregation::Mean.apply(2.5, 2.5), Aggregation::Min.apply(2.5, 2.5));
    }
}
