//! The BC flow policy, the noise generator and the distilled one-step policy,
//! with the losses that train them.
//!
//! Losses come in two forms: one that draws its own noise from an RNG and a
//! `*_with` form that takes the noise explicitly, which is what the
//! finite-difference tests use.

use rand::Rng;

use crate::critic::CriticPair;
use crate::error::{Error, Result};
use crate::critic::concat_cols;
use crate::geometry::{
    integrate, integrate_values, sample_cube, sample_gaussian, squash_radial,
    squash_radial_values, BallDomain, IntegratorConfig, IntegratorMode, RolloutStats,
};
use crate::nn::{Checkpoint, Mlp, MlpSpec, Tape, Tensor, Var};

/// Log-std bounds of the squashed-Gaussian noise generator.
pub const LOG_STD_RANGE: (f64, f64) = (-5.0, 2.0);

/// A latent distribution: what the BC flow starts from, or what the noise
/// generator is fed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    Ball(BallDomain),
    Gaussian { d: usize },
    Cube { d: usize },
}

impl Source {
    pub fn dim(&self) -> usize {
        match self {
            Source::Ball(b) => b.dim(),
            Source::Gaussian { d } | Source::Cube { d } => *d,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Tensor {
        match self {
            Source::Ball(b) => b.sample(rng, n),
            Source::Gaussian { d } => sample_gaussian(*d, rng, n),
            Source::Cube { d } => sample_cube(*d, rng, n),
        }
    }

    /// Errors if a row lies outside the support.
    pub fn check(&self, z: &Tensor) -> Result<()> {
        if z.cols() != self.dim() {
            return Err(Error::shape(format!(
                "latents have {} columns, source has dimension {}",
                z.cols(),
                self.dim()
            )));
        }
        match self {
            Source::Ball(b) => b.check_inside(z),
            Source::Gaussian { .. } => Ok(()),
            Source::Cube { d } => match z.data().iter().position(|x| !(x.abs() <= 1.0)) {
                None => Ok(()),
                Some(i) => Err(Error::Precondition(format!(
                    "row {} leaves the cube [-1, 1]^{d}",
                    i / d
                ))),
            },
        }
    }
}

/// Column `[n, 1]` filled with `t`.
fn time_column(tape: &mut Tape, n: usize, t: f64) -> Var {
    tape.constant(Tensor::full(&[n, 1], t))
}

/// Velocity field `v(t, z; s)` from a network fed `[t | z | s]`.
fn velocity(net: &Mlp, tape: &mut Tape, t: Var, z: Var, s: Var, trainable: bool) -> Result<Var> {
    let x = tape.concat(&[t, z, s])?;
    net.forward(tape, x, trainable)
}

/// [`velocity`] without a tape.
fn velocity_values(net: &Mlp, t: f64, z: &Tensor, s: &Tensor) -> Result<Tensor> {
    let tz = concat_cols(&Tensor::full(&[z.rows(), 1], t), z)?;
    net.predict(&concat_cols(&tz, s)?)
}

/// The BC flow policy `mu_theta1`: plain Euler over a velocity network from a
/// source latent to an action.
#[derive(Debug, Clone)]
pub struct BcFlowPolicy {
    pub vel: Mlp,
    pub source: Source,
    pub steps: usize,
    state_dim: usize,
}

impl BcFlowPolicy {
    pub fn new(
        state_dim: usize,
        source: Source,
        hidden: &[usize],
        steps: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = source.dim();
        Self {
            vel: Mlp::new(MlpSpec::new(1 + d + state_dim, hidden, d), rng),
            source,
            steps,
            state_dim,
        }
    }

    pub fn from_net(vel: Mlp, state_dim: usize, source: Source, steps: usize) -> Result<Self> {
        let d = source.dim();
        if vel.input_dim() != 1 + d + state_dim || vel.output_dim() != d {
            return Err(Error::shape(format!(
                "BC velocity net maps {} -> {}, expected {} -> {d}",
                vel.input_dim(),
                vel.output_dim(),
                1 + d + state_dim
            )));
        }
        Ok(Self {
            vel,
            source,
            steps,
            state_dim,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.source.dim()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig::plain(self.steps)
    }

    /// `psi(1, z; s)` on the tape. The weights are trainable only if asked.
    pub fn action_on(
        &self,
        tape: &mut Tape,
        s: Var,
        z: Var,
        trainable: bool,
    ) -> Result<(Var, RolloutStats)> {
        let n = tape.value(z).rows();
        let domain = BallDomain::for_action_box(self.action_dim());
        integrate(tape, z, &domain, &self.integrator(), |tape, t, z| {
            let t = time_column(tape, n, t);
            velocity(&self.vel, tape, t, z, s, trainable)
        })
    }

    /// Actions for latents drawn from the source. Latents outside the
    /// source's support are rejected.
    pub fn sample_action(&self, s: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.source.check(z)?;
        self.flow_values(s, z)
    }

    fn flow_values(&self, s: &Tensor, z: &Tensor) -> Result<Tensor> {
        let domain = BallDomain::for_action_box(self.action_dim());
        let (a, _) = integrate_values(z, &domain, &self.integrator(), |t, z| {
            velocity_values(&self.vel, t, z, s)
        })?;
        Ok(a)
    }

    pub fn export(&self, ckpt: &mut Checkpoint) {
        self.vel.export("bc", ckpt);
    }
}

/// The distilled one-step policy `mu_hat(z; s)`.
#[derive(Debug, Clone)]
pub struct OneStepPolicy {
    pub net: Mlp,
}

impl OneStepPolicy {
    pub fn new(state_dim: usize, d: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            net: Mlp::new(MlpSpec::new(d + state_dim, hidden, d), rng),
        }
    }

    pub fn action_on(&self, tape: &mut Tape, s: Var, z: Var, trainable: bool) -> Result<Var> {
        let x = tape.concat(&[z, s])?;
        self.net.forward(tape, x, trainable)
    }

    pub fn act(&self, s: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.net.predict(&concat_cols(z, s)?)
    }

    pub fn export(&self, ckpt: &mut Checkpoint) {
        self.net.export("onestep", ckpt);
    }
}

/// The map from latent to action that the noise generator is trained through.
#[derive(Debug, Clone, Copy)]
pub enum ActionHead<'a> {
    OneStep(&'a OneStepPolicy),
    /// The full multi-step BC flow (the NoDistill ablation).
    Flow(&'a BcFlowPolicy),
}

impl ActionHead<'_> {
    /// Head output on the tape with frozen weights.
    pub fn action_on(&self, tape: &mut Tape, s: Var, z: Var) -> Result<Var> {
        match self {
            ActionHead::OneStep(p) => p.action_on(tape, s, z, false),
            ActionHead::Flow(p) => Ok(p.action_on(tape, s, z, false)?.0),
        }
    }

    pub fn act(&self, s: &Tensor, z: &Tensor) -> Result<Tensor> {
        match self {
            ActionHead::OneStep(p) => p.act(s, z),
            ActionHead::Flow(p) => p.flow_values(s, z),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Velocity network integrated with the given mode.
    Flow(IntegratorMode),
    /// Plain Euler followed by a radial tanh squash.
    FlowTanh,
    /// Deterministic `f(s)`, radially squashed into the ball.
    Mlp,
    /// State-conditioned Gaussian, radially squashed into the ball.
    SquashedGaussian,
    /// `z = w`; no trainable parameters.
    Identity,
}

/// The noise generator `mu_theta2(w; s)` and its ablations.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    pub kind: NoiseKind,
    pub net: Option<Mlp>,
    /// Ball whose radius bounds the squashing variants and the reflections.
    pub domain: BallDomain,
    /// Distribution the input `w` is drawn from.
    pub input: Source,
    pub steps: usize,
    pub stop_reflection_grad: bool,
    state_dim: usize,
}

impl NoiseGenerator {
    pub fn new(
        kind: NoiseKind,
        state_dim: usize,
        domain: BallDomain,
        input: Source,
        hidden: &[usize],
        steps: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = domain.dim();
        let net = match kind {
            NoiseKind::Flow(_) | NoiseKind::FlowTanh => {
                Some(Mlp::new(MlpSpec::new(1 + d + state_dim, hidden, d), rng))
            }
            NoiseKind::Mlp => Some(Mlp::new(MlpSpec::new(state_dim, hidden, d), rng)),
            NoiseKind::SquashedGaussian => {
                Some(Mlp::new(MlpSpec::new(state_dim, hidden, 2 * d), rng))
            }
            NoiseKind::Identity => None,
        };

        Self {
            kind,
            net,
            domain,
            input,
            steps,
            stop_reflection_grad: false,
            state_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn net(&self) -> &Mlp {
        self.net.as_ref().expect("variant has a network")
    }

    /// `z = mu_theta2(w; s)` on the tape, with the integration bookkeeping
    /// (all zeros for the non-flow variants).
    pub fn generate_on(
        &self,
        tape: &mut Tape,
        s: Var,
        w: Var,
        trainable: bool,
    ) -> Result<(Var, RolloutStats)> {
        let n = tape.value(w).rows();
        self.input.check(tape.value(w))?;
        let l = self.domain.radius();
        match self.kind {
            NoiseKind::Flow(mode) => {
                let mut cfg = IntegratorConfig::new(self.steps, mode);
                cfg.stop_reflection_grad = self.stop_reflection_grad;
                let net = self.net();
                integrate(tape, w, &self.domain, &cfg, |tape, t, z| {
                    let t = time_column(tape, n, t);
                    velocity(net, tape, t, z, s, trainable)
                })
            }
            NoiseKind::FlowTanh => {
                let cfg = IntegratorConfig::plain(self.steps);
                let net = self.net();
                let (zhat, stats) = integrate(tape, w, &self.domain, &cfg, |tape, t, z| {
                    let t = time_column(tape, n, t);
                    velocity(net, tape, t, z, s, trainable)
                })?;
                Ok((squash_radial(tape, zhat, l), stats))
            }
            NoiseKind::Mlp => {
                let zhat = self.net().forward(tape, s, trainable)?;
                Ok((squash_radial(tape, zhat, l), RolloutStats::default()))
            }
            NoiseKind::SquashedGaussian => {
                let d = self.dim();
                let out = self.net().forward(tape, s, trainable)?;
                let mean = tape.slice_cols(out, 0, d)?;
                let log_std = tape.slice_cols(out, d, 2 * d)?;
                let log_std = tape.clamp(log_std, LOG_STD_RANGE.0, LOG_STD_RANGE.1);
                let std = tape.exp(log_std);
                let spread = tape.mul(std, w)?;
                let zhat = tape.add(mean, spread)?;
                Ok((squash_radial(tape, zhat, l), RolloutStats::default()))
            }
            NoiseKind::Identity => Ok((w, RolloutStats::default())),
        }
    }

    /// [`NoiseGenerator::generate_on`] without a tape; same arithmetic.
    pub fn generate(&self, s: &Tensor, w: &Tensor) -> Result<(Tensor, RolloutStats)> {
        self.input.check(w)?;
        let l = self.domain.radius();
        let field = |t: f64, z: &Tensor| velocity_values(self.net(), t, z, s);
        match self.kind {
            NoiseKind::Flow(mode) => {
                let mut cfg = IntegratorConfig::new(self.steps, mode);
                cfg.stop_reflection_grad = self.stop_reflection_grad;
                integrate_values(w, &self.domain, &cfg, field)
            }
            NoiseKind::FlowTanh => {
                let cfg = IntegratorConfig::plain(self.steps);
                let (zhat, stats) = integrate_values(w, &self.domain, &cfg, field)?;
                Ok((squash_radial_values(&zhat, l), stats))
            }
            NoiseKind::Mlp => {
                let zhat = self.net().predict(s)?;
                Ok((squash_radial_values(&zhat, l), RolloutStats::default()))
            }
            NoiseKind::SquashedGaussian => {
                let d = self.dim();
                let out = self.net().predict(s)?;
                if w.shape() != [out.rows(), d] {
                    return Err(Error::shape(format!(
                        "noise {:?} for {} states of dimension {d}",
                        w.shape(),
                        out.rows()
                    )));
                }
                let mut zhat = Tensor::zeros(w.shape());
                for r in 0..out.rows() {
                    let (o, wr) = (out.row(r), w.row(r));
                    for c in 0..d {
                        let std = o[d + c].clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1).exp();
                        zhat.row_mut(r)[c] = o[c] + std * wr[c];
                    }
                }
                Ok((squash_radial_values(&zhat, l), RolloutStats::default()))
            }
            NoiseKind::Identity => Ok((w.clone(), RolloutStats::default())),
        }
    }

    pub fn export(&self, ckpt: &mut Checkpoint) {
        if let Some(net) = &self.net {
            net.export("ng", ckpt);
        }
    }
}

/// Squared row distances averaged over rows: `mean_i ||x_i - y_i||^2`.
fn mean_sq_dist(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let n = tape.value(x).rows() as f64;
    let diff = tape.sub(x, y)?;
    let sq = tape.square(diff);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / n))
}

/// Flow-matching loss with explicit latents `z` and times `t`.
pub fn bc_loss_with(
    policy: &BcFlowPolicy,
    tape: &mut Tape,
    s: &Tensor,
    a: &Tensor,
    z: &Tensor,
    t: &[f64],
) -> Result<Var> {
    if a.shape() != z.shape() || t.len() != a.rows() || s.rows() != a.rows() {
        return Err(Error::shape(format!(
            "bc loss over s {:?}, a {:?}, z {:?}, {} times",
            s.shape(),
            a.shape(),
            z.shape(),
            t.len()
        )));
    }
    let d = a.cols();
    let mut xt = Tensor::zeros(a.shape());
    let mut target = Tensor::zeros(a.shape());
    for r in 0..a.rows() {
        for c in 0..d {
            let (ai, zi) = (a.row(r)[c], z.row(r)[c]);
            xt.row_mut(r)[c] = (1.0 - t[r]) * zi + t[r] * ai;
            target.row_mut(r)[c] = ai - zi;
        }
    }
    let tv = tape.constant(Tensor::matrix(t.len(), 1, t.to_vec()));
    let xt = tape.constant(xt);
    let sv = tape.constant(s.clone());
    let target = tape.constant(target);
    let v = velocity(&policy.vel, tape, tv, xt, sv, true)?;
    mean_sq_dist(tape, v, target)
}

pub fn bc_loss(
    policy: &BcFlowPolicy,
    tape: &mut Tape,
    s: &Tensor,
    a: &Tensor,
    rng: &mut impl Rng,
) -> Result<Var> {
    let z = policy.source.sample(rng, a.rows());
    let t: Vec<f64> = (0..a.rows()).map(|_| rng.gen::<f64>()).collect();
    bc_loss_with(policy, tape, s, a, &z, &t)
}

/// `-mean Q(s, head(mu_theta2(w; s); s))`; only the noise generator's weights
/// are trainable.
pub fn actor_loss_with(
    ng: &NoiseGenerator,
    head: ActionHead<'_>,
    critic: &CriticPair,
    tape: &mut Tape,
    s: &Tensor,
    w: &Tensor,
) -> Result<Var> {
    let sv = tape.constant(s.clone());
    let wv = tape.constant(w.clone());
    let (z, _) = ng.generate_on(tape, sv, wv, true)?;
    let a = head.action_on(tape, sv, z)?;
    let q = critic.q_on(tape, sv, a, false, false)?;
    let m = tape.mean_all(q);
    Ok(tape.neg(m))
}

pub fn actor_loss(
    ng: &NoiseGenerator,
    head: ActionHead<'_>,
    critic: &CriticPair,
    tape: &mut Tape,
    s: &Tensor,
    rng: &mut impl Rng,
) -> Result<Var> {
    let w = ng.input.sample(rng, s.rows());
    actor_loss_with(ng, head, critic, tape, s, &w)
}

/// `mean ||mu_hat(z; s) - mu_theta1(z; s)||^2` with the BC flow as a constant
/// target.
pub fn distill_loss_with(
    onestep: &OneStepPolicy,
    policy: &BcFlowPolicy,
    tape: &mut Tape,
    s: &Tensor,
    z: &Tensor,
) -> Result<Var> {
    let target = policy.sample_action(s, z)?;
    let sv = tape.constant(s.clone());
    let zv = tape.constant(z.clone());
    let pred = onestep.action_on(tape, sv, zv, true)?;
    let target = tape.constant(target);
    mean_sq_dist(tape, pred, target)
}

pub fn distill_loss(
    onestep: &OneStepPolicy,
    policy: &BcFlowPolicy,
    tape: &mut Tape,
    s: &Tensor,
    rng: &mut impl Rng,
) -> Result<Var> {
    let z = policy.source.sample(rng, s.rows());
    distill_loss_with(onestep, policy, tape, s, &z)
}

/// FQL-style one-step objective: `-mean Q(s, mu_hat(z; s)) + alpha * distill`.
/// Returns `(total, q_term, distill_term)`.
pub fn fql_loss_with(
    onestep: &OneStepPolicy,
    policy: &BcFlowPolicy,
    critic: &CriticPair,
    alpha: f64,
    tape: &mut Tape,
    s: &Tensor,
    z: &Tensor,
) -> Result<(Var, Var, Var)> {
    let target = policy.sample_action(s, z)?;
    let sv = tape.constant(s.clone());
    let zv = tape.constant(z.clone());
    let a = onestep.action_on(tape, sv, zv, true)?;
    let q = critic.q_on(tape, sv, a, false, false)?;
    let q = tape.mean_all(q);
    let q_term = tape.neg(q);
    let target = tape.constant(target);
    let distill = mean_sq_dist(tape, a, target)?;
    let reg = tape.scale(distill, alpha);
    Ok((tape.add(q_term, reg)?, q_term, distill))
}

/// `z = mu_theta2(w; s)` and `a = head(z; s)`. The action is not clipped.
pub fn compose_policy_action(
    ng: &NoiseGenerator,
    head: ActionHead<'_>,
    s: &Tensor,
    w: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (z, _) = ng.generate(s, w)?;
    let a = head.act(s, &z)?;
    Ok((z, a))
}

/// Clips each row into `[-1, 1]^d` in place; returns how many rows changed.
pub fn clip_to_box(a: &mut Tensor) -> usize {
    let mut clipped = 0;
    for r in 0..a.rows() {
        let mut hit = false;
        for x in a.row_mut(r) {
            let y = x.clamp(-1.0, 1.0);
            hit |= y != *x;
            *x = y;
        }
        clipped += hit as usize;
    }
    clipped
}
