//! The training loop, its configuration, the ablation variants and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

use crate::critic::{Aggregation, CriticPair};
use crate::envs::{EnvKind, TransitionBatch};
use crate::error::{Error, Result};
use crate::geometry::{BallDomain, IntegratorMode, RADIUS_SLACK};
use crate::nn::{norm, Adam, AdamConfig, Checkpoint, Mlp, Parameter, Tape, Tensor, Var};
use crate::policy::{
    actor_loss, bc_loss, clip_to_box, compose_policy_action, distill_loss, fql_loss_with,
    ActionHead, BcFlowPolicy, NoiseGenerator, NoiseKind, OneStepPolicy, Source,
};

/// Metrics CSV header.
pub const METRICS_HEADER: &str = "step,loss_critic,loss_bc,loss_distill,loss_actor,eval_return,clip_rate";

pub const VARIANT_TAGS: &str = "reform, nodistill, unbounded, gaussian-<xi>, mlp-ng, tanh-ng, \
     squashed-gaussian-ng, cube, billiard, fql-<alpha>";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Reform,
    NoDistill,
    Unbounded,
    /// Gaussian BC source with the noise ball at the `xi` chi-square quantile.
    Gaussian(f64),
    MlpNg,
    TanhNg,
    SquashedGaussianNg,
    Cube,
    Billiard,
    /// One-step policy trained on `-Q + alpha * distill`, no noise generator.
    Fql(f64),
}

impl Variant {
    pub fn parse(tag: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown variant `{tag}`; valid tags: {VARIANT_TAGS}"));
        let param = |rest: &str| rest.parse::<f64>().ok().filter(|x| x.is_finite());
        Ok(match tag {
            "reform" => Variant::Reform,
            "nodistill" => Variant::NoDistill,
            "unbounded" => Variant::Unbounded,
            "mlp-ng" => Variant::MlpNg,
            "tanh-ng" => Variant::TanhNg,
            "squashed-gaussian-ng" => Variant::SquashedGaussianNg,
            "cube" => Variant::Cube,
            "billiard" => Variant::Billiard,
            _ => {
                if let Some(rest) = tag.strip_prefix("gaussian-") {
                    let xi = param(rest).ok_or_else(bad)?;
                    if !(xi > 0.0 && xi < 1.0) {
                        return Err(Error::config(format!(
                            "gaussian variant needs 0 < xi < 1, got {xi}"
                        )));
                    }
                    Variant::Gaussian(xi)
                } else if let Some(rest) = tag.strip_prefix("fql-") {
                    let alpha = param(rest).ok_or_else(bad)?;
                    if alpha < 0.0 {
                        return Err(Error::config(format!("fql alpha must be >= 0, got {alpha}")));
                    }
                    Variant::Fql(alpha)
                } else {
                    return Err(bad());
                }
            }
        })
    }

    pub fn tag(&self) -> String {
        match self {
            Variant::Reform => "reform".into(),
            Variant::NoDistill => "nodistill".into(),
            Variant::Unbounded => "unbounded".into(),
            Variant::Gaussian(xi) => format!("gaussian-{xi}"),
            Variant::MlpNg => "mlp-ng".into(),
            Variant::TanhNg => "tanh-ng".into(),
            Variant::SquashedGaussianNg => "squashed-gaussian-ng".into(),
            Variant::Cube => "cube".into(),
            Variant::Billiard => "billiard".into(),
            Variant::Fql(alpha) => format!("fql-{alpha}"),
        }
    }
}

/// Radius of the ball holding a `xi` fraction of `N(0, I_d)`.
pub fn gaussian_radius(d: usize, xi: f64) -> f64 {
    let chi2 = ChiSquared::new(d as f64).expect("d > 0");
    // statrs inverts by bisection to about 1e-5; Newton on the CDF finishes
    // the job.
    let mut x = chi2.inverse_cdf(xi);
    for _ in 0..4 {
        let f = chi2.pdf(x);
        if !(f > 0.0) {
            break;
        }
        x -= (chi2.cdf(x) - xi) / f;
    }
    x.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub tau: f64,
    pub max_grad_norm: f64,
    pub flow_steps: usize,
    pub hidden: Vec<usize>,
    pub aggregation: Aggregation,
    /// Latent ball radius as a multiple of `sqrt(d)`.
    pub radius_scale: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Episodes in the final evaluation whose decisions are dumped.
    pub dump_episodes: usize,
    pub stop_reflection_grad: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Table-5 defaults with desk-scale widths.
    pub fn new(env: EnvKind, steps: usize) -> Self {
        Self {
            env,
            variant: Variant::Reform,
            steps,
            batch_size: 256,
            learning_rate: 3e-4,
            gamma: 0.995,
            tau: 0.005,
            max_grad_norm: 10.0,
            flow_steps: 10,
            hidden: vec![64, 64],
            aggregation: Aggregation::Mean,
            radius_scale: 1.0,
            eval_interval: 1000,
            eval_episodes: 32,
            dump_episodes: 1000,
            stop_reflection_grad: false,
            seed: 0,
        }
    }

    const REQUIRED: [&'static str; 2] = ["env", "steps"];

    /// Parses flat `key = value` lines; `#` starts a comment. `env` and
    /// `steps` are required, everything else has a default.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got `{line}`", i + 1))
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.iter().any(|(pk, _)| *pk == k) {
                return Err(Error::config(format!("key `{k}` given twice")));
            }
            pairs.push((k, v));
        }
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        for key in Self::REQUIRED {
            if get(key).is_none() {
                return Err(Error::config(format!("missing required key `{key}`")));
            }
        }
        let env = EnvKind::parse(get("env").expect("checked"))?;
        let mut cfg = Self::new(env, parse_num(get("steps").expect("checked"), "steps")?);
        for (k, v) in &pairs {
            match k.as_str() {
                "env" | "steps" => {}
                "variant" => cfg.variant = Variant::parse(v)?,
                "batch_size" => cfg.batch_size = parse_num(v, k)?,
                "learning_rate" => cfg.learning_rate = parse_num(v, k)?,
                "gamma" => cfg.gamma = parse_num(v, k)?,
                "tau" => cfg.tau = parse_num(v, k)?,
                "max_grad_norm" => cfg.max_grad_norm = parse_num(v, k)?,
                "flow_steps" => cfg.flow_steps = parse_num(v, k)?,
                "hidden" => {
                    cfg.hidden = v
                        .split(',')
                        .map(|w| parse_num(w.trim(), k))
                        .collect::<Result<_>>()?
                }
                "aggregation" => cfg.aggregation = Aggregation::parse(v)?,
                "time_distribution" => {
                    if v != "uniform" {
                        return Err(Error::config(format!(
                            "time_distribution supports only `uniform`, got `{v}`"
                        )));
                    }
                }
                "radius_scale" => cfg.radius_scale = parse_num(v, k)?,
                "eval_interval" => cfg.eval_interval = parse_num(v, k)?,
                "eval_episodes" => cfg.eval_episodes = parse_num(v, k)?,
                "dump_episodes" => cfg.dump_episodes = parse_num(v, k)?,
                "stop_reflection_grad" => cfg.stop_reflection_grad = parse_num(v, k)?,
                "seed" => cfg.seed = parse_num(v, k)?,
                _ => return Err(Error::config(format!("unknown key `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        format!(
            "env = {}\nvariant = {}\nsteps = {}\nbatch_size = {}\nlearning_rate = {}\n\
             gamma = {}\ntau = {}\nmax_grad_norm = {}\nflow_steps = {}\nhidden = {}\n\
             aggregation = {}\ntime_distribution = uniform\nradius_scale = {}\n\
             eval_interval = {}\neval_episodes = {}\ndump_episodes = {}\n\
             stop_reflection_grad = {}\nseed = {}\n",
            self.env.name(),
            self.variant.tag(),
            self.steps,
            self.batch_size,
            self.learning_rate,
            self.gamma,
            self.tau,
            self.max_grad_norm,
            self.flow_steps,
            hidden.join(","),
            self.aggregation.name(),
            self.radius_scale,
            self.eval_interval,
            self.eval_episodes,
            self.dump_episodes,
            self.stop_reflection_grad,
            self.seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.flow_steps == 0 {
            return fail("flow_steps must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail(format!("hidden widths must be positive, got {:?}", self.hidden));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.max_grad_norm > 0.0) {
            return fail(format!("max_grad_norm must be positive, got {}", self.max_grad_norm));
        }
        if !(self.radius_scale > 0.0 && self.radius_scale.is_finite()) {
            return fail(format!("radius_scale must be positive, got {}", self.radius_scale));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 || self.dump_episodes == 0 {
            return fail("eval_interval, eval_episodes and dump_episodes must be positive".into());
        }
        Ok(())
    }

    /// Radius of the latent ball the noise lives in.
    pub fn latent_radius(&self) -> f64 {
        let d = self.env.action_dim();
        match self.variant {
            Variant::Gaussian(xi) => gaussian_radius(d, xi),
            Variant::Cube => (d as f64).sqrt(),
            _ => self.radius_scale * (d as f64).sqrt(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("key `{key}`: cannot parse `{v}`")))
}

/// Independent RNG stream `name` under a master seed.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a keeps the stream id stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Every network of one run plus its optimizers.
#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: TrainConfig,
    pub critic: CriticPair,
    pub bc: BcFlowPolicy,
    pub onestep: OneStepPolicy,
    pub ng: NoiseGenerator,
    opt_critic: Adam,
    opt_bc: Adam,
    opt_onestep: Adam,
    opt_ng: Option<Adam>,
}

/// Losses of one training step; `NaN` marks a sub-update the variant skips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub critic: f64,
    pub bc: f64,
    pub distill: f64,
    pub actor: f64,
}

impl Agent {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (sd, d) = (cfg.env.state_dim(), cfg.env.action_dim());
        let l = cfg.latent_radius();
        let ball = BallDomain::new(d, l)?;
        let mut rng = stream(cfg.seed, "init");
        let h = &cfg.hidden;
        let critic = CriticPair::new(sd, d, h, cfg.aggregation, cfg.gamma, &mut rng)?;
        let bc_source = match cfg.variant {
            Variant::Unbounded | Variant::Gaussian(_) => Source::Gaussian { d },
            Variant::Cube => Source::Cube { d },
            _ => Source::Ball(ball),
        };
        let bc = BcFlowPolicy::new(sd, bc_source, h, cfg.flow_steps, &mut rng);
        let onestep = OneStepPolicy::new(sd, d, h, &mut rng);
        let (kind, input) = match cfg.variant {
            Variant::Reform | Variant::NoDistill | Variant::Gaussian(_) => {
                (NoiseKind::Flow(IntegratorMode::ReflectProject), Source::Ball(ball))
            }
            Variant::Unbounded => (NoiseKind::Flow(IntegratorMode::Plain), Source::Gaussian { d }),
            Variant::MlpNg => (NoiseKind::Mlp, Source::Ball(ball)),
            Variant::TanhNg => (NoiseKind::FlowTanh, Source::Ball(ball)),
            Variant::SquashedGaussianNg => (NoiseKind::SquashedGaussian, Source::Gaussian { d }),
            Variant::Cube => (NoiseKind::Flow(IntegratorMode::ReflectCube), Source::Cube { d }),
            Variant::Billiard => (NoiseKind::Flow(IntegratorMode::ReflectBilliard), Source::Ball(ball)),
            Variant::Fql(_) => (NoiseKind::Identity, bc_source),
        };
        let mut ng = NoiseGenerator::new(kind, sd, ball, input, h, cfg.flow_steps, &mut rng);
        ng.stop_reflection_grad = cfg.stop_reflection_grad;

        let adam = AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        };
        let critic_params: Vec<&Parameter> =
            critic.q1.params().into_iter().chain(critic.q2.params()).collect();
        let opt_critic = Adam::new(adam, &critic_params);
        let opt_bc = Adam::new(adam, &bc.vel.params());
        let opt_onestep = Adam::new(adam, &onestep.net.params());
        let opt_ng = ng.net.as_ref().map(|n| Adam::new(adam, &n.params()));
        Ok(Self {
            cfg: cfg.clone(),
            critic,
            bc,
            onestep,
            ng,
            opt_critic,
            opt_bc,
            opt_onestep,
            opt_ng,
        })
    }

    /// The latent-to-action map used for acting and for the actor loss.
    pub fn head(&self) -> ActionHead<'_> {
        match self.cfg.variant {
            Variant::NoDistill => ActionHead::Flow(&self.bc),
            _ => ActionHead::OneStep(&self.onestep),
        }
    }

    /// `(z, a)` for states `s` and generator inputs `w`; `a` unclipped.
    pub fn act(&self, s: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor)> {
        compose_policy_action(&self.ng, self.head(), s, w)
    }

    /// One pass of the update schedule on `batch`.
    pub fn train_step(&mut self, batch: &TransitionBatch, rngs: &mut Streams, step: usize) -> Result<StepLosses> {
        let clip = self.cfg.max_grad_norm;
        let mut out = StepLosses {
            critic: f64::NAN,
            bc: f64::NAN,
            distill: f64::NAN,
            actor: f64::NAN,
        };

        // (1) critic, with fresh noise for the next actions
        let next_actions = if batch.done.iter().all(|&d| d == 1.0) {
            None
        } else {
            let w = self.ng.input.sample(&mut rngs.critic, batch.len());
            Some(self.act(&batch.s2, &w)?.1)
        };
        let mut tape = Tape::new();
        let loss = self.critic.td_loss(&mut tape, batch, next_actions.as_ref())?;
        out.critic = finite(&tape, loss, step, "loss_critic")?;
        let g = tape.backward(loss)?;
        let CriticPair { q1, q2, .. } = &mut self.critic;
        q1.zero_grad();
        q2.zero_grad();
        q1.accumulate_grads(&g);
        q2.accumulate_grads(&g);
        let mut params: Vec<&mut Parameter> = q1.params_mut();
        params.extend(q2.params_mut());
        self.opt_critic.step(&mut params, clip)?;

        // (2) BC flow
        let mut tape = Tape::new();
        let loss = bc_loss(&self.bc, &mut tape, &batch.s, &batch.a, &mut rngs.bc)?;
        out.bc = finite(&tape, loss, step, "loss_bc")?;
        update(&mut self.bc.vel, &mut self.opt_bc, &tape, loss, clip)?;

        // (3) distillation, (4) noise generator
        match self.cfg.variant {
            Variant::NoDistill => {}
            Variant::Fql(alpha) => {
                let z = self.bc.source.sample(&mut rngs.distill, batch.len());
                let mut tape = Tape::new();
                let (total, _, distill) = fql_loss_with(
                    &self.onestep,
                    &self.bc,
                    &self.critic,
                    alpha,
                    &mut tape,
                    &batch.s,
                    &z,
                )?;
                out.distill = finite(&tape, distill, step, "loss_distill")?;
                out.actor = finite(&tape, total, step, "loss_actor")?;
                update(&mut self.onestep.net, &mut self.opt_onestep, &tape, total, clip)?;
            }
            _ => {
                let mut tape = Tape::new();
                let loss = distill_loss(&self.onestep, &self.bc, &mut tape, &batch.s, &mut rngs.distill)?;
                out.distill = finite(&tape, loss, step, "loss_distill")?;
                update(&mut self.onestep.net, &mut self.opt_onestep, &tape, loss, clip)?;
            }
        }
        if let (Some(_), Some(_)) = (&self.ng.net, &self.opt_ng) {
            let mut tape = Tape::new();
            let head = match self.cfg.variant {
                Variant::NoDistill => ActionHead::Flow(&self.bc),
                _ => ActionHead::OneStep(&self.onestep),
            };
            let loss = actor_loss(&self.ng, head, &self.critic, &mut tape, &batch.s, &mut rngs.ng)?;
            out.actor = finite(&tape, loss, step, "loss_actor")?;
            let net = self.ng.net.as_mut().expect("checked");
            update(net, self.opt_ng.as_mut().expect("checked"), &tape, loss, clip)?;
        }

        // (5) targets
        self.critic.update_targets(self.cfg.tau)?;
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.critic.export(&mut ckpt);
        self.bc.export(&mut ckpt);
        self.onestep.export(&mut ckpt);
        self.ng.export(&mut ckpt);
        ckpt
    }

    /// Restores every network from a checkpoint written by [`Agent::checkpoint`].
    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.critic.load(ckpt)?;
        self.bc.vel.load("bc", ckpt)?;
        self.onestep.net.load("onestep", ckpt)?;
        if let Some(net) = &mut self.ng.net {
            net.load("ng", ckpt)?;
        }
        Ok(())
    }
}

fn finite(tape: &Tape, loss: Var, step: usize, name: &'static str) -> Result<f64> {
    let v = tape.value(loss).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { step, loss: name })
    }
}

fn update(net: &mut Mlp, opt: &mut Adam, tape: &Tape, loss: Var, clip: f64) -> Result<()> {
    let g = tape.backward(loss)?;
    net.zero_grad();
    net.accumulate_grads(&g);
    opt.step(&mut net.params_mut(), clip)?;
    Ok(())
}

/// The named RNG streams of a run.
#[derive(Debug, Clone)]
pub struct Streams {
    pub data: ChaCha8Rng,
    pub bc: ChaCha8Rng,
    pub distill: ChaCha8Rng,
    pub ng: ChaCha8Rng,
    pub critic: ChaCha8Rng,
    pub eval: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            data: stream(seed, "data"),
            bc: stream(seed, "bc"),
            distill: stream(seed, "distill"),
            ng: stream(seed, "ng"),
            critic: stream(seed, "critic"),
            eval: stream(seed, "eval"),
        }
    }
}

/// Per-decision records `(w, z, a)` from an evaluation; `a` is the action
/// sent to the environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleDump {
    pub d: usize,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
}

fn axis_names(d: usize) -> Vec<String> {
    match d {
        1 => vec!["x".into()],
        2 => vec!["x".into(), "y".into()],
        3 => vec!["x".into(), "y".into(), "z".into()],
        _ => (0..d).map(|i| i.to_string()).collect(),
    }
}

impl SampleDump {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        if self.d == 0 {
            0
        } else {
            self.z.len() / self.d
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, w: &[f64], z: &[f64], a: &[f64]) {
        self.w.extend_from_slice(w);
        self.z.extend_from_slice(z);
        self.a.extend_from_slice(a);
    }

    pub fn row(&self, i: usize) -> (&[f64], &[f64], &[f64]) {
        let r = i * self.d..(i + 1) * self.d;
        (&self.w[r.clone()], &self.z[r.clone()], &self.a[r])
    }

    pub fn z_norms(&self) -> Vec<f64> {
        self.z.chunks(self.d.max(1)).map(norm).collect()
    }

    pub fn header(d: usize) -> String {
        let axes = axis_names(d);
        let mut cols = Vec::new();
        for p in ["w", "z", "a"] {
            cols.extend(axes.iter().map(|x| format!("{p}{x}")));
        }
        cols.push("znorm".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header(self.d);
        out.push('\n');
        for i in 0..self.len() {
            let (w, z, a) = self.row(i);
            let mut fields: Vec<String> = Vec::with_capacity(3 * self.d + 1);
            for part in [w, z, a] {
                fields.extend(part.iter().map(|v| v.to_string()));
            }
            fields.push(norm(z).to_string());
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses [`SampleDump::to_csv`] output. The stored `znorm` column is
    /// ignored; norms are always recomputed from the latents.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(0, "empty sample dump"))?;
        let cols = header.split(',').count();
        if cols < 4 || (cols - 1) % 3 != 0 {
            return Err(Error::format(0, format!("sample dump header has {cols} columns")));
        }
        let d = (cols - 1) / 3;
        if header != Self::header(d) {
            return Err(Error::format(0, format!("unexpected sample dump header `{header}`")));
        }
        let mut dump = Self::new(d);
        let mut offset = header.len() as u64 + 1;
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(offset, format!("row {} has a non-numeric field", i + 1)))?;
            if vals.len() != cols {
                return Err(Error::format(
                    offset,
                    format!("row {} has {} fields, expected {cols}", i + 1, vals.len()),
                ));
            }
            dump.push(&vals[..d], &vals[d..2 * d], &vals[2 * d..3 * d]);
            offset += line.len() as u64 + 1;
        }
        Ok(dump)
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_return: f64,
    pub returns: Vec<f64>,
    pub samples: SampleDump,
    pub clipped: usize,
    pub emitted: usize,
}

/// Rolls out `episodes` episodes in lockstep, one fresh `w` per decision.
pub fn evaluate(agent: &Agent, env: EnvKind, episodes: usize, rng: &mut impl Rng) -> Result<EvalReport> {
    let sd = env.state_dim();
    let d = env.action_dim();
    let mut states: Vec<Vec<f64>> = (0..episodes).map(|_| env.initial_state(rng)).collect();
    let mut returns = vec![0.0; episodes];
    let mut active: Vec<usize> = (0..episodes).collect();
    let mut samples = SampleDump::new(d);
    let (mut clipped, mut emitted) = (0, 0);
    for _ in 0..env.horizon() {
        if active.is_empty() {
            break;
        }
        let n = active.len();
        let s_data: Vec<f64> = active.iter().flat_map(|&i| states[i].iter().copied()).collect();
        let s = Tensor::matrix(n, sd, s_data);
        let w = agent.ng.input.sample(rng, n);
        let (z, mut a) = agent.act(&s, &w)?;
        clipped += clip_to_box(&mut a);
        emitted += n;
        let mut still = Vec::with_capacity(n);
        for (row, &i) in active.iter().enumerate() {
            samples.push(w.row(row), z.row(row), a.row(row));
            let (s2, r, done) = env.step(&states[i], a.row(row))?;
            returns[i] += r;
            states[i] = s2;
            if !done {
                still.push(i);
            }
        }
        active = still;
    }
    let mean_return = returns.iter().sum::<f64>() / episodes as f64;
    Ok(EvalReport {
        mean_return,
        returns,
        samples,
        clipped,
        emitted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub losses: StepLosses,
    pub eval_return: f64,
    pub clip_rate: f64,
}

/// Everything a run leaves behind.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    pub metrics: Vec<MetricsRow>,
    pub initial_checkpoint: Checkpoint,
    pub final_checkpoint: Option<Checkpoint>,
    pub samples: SampleDump,
    pub final_eval: f64,
    pub latent_radius: f64,
    pub actions_emitted: usize,
    pub actions_clipped: usize,
}

impl RunArtifacts {
    pub fn clip_rate(&self) -> f64 {
        if self.actions_emitted == 0 {
            0.0
        } else {
            self.actions_clipped as f64 / self.actions_emitted as f64
        }
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for m in &self.metrics {
            let l = m.losses;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.step, l.critic, l.bc, l.distill, l.actor, m.eval_return, m.clip_rate
            )
            .expect("string write");
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "variant = {}\nlatent_radius = {}\nfinal_eval_return = {}\nactions_emitted = {}\n\
             actions_clipped = {}\nclip_rate = {}\n",
            self.config.variant.tag(),
            self.latent_radius,
            self.final_eval,
            self.actions_emitted,
            self.actions_clipped,
            self.clip_rate()
        )
    }

    /// Writes `config.txt`, `metrics.csv`, `run.txt`, `samples.csv` and the
    /// RFCK checkpoints under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), self.config.to_text())?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        fs::write(dir.join("run.txt"), self.summary())?;
        fs::write(dir.join("samples.csv"), self.samples.to_csv())?;
        self.initial_checkpoint.write(dir.join("initial.rfck"))?;
        if let Some(c) = &self.final_checkpoint {
            c.write(dir.join("final.rfck"))?;
        }
        Ok(())
    }
}

/// Runs the full schedule for `cfg.steps` steps.
pub fn train(cfg: &TrainConfig, dataset: &TransitionBatch) -> Result<RunArtifacts> {
    let env = cfg.env;
    if dataset.state_dim() != env.state_dim() || dataset.action_dim() != env.action_dim() {
        return Err(Error::shape(format!(
            "dataset has state dim {} and action dim {}, env {} needs {} and {}",
            dataset.state_dim(),
            dataset.action_dim(),
            env.name(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    if dataset.is_empty() && cfg.steps > 0 {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    let mut agent = Agent::new(cfg)?;
    let initial_checkpoint = agent.checkpoint();
    let mut rngs = Streams::new(cfg.seed);
    let mut metrics = Vec::new();
    let (mut emitted, mut clipped) = (0usize, 0usize);
    for step in 1..=cfg.steps {
        let batch = dataset.sample(&mut rngs.data, cfg.batch_size);
        let losses = agent.train_step(&batch, &mut rngs, step)?;
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let report = evaluate(&agent, env, cfg.eval_episodes, &mut rngs.eval)?;
            emitted += report.emitted;
            clipped += report.clipped;
            metrics.push(MetricsRow {
                step,
                losses,
                eval_return: report.mean_return,
                clip_rate: clipped as f64 / emitted as f64,
            });
            log::info!(
                "step {step}: critic {:.4} bc {:.4} distill {:.4} actor {:.4} return {:.4}",
                losses.critic,
                losses.bc,
                losses.distill,
                losses.actor,
                report.mean_return
            );
        }
    }
    let dump = evaluate(&agent, env, cfg.dump_episodes, &mut rngs.eval)?;
    emitted += dump.emitted;
    clipped += dump.clipped;
    Ok(RunArtifacts {
        config: cfg.clone(),
        metrics,
        initial_checkpoint,
        final_checkpoint: (cfg.steps > 0).then(|| agent.checkpoint()),
        samples: dump.samples,
        final_eval: dump.mean_return,
        latent_radius: cfg.latent_radius(),
        actions_emitted: emitted,
        actions_clipped: clipped,
    })
}

/// Result of checking a run's latents and clip counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub rows: usize,
    pub max_norm: f64,
    pub radius: f64,
    /// Rows whose latent norm exceeds `radius * (1 + 1e-12)`.
    pub violations: Vec<usize>,
    pub clip_rate: f64,
}

impl AuditReport {
    pub const MAX_CLIP_RATE: f64 = 1e-3;

    pub fn new(samples: &SampleDump, radius: f64, clip_rate: f64) -> Self {
        let norms = samples.z_norms();
        let bound = radius * (1.0 + RADIUS_SLACK);
        Self {
            rows: norms.len(),
            max_norm: norms.iter().copied().fold(0.0, f64::max),
            radius,
            violations: norms
                .iter()
                .enumerate()
                .filter(|(_, n)| !(**n <= bound))
                .map(|(i, _)| i)
                .collect(),
            clip_rate,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.clip_rate < Self::MAX_CLIP_RATE
    }
}

/// Trains every `(variant, seed)` pair on the same data. Returns one summary
/// line per run, `variant,seed,final_eval_return,clip_rate`, and writes each
/// run under `out/<variant>-seed<seed>` when `out` is given.
pub fn sweep(
    base: &TrainConfig,
    dataset: &TransitionBatch,
    variants: &[Variant],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<String> {
    let mut summary = String::from("variant,seed,final_eval_return,clip_rate\n");
    for v in variants {
        for &seed in seeds {
            let cfg = TrainConfig {
                variant: *v,
                seed,
                ..base.clone()
            };
            let run = train(&cfg, dataset)?;
            if let Some(dir) = out {
                run.write(dir.join(format!("{}-seed{seed}", v.tag())))?;
            }
            writeln!(summary, "{},{seed},{},{}", v.tag(), run.final_eval, run.clip_rate())
                .expect("string write");
        }
    }
    Ok(summary)
}
