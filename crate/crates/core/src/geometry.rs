//! The latent domain `B_l^d` and the integrators that move points through it.
//!
//! Every integrator works on a batch of rows `[n, d]`. The velocity field is
//! a caller-supplied closure `(tape, t, z) -> v`, so the same code path serves
//! network fields, analytic test fields and adversarial ones. Reflection steps
//! are recorded on the tape as custom operations with hand-written
//! vector-Jacobian products.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{dot, norm, CustomOp, Tape, Tensor, Var};

/// Relative slack used wherever a float is compared against the radius.
pub const RADIUS_SLACK: f64 = 1e-12;

/// The closed ball `{z in R^d : ||z|| <= l}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallDomain {
    d: usize,
    l: f64,
}

impl BallDomain {
    pub fn new(d: usize, l: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::contract("ball dimension must be positive"));
        }
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::contract(format!("ball radius must be positive, got {l}")));
        }
        Ok(Self { d, l })
    }

    /// Smallest ball containing the action box `[-1, 1]^d`.
    pub fn for_action_box(d: usize) -> Self {
        Self::new(d, (d as f64).sqrt()).expect("d > 0")
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> f64 {
        self.l
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        norm(z) <= self.l
    }

    /// `n` points uniform in the ball: a Gaussian direction and radius
    /// `U^(1/d) * l`.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Tensor {
        let d = self.d;
        let mut data = Vec::with_capacity(n * d);
        let mut dir = vec![0.0; d];
        for _ in 0..n {
            let len = loop {
                for x in dir.iter_mut() {
                    *x = StandardNormal.sample(rng);
                }
                let len = norm(&dir);
                if len > 0.0 {
                    break len;
                }
            };
            let u: f64 = rng.gen();
            let r = u.powf(1.0 / d as f64) * self.l;
            data.extend(dir.iter().map(|x| x / len * r));
        }
        Tensor::matrix(n, d, data)
    }

    /// Errors unless every row lies in the ball (up to [`RADIUS_SLACK`]).
    pub fn check_inside(&self, z: &Tensor) -> Result<()> {
        if z.cols() != self.d {
            return Err(Error::shape(format!(
                "points have {} columns, ball has dimension {}",
                z.cols(),
                self.d
            )));
        }
        for r in 0..z.rows() {
            let n = norm(z.row(r));
            if !(n <= self.l * (1.0 + RADIUS_SLACK)) {
                return Err(Error::Precondition(format!(
                    "row {r} has norm {n} outside the ball of radius {}",
                    self.l
                )));
            }
        }
        Ok(())
    }
}

/// `n` points uniform in `[-1, 1]^d`.
pub fn sample_cube(d: usize, rng: &mut impl Rng, n: usize) -> Tensor {
    let data = (0..n * d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Tensor::matrix(n, d, data)
}

/// `n` standard normal points in `R^d`.
pub fn sample_gaussian(d: usize, rng: &mut impl Rng, n: usize) -> Tensor {
    let data = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(n, d, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegratorMode {
    Plain,
    /// Projected reflection onto the ball (the ReFORM step).
    ReflectProject,
    /// Modular mirror wrap into `[-1, 1]^d`.
    ReflectCube,
    /// One specular bounce off the sphere, then clipping.
    ReflectBilliard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub steps: usize,
    pub mode: IntegratorMode,
    /// Treat the reflection correction as a constant in the backward pass.
    pub stop_reflection_grad: bool,
}

impl IntegratorConfig {
    pub fn new(steps: usize, mode: IntegratorMode) -> Self {
        Self {
            steps,
            mode,
            stop_reflection_grad: false,
        }
    }

    pub fn plain(steps: usize) -> Self {
        Self::new(steps, IntegratorMode::Plain)
    }

    pub fn reflect(steps: usize) -> Self {
        Self::new(steps, IntegratorMode::ReflectProject)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

/// Bookkeeping from one integration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RolloutStats {
    /// Velocity-field evaluations.
    pub evals: usize,
    /// Row-steps where a reflection rule changed the Euler proposal.
    pub reflections: usize,
    /// Row-steps where the projection fired and the norm still grew by more
    /// than [`RADIUS_SLACK`].
    pub contraction_violations: usize,
    /// Largest row norm over all iterates, including the start.
    pub max_norm: f64,
}

/// One projected step for a single row. Returns whether the projection
/// fired.
pub fn project_step(z: &[f64], delta: &[f64], l: f64, out: &mut [f64]) -> bool {
    for ((o, a), b) in out.iter_mut().zip(z).zip(delta) {
        *o = a + b;
    }
    let rho = norm(out);
    if rho <= l {
        return false;
    }
    let c = delta.iter().zip(out.iter()).map(|(d, x)| d * x / rho).sum::<f64>();
    for o in out.iter_mut() {
        *o -= c * (*o / rho);
    }
    true
}

/// `1 - |(x + 1) mod 4 - 2|` with a non-negative modulo.
pub fn reflect_cube(x: f64) -> f64 {
    1.0 - ((x + 1.0).rem_euclid(4.0) - 2.0).abs()
}

fn reflect_cube_slope(x: f64) -> f64 {
    -((x + 1.0).rem_euclid(4.0) - 2.0).signum()
}

/// Intermediate values of one billiard step, kept for the backward pass.
#[derive(Debug, Clone)]
struct Bounce {
    a: f64,
    b: f64,
    c: f64,
    sq: f64,
    alpha: f64,
    p: Vec<f64>,
    r: Vec<f64>,
    k: f64,
    q: Vec<f64>,
    clipped: bool,
}

fn bounce(z: &[f64], delta: &[f64], l: f64) -> Option<Bounce> {
    let zhat: Vec<f64> = z.iter().zip(delta).map(|(a, b)| a + b).collect();
    if norm(&zhat) <= l {
        return None;
    }
    // ||z + alpha delta|| = l, the root in [0, 1].
    let a = dot(delta, delta);
    let b = dot(z, delta);
    let c = dot(z, z) - l * l;
    let sq = (b * b - a * c).max(0.0).sqrt();
    let alpha = ((-b + sq) / a).clamp(0.0, 1.0);
    let p: Vec<f64> = z.iter().zip(delta).map(|(x, d)| x + alpha * d).collect();
    let r: Vec<f64> = delta.iter().map(|d| (1.0 - alpha) * d).collect();
    let k = dot(&r, &p) / l;
    let q: Vec<f64> = p
        .iter()
        .zip(&r)
        .map(|(pi, ri)| pi + ri - 2.0 * k * pi / l)
        .collect();
    let clipped = norm(&q) > l;
    Some(Bounce {
        a,
        b,
        c,
        sq,
        alpha,
        p,
        r,
        k,
        q,
        clipped,
    })
}

/// One billiard step for a single row. Returns whether the boundary was hit.
pub fn billiard_step(z: &[f64], delta: &[f64], l: f64, out: &mut [f64]) -> bool {
    match bounce(z, delta, l) {
        None => {
            for ((o, a), b) in out.iter_mut().zip(z).zip(delta) {
                *o = a + b;
            }
            false
        }
        Some(bn) => {
            let s = if bn.clipped { l / norm(&bn.q) } else { 1.0 };
            for (o, q) in out.iter_mut().zip(&bn.q) {
                *o = q * s;
            }
            true
        }
    }
}

/// Reverse pass of one billiard row: returns `(g_z, g_delta)`.
fn billiard_vjp(z: &[f64], delta: &[f64], l: f64, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let Some(bn) = bounce(z, delta, l) else {
        return (g.to_vec(), g.to_vec());
    };
    let d = z.len();
    let g_q: Vec<f64> = if bn.clipped {
        let rq = norm(&bn.q);
        let u: Vec<f64> = bn.q.iter().map(|x| x / rq).collect();
        let gu = dot(g, &u);
        g.iter().zip(&u).map(|(gi, ui)| l / rq * (gi - gu * ui)).collect()
    } else {
        g.to_vec()
    };
    let m: Vec<f64> = bn.p.iter().map(|x| x / l).collect();
    // q = p + r - 2 k m, k = r . m, m = p / l
    let g_k = -2.0 * dot(&g_q, &m);
    let mut g_m: Vec<f64> = g_q.iter().map(|x| -2.0 * bn.k * x).collect();
    let mut g_p = g_q.clone();
    let mut g_r = g_q;
    for i in 0..d {
        g_r[i] += g_k * m[i];
        g_m[i] += g_k * bn.r[i];
        g_p[i] += g_m[i] / l;
    }
    let mut g_z = vec![0.0; d];
    let mut g_d = vec![0.0; d];
    // r = (1 - alpha) delta, p = z + alpha delta
    let mut g_alpha = -dot(&g_r, delta) + dot(&g_p, delta);
    for i in 0..d {
        g_d[i] += (1.0 - bn.alpha) * g_r[i] + bn.alpha * g_p[i];
        g_z[i] += g_p[i];
    }
    let raw_alpha = (-bn.b + bn.sq) / bn.a;
    if !(0.0..=1.0).contains(&raw_alpha) {
        g_alpha = 0.0;
    }
    // alpha = (-b + sq) / a, sq = sqrt(b^2 - a c)
    let mut g_b = -g_alpha / bn.a;
    let g_sq = g_alpha / bn.a;
    let mut g_a = -g_alpha * raw_alpha / bn.a;
    let g_disc = if bn.sq > 0.0 { g_sq / (2.0 * bn.sq) } else { 0.0 };
    g_b += 2.0 * bn.b * g_disc;
    g_a -= bn.c * g_disc;
    let g_c = -bn.a * g_disc;
    // a = delta . delta, b = z . delta, c = z . z - l^2
    for i in 0..d {
        g_z[i] += 2.0 * z[i] * g_c + delta[i] * g_b;
        g_d[i] += z[i] * g_b + 2.0 * delta[i] * g_a;
    }
    (g_z, g_d)
}

#[derive(Debug)]
struct ProjectOp {
    l: f64,
    stop_grad: bool,
}

impl CustomOp for ProjectOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (z, delta) = (inputs[0], inputs[1]);
        let d = z.cols();
        let mut gz = grad_output.clone();
        let mut gd = grad_output.clone();
        if !self.stop_grad {
            let mut zhat = vec![0.0; d];
            for r in 0..z.rows() {
                for (i, x) in zhat.iter_mut().enumerate() {
                    *x = z.row(r)[i] + delta.row(r)[i];
                }
                let rho = norm(&zhat);
                if rho <= self.l {
                    continue;
                }
                let dl = delta.row(r);
                let g = grad_output.row(r);
                let n: Vec<f64> = zhat.iter().map(|x| x / rho).collect();
                let c = dot(dl, &n);
                let gn = dot(g, &n);
                // w = -c g - (g.n) delta, projected orthogonally to n
                let w: Vec<f64> = g.iter().zip(dl).map(|(gi, di)| -c * gi - gn * di).collect();
                let wn = dot(&w, &n);
                let gzr: Vec<f64> = (0..d).map(|i| g[i] + (w[i] - wn * n[i]) / rho).collect();
                for i in 0..d {
                    gd.row_mut(r)[i] = gzr[i] - gn * n[i];
                }
                gz.row_mut(r).copy_from_slice(&gzr);
            }
        }
        vec![needs_grad[0].then_some(gz), needs_grad[1].then_some(gd)]
    }
}

#[derive(Debug)]
struct CubeOp {
    stop_grad: bool,
}

impl CustomOp for CubeOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>> {
        let g = if self.stop_grad {
            grad_output.clone()
        } else {
            let data = inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .zip(grad_output.data())
                .map(|((z, d), g)| g * reflect_cube_slope(z + d))
                .collect();
            Tensor::new(grad_output.shape().to_vec(), data).expect("same shape")
        };
        vec![needs_grad[0].then(|| g.clone()), needs_grad[1].then_some(g)]
    }
}

#[derive(Debug)]
struct BilliardOp {
    l: f64,
    stop_grad: bool,
}

impl CustomOp for BilliardOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>> {
        if self.stop_grad {
            return vec![
                needs_grad[0].then(|| grad_output.clone()),
                needs_grad[1].then(|| grad_output.clone()),
            ];
        }
        let (z, delta) = (inputs[0], inputs[1]);
        let mut gz = Tensor::zeros(z.shape());
        let mut gd = Tensor::zeros(z.shape());
        for r in 0..z.rows() {
            let (a, b) = billiard_vjp(z.row(r), delta.row(r), self.l, grad_output.row(r));
            gz.row_mut(r).copy_from_slice(&a);
            gd.row_mut(r).copy_from_slice(&b);
        }
        vec![needs_grad[0].then_some(gz), needs_grad[1].then_some(gd)]
    }
}

/// Applies one step of `cfg.mode` to value tensors, returning the new point
/// and updating `stats`.
fn step_values(
    z: &Tensor,
    delta: &Tensor,
    domain: &BallDomain,
    mode: IntegratorMode,
    stats: &mut RolloutStats,
) -> Tensor {
    let l = domain.radius();
    let mut out = Tensor::zeros(z.shape());
    for r in 0..z.rows() {
        let (zr, dr) = (z.row(r), delta.row(r));
        let o = out.row_mut(r);
        let fired = match mode {
            IntegratorMode::Plain => {
                for ((o, a), b) in o.iter_mut().zip(zr).zip(dr) {
                    *o = a + b;
                }
                false
            }
            IntegratorMode::ReflectProject => {
                let fired = project_step(zr, dr, l, o);
                if fired && norm(o) > norm(zr) * (1.0 + RADIUS_SLACK) {
                    stats.contraction_violations += 1;
                }
                fired
            }
            IntegratorMode::ReflectCube => {
                let mut fired = false;
                for ((o, a), b) in o.iter_mut().zip(zr).zip(dr) {
                    let x = a + b;
                    *o = reflect_cube(x);
                    fired |= *o != x;
                }
                fired
            }
            IntegratorMode::ReflectBilliard => billiard_step(zr, dr, l, o),
        };
        stats.reflections += fired as usize;
    }
    out
}

fn check_start(z0: &Tensor, domain: &BallDomain, mode: IntegratorMode) -> Result<()> {
    if z0.shape().len() != 2 || z0.cols() != domain.dim() {
        return Err(Error::shape(format!(
            "integration start {:?} does not match dimension {}",
            z0.shape(),
            domain.dim()
        )));
    }
    match mode {
        IntegratorMode::Plain => Ok(()),
        IntegratorMode::ReflectProject | IntegratorMode::ReflectBilliard => {
            domain.check_inside(z0)
        }
        IntegratorMode::ReflectCube => match z0.data().iter().position(|x| !(x.abs() <= 1.0)) {
            None => Ok(()),
            Some(i) => Err(Error::Precondition(format!(
                "row {} leaves the cube [-1, 1]^d",
                i / z0.cols()
            ))),
        },
    }
}

fn check_velocity(v: &Tensor, z: &Tensor, k: usize) -> Result<()> {
    if v.shape() != z.shape() {
        return Err(Error::shape(format!(
            "velocity at step {k} has shape {:?}, state {:?}",
            v.shape(),
            z.shape()
        )));
    }
    if !v.is_finite() {
        return Err(Error::Numeric(format!("velocity at step {k} is not finite")));
    }
    Ok(())
}

fn max_row_norm(z: &Tensor) -> f64 {
    z.row_norms().into_iter().fold(0.0, f64::max)
}

/// Integrates `dz/dt = v(t, z)` from `z0` over `[0, 1]` on the tape.
///
/// The field sees the current iterate, `v(k dt, z_k)`, and is called exactly
/// `cfg.steps` times whatever the mode.
pub fn integrate<F>(
    tape: &mut Tape,
    z0: Var,
    domain: &BallDomain,
    cfg: &IntegratorConfig,
    mut field: F,
) -> Result<(Var, RolloutStats)>
where
    F: FnMut(&mut Tape, f64, Var) -> Result<Var>,
{
    check_start(tape.value(z0), domain, cfg.mode)?;
    let dt = cfg.dt();
    let mut stats = RolloutStats {
        max_norm: max_row_norm(tape.value(z0)),
        ..Default::default()
    };
    let mut z = z0;
    for k in 0..cfg.steps {
        let v = field(tape, k as f64 * dt, z)?;
        stats.evals += 1;
        check_velocity(tape.value(v), tape.value(z), k)?;
        let delta = tape.scale(v, dt);
        z = match cfg.mode {
            IntegratorMode::Plain => tape.add(z, delta)?,
            mode => {
                let out = step_values(tape.value(z), tape.value(delta), domain, mode, &mut stats);
                let op: Box<dyn CustomOp> = match mode {
                    IntegratorMode::ReflectProject => Box::new(ProjectOp {
                        l: domain.radius(),
                        stop_grad: cfg.stop_reflection_grad,
                    }),
                    IntegratorMode::ReflectCube => Box::new(CubeOp {
                        stop_grad: cfg.stop_reflection_grad,
                    }),
                    _ => Box::new(BilliardOp {
                        l: domain.radius(),
                        stop_grad: cfg.stop_reflection_grad,
                    }),
                };
                tape.custom(&[z, delta], out, op)
            }
        };
        stats.max_norm = stats.max_norm.max(max_row_norm(tape.value(z)));
    }
    Ok((z, stats))
}

/// Same integration on plain values, without recording a graph.
pub fn integrate_values<F>(
    z0: &Tensor,
    domain: &BallDomain,
    cfg: &IntegratorConfig,
    mut field: F,
) -> Result<(Tensor, RolloutStats)>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    check_start(z0, domain, cfg.mode)?;
    let dt = cfg.dt();
    let mut stats = RolloutStats {
        max_norm: max_row_norm(z0),
        ..Default::default()
    };
    let mut z = z0.clone();
    for k in 0..cfg.steps {
        let v = field(k as f64 * dt, &z)?;
        stats.evals += 1;
        check_velocity(&v, &z, k)?;
        let delta = v.map(|x| x * dt);
        z = step_values(&z, &delta, domain, cfg.mode, &mut stats);
        stats.max_norm = stats.max_norm.max(max_row_norm(&z));
    }
    Ok((z, stats))
}

#[derive(Debug)]
struct RadialTanhOp {
    l: f64,
}

/// `l * tanh(rho) / rho` and its derivative in `rho`, divided by `rho`.
fn radial_tanh_factors(rho: f64, l: f64) -> (f64, f64) {
    if rho < 0.05 {
        // Series of tanh(r)/r; the closed form cancels badly near zero.
        const C: [f64; 6] = [
            1.0,
            -1.0 / 3.0,
            2.0 / 15.0,
            -17.0 / 315.0,
            62.0 / 2835.0,
            -1382.0 / 155_925.0,
        ];
        let r2 = rho * rho;
        let mut s = 0.0;
        let mut ds = 0.0;
        for k in (0..C.len()).rev() {
            s = s * r2 + C[k];
            if k > 0 {
                ds = ds * r2 + 2.0 * k as f64 * C[k];
            }
        }
        return (l * s, l * ds);
    }
    let t = rho.tanh();
    let sech2 = 1.0 - t * t;
    let s = l * t / rho;
    let ds = l * (sech2 * rho - t) / (rho * rho);
    (s, ds / rho)
}

impl CustomOp for RadialTanhOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>> {
        if !needs_grad[0] {
            return vec![None];
        }
        let x = inputs[0];
        let mut gx = Tensor::zeros(x.shape());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let g = grad_output.row(r);
            let (s, ds_over_rho) = radial_tanh_factors(norm(xr), self.l);
            let xg = dot(xr, g);
            for (o, (xi, gi)) in gx.row_mut(r).iter_mut().zip(xr.iter().zip(g)) {
                *o = s * gi + ds_over_rho * xg * xi;
            }
        }
        vec![Some(gx)]
    }
}

/// Radial squash into the open ball: `x / ||x|| * tanh(||x||) * l`, per row.
pub fn squash_radial(tape: &mut Tape, x: Var, l: f64) -> Var {
    let out = squash_radial_values(tape.value(x), l);
    tape.custom(&[x], out, Box::new(RadialTanhOp { l }))
}

/// [`squash_radial`] on plain values.
pub fn squash_radial_values(x: &Tensor, l: f64) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (s, _) = radial_tanh_factors(norm(x.row(r)), l);
        out.row_mut(r).iter_mut().for_each(|v| *v *= s);
    }
    out
}
