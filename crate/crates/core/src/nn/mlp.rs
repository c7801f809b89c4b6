use rand::Rng;

use super::gaussian::gelu_in_place;
use super::tape::{gemm, layer_norm_row, Tape, Var};
use super::tensor::Tensor;
use super::{Checkpoint, Parameter};
use crate::error::{Error, Result};

/// Layer widths and normalization flag for an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub layer_norm: bool,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            output,
            layer_norm: false,
        }
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    /// The hidden stack used when nothing overrides it.
    pub fn default_hidden() -> Vec<usize> {
        vec![512, 512, 512, 512]
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

#[derive(Debug, Clone)]
struct Dense {
    weight: Parameter,
    bias: Parameter,
    norm: Option<(Parameter, Parameter)>,
}

/// Fully connected network: `Linear -> [LayerNorm] -> GELU` per hidden
/// layer, plain `Linear` at the output.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
}

impl Mlp {
    /// Weights are LeCun-uniform, `U(-sqrt(3/fan_in), sqrt(3/fan_in))`;
    /// biases and layer-norm shifts start at zero, gains at one.
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let widths = spec.widths();
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let bound = (3.0 / fan_in as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                let hidden = i + 1 < n_layers;
                Dense {
                    weight: Parameter::new(
                        format!("layer{i}/weight"),
                        Tensor::matrix(fan_in, fan_out, w),
                    ),
                    bias: Parameter::new(format!("layer{i}/bias"), Tensor::zeros(&[fan_out])),
                    norm: (hidden && spec.layer_norm).then(|| {
                        (
                            Parameter::new(
                                format!("layer{i}/ln_gain"),
                                Tensor::full(&[fan_out], 1.0),
                            ),
                            Parameter::new(format!("layer{i}/ln_bias"), Tensor::zeros(&[fan_out])),
                        )
                    }),
                }
            })
            .collect();
        Self { spec, layers }
    }

    /// A network whose every weight and bias is zero, so it outputs zero.
    pub fn zeros(spec: MlpSpec) -> Self {
        let mut net = Self::new(spec, &mut rand::rngs::mock::StepRng::new(0, 0));
        for p in net.params_mut() {
            if !p.name().ends_with("ln_gain") {
                p.value.fill(0.0);
            }
        }
        net
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some((g, b)) = &l.norm {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some((g, b)) = &mut l.norm {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn num_weights(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Records the forward pass on `tape`. With `trainable == false` the
    /// weights are frozen: gradients still reach `x`, never the weights.
    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.spec.input {
            return Err(Error::shape(format!(
                "network expects [batch, {}] input, got {:?}",
                self.spec.input,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let reg = |tape: &mut Tape, p: &Parameter| {
            if trainable {
                tape.param(p)
            } else {
                tape.frozen_param(p)
            }
        };
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = reg(tape, &layer.weight);
            let b = reg(tape, &layer.bias);
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if i < last {
                if let Some((g, s)) = &layer.norm {
                    let g = reg(tape, g);
                    let s = reg(tape, s);
                    h = tape.layer_norm(h, g, s)?;
                }
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// Plain evaluation without a tape. Same arithmetic as [`Mlp::forward`],
    /// so the two agree bit for bit.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let rows = x.rows();
        let last = self.layers.len() - 1;
        let mut h: Option<Vec<f64>> = None;
        let mut width = self.spec.input;
        let mut scratch = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let out_w = layer.bias.value.len();
            let mut out = vec![0.0; rows * out_w];
            let input = h.as_deref().unwrap_or(x.data());
            gemm(rows, width, out_w, input, false, layer.weight.value.data(), false, &mut out, 0.0);
            for row in out.chunks_exact_mut(out_w) {
                for (v, b) in row.iter_mut().zip(layer.bias.value.data()) {
                    *v += b;
                }
            }
            if i < last {
                if let Some((g, b)) = &layer.norm {
                    scratch.resize(out_w, 0.0);
                    for row in out.chunks_exact_mut(out_w) {
                        layer_norm_row(row, g.value.data(), b.value.data(), &mut scratch);
                    }
                }
                gelu_in_place(&mut out);
            }
            h = Some(out);
            width = out_w;
        }
        Ok(Tensor::matrix(rows, width, h.expect("at least one layer")))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Adds this network's gradients from a reverse pass into each
    /// parameter's `grad`. Parameters the loss does not reach are untouched.
    pub fn accumulate_grads(&mut self, grads: &super::Gradients) {
        for p in self.params_mut() {
            if let Some(g) = grads.param(p) {
                p.grad.add_assign(g);
            }
        }
    }

    /// Entries named `{prefix}/{param}` for checkpointing.
    pub fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for p in self.params() {
            ckpt.push(format!("{prefix}/{}", p.name()), p.value.clone());
        }
    }

    /// Overwrites this network's values from `{prefix}/...` entries. Shapes
    /// must match exactly.
    pub fn load(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for p in self.params_mut() {
            let key = format!("{prefix}/{}", p.name());
            let t = ckpt
                .get(&key)
                .ok_or_else(|| Error::contract(format!("checkpoint has no entry `{key}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "`{key}` is {:?} in the checkpoint, {:?} in the network",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Rebuilds a network from the shapes stored under `prefix`.
    pub fn from_checkpoint(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let mut widths = Vec::new();
        let mut layer_norm = false;
        for i in 0.. {
            let Some(w) = ckpt.get(&format!("{prefix}/layer{i}/weight")) else {
                break;
            };
            if w.shape().len() != 2 {
                return Err(Error::shape(format!("{prefix}/layer{i}/weight is not a matrix")));
            }
            if i == 0 {
                widths.push(w.shape()[0]);
            }
            widths.push(w.shape()[1]);
            if ckpt.get(&format!("{prefix}/layer{i}/ln_gain")).is_some() {
                layer_norm = true;
            }
        }
        if widths.len() < 2 {
            return Err(Error::contract(format!("checkpoint has no network `{prefix}`")));
        }
        let spec = MlpSpec {
            input: widths[0],
            hidden: widths[1..widths.len() - 1].to_vec(),
            output: widths[widths.len() - 1],
            layer_norm,
        };
        let mut net = Self::zeros(spec);
        net.load(prefix, ckpt)?;
        Ok(net)
    }
}
