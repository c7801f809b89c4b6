//! Numerical substrate: tensors, a reverse-mode tape, MLPs, Adam with global
//! gradient-norm clipping, Polyak target averaging and the RFCK checkpoint
//! format.

mod checkpoint;
mod gaussian;
mod mlp;
mod optim;
mod tape;
mod tensor;

use std::sync::atomic::{AtomicU64, Ordering};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::Reader;
pub use mlp::{Mlp, MlpSpec};
pub use optim::{clip_scale, global_grad_norm, polyak_update, Adam, AdamConfig};
pub use gaussian::{cdf_and_pdf, std_normal_cdf, std_normal_pdf};
pub use tape::{CustomOp, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{dot, norm, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor with its gradient slot.
///
/// `name` is local to the owning network (`layer0/weight`); checkpoints
/// prepend the network prefix. Every instance, including clones, carries a
/// process-unique id used to find it on a [`Tape`].
#[derive(Debug)]
pub struct Parameter {
    name: String,
    pub value: Tensor,
    pub grad: Tensor,
    id: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
        }
    }
}
