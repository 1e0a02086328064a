use crate::error::{Error, Result};
use crate::hashnet::{HashHeadParams, TrainConfig};

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: HashHeadParams,
}

impl SgdState {
    pub fn new(params: &HashHeadParams) -> Self {
        SgdState {
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &HashHeadParams {
        &self.velocity
    }
}

/// `v <- momentum * v + g + weight_decay * w`, then `w <- w - lr * v`.
/// Weight decay applies to biases as well.
pub fn sgd_step(
    params: &mut HashHeadParams,
    grads: &HashHeadParams,
    state: &mut SgdState,
    cfg: &TrainConfig,
) -> Result<()> {
    let dims = |p: &HashHeadParams| (p.d(), p.hidden(), p.k());
    if dims(params) != dims(grads) || dims(params) != dims(&state.velocity) {
        return Err(Error::Shape(
            "parameter, gradient and momentum shapes differ".into(),
        ));
    }
    for ((w, g), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.velocity.blocks_mut())
    {
        for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *wi;
            *wi -= cfg.lr * *vi;
        }
    }
    Ok(())
}
