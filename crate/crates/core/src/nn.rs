//! Small parameterised layers shared by the encoder, BRT and decoder.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            w: store.add_weight(format!("{name}/w"), fan_in, fan_out, rng)?,
            b: store.add_zeros(format!("{name}/b"), &[fan_out])?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}/hidden"), fan_in, hidden, rng)?,
            out: Linear::new(store, &format!("{name}/out"), hidden, fan_out, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}/gain"), Tensor::full(&[width], 1.0))?,
            bias: store.add_zeros(format!("{name}/bias"), &[width])?,
            eps,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Inverted dropout; identity when `rng` is `None` or `p == 0`.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph<'_>, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = (0..g.value(x).numel())
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect();
            g.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}
