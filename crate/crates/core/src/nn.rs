//! Transformer building blocks shared by the frozen backbones and the
//! trainable query transformer.

use crate::error::{Error, Result};
use crate::numerics::{Init, ParamId, ParamStore, Scalar, Session, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights ~ U(±1/√fan_in), zero bias.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, init: &mut Init) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: store.add(&format!("{name}.w"), init.uniform(&[fan_in, fan_out], bound)),
            b: store.add(&format!("{name}.b"), init.zeros(&[fan_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.w)?;
        let b = s.p(self.b)?;
        let y = s.graph.matmul(x, w)?;
        s.graph.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, init: &mut Init) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), init.ones(&[width])),
            bias: store.add(&format!("{name}.bias"), init.zeros(&[width])),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gain = s.p(self.gain)?;
        let bias = s.p(self.bias)?;
        let n = s.graph.layer_norm(x)?;
        let n = s.graph.mul_row(n, gain)?;
        s.graph.add_row(n, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        init: &mut Init,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, init),
            k: Linear::new(store, &format!("{name}.k"), width, width, init),
            v: Linear::new(store, &format!("{name}.v"), width, width, init),
            out: Linear::new(store, &format!("{name}.out"), width, width, init),
            heads,
            width,
        })
    }

    /// Multi-head attention of `x` over `context` (self-attention when
    /// `context` is `x`). `causal` requires equal lengths.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, context: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, context)?;
        let v = self.v.forward(s, context)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = s.graph.slice_cols(q, h * dh, dh)?;
            let kh = s.graph.slice_cols(k, h * dh, dh)?;
            let vh = s.graph.slice_cols(v, h * dh, dh)?;
            let scores = s.graph.matmul_nt(qh, kh)?;
            let scores = s.graph.scale(scores, scale)?;
            let attn = s.graph.softmax(scores, causal)?;
            outs.push(s.graph.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            s.graph.concat_cols(&outs)?
        };
        self.out.forward(s, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize, init: &mut Init) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, init),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, init),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.graph.gelu(h)?;
        self.down.forward(s, h)
    }
}

/// Pre-norm transformer layer: self-attention, optional cross-attention,
/// feed-forward, each with a residual connection.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        with_cross: bool,
        init: &mut Init,
    ) -> Result<Self> {
        let ln_self = LayerNorm::new(store, &format!("{name}.ln_self"), width, init);
        let self_attn = Attention::new(store, &format!("{name}.self_attn"), width, heads, init)?;
        let cross = if with_cross {
            Some((
                LayerNorm::new(store, &format!("{name}.ln_cross"), width, init),
                Attention::new(store, &format!("{name}.cross_attn"), width, heads, init)?,
            ))
        } else {
            None
        };
        Ok(Self {
            ln_self,
            self_attn,
            cross,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), width, init),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, 4 * width, init),
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, memory: Option<Var>, causal: bool) -> Result<Var> {
        let h = self.ln_self.forward(s, x)?;
        let a = self.self_attn.forward(s, h, h, causal)?;
        let mut x = s.graph.add(x, a)?;
        if let Some((ln, attn)) = &self.cross {
            let memory = memory.ok_or_else(|| Error::InvalidInput("cross-attention layer needs memory".into()))?;
            let h = ln.forward(s, x)?;
            let a = attn.forward(s, h, memory, false)?;
            x = s.graph.add(x, a)?;
        }
        let h = self.ln_ff.forward(s, x)?;
        let f = self.ff.forward(s, h)?;
        s.graph.add(x, f)
    }
}
