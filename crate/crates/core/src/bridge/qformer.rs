//! The query transformer f_w: an encoder over the projected [IMG] hidden
//! states and a decoder that runs the learned queries against it.

use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::numerics::{Init, ParamId, ParamStore, Scalar, Session, Var};

#[derive(Clone, Debug)]
pub struct QFormer {
    pub input: Linear,
    pub encoder: Vec<Block>,
    pub ln_memory: LayerNorm,
    pub queries: ParamId,
    pub decoder: Vec<Block>,
    pub ln_out: LayerNorm,
    pub output: Linear,
    pub rows_in: usize,
    pub width_in: usize,
}

impl QFormer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        m: usize,
        e: usize,
        l: usize,
        r: usize,
        encoder_layers: usize,
        decoder_layers: usize,
        heads: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let input = Linear::new(store, "qformer.input", e, r, init);
        let encoder = (0..encoder_layers)
            .map(|i| Block::new(store, &format!("qformer.enc{i}"), r, heads, false, init))
            .collect::<Result<_>>()?;
        let ln_memory = LayerNorm::new(store, "qformer.ln_memory", r, init);
        let queries = store.add("queries", init.normal(&[l, r], 0.02));
        let decoder = (0..decoder_layers)
            .map(|i| Block::new(store, &format!("qformer.dec{i}"), r, heads, true, init))
            .collect::<Result<_>>()?;
        Ok(Self {
            input,
            encoder,
            ln_memory,
            queries,
            decoder,
            ln_out: LayerNorm::new(store, "qformer.ln_out", r, init),
            output: Linear::new(store, "qformer.output", r, r, init),
            rows_in: m,
            width_in: e,
        })
    }

    /// `m × e` hidden states to `L × r` conditioning.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, img_hidden: Var) -> Result<Var> {
        let shape = s.value(img_hidden).shape();
        if shape != [self.rows_in, self.width_in] {
            return Err(Error::Dimension {
                op: "qformer_forward",
                left: shape.to_vec(),
                right: vec![self.rows_in, self.width_in],
            });
        }
        let mut x = self.input.forward(s, img_hidden)?;
        for block in &self.encoder {
            x = block.forward(s, x, None, false)?;
        }
        let memory = self.ln_memory.forward(s, x)?;
        let mut q = s.p(self.queries)?;
        for block in &self.decoder {
            q = block.forward(s, q, Some(memory), false)?;
        }
        let q = self.ln_out.forward(s, q)?;
        self.output.forward(s, q)
    }
}
