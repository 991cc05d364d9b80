//! Small decoder-only language model standing in for the frozen LLM.

use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm};
use crate::numerics::{Init, ParamId, ParamStore, Scalar, Session, Var};
use crate::vocab::TokenId;

/// One contiguous run of LM inputs.
#[derive(Clone, Debug)]
pub enum Piece {
    Tokens(Vec<TokenId>),
    /// Precomputed input embeddings, `rows × e` (visual prefixes).
    Embeds(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct LmOutput {
    /// `T × (V + m)` when an [IMG] table is supplied, `T × V` otherwise.
    pub logits: Var,
    /// Final-layer hidden states, `T × e`.
    pub hidden: Var,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct FrozenLm {
    pub token_embedding: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub width: usize,
    pub vocab: usize,
    pub max_positions: usize,
}

impl FrozenLm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        vocab: usize,
        width: usize,
        layers: usize,
        heads: usize,
        max_positions: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let token_embedding = store.add("lm.tok", init.normal(&[vocab, width], 0.02));
        let positions = store.add("lm.pos", init.normal(&[max_positions, width], 0.02));
        let blocks = (0..layers)
            .map(|i| Block::new(store, &format!("lm.layer{i}"), width, heads, false, init))
            .collect::<Result<_>>()?;
        Ok(Self {
            token_embedding,
            positions,
            blocks,
            ln_final: LayerNorm::new(store, "lm.ln_f", width, init),
            width,
            vocab,
            max_positions,
        })
    }

    /// Causal forward pass. `img_table` (`m × e`) extends both the input and
    /// the tied output embedding with the [IMG] rows.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, pieces: &[Piece], img_table: Option<Var>) -> Result<LmOutput> {
        let tok = s.p(self.token_embedding)?;
        let table = match img_table {
            Some(img) => s.graph.concat_rows(&[tok, img])?,
            None => tok,
        };
        let size = s.value(table).rows();
        let mut rows = Vec::with_capacity(pieces.len());
        for piece in pieces {
            match piece {
                Piece::Tokens(ids) if ids.is_empty() => {}
                Piece::Tokens(ids) => {
                    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= size) {
                        return Err(Error::TokenOutOfRange { id: bad, size });
                    }
                    let idx: Vec<usize> = ids.iter().map(|&id| id as usize).collect();
                    rows.push(s.graph.gather(table, &idx)?);
                }
                Piece::Embeds(v) => {
                    if s.value(*v).cols() != self.width || s.value(*v).shape().len() != 2 {
                        return Err(Error::Dimension {
                            op: "lm prefix",
                            left: s.value(*v).shape().to_vec(),
                            right: vec![0, self.width],
                        });
                    }
                    rows.push(*v);
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::EmptySequence);
        }
        let x = if rows.len() == 1 {
            rows[0]
        } else {
            s.graph.concat_rows(&rows)?
        };
        let len = s.value(x).rows();
        if len > self.max_positions {
            return Err(Error::InvalidInput(format!(
                "sequence of {len} positions exceeds the LM limit of {}",
                self.max_positions
            )));
        }
        let pos_table = s.p(self.positions)?;
        let pos = s.graph.slice_rows(pos_table, 0, len)?;
        let mut h = s.graph.add(x, pos)?;
        for block in &self.blocks {
            h = block.forward(s, h, None, true)?;
        }
        let hidden = self.ln_final.forward(s, h)?;
        let logits = s.graph.matmul_nt(hidden, table)?;
        Ok(LmOutput {
            logits,
            hidden,
            len,
        })
    }
}
