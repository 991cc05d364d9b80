//! The trainable bridge between the frozen backbones: the visual prefix
//! projection `W_recipe`, the [IMG] embeddings `E_img` and the query
//! transformer f_w with its learned queries.

pub mod generate;
pub mod qformer;
pub mod train;

use crate::backbones::{Backbones, Piece};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::numerics::{Init, ParamId, ParamStore, Scalar, Session, StoreKind, Tensor, Var};
use crate::rng::{seeded, Stream};
use crate::vocab::{TokenId, TokenSequence, BOS};

pub use generate::{generate_interleaved, img_runs, Decoding, Generation, Segment, Slot, Step, StepModel};
pub use qformer::QFormer;
pub use train::{batch_indices, LossReport, Trainer};

#[derive(Clone, Debug)]
pub struct BridgeParams<T: Scalar = f32> {
    pub store: ParamStore<T>,
    /// `d × (k·e)`.
    pub w_recipe: ParamId,
    /// `m × e`.
    pub e_img: ParamId,
    pub qformer: QFormer,
    pub k: usize,
}

impl<T: Scalar> BridgeParams<T> {
    fn with_init(cfg: &Config, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.dims;
        let mut store = ParamStore::new(StoreKind::Bridge);
        let w_recipe = store.add("w_recipe", init.uniform(&[d.d, d.k * d.e], 1.0 / (d.d as f64).sqrt()));
        let e_img = store.add("e_img", init.uniform(&[d.m, d.e], 1.0 / (d.e as f64).sqrt()));
        let b = &cfg.bridge;
        let qformer = QFormer::new(
            &mut store,
            d.m,
            d.e,
            d.l,
            d.r,
            b.encoder_layers,
            b.decoder_layers,
            b.heads,
            init,
        )?;
        Ok(Self {
            store,
            w_recipe,
            e_img,
            qformer,
            k: d.k,
        })
    }

    /// Fresh parameters from the bridge-init stream of the configured seed.
    pub fn init(cfg: &Config) -> Result<Self> {
        let mut rng = seeded(cfg.training.seed, Stream::BridgeInit);
        Self::with_init(cfg, &mut Init::random(&mut rng))
    }

    /// Structure only, all zeros.
    pub fn layout(cfg: &Config) -> Result<Self> {
        Self::with_init(cfg, &mut Init::layout())
    }

    pub fn cast<U: Scalar>(&self) -> BridgeParams<U> {
        BridgeParams {
            store: self.store.cast(),
            w_recipe: self.w_recipe,
            e_img: self.e_img,
            qformer: self.qformer.clone(),
            k: self.k,
        }
    }
}

/// Frozen backbones plus bridge: everything the losses and decoding need.
#[derive(Clone, Copy, Debug)]
pub struct Model<'a, T: Scalar = f32> {
    pub backbones: &'a Backbones<T>,
    pub bridge: &'a BridgeParams<T>,
}

impl<'a, T: Scalar> Model<'a, T> {
    pub fn new(backbones: &'a Backbones<T>, bridge: &'a BridgeParams<T>) -> Self {
        Self { backbones, bridge }
    }

    /// A session over both stores; only the bridge is trainable, and only
    /// when `trainable` is set.
    pub fn session(&self, trainable: bool) -> Session<'a, T> {
        Session::new()
            .with_store(&self.backbones.store, false)
            .with_store(&self.bridge.store, trainable)
    }

    fn dims(&self) -> (usize, usize, usize) {
        let w = self.bridge.store.get(self.bridge.w_recipe).shape();
        (w[0], self.bridge.k, w[1] / self.bridge.k)
    }

    /// `reshape(vᵀ · W_recipe, k × e)` inside a session.
    pub fn image_prefix_var(&self, s: &mut Session<T>, v: &Tensor<T>) -> Result<Var> {
        let (d, k, e) = self.dims();
        if v.shape() != [d] {
            return Err(Error::Shape(format!(
                "image_prefix: embedding has shape {:?}, expected [{d}] (d={d}, k={k}, e={e})",
                v.shape()
            )));
        }
        let v = s.constant(v.reshape(&[1, d])?)?;
        let w = s.p(self.bridge.w_recipe)?;
        let flat = s.graph.matmul(v, w)?;
        s.graph.reshape(flat, &[k, e])
    }

    pub fn image_prefix(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = self.session(false);
        let p = self.image_prefix_var(&mut s, v)?;
        Ok(s.value(p).clone())
    }

    /// l_r inside a session: summed NLL of every token after `[BOS]`,
    /// conditioned on the image prefix. The softmax runs over `V + m`, so
    /// `E_img` gets gradient through the normalizer as well as `W_recipe`.
    pub fn recipe_loss_var(&self, s: &mut Session<T>, image: &Tensor<T>, y: &TokenSequence) -> Result<Var> {
        let ids = y.ids();
        if ids.len() < 2 {
            return Err(Error::EmptySequence);
        }
        let v = self.backbones.visual_encode(image)?;
        let prefix = self.image_prefix_var(s, &v)?;
        let img_table = s.p(self.bridge.e_img)?;
        let inputs = [Piece::Embeds(prefix), Piece::Tokens(ids[..ids.len() - 1].to_vec())];
        let out = self.backbones.lm.forward(s, &inputs, Some(img_table))?;
        let rows = s.graph.slice_rows(out.logits, self.bridge.k, ids.len() - 1)?;
        let targets: Vec<usize> = ids[1..].iter().map(|&t| t as usize).collect();
        s.graph.cross_entropy(rows, &targets)
    }

    pub fn recipe_loss(&self, image: &Tensor<T>, y: &TokenSequence) -> Result<f64> {
        let mut s = self.session(false);
        let l = self.recipe_loss_var(&mut s, image, y)?;
        Ok(s.value(l).item().as_f64())
    }

    /// One LM pass over `[BOS] t_1..t_N [IMG_1]..[IMG_m]` with `E_img` live.
    /// Returns the logits row at `t_N` and the `m` hidden rows at the [IMG]
    /// positions.
    fn img_forward(&self, s: &mut Session<T>, y: &TokenSequence) -> Result<(Var, Var)> {
        let vocab = &self.backbones.vocab;
        if let Some(&bad) = y.ids().iter().find(|&&t| vocab.is_img(t)) {
            return Err(Error::InvalidInput(format!(
                "training text already contains [IMG] token {bad}"
            )));
        }
        let words = y.words();
        let m = vocab.img_tokens();
        let mut ids: Vec<TokenId> = Vec::with_capacity(words.len() + m + 1);
        ids.push(BOS);
        ids.extend_from_slice(words);
        ids.extend((1..=m).map(|j| vocab.img(j)));
        let img_table = s.p(self.bridge.e_img)?;
        let out = self.backbones.lm.forward(s, &[Piece::Tokens(ids)], Some(img_table))?;
        let last = s.graph.slice_rows(out.logits, words.len(), 1)?;
        let hidden = s.graph.slice_rows(out.hidden, words.len() + 1, m)?;
        Ok((last, hidden))
    }

    fn img_token_loss_of(&self, s: &mut Session<T>, last_logits: Var) -> Result<Var> {
        let img1 = self.backbones.vocab.img(1) as usize;
        s.graph.cross_entropy(last_logits, &[img1])
    }

    fn generation_loss_of(&self, s: &mut Session<T>, y: &TokenSequence, img_hidden: Var) -> Result<Var> {
        let target = self.backbones.text_encode_target(y)?;
        let out = self.bridge.qformer.forward(s, img_hidden)?;
        s.graph.mse(out, &target)
    }

    /// l_p inside a session: `−log p([IMG_1] | [BOS] t_1..t_N)`.
    pub fn img_token_loss_var(&self, s: &mut Session<T>, y: &TokenSequence) -> Result<Var> {
        let (last, _) = self.img_forward(s, y)?;
        self.img_token_loss_of(s, last)
    }

    pub fn img_token_loss(&self, y: &TokenSequence) -> Result<f64> {
        let mut s = self.session(false);
        let l = self.img_token_loss_var(&mut s, y)?;
        Ok(s.value(l).item().as_f64())
    }

    /// l_g inside a session: mean squared error between f_w of the [IMG]
    /// hidden states and `T_ψ(y)`.
    pub fn generation_loss_var(&self, s: &mut Session<T>, y: &TokenSequence) -> Result<Var> {
        let (_, hidden) = self.img_forward(s, y)?;
        self.generation_loss_of(s, y, hidden)
    }

    pub fn generation_loss(&self, y: &TokenSequence) -> Result<f64> {
        let mut s = self.session(false);
        let l = self.generation_loss_var(&mut s, y)?;
        Ok(s.value(l).item().as_f64())
    }

    /// l_p and l_g sharing a single LM pass.
    pub fn image_losses_var(&self, s: &mut Session<T>, y: &TokenSequence) -> Result<(Var, Var)> {
        let (last, hidden) = self.img_forward(s, y)?;
        let lp = self.img_token_loss_of(s, last)?;
        let lg = self.generation_loss_of(s, y, hidden)?;
        Ok((lp, lg))
    }

    pub fn qformer_forward(&self, img_hidden: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = self.session(false);
        let x = s.constant(img_hidden.clone())?;
        let out = self.bridge.qformer.forward(&mut s, x)?;
        Ok(s.value(out).clone())
    }

    /// Hidden states at the [IMG] positions after appending the run to `y`.
    pub fn img_hidden(&self, y: &TokenSequence) -> Result<Tensor<T>> {
        let mut s = self.session(false);
        let (_, hidden) = self.img_forward(&mut s, y)?;
        Ok(s.value(hidden).clone())
    }

    /// Recipe text to image through the forced [IMG] pathway:
    /// LM → f_w → image decoder.
    pub fn text_to_image(&self, y: &TokenSequence) -> Result<Tensor<T>> {
        let cond = self.qformer_forward(&self.img_hidden(y)?)?;
        self.backbones.image_decode(&cond)
    }
}

#[cfg(test)]
mod tests;
