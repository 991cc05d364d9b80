//! Frozen stand-ins for the pretrained components: language model, visual
//! encoder, diffusion text encoder and image decoder.
//!
//! Construction is a pure function of the seed and config. The language
//! model is pretrained on synthetic recipe text before freezing, and the
//! image decoder is fitted so that decoding the text encoder's output for a
//! recipe reproduces that recipe's image.

pub mod encoders;
pub mod lm;

use nalgebra::DMatrix;

use crate::config::Config;
use crate::data::synth::SyntheticWorld;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, Init, ParamStore, Scalar, Session, StoreKind, Tensor};
use crate::rng::{seeded, Stream};
use crate::vocab::{TokenSequence, Vocab};

pub use encoders::{ImageDecoder, TextEncoder, VisualEncoder};
pub use lm::{FrozenLm, LmOutput, Piece};

/// Longest run of zero prefix rows shown to the LM during pretraining, so
/// that prefixed and unprefixed text are both in distribution.
pub const MAX_PRETRAIN_PREFIX: usize = 8;

#[derive(Clone, Debug)]
pub struct Backbones<T: Scalar = f32> {
    pub store: ParamStore<T>,
    pub lm: FrozenLm,
    pub visual: VisualEncoder,
    pub text_encoder: TextEncoder,
    pub image_decoder: ImageDecoder,
    pub vocab: Vocab,
}

impl<T: Scalar> Backbones<T> {
    fn with_init(cfg: &Config, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.dims;
        let b = &cfg.backbone;
        let mut store = ParamStore::new(StoreKind::Frozen);
        let lm = FrozenLm::new(&mut store, d.v, d.e, b.lm_layers, b.lm_heads, b.max_positions, init)?;
        let visual = VisualEncoder::new(&mut store, d.image_shape(), d.d, init);
        let text_encoder = TextEncoder::new(&mut store, d.v, d.l, d.r, b.text_encoder_heads, init)?;
        let image_decoder = ImageDecoder::new(&mut store, [d.l, d.r], d.image_shape(), init);
        Ok(Self {
            store,
            lm,
            visual,
            text_encoder,
            image_decoder,
            vocab: Vocab::new(d.m),
        })
    }

    /// Structure only, all weights zero. Used before loading a checkpoint.
    pub fn layout(cfg: &Config) -> Result<Self> {
        Self::with_init(cfg, &mut Init::layout())
    }

    /// Seeded initialization, LM pretraining and decoder fitting.
    pub fn build(cfg: &Config) -> Result<Self> {
        let seed = cfg.training.seed;
        let mut rng = seeded(seed, Stream::BackboneInit);
        let mut bb = Self::with_init(cfg, &mut Init::random(&mut rng))?;
        bb.pretrain_lm(cfg)?;
        bb.fit_image_decoder(cfg)?;
        Ok(bb)
    }

    /// Next-token training of the LM on synthetic recipes, each preceded by
    /// 0..=8 zero embedding rows.
    fn pretrain_lm(&mut self, cfg: &Config) -> Result<()> {
        let b = &cfg.backbone;
        let mut rng = seeded(cfg.training.seed, Stream::Pretrain);
        let adam = AdamConfig {
            lr: b.pretrain_lr,
            ..AdamConfig::default()
        };
        let lm_ids: Vec<_> = self
            .store
            .ids()
            .filter(|&id| self.store.name(id).starts_with("frozen/lm."))
            .collect();
        let mut states: Vec<AdamState<T>> = lm_ids
            .iter()
            .map(|&id| AdamState::new(self.store.get(id).shape()))
            .collect();
        for step in 0..b.pretrain_steps {
            let batch: Vec<(usize, TokenSequence)> = (0..b.pretrain_batch)
                .map(|_| {
                    use rand::Rng;
                    let subset = SyntheticWorld::sample_subset(&mut rng);
                    let prefix = rng.random_range(0..=MAX_PRETRAIN_PREFIX);
                    let text = SyntheticWorld::recipe_text(&subset);
                    Ok((prefix, self.vocab.encode(&text)?))
                })
                .collect::<Result<_>>()?;
            let grads = {
                let mut s = Session::new().with_store(&self.store, true);
                let mut losses = Vec::new();
                let mut targets = 0usize;
                for (prefix, tokens) in &batch {
                    let ids = tokens.ids();
                    let mut pieces = Vec::new();
                    if *prefix > 0 {
                        pieces.push(Piece::Embeds(s.constant(Tensor::zeros(&[*prefix, cfg.dims.e]))?));
                    }
                    pieces.push(Piece::Tokens(ids[..ids.len() - 1].to_vec()));
                    let out = self.lm.forward(&mut s, &pieces, None)?;
                    let rows = s.graph.slice_rows(out.logits, *prefix, ids.len() - 1)?;
                    let tgt: Vec<usize> = ids[1..].iter().map(|&t| t as usize).collect();
                    targets += tgt.len();
                    losses.push(s.graph.cross_entropy(rows, &tgt)?);
                }
                let total = s.graph.concat_rows(&losses)?;
                let total = s.graph.sum(total)?;
                let mean = s.graph.scale(total, 1.0 / targets as f64)?;
                if step % 500 == 0 || step + 1 == b.pretrain_steps {
                    log::debug!("lm pretrain step {step}: nll/token {}", s.value(mean).item());
                }
                s.gradients(mean)?
            };
            for (&id, state) in lm_ids.iter().zip(&mut states) {
                let g = grads.get(id)?.clone();
                adam_step(&adam, self.store.get_mut(id), &g, state)?;
            }
        }
        Ok(())
    }

    /// Ridge regression, in logit space, from flattened text-encoder outputs
    /// to noise-free synthetic images of the same recipes.
    fn fit_image_decoder(&mut self, cfg: &Config) -> Result<()> {
        let n = cfg.backbone.decoder_fit_samples;
        if n == 0 {
            return Ok(());
        }
        let world = SyntheticWorld::new(cfg.dims.image_shape());
        let mut rng = seeded(cfg.training.seed, Stream::DecoderFit);
        let features = cfg.dims.l * cfg.dims.r + 1;
        let pixels = cfg.dims.pixels();
        let mut x = DMatrix::<f64>::zeros(n, features);
        let mut y = DMatrix::<f64>::zeros(n, pixels);
        for i in 0..n {
            let subset = SyntheticWorld::sample_subset(&mut rng);
            let tokens = self.vocab.encode(&SyntheticWorld::recipe_text(&subset))?;
            let cond = self.text_encode_target(&tokens)?;
            for (j, &v) in cond.data().iter().enumerate() {
                x[(i, j)] = v.as_f64();
            }
            x[(i, features - 1)] = 1.0;
            for (j, &p) in world.render(&subset, None).data().iter().enumerate() {
                let p = (p as f64).clamp(0.02, 0.98);
                y[(i, j)] = (p / (1.0 - p)).ln();
            }
        }
        let mut gram = x.transpose() * &x;
        for j in 0..features {
            gram[(j, j)] += cfg.backbone.decoder_ridge;
        }
        let rhs = x.transpose() * &y;
        let theta = gram
            .cholesky()
            .ok_or_else(|| Error::NonFinite("decoder fit: singular system".into()))?
            .solve(&rhs);
        let a = Tensor::from_fn(&[features - 1, pixels], |i| T::of(theta[(i / pixels, i % pixels)]));
        let b = Tensor::from_fn(&[pixels], |j| T::of(theta[(features - 1, j)]));
        *self.store.get_mut(self.image_decoder.a) = a;
        *self.store.get_mut(self.image_decoder.b) = b;
        Ok(())
    }

    /// v_φ(x) ∈ R^d.
    pub fn visual_encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.visual.encode(&self.store, image)
    }

    /// T_ψ(y) ∈ R^{L×r}; framing tokens are dropped before encoding.
    pub fn text_encode_target(&self, tokens: &TokenSequence) -> Result<Tensor<T>> {
        let words = tokens.words();
        let ids = if words.is_empty() { tokens.ids() } else { words };
        self.text_encoder.encode(&self.store, ids)
    }

    /// D_ψ(cond) ∈ [0,1]^{H×W×C}.
    pub fn image_decode(&self, cond: &Tensor<T>) -> Result<Tensor<T>> {
        self.image_decoder.decode(&self.store, cond)
    }

    /// Logits and hidden states for a token sequence without any [IMG]
    /// table, as plain tensors.
    pub fn lm_forward(&self, pieces: &[Piece]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut s = Session::new().with_store(&self.store, false);
        let out = self.lm.forward(&mut s, pieces, None)?;
        Ok((s.value(out.logits).clone(), s.value(out.hidden).clone()))
    }

    pub fn weights_hash(&self) -> String {
        self.store.sha256()
    }

    pub fn cast<U: Scalar>(&self) -> Backbones<U> {
        Backbones {
            store: self.store.cast(),
            lm: self.lm.clone(),
            visual: self.visual.clone(),
            text_encoder: self.text_encoder.clone(),
            image_decoder: self.image_decoder.clone(),
            vocab: self.vocab.clone(),
        }
    }
}
