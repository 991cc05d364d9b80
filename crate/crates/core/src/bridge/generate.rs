//! Interleaved text and image decoding.
//!
//! Decoding is written against [`StepModel`] so the [IMG] run rules can be
//! exercised with stub models as well as the real one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Model;
use crate::backbones::Piece;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{seeded, Stream};
use crate::vocab::{TokenId, Vocab, BOS, EOS, PAD};

/// One element of the LM context.
#[derive(Clone, Debug)]
pub enum Slot {
    Token(TokenId),
    /// Visual prefix, `k × e`.
    Prefix(Tensor),
}

impl Slot {
    fn len(&self) -> usize {
        match self {
            Slot::Token(_) => 1,
            Slot::Prefix(p) => p.rows(),
        }
    }
}

/// Model output after reading a context.
#[derive(Clone, Debug)]
pub struct Step {
    /// Logits over the extended vocabulary at the last position.
    pub logits: Vec<f32>,
    /// Final-layer hidden states for every position, `T × e`.
    pub hidden: Tensor,
}

pub trait StepModel {
    fn vocab(&self) -> &Vocab;

    /// Longest context the model accepts.
    fn capacity(&self) -> usize {
        usize::MAX
    }

    fn image_prefix(&self, image: &Tensor) -> Result<Tensor>;

    fn step(&self, context: &[Slot]) -> Result<Step>;

    /// Image from the `m` hidden states of one [IMG] run.
    fn synthesize(&self, img_hidden: &Tensor) -> Result<Tensor>;
}

impl StepModel for Model<'_, f32> {
    fn vocab(&self) -> &Vocab {
        &self.backbones.vocab
    }

    fn capacity(&self) -> usize {
        self.backbones.lm.max_positions
    }

    fn image_prefix(&self, image: &Tensor) -> Result<Tensor> {
        let v = self.backbones.visual_encode(image)?;
        Model::image_prefix(self, &v)
    }

    fn step(&self, context: &[Slot]) -> Result<Step> {
        let mut s = self.session(false);
        let mut pieces = Vec::new();
        for slot in context {
            match slot {
                Slot::Token(t) => match pieces.last_mut() {
                    Some(Piece::Tokens(run)) => run.push(*t),
                    _ => pieces.push(Piece::Tokens(vec![*t])),
                },
                Slot::Prefix(p) => pieces.push(Piece::Embeds(s.constant(p.clone())?)),
            }
        }
        let img_table = s.p(self.bridge.e_img)?;
        let out = self.backbones.lm.forward(&mut s, &pieces, Some(img_table))?;
        let logits = s.value(out.logits);
        Ok(Step {
            logits: logits.row(logits.rows() - 1).to_vec(),
            hidden: s.value(out.hidden).clone(),
        })
    }

    fn synthesize(&self, img_hidden: &Tensor) -> Result<Tensor> {
        let cond = self.qformer_forward(img_hidden)?;
        self.backbones.image_decode(&cond)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Text(String),
    Image(Tensor),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub segments: Vec<Segment>,
    /// Every emitted token, forced [IMG] tokens included, `[EOS]` excluded.
    pub tokens: Vec<TokenId>,
}

impl Generation {
    /// Concatenated text segments.
    pub fn text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(t.as_str()),
                Segment::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn images(&self) -> impl Iterator<Item = &Tensor> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Image(t) => Some(t),
            Segment::Text(_) => None,
        })
    }
}

/// Prompt images become visual prefixes in place; `[BOS]` goes before the
/// first text segment, or last if there is no text.
fn prompt_context<M: StepModel + ?Sized>(model: &M, prompt: &[Segment]) -> Result<Vec<Slot>> {
    let mut ctx = Vec::new();
    let mut bos = false;
    for seg in prompt {
        match seg {
            Segment::Image(img) => ctx.push(Slot::Prefix(model.image_prefix(img)?)),
            Segment::Text(text) => {
                if !bos {
                    ctx.push(Slot::Token(BOS));
                    bos = true;
                }
                ctx.extend(model.vocab().encode_words(text)?.into_iter().map(Slot::Token));
            }
        }
    }
    if !bos {
        ctx.push(Slot::Token(BOS));
    }
    Ok(ctx)
}

/// Ids open to free choice: everything except `[PAD]`, `[BOS]` and
/// `[IMG_2..m]`, and `[IMG_1]` only while a whole run still fits.
fn allowed(vocab: &Vocab, id: usize, img_fits: bool) -> bool {
    let id = id as TokenId;
    if id == PAD || id == BOS {
        return false;
    }
    if vocab.is_img(id) {
        return id == vocab.img(1) && img_fits;
    }
    true
}

fn choose(logits: &[f32], ok: impl Fn(usize) -> bool, decoding: &Decoding, rng: &mut ChaCha8Rng) -> Result<TokenId> {
    if let Some(i) = logits.iter().position(|x| x.is_nan() || *x == f32::INFINITY) {
        return Err(Error::NonFinite(format!("logit {i} is {}", logits[i])));
    }
    let candidates: Vec<usize> = (0..logits.len())
        .filter(|&i| ok(i) && logits[i] > f32::NEG_INFINITY)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no token has nonzero probability".into()));
    }
    let pick = match *decoding {
        Decoding::Greedy => {
            let mut best = candidates[0];
            for &i in &candidates[1..] {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            best
        }
        Decoding::Sample { temperature, .. } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidInput(format!("temperature must be > 0, got {temperature}")));
            }
            let top = candidates.iter().map(|&i| logits[i] as f64).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = candidates
                .iter()
                .map(|&i| ((logits[i] as f64 - top) / temperature).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = *candidates.last().unwrap();
            for (&i, &w) in candidates.iter().zip(&weights) {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        }
    };
    Ok(pick as TokenId)
}

/// Autoregressive decoding over the extended vocabulary. Choosing `[IMG_1]`
/// forces `[IMG_2..m]`, and the run's hidden states become an image
/// segment. Stops at `[EOS]`, after `max_tokens` free choices, or when the
/// context is full.
pub fn generate_interleaved<M: StepModel + ?Sized>(
    model: &M,
    prompt: &[Segment],
    max_tokens: usize,
    decoding: Decoding,
) -> Result<Generation> {
    if max_tokens == 0 {
        return Err(Error::InvalidInput("max_tokens must be >= 1".into()));
    }
    let vocab = model.vocab();
    let m = vocab.img_tokens();
    let seed = match decoding {
        Decoding::Sample { seed, .. } => seed,
        Decoding::Greedy => 0,
    };
    let mut rng = seeded(seed, Stream::Sampling);
    let mut ctx = prompt_context(model, prompt)?;
    let mut ctx_len: usize = ctx.iter().map(Slot::len).sum();
    let mut segments = Vec::new();
    let mut tokens = Vec::new();
    let mut words: Vec<TokenId> = Vec::new();
    let flush = |words: &mut Vec<TokenId>, segments: &mut Vec<Segment>| -> Result<()> {
        if !words.is_empty() {
            segments.push(Segment::Text(vocab.decode(words)?));
            words.clear();
        }
        Ok(())
    };
    let mut step = model.step(&ctx)?;
    for decided in 1..=max_tokens {
        if step.logits.len() != vocab.len() {
            return Err(Error::Shape(format!(
                "step model returned {} logits for a vocabulary of {}",
                step.logits.len(),
                vocab.len()
            )));
        }
        let img_fits = ctx_len + m <= model.capacity();
        let id = choose(&step.logits, |i| allowed(vocab, i, img_fits), &decoding, &mut rng)?;
        if id == EOS {
            break;
        }
        if id == vocab.img(1) {
            flush(&mut words, &mut segments)?;
            for j in 1..=m {
                ctx.push(Slot::Token(vocab.img(j)));
                tokens.push(vocab.img(j));
            }
            ctx_len += m;
            step = model.step(&ctx)?;
            let rows = step.hidden.rows();
            let e = step.hidden.cols();
            let run = Tensor::new(vec![m, e], step.hidden.data()[(rows - m) * e..].to_vec())?;
            segments.push(Segment::Image(model.synthesize(&run)?));
        } else {
            words.push(id);
            tokens.push(id);
            ctx.push(Slot::Token(id));
            ctx_len += 1;
            if decided == max_tokens || ctx_len >= model.capacity() {
                break;
            }
            step = model.step(&ctx)?;
        }
        if ctx_len >= model.capacity() {
            break;
        }
    }
    flush(&mut words, &mut segments)?;
    Ok(Generation { segments, tokens })
}

/// Checks the [IMG] run contract on an emitted token stream: every run is
/// exactly `[IMG_1]..[IMG_m]` in order. Returns the number of runs, or the
/// offset of the first violation.
pub fn img_runs(vocab: &Vocab, tokens: &[TokenId]) -> std::result::Result<usize, usize> {
    let m = vocab.img_tokens();
    let mut runs = 0;
    let mut i = 0;
    while i < tokens.len() {
        if vocab.is_img(tokens[i]) {
            if tokens.len() - i < m || (1..=m).any(|j| tokens[i + j - 1] != vocab.img(j)) {
                return Err(i);
            }
            runs += 1;
            i += m;
        } else {
            i += 1;
        }
    }
    Ok(runs)
}
