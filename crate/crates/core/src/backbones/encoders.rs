//! Frozen visual encoder, diffusion text encoder and image decoder.

use crate::error::{Error, Result};
use crate::nn::Attention;
use crate::numerics::{Init, ParamId, ParamStore, Scalar, Session, Tensor};
use crate::vocab::TokenId;

/// `tanh(flatten(image) · W + b)`.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub w: ParamId,
    pub b: ParamId,
    pub image_shape: [usize; 3],
    pub out_dim: usize,
}

impl VisualEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, image_shape: [usize; 3], out_dim: usize, init: &mut Init) -> Self {
        let pixels: usize = image_shape.iter().product();
        // Columns are centred so a flat image maps to tanh(b) and only the
        // pattern content moves the embedding.
        let mut w: Tensor<T> = init.uniform(&[pixels, out_dim], 4.0 / (pixels as f64).sqrt());
        for j in 0..out_dim {
            let mean = (0..pixels).map(|i| w.data()[i * out_dim + j]).sum::<T>() / T::of(pixels as f64);
            for i in 0..pixels {
                w.data_mut()[i * out_dim + j] -= mean;
            }
        }
        Self {
            w: store.add("visual.w", w),
            b: store.add("visual.b", init.uniform(&[out_dim], 0.5)),
            image_shape,
            out_dim,
        }
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.shape() != self.image_shape {
            return Err(Error::Dimension {
                op: "visual_encode",
                left: image.shape().to_vec(),
                right: self.image_shape.to_vec(),
            });
        }
        let flat = image.reshape(&[1, image.numel()])?;
        let pre = flat.matmul(store.get(self.w))?;
        let out = pre.zip_map(store.get(self.b), |x, b| (x + b).tanh());
        out.reshape(&[self.out_dim])
    }
}

/// Token embedding plus sinusoidal positions, one self-attention layer,
/// truncated or zero-padded to exactly `L` rows.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub attn: Attention,
    pub rows: usize,
    pub width: usize,
    pub vocab: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        vocab: usize,
        rows: usize,
        width: usize,
        heads: usize,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(Self {
            embedding: store.add("text_encoder.tok", init.normal(&[vocab, width], 0.5)),
            attn: Attention::new(store, "text_encoder.attn", width, heads, init)?,
            rows,
            width,
            vocab,
        })
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, tokens: &[TokenId]) -> Result<Tensor<T>> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: self.vocab,
            });
        }
        let mut s = Session::new().with_store(store, false);
        let table = s.p(self.embedding)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = s.graph.gather(table, &ids)?;
        let pos = s.constant(sinusoidal(tokens.len(), self.width))?;
        let x = s.graph.add(x, pos)?;
        let a = self.attn.forward(&mut s, x, x, false)?;
        let y = s.graph.add(x, a)?;
        let y = s.value(y);
        let mut out = Tensor::zeros(&[self.rows, self.width]);
        let keep = y.rows().min(self.rows) * self.width;
        out.data_mut()[..keep].copy_from_slice(&y.data()[..keep]);
        Ok(out)
    }
}

pub fn sinusoidal<T: Scalar>(len: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, width], |i| {
        let (p, j) = ((i / width) as f64, i % width);
        let freq = 10_000f64.powf(-((2 * (j / 2)) as f64) / width as f64);
        T::of(if j % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() })
    })
}

/// `sigmoid(flatten(cond) · A + b)` reshaped to an image.
#[derive(Clone, Debug)]
pub struct ImageDecoder {
    pub a: ParamId,
    pub b: ParamId,
    pub cond_shape: [usize; 2],
    pub image_shape: [usize; 3],
}

impl ImageDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cond_shape: [usize; 2], image_shape: [usize; 3], init: &mut Init) -> Self {
        let fan_in = cond_shape[0] * cond_shape[1];
        let pixels: usize = image_shape.iter().product();
        Self {
            a: store.add("image_decoder.a", init.uniform(&[fan_in, pixels], 1.0 / (fan_in as f64).sqrt())),
            b: store.add("image_decoder.b", init.zeros(&[pixels])),
            cond_shape,
            image_shape,
        }
    }

    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        if cond.shape() != self.cond_shape {
            return Err(Error::Dimension {
                op: "image_decode",
                left: cond.shape().to_vec(),
                right: self.cond_shape.to_vec(),
            });
        }
        let flat = cond.reshape(&[1, cond.numel()])?;
        let pre = flat.matmul(store.get(self.a))?;
        let img = pre.zip_map(store.get(self.b), |x, b| T::one() / (T::one() + (-(x + b)).exp()));
        img.reshape(&self.image_shape)
    }
}
