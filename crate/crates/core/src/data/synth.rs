//! Synthetic recipe/image pairs that share an ingredient signal.
//!
//! Each ingredient owns a fixed additive image pattern; a dish image is the
//! clipped sum of a base image, the patterns of its ingredients and a little
//! Gaussian noise. The recipe text is a deterministic template over the same
//! ingredient subset.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::corpus::{write_corpus, RecipeRecord};
use crate::data::tnsr;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{seeded, Stream};
use crate::vocab::{render_recipe, INGREDIENTS, MAX_INGREDIENTS, MIN_INGREDIENTS};

/// Seed of the ingredient patterns. Independent of any corpus seed so that
/// every corpus and every backbone sees the same ingredient appearance.
const PATTERN_SEED: u64 = 0x5eed_f00d;
const PATTERN_AMPLITUDE: f64 = 0.12;
pub const NOISE_STD: f64 = 0.02;

/// The fixed ingredient→appearance mapping.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    shape: [usize; 3],
    base: Tensor,
    patterns: Vec<Tensor>,
}

impl SyntheticWorld {
    pub fn new(shape: [usize; 3]) -> Self {
        let [h, w, c] = shape;
        let base = Tensor::from_fn(&shape, |i| {
            let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
            let fy = y as f32 / h.max(2).saturating_sub(1) as f32;
            let fx = x as f32 / w.max(2).saturating_sub(1) as f32;
            0.15 + 0.05 * fy + 0.05 * fx + 0.03 * ch as f32
        });
        let mut rng = seeded(PATTERN_SEED, Stream::Corpus);
        let patterns = (0..INGREDIENTS.len())
            .map(|_| Tensor::from_fn(&shape, |_| rng.random_range(0.0..PATTERN_AMPLITUDE) as f32))
            .collect();
        Self {
            shape,
            base,
            patterns,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// A sorted ingredient subset of size 2..=5.
    pub fn sample_subset(rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = rng.random_range(MIN_INGREDIENTS..=MAX_INGREDIENTS);
        let mut subset = sample(rng, INGREDIENTS.len(), size).into_vec();
        subset.sort_unstable();
        subset
    }

    /// `clip01(base + Σ pattern_i + noise)`; noise only when `rng` is given.
    pub fn render(&self, subset: &[usize], rng: Option<&mut ChaCha8Rng>) -> Tensor {
        let mut img = self.base.clone();
        for &i in subset {
            for (p, &q) in img.data_mut().iter_mut().zip(self.patterns[i].data()) {
                *p += q;
            }
        }
        if let Some(rng) = rng {
            let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
            for p in img.data_mut() {
                *p += noise.sample(rng) as f32;
            }
        }
        img.map(|p| p.clamp(0.0, 1.0))
    }

    /// Template text for a subset: title, ingredients, instructions joined by
    /// newlines.
    pub fn recipe_text(subset: &[usize]) -> String {
        let (title, ings, steps) = render_recipe(subset);
        let mut lines = vec![title];
        lines.extend(ings);
        lines.extend(steps);
        lines.join("\n")
    }
}

/// One generated record together with its image and ingredient subset.
#[derive(Clone, Debug)]
pub struct SynthExample {
    pub record: RecipeRecord,
    pub image: Tensor,
    pub subset: Vec<usize>,
}

/// Generates `n` records in memory. Fully determined by `seed`, `n` and the
/// image shape.
pub fn synth_examples(seed: u64, n: usize, shape: [usize; 3]) -> Result<Vec<SynthExample>> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    let world = SyntheticWorld::new(shape);
    let mut rng = seeded(seed, Stream::Corpus);
    Ok((0..n)
        .map(|idx| {
            let subset = SyntheticWorld::sample_subset(&mut rng);
            let image = world.render(&subset, Some(&mut rng));
            let (title, ingredients, instructions) = render_recipe(&subset);
            let id = format!("r{idx:05}");
            SynthExample {
                record: RecipeRecord {
                    image_path: format!("images/{id}.tnsr"),
                    id,
                    title,
                    ingredients,
                    instructions,
                },
                image,
                subset,
            }
        })
        .collect())
}

/// Writes `corpus.jsonl` and `images/*.tnsr` under `out_dir`; returns the
/// path of the JSON-lines file.
pub fn synth_corpus(seed: u64, n: usize, shape: [usize; 3], out_dir: &Path) -> Result<PathBuf> {
    let examples = synth_examples(seed, n, shape)?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for ex in &examples {
        tnsr::save_tensor(&out_dir.join(&ex.record.image_path), &ex.image)?;
    }
    let path = out_dir.join("corpus.jsonl");
    let records: Vec<_> = examples.into_iter().map(|e| e.record).collect();
    write_corpus(&path, &records)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let a = synth_examples(7, 20, [4, 4, 3]).unwrap();
        let b = synth_examples(7, 20, [4, 4, 3]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.record, y.record);
            assert_eq!(x.image, y.image);
        }
        let c = synth_examples(8, 20, [4, 4, 3]).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn records_mention_their_ingredients() {
        for ex in synth_examples(1, 30, [4, 4, 3]).unwrap() {
            assert!((2..=5).contains(&ex.subset.len()));
            for &i in &ex.subset {
                let name = INGREDIENTS[i];
                assert!(ex.record.ingredients.iter().any(|l| l.split(' ').any(|w| w == name)));
                assert!(ex.record.instructions.iter().any(|l| l.split(' ').any(|w| w == name)));
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_interval() {
        for ex in synth_examples(2, 40, [8, 8, 3]).unwrap() {
            assert!(ex.image.data().iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(ex.image.shape(), &[8, 8, 3]);
        }
    }

    #[test]
    fn zero_records_is_an_error() {
        assert!(synth_examples(1, 0, [4, 4, 3]).is_err());
    }
}
