//! Image-to-recipe and recipe-to-image evaluation, plus the grounding probe
//! that compares l_r on matched and shuffled pairs.

use crate::bridge::{generate_interleaved, Decoding, Model, Segment};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::metrics::{clip_similarity, rouge2, sacrebleu, ScoreReport};

/// Free-choice budget for greedy recipe generation.
pub const I2T_MAX_TOKENS: usize = 64;

fn nonempty(examples: &[Example]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no evaluation records".into()));
    }
    Ok(())
}

/// Greedy recipe text for every image.
pub fn i2t_hypotheses(model: &Model<'_>, examples: &[Example]) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|ex| {
            let prompt = [Segment::Image(ex.image.clone())];
            Ok(generate_interleaved(model, &prompt, I2T_MAX_TOKENS, Decoding::Greedy)?.text())
        })
        .collect()
}

/// BLEU plus ROUGE-2 (F1 as `rouge2`, with its precision and recall),
/// ROUGE averaged over records.
pub fn score_i2t<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<Vec<ScoreReport>> {
    let n = hypotheses.len();
    let bleu = sacrebleu(hypotheses, references)?;
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for (h, rf) in hypotheses.iter().zip(references) {
        let s = rouge2(h.as_ref(), rf.as_ref());
        p += s.precision;
        r += s.recall;
        f += s.f1;
    }
    let k = n as f64;
    Ok(vec![
        ScoreReport::new("sacrebleu", bleu, n),
        ScoreReport::new("rouge2", f / k, n),
        ScoreReport::new("rouge2_precision", p / k, n),
        ScoreReport::new("rouge2_recall", r / k, n),
    ])
}

pub fn eval_i2t(model: &Model<'_>, examples: &[Example]) -> Result<Vec<ScoreReport>> {
    nonempty(examples)?;
    let hyps = i2t_hypotheses(model, examples)?;
    let refs: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    score_i2t(&hyps, &refs)
}

/// Mean cosine between the visual encodings of the generated and the
/// ground-truth images.
pub fn eval_t2i(model: &Model<'_>, examples: &[Example]) -> Result<ScoreReport> {
    nonempty(examples)?;
    let mut total = 0.0;
    for ex in examples {
        let generated = model.text_to_image(&ex.tokens)?;
        total += clip_similarity(model.backbones, &generated, &ex.image)?;
    }
    Ok(ScoreReport::new("clip_similarity", total / examples.len() as f64, examples.len()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grounding {
    pub matched: f64,
    pub shuffled: f64,
}

impl Grounding {
    /// `1 − matched / shuffled`.
    pub fn relative_gain(&self) -> f64 {
        1.0 - self.matched / self.shuffled
    }
}

/// Mean l_r with each record's own image against the mean with every
/// image moved to the next record.
pub fn grounding(model: &Model<'_>, examples: &[Example]) -> Result<Grounding> {
    if examples.len() < 2 {
        return Err(Error::InvalidInput("grounding needs at least two records".into()));
    }
    let n = examples.len();
    let (mut matched, mut shuffled) = (0.0, 0.0);
    for (i, ex) in examples.iter().enumerate() {
        matched += model.recipe_loss(&ex.image, &ex.tokens)?;
        shuffled += model.recipe_loss(&examples[(i + 1) % n].image, &ex.tokens)?;
    }
    Ok(Grounding {
        matched: matched / n as f64,
        shuffled: shuffled / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::Backbones;
    use crate::bridge::BridgeParams;
    use crate::config::Config;
    use crate::data::synth_examples;
    use crate::vocab::Vocab;

    fn examples(cfg: &Config, n: usize) -> Vec<Example> {
        let vocab = Vocab::new(cfg.dims.m);
        synth_examples(5, n, cfg.dims.image_shape())
            .unwrap()
            .into_iter()
            .map(|e| Example {
                id: e.record.id.clone(),
                tokens: vocab.encode(&e.record.text()).unwrap(),
                text: e.record.text(),
                image: e.image,
            })
            .collect()
    }

    #[test]
    fn forced_hypotheses_score_perfectly() {
        let refs = ["tomato salad\nheat the pan", "onion soup\nchop the onion"];
        let reports = score_i2t(&refs, &refs).unwrap();
        let names: Vec<_> = reports.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(names, ["sacrebleu", "rouge2", "rouge2_precision", "rouge2_recall"]);
        assert!((reports[0].value - 100.0).abs() < 1e-9);
        assert!(reports[1..].iter().all(|r| r.value == 1.0 && r.n == 2));
    }

    #[test]
    fn evaluations_run_and_stay_in_range() {
        let cfg = Config::tiny();
        let bb = Backbones::build(&cfg).unwrap();
        let bridge = BridgeParams::init(&cfg).unwrap();
        let model = Model::new(&bb, &bridge);
        let ex = examples(&cfg, 3);
        let i2t = eval_i2t(&model, &ex).unwrap();
        assert!((0.0..=100.0).contains(&i2t[0].value));
        let t2i = eval_t2i(&model, &ex).unwrap();
        assert!((-1.0..=1.0).contains(&t2i.value));
        assert_eq!(t2i.n, 3);
        let g = grounding(&model, &ex).unwrap();
        assert!(g.matched > 0.0 && g.shuffled > 0.0);
        assert!(eval_t2i(&model, &[]).is_err());
        assert!(grounding(&model, &ex[..1]).is_err());
    }

    #[test]
    fn grounding_without_a_prefix_map_is_neutral() {
        let cfg = Config::tiny();
        let bb = Backbones::build(&cfg).unwrap();
        let mut bridge = BridgeParams::init(&cfg).unwrap();
        let w = bridge.w_recipe;
        let zero = crate::numerics::Tensor::zeros(bridge.store.get(w).shape());
        *bridge.store.get_mut(w) = zero;
        let g = grounding(&Model::new(&bb, &bridge), &examples(&cfg, 4)).unwrap();
        assert!((g.matched - g.shuffled).abs() < 1e-9);
    }
}
