//! The training loop: seeded batches from the training split, one bridge
//! update per step, resumable from any checkpoint.

use serde::Serialize;

use crate::backbones::Backbones;
use crate::bridge::batch_indices;
use crate::config::Config;
use crate::data::checkpoint::Checkpoint;
use crate::data::Example;
use crate::error::{Error, Result};

/// One JSON line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub l_r: f64,
    pub l_p: f64,
    pub l_g: f64,
}

/// Builds the backbones and an initialized bridge for `config`.
pub fn initial_checkpoint(config: &Config) -> Result<Checkpoint> {
    Checkpoint::initial(config, Backbones::build(config)?)
}

/// Trains until `config.training.steps` steps are complete. `start` is a
/// fresh or resumed checkpoint; its config must match `config` apart from
/// the step count and paths.
pub fn train(
    config: &Config,
    examples: &[Example],
    mut start: Checkpoint,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Checkpoint> {
    let mut expected = start.config.clone();
    expected.training.steps = config.training.steps;
    expected.paths = config.paths.clone();
    if &expected != config {
        return Err(Error::Config(
            "training config differs from the checkpoint's config".into(),
        ));
    }
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    start.config.training.steps = config.training.steps;
    let seed = config.training.seed;
    let batch_size = config.training.batch_size;
    let ck = &mut start;
    while ck.trainer.step < config.training.steps as u64 {
        let step = ck.trainer.step;
        let batch: Vec<_> = batch_indices(seed, step, examples.len(), batch_size)
            .into_iter()
            .map(|i| (&examples[i].image, &examples[i].tokens))
            .collect();
        let report = ck.trainer.train_step(&ck.backbones, &mut ck.bridge, &batch)?;
        on_step(&StepLog {
            step,
            l_r: report.l_r,
            l_p: report.l_p,
            l_g: report.l_g,
        });
    }
    Ok(start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_examples;
    use crate::vocab::Vocab;

    fn examples(cfg: &Config, n: usize) -> Vec<Example> {
        let vocab = Vocab::new(cfg.dims.m);
        synth_examples(1, n, cfg.dims.image_shape())
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
    fn zero_steps_returns_the_initial_checkpoint() {
        let mut cfg = Config::tiny();
        cfg.training.steps = 0;
        let init = initial_checkpoint(&cfg).unwrap();
        let out = train(&cfg, &examples(&cfg, 4), init.clone(), |_| panic!("no steps")).unwrap();
        assert_eq!(out.to_bytes(), init.to_bytes());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = Config::tiny();
        let ex = examples(&cfg, 6);
        let init = initial_checkpoint(&cfg).unwrap();
        let mut full = Vec::new();
        let end = train(&cfg, &ex, init.clone(), |l| full.push(*l)).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.training.steps = 4;
        let mid = train(&half_cfg, &ex, init, |_| {}).unwrap();
        let mid = Checkpoint::from_bytes(&mid.to_bytes(), std::path::Path::new("mid")).unwrap();
        let mut rest = Vec::new();
        let resumed = train(&cfg, &ex, mid, |l| rest.push(*l)).unwrap();
        assert_eq!(rest, full[4..]);
        assert_eq!(resumed.to_bytes(), end.to_bytes());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg = Config::tiny();
        let init = initial_checkpoint(&cfg).unwrap();
        let mut other = cfg.clone();
        other.optim.lr = 0.5;
        assert!(matches!(train(&other, &examples(&cfg, 2), init, |_| {}), Err(Error::Config(_))));
    }
}
