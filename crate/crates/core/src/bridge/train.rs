//! One optimization step over a batch, and the data order.

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{BridgeParams, Model};
use crate::backbones::Backbones;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, Gradients, Scalar, Tensor};
use crate::rng::{seeded_indexed, Stream};
use crate::vocab::TokenSequence;

/// Batch means of the three losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_p: f64,
    pub l_g: f64,
    pub total: f64,
}

impl<'a, T: Scalar> Model<'a, T> {
    /// Mean of `l_r + l_p + l_g` over the batch and its gradient with
    /// respect to every bridge tensor.
    pub fn batch_gradients(&self, batch: &[(&Tensor<T>, &TokenSequence)]) -> Result<(Gradients<T>, LossReport)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut s = self.session(true);
        let (mut lr, mut lp, mut lg) = (Vec::new(), Vec::new(), Vec::new());
        for (image, y) in batch {
            lr.push(self.recipe_loss_var(&mut s, image, y)?);
            let (p, g) = self.image_losses_var(&mut s, y)?;
            lp.push(p);
            lg.push(g);
        }
        let inv = 1.0 / batch.len() as f64;
        let mut means = [0.0; 3];
        let mut parts = Vec::with_capacity(3);
        for (slot, terms) in [lr, lp, lg].into_iter().enumerate() {
            let all = s.graph.concat_rows(&terms)?;
            let sum = s.graph.sum(all)?;
            let mean = s.graph.scale(sum, inv)?;
            means[slot] = s.value(mean).item().as_f64();
            parts.push(mean);
        }
        let all = s.graph.concat_rows(&parts)?;
        let total = s.graph.sum(all)?;
        let report = LossReport {
            l_r: means[0],
            l_p: means[1],
            l_g: means[2],
            total: s.value(total).item().as_f64(),
        };
        Ok((s.gradients(total)?, report))
    }
}

/// Adam moments for every bridge tensor, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T: Scalar = f32> {
    pub adam: AdamConfig,
    pub states: Vec<AdamState<T>>,
    /// Completed steps.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(bridge: &BridgeParams<T>, adam: AdamConfig) -> Self {
        let states = bridge
            .store
            .iter()
            .map(|(_, t)| AdamState::new(t.shape()))
            .collect();
        Self {
            adam,
            states,
            step: 0,
        }
    }

    /// Computes the batch losses, then applies one Adam update to each
    /// bridge tensor. A non-finite value anywhere aborts with the step index.
    pub fn train_step(
        &mut self,
        backbones: &Backbones<T>,
        bridge: &mut BridgeParams<T>,
        batch: &[(&Tensor<T>, &TokenSequence)],
    ) -> Result<LossReport> {
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite(detail) => Error::Diverged { step, detail },
            other => other,
        };
        let (grads, report) = Model::new(backbones, bridge).batch_gradients(batch).map_err(diverged)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("total loss {}", report.total),
            });
        }
        let ids: Vec<_> = bridge.store.ids().collect();
        for (id, state) in ids.into_iter().zip(&mut self.states) {
            adam_step(&self.adam, bridge.store.get_mut(id), grads.get(id)?, state)?;
        }
        for (name, t) in bridge.store.iter() {
            if !t.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("{name} became non-finite"),
                });
            }
        }
        self.step += 1;
        Ok(report)
    }
}

/// Record indices for a step. Each epoch is a fresh seeded permutation of
/// `0..n` and batches run through it in order, so the order is a pure
/// function of `(seed, step)` and a resumed run sees the same batches.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    assert!(n > 0 && batch > 0, "batch_indices needs n, batch >= 1");
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for i in 0..batch as u64 {
        let pos = step * batch as u64 + i;
        let (epoch, offset) = (pos / n as u64, (pos % n as u64) as usize);
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut seeded_indexed(seed, Stream::DataOrder, epoch));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[offset]);
    }
    out
}
