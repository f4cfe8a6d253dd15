//! Finite-difference checks of every loss, on seeded random inputs.
//!
//! Each loss is differentiated with respect to the logits it is computed
//! from, so inputs stay on the probability simplex under perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::labels::LabelMap;
use crate::losses::{
    cda_adv_loss, cda_disc_loss, cra_adv_loss, cra_disc_loss, domain_encoding, entropy_min_loss, masked_ce_loss,
    seg_ce_loss, DomainEncodingLabel, Slot,
};
use crate::nn::{Discriminator, ModelSpec};
use crate::tensor::{grad_check, Graph, Tensor, Var};

/// Largest accepted relative error between tape and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
const B: usize = 2;
const K: usize = 3;
const H: usize = 3;
const W: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCheck {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_error: f64,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

struct Inputs {
    logits: Tensor,
    joint_logits: Tensor,
    labels: Tensor,
    mask: Tensor,
    inverse: Tensor,
    a_s: DomainEncodingLabel,
    a_t: DomainEncodingLabel,
    features: Tensor,
}

fn inputs(seed: u64) -> Result<Inputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: &[usize], scale: f64| Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale));
    let logits = uniform(&[B, K, H, W], 2.0);
    let joint_logits = uniform(&[B, 2 * K, H, W], 2.0);
    let enc_logits = uniform(&[B, K, H, W], 3.0);
    let features = uniform(&[B, 4, H, W], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let labels = LabelMap::new(B, H, W, (0..B * H * W).map(|_| rng.gen_range(0..K as u32)).collect())?;
    let mask = Tensor::from_fn(&[B, H, W], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let inverse = Tensor::new(mask.shape().to_vec(), mask.data().iter().map(|m| 1.0 - m).collect())?;
    let t = rng.gen_range(0.5..2.0);
    Ok(Inputs {
        logits,
        joint_logits,
        labels: labels.one_hot(K)?,
        mask,
        inverse,
        a_s: domain_encoding(&enc_logits, t, Slot::Source)?,
        a_t: domain_encoding(&enc_logits, t, Slot::Target)?,
        features,
    })
}

type LossFn = fn(&mut Graph, Var, &Inputs) -> Result<Var>;

fn registry() -> Vec<(&'static str, LossFn, fn(&Inputs) -> &Tensor)> {
    fn logits(i: &Inputs) -> &Tensor {
        &i.logits
    }
    fn joint(i: &Inputs) -> &Tensor {
        &i.joint_logits
    }
    fn features(i: &Inputs) -> &Tensor {
        &i.features
    }
    vec![
        (
            "seg_ce_loss",
            |g, x, i| {
                let p = g.softmax(x)?;
                seg_ce_loss(g, p, &i.labels)
            },
            logits,
        ),
        (
            "masked_ce_loss",
            |g, x, i| {
                let p = g.softmax(x)?;
                masked_ce_loss(g, p, &i.labels, &i.mask)
            },
            logits,
        ),
        (
            "cra_adv_loss",
            |g, x, i| {
                let p = g.softmax(x)?;
                cra_adv_loss(g, p, &i.a_t, &i.inverse)
            },
            joint,
        ),
        (
            "cra_disc_loss",
            |g, x, i| {
                let p = g.softmax(x)?;
                cra_disc_loss(g, p, &i.a_s, &i.mask, p, &i.a_t, &i.inverse)
            },
            joint,
        ),
        (
            "cda_adv_loss",
            |g, x, i| {
                let p = g.softmax(x)?;
                cda_adv_loss(g, p, &i.a_t)
            },
            joint,
        ),
        (
            "cda_disc_loss",
            |g, x, i| {
                let p = g.softmax(x)?;
                let shifted = g.scale(x, 0.5)?;
                let q = g.softmax(shifted)?;
                cda_disc_loss(g, p, &i.a_s, q, &i.a_t)
            },
            joint,
        ),
        (
            "entropy_min_loss",
            |g, x, i| {
                let p = g.softmax(x)?;
                entropy_min_loss(g, p, &i.inverse)
            },
            logits,
        ),
        (
            "cra_adv_loss through D",
            |g, x, i| {
                let spec = ModelSpec {
                    feature_widths: vec![4],
                    disc_widths: vec![5],
                };
                let d = Discriminator::init(&spec, K, 11).bind(g, false);
                let p = d.forward(g, x)?;
                cra_adv_loss(g, p, &i.a_t, &i.inverse)
            },
            features,
        ),
    ]
}

/// Worst relative error of every registered loss over seeds `0..seeds`.
pub fn check_losses(seeds: u64) -> Result<Vec<LossCheck>> {
    let all: Vec<Inputs> = (0..seeds).map(inputs).collect::<Result<_>>()?;
    registry()
        .into_iter()
        .map(|(name, f, input)| {
            let mut worst: f64 = 0.0;
            for i in &all {
                let err = grad_check(|g, x| f(g, x, i), input(i), STEP)?;
                worst = worst.max(err);
            }
            Ok(LossCheck {
                name,
                seeds,
                max_rel_error: worst,
            })
        })
        .collect()
}
