//! Training iterations of every stage.
//!
//! Each loss pass reports which parameter groups received a gradient and is
//! checked against the stage contract. The `G` passes of one iteration are
//! applied as a single SGD update, so every iteration advances the momentum
//! buffer exactly once.

use std::collections::BTreeMap;

use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{
    cda_adv_loss, cda_disc_loss, cra_adv_loss, cra_disc_loss, domain_encoding, entropy_min_loss, masked_ce_loss, Slot,
};
use crate::nn::{collect_grads, BoundDisc, Discriminator, Parameters, SegModel, SegOutput, SegTrain};
use crate::optim::{Adam, SgdMomentum};
use crate::tensor::{Graph, Tensor, Var};

use super::config::{OptimConfig, RunConfig, SourceSlot};
use super::data::RegionBatch;

/// Networks and their optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub seg: SegModel,
    pub disc: Discriminator,
    pub sgd: SgdMomentum,
    pub adam: Adam,
}

impl Learner {
    /// Fresh optimizer state around existing networks.
    pub fn new(seg: SegModel, disc: Discriminator, o: &OptimConfig) -> Self {
        let sgd = SgdMomentum::new(seg.named_params().into_iter().map(|(_, t)| t), o.momentum, o.weight_decay);
        let adam = Adam::new(disc.named_params().into_iter().map(|(_, t)| t), o.beta1, o.beta2, o.eps);
        Self { seg, disc, sgd, adam }
    }

    pub fn to_checkpoint(&self, stage: Stage, iteration: usize, complete: bool, hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(stage, iteration, complete, hash);
        ck.put_params(&self.seg);
        ck.put_params(&self.disc);
        self.sgd.export_state(&mut ck.tensors, "opt.g");
        self.adam.export_state(&mut ck.tensors, "opt.d");
        ck
    }

    /// Networks from `ck`, optimizer state fresh.
    pub fn restore_networks(&mut self, ck: &Checkpoint, o: &OptimConfig) -> Result<()> {
        ck.restore_params(&mut self.seg)?;
        ck.restore_params(&mut self.disc)?;
        *self = Learner::new(self.seg.clone(), self.disc.clone(), o);
        Ok(())
    }

    /// Networks and optimizer state from `ck`.
    pub fn restore_all(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore_params(&mut self.seg)?;
        ck.restore_params(&mut self.disc)?;
        self.sgd.import_state(&ck.tensors, "opt.g")?;
        self.adam.import_state(&ck.tensors, "opt.d")
    }
}

/// Parameter groups that received a gradient in one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradRouting {
    pub features: bool,
    pub classifier: bool,
    pub disc: bool,
}

impl GradRouting {
    pub const G: GradRouting = GradRouting {
        features: true,
        classifier: true,
        disc: false,
    };
    pub const F: GradRouting = GradRouting {
        features: true,
        classifier: false,
        disc: false,
    };
    pub const D: GradRouting = GradRouting {
        features: false,
        classifier: false,
        disc: true,
    };

    /// Errors unless exactly the groups in `want` received gradients.
    pub fn expect(self, step: &'static str, want: GradRouting) -> Result<()> {
        if self != want {
            return Err(Error::invalid(
                "gradient routing",
                format!("{step}: expected {want:?}, got {self:?}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub routing: GradRouting,
}

/// Detached outputs of the forward pass a `G` step ran on.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub features: Tensor,
    pub logits: Tensor,
}

fn any_grad(g: &Graph, vars: &[Var]) -> bool {
    vars.iter().any(|&v| g.grad(v).is_some())
}

/// Gradients of `G` for the loss built by `loss_fn`, at the current
/// parameters. With `with_disc`, `D` is bound frozen and handed to `loss_fn`.
fn g_pass(
    l: &Learner,
    images: &Tensor,
    train: SegTrain,
    with_disc: bool,
    loss_fn: impl FnOnce(&mut Graph, &SegOutput, Option<&BoundDisc>) -> Result<Var>,
) -> Result<(StepOutcome, Forward, Grads)> {
    let mut g = Graph::new();
    let bs = l.seg.bind(&mut g, train);
    let bd = with_disc.then(|| l.disc.bind(&mut g, false));
    let x = g.constant(images.clone());
    let out = bs.forward(&mut g, x)?;
    let loss = loss_fn(&mut g, &out, bd.as_ref())?;
    let value = g.value(loss).item()?;
    g.backward(loss)?;
    let seg_vars = bs.vars();
    let cls = bs.classifier_vars();
    let feat_vars: Vec<Var> = seg_vars.iter().copied().filter(|v| !cls.contains(v)).collect();
    let routing = GradRouting {
        features: any_grad(&g, &feat_vars),
        classifier: any_grad(&g, &cls),
        disc: bd.as_ref().is_some_and(|d| any_grad(&g, &d.vars())),
    };
    let fwd = Forward {
        features: g.value(out.features).clone(),
        logits: g.value(out.logits).clone(),
    };
    Ok((StepOutcome { loss: value, routing }, fwd, collect_grads(&g, &seg_vars)))
}

/// Per-parameter gradients of `G`; `None` for parameters outside the tape.
type Grads = Vec<Option<Tensor>>;

/// Elementwise sum of gradients from several passes over the same parameters.
fn sum_grads(mut acc: Grads, more: Grads) -> Result<Grads> {
    for (a, m) in acc.iter_mut().zip(more) {
        match (a.as_mut(), m) {
            (_, None) => {}
            (None, Some(m)) => *a = Some(m),
            (Some(a), Some(m)) => {
                if a.shape() != m.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "sum_grads",
                        lhs: a.shape().to_vec(),
                        rhs: m.shape().to_vec(),
                    });
                }
                for (x, y) in a.data_mut().iter_mut().zip(m.data()) {
                    *x += y;
                }
            }
        }
    }
    Ok(acc)
}

/// One SGD update of `G` with the summed gradients of all `G` passes of an
/// iteration.
fn g_apply(l: &mut Learner, grads: &Grads, lr: f64) -> Result<()> {
    l.sgd.step(l.seg.params_mut(), grads, lr)
}

/// One Adam step on `D` over detached features.
fn d_update(
    l: &mut Learner,
    lr: f64,
    loss_fn: impl FnOnce(&mut Graph, &BoundDisc) -> Result<Var>,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let bd = l.disc.bind(&mut g, true);
    let loss = loss_fn(&mut g, &bd)?;
    let value = g.value(loss).item()?;
    g.backward(loss)?;
    let vars = bd.vars();
    let routing = GradRouting {
        features: false,
        classifier: false,
        disc: any_grad(&g, &vars),
    };
    let grads = collect_grads(&g, &vars);
    l.adam.step(l.disc.params_mut(), &grads, lr)?;
    Ok(StepOutcome { loss: value, routing })
}

fn weighted(g: &mut Graph, loss: Var, w: f64) -> Result<Var> {
    if w == 1.0 {
        Ok(loss)
    } else {
        g.scale(loss, w)
    }
}

/// Cross-entropy step on `G` against `labels`, restricted to `mask` when given.
pub fn seg_step(
    l: &mut Learner,
    images: &Tensor,
    labels: &LabelMap,
    mask: Option<&Tensor>,
    train: SegTrain,
    weight: f64,
    lr: f64,
) -> Result<(StepOutcome, Forward)> {
    let full;
    let mask = match mask {
        Some(m) => m,
        None => {
            let [b, h, w] = labels.shape();
            full = Tensor::ones(&[b, h, w]);
            &full
        }
    };
    let (outcome, fwd, grads) = seg_pass(l, images, labels, mask, train, weight)?;
    g_apply(l, &grads, lr)?;
    Ok((outcome, fwd))
}

/// Gradients of the cross-entropy against `labels` over `mask`, no update.
fn seg_pass(
    l: &Learner,
    images: &Tensor,
    labels: &LabelMap,
    mask: &Tensor,
    train: SegTrain,
    weight: f64,
) -> Result<(StepOutcome, Forward, Grads)> {
    let y = labels.one_hot(l.seg.classes())?;
    g_pass(l, images, train, false, |g, out, _| {
        let loss = masked_ce_loss(g, out.probs, &y, mask)?;
        weighted(g, loss, weight)
    })
}

/// Per-iteration loss values, keyed by loss name.
pub type Losses = BTreeMap<&'static str, f64>;

/// One CDA iteration: (a) supervised source loss on `F`, (b) adversarial
/// target loss on `F` with `D` frozen, both differentiated at the same
/// parameters and applied as one SGD update, then (c) `D` step on the
/// detached features of (a) and (b). `C` stays frozen throughout.
pub fn cda_iteration(
    l: &mut Learner,
    cfg: &RunConfig,
    source: (&Tensor, &LabelMap),
    target: &Tensor,
    lr_g: f64,
    lr_d: f64,
) -> Result<(Losses, [StepOutcome; 3])> {
    let w = &cfg.weights;
    let t = cfg.temperature;
    let [n, h, wd] = source.1.shape();
    let all = Tensor::ones(&[n, h, wd]);
    let (a, fs, ga) = seg_pass(l, source.0, source.1, &all, SegTrain::FeaturesOnly, w.seg)?;
    a.routing.expect("cda seg", GradRouting::F)?;
    let (b, ft, gb) = g_pass(l, target, SegTrain::FeaturesOnly, true, |g, out, d| {
        let d = d.expect("bound");
        let a_t = domain_encoding(g.value(out.logits), t, Slot::Target)?;
        let joint = d.forward(g, out.features)?;
        let loss = cda_adv_loss(g, joint, &a_t)?;
        weighted(g, loss, w.cda_adv)
    })?;
    b.routing.expect("cda adv", GradRouting::F)?;
    g_apply(l, &sum_grads(ga, gb)?, lr_g)?;
    let a_s = domain_encoding(&fs.logits, t, Slot::Source)?;
    let a_t = domain_encoding(&ft.logits, t, Slot::Target)?;
    let c = d_update(l, lr_d, |g, d| {
        let xs = g.constant(fs.features.clone());
        let xt = g.constant(ft.features.clone());
        let ps = d.forward(g, xs)?;
        let pt = d.forward(g, xt)?;
        let loss = cda_disc_loss(g, ps, &a_s, pt, &a_t)?;
        weighted(g, loss, w.cda_disc)
    })?;
    c.routing.expect("cda disc", GradRouting::D)?;
    let losses = Losses::from([("seg", a.loss), ("adv", b.loss), ("disc", c.loss)]);
    Ok((losses, [a, b, c]))
}

/// Training variant run on top of the CDA model and the region split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Pseudo-label step, adversarial step, discriminator step.
    Cra,
    /// Pseudo-label step only.
    PseudoOnly,
    /// Pseudo-label step, then entropy minimization on untrusted pixels.
    EntropyMin,
}

impl Variant {
    pub fn stage(self) -> Stage {
        match self {
            Variant::Cra => Stage::Cra,
            Variant::PseudoOnly => Stage::PseudoOnly,
            Variant::EntropyMin => Stage::EntropyMin,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Cra => "CDA+CRA",
            Variant::PseudoOnly => "Pseudo labels only",
            Variant::EntropyMin => "Entropy minimization",
        }
    }
}

/// One minibatch of a CRA-stage variant. For [`Variant::Cra`]:
/// (1) pseudo-label loss on `G` over trusted pixels; (2) domain encodings
/// from the logits of the current model; (3) adversarial loss on `G` over
/// untrusted pixels with `D` frozen, which reaches `F` only since the
/// encodings are detached; (4) `D` step on the detached features of (3).
/// The `G` losses are differentiated at the same parameters and applied as
/// one SGD update before (4). With [`SourceSlot::SourceDomain`], `source`
/// supplies the `[a; 0]` population of (4) instead of the trusted pixels.
pub fn cra_iteration(
    l: &mut Learner,
    cfg: &RunConfig,
    variant: Variant,
    batch: &RegionBatch,
    source: Option<&Tensor>,
    lr_g: f64,
    lr_d: f64,
) -> Result<(Losses, Vec<StepOutcome>)> {
    let w = &cfg.weights;
    let t = cfg.temperature;
    let (s1, _, g1) = seg_pass(l, &batch.images, &batch.pseudo, &batch.trusted, SegTrain::All, w.cra_seg)?;
    s1.routing.expect("cra seg", GradRouting::G)?;
    let mut losses = Losses::from([("seg", s1.loss)]);
    let mut steps = vec![s1];
    match variant {
        Variant::PseudoOnly => g_apply(l, &g1, lr_g)?,
        Variant::EntropyMin => {
            let (s, _, g2) = g_pass(l, &batch.images, SegTrain::All, false, |g, out, _| {
                let loss = entropy_min_loss(g, out.probs, &batch.untrusted)?;
                weighted(g, loss, w.entropy_min)
            })?;
            s.routing.expect("entropy min", GradRouting::G)?;
            g_apply(l, &sum_grads(g1, g2)?, lr_g)?;
            losses.insert("entropy", s.loss);
            steps.push(s);
        }
        Variant::Cra => {
            let mut enc = None;
            let (s3, f3, g3) = g_pass(l, &batch.images, SegTrain::All, true, |g, out, d| {
                let d = d.expect("bound");
                let a_t = domain_encoding(g.value(out.logits), t, Slot::Target)?;
                let a_s = domain_encoding(g.value(out.logits), t, Slot::Source)?;
                let joint = d.forward(g, out.features)?;
                let loss = cra_adv_loss(g, joint, &a_t, &batch.untrusted)?;
                enc = Some((a_s, a_t));
                weighted(g, loss, w.cra_adv)
            })?;
            s3.routing.expect("cra adv", GradRouting::F)?;
            g_apply(l, &sum_grads(g1, g3)?, lr_g)?;
            let (a_s, a_t) = enc.expect("set by the adversarial step");
            let source_side = match (cfg.cra_source_slot, source) {
                (SourceSlot::TrustedTarget, _) => None,
                (SourceSlot::SourceDomain, Some(images)) => {
                    let (f, z, _) = l.seg.predict(images)?;
                    let (b, _, h, w) = f.dims4()?;
                    Some((f, domain_encoding(&z, t, Slot::Source)?, Tensor::ones(&[b, h, w])))
                }
                (SourceSlot::SourceDomain, None) => {
                    return Err(Error::invalid("cra_iteration", "source-domain slot needs a source batch"))
                }
            };
            let s4 = d_update(l, lr_d, |g, d| {
                let x = g.constant(f3.features.clone());
                let p = d.forward(g, x)?;
                let loss = match &source_side {
                    None => cra_disc_loss(g, p, &a_s, &batch.trusted, p, &a_t, &batch.untrusted)?,
                    Some((fs, a_src, ms)) => {
                        let xs = g.constant(fs.clone());
                        let ps = d.forward(g, xs)?;
                        cra_disc_loss(g, ps, a_src, ms, p, &a_t, &batch.untrusted)?
                    }
                };
                weighted(g, loss, w.cra_disc)
            })?;
            s4.routing.expect("cra disc", GradRouting::D)?;
            losses.insert("adv", s3.loss);
            losses.insert("disc", s4.loss);
            steps.push(s3);
            steps.push(s4);
        }
    }
    Ok((losses, steps))
}
