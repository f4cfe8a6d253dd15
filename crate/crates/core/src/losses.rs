//! Segmentation, adversarial and discriminator losses.
//!
//! All losses sum over pixels and average over the batch. Logarithms go
//! through [`Graph::log_clamped`] with floor [`LOG_FLOOR`], so exact zeros in
//! a distribution contribute `0 · log 0 = 0`.
//!
//! Discriminator outputs are joint distributions over `2K` channels:
//! channel `k` is `P(d=0, c=k)` (source, or trusted region) and `K + k` is
//! `P(d=1, c=k)` (target, or untrusted region).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const LOG_FLOOR: f64 = 1e-12;

/// Which half of the joint discriminator output a label occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Slot {
    /// `[a; 0]`: source domain, or the trusted region during CRA.
    Source,
    /// `[0; a]`: target domain, or the untrusted region during CRA.
    Target,
}

impl Slot {
    fn block(self) -> usize {
        match self {
            Slot::Source => 0,
            Slot::Target => 1,
        }
    }
}

/// Tempered class probabilities `a = softmax(z / T)` placed in one domain
/// slot. Built from plain values, so it never carries gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainEncodingLabel {
    probs: Tensor,
    slot: Slot,
    temperature: f64,
}

impl DomainEncodingLabel {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn slot(&self) -> Slot {
        self.slot
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// `[B, 2K, H, W]` with `a` in this label's block and zeros in the other.
    fn embedded(&self) -> Tensor {
        let (b, k, h, w) = self.probs.dims4().expect("validated on construction");
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, 2 * k, h, w]);
        let off = self.slot.block() * k;
        for bi in 0..b {
            let src = &self.probs.data()[bi * k * hw..(bi + 1) * k * hw];
            let dst = &mut out.data_mut()[(bi * 2 * k + off) * hw..(bi * 2 * k + off + k) * hw];
            dst.copy_from_slice(src);
        }
        out
    }
}

pub fn domain_encoding(logits: &Tensor, temperature: f64, slot: Slot) -> Result<DomainEncodingLabel> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("domain_encoding", format!("temperature must be > 0, got {temperature}")));
    }
    let (b, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut probs = logits.clone();
    let d = probs.data_mut();
    for bi in 0..b {
        for s in 0..hw {
            let idx = |c: usize| (bi * k + c) * hw + s;
            let mx = (0..k).map(|c| d[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = ((d[idx(c)] - mx) / temperature).exp();
                d[idx(c)] = e;
                z += e;
            }
            for c in 0..k {
                d[idx(c)] /= z;
            }
        }
    }
    Ok(DomainEncodingLabel {
        probs,
        slot,
        temperature,
    })
}

fn expect_slot(op: &'static str, label: &DomainEncodingLabel, slot: Slot) -> Result<()> {
    if label.slot != slot {
        return Err(Error::invalid(op, format!("expected a {slot:?}-slot label, got {:?}", label.slot)));
    }
    Ok(())
}

/// Checks that `mask` is a `{0, 1}` map `[B, H, W]` over the grid of `like`.
fn check_mask(op: &'static str, like: &[usize], mask: &Tensor) -> Result<()> {
    let ok = like.len() == 4 && mask.shape() == [like[0], like[2], like[3]];
    if !ok {
        return Err(Error::ShapeMismatch {
            op,
            lhs: like.to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, "mask values must be 0 or 1"));
    }
    Ok(())
}

fn check_one_hot(op: &'static str, y: &Tensor) -> Result<()> {
    let (b, k, h, w) = y.dims4()?;
    let hw = h * w;
    for bi in 0..b {
        for s in 0..hw {
            let mut total = 0.0;
            for c in 0..k {
                let v = y.data()[(bi * k + c) * hw + s];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::invalid(op, format!("label value {v} is not 0/1")));
                }
                total += v;
            }
            if total != 1.0 {
                return Err(Error::invalid(op, "labels are not one-hot"));
            }
        }
    }
    Ok(())
}

/// `-(1/B) Σ_i mask_i Σ_k weight_ik log probs_ik`
fn masked_weighted_nll(g: &mut Graph, probs: Var, mask: &Tensor, weight: Tensor) -> Result<Var> {
    let batch = g.shape(probs)[0] as f64;
    let w = g.constant(weight);
    let m = g.constant(mask.clone());
    let lp = g.log_clamped(probs, LOG_FLOOR)?;
    let lp = g.mask_mul(lp, m)?;
    let t = g.mul(lp, w)?;
    let s = g.sum(t)?;
    g.scale(s, -1.0 / batch)
}

fn full_mask(shape: &[usize]) -> Tensor {
    Tensor::ones(&[shape[0], shape[2], shape[3]])
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// Pixel-summed cross-entropy against one-hot labels `y`.
pub fn seg_ce_loss(g: &mut Graph, probs: Var, y: &Tensor) -> Result<Var> {
    let mask = full_mask(g.shape(probs));
    masked_ce_loss(g, probs, y, &mask)
}

/// Cross-entropy restricted to pixels where `mask` is 1.
pub fn masked_ce_loss(g: &mut Graph, probs: Var, y: &Tensor, mask: &Tensor) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    same_shape("masked_ce_loss", &shape, y.shape())?;
    check_mask("masked_ce_loss", &shape, mask)?;
    if g.is_checked() {
        check_one_hot("masked_ce_loss", y)?;
    }
    masked_weighted_nll(g, probs, mask, y.clone())
}

fn joint_shape_check(op: &'static str, joint: &[usize], label: &DomainEncodingLabel) -> Result<()> {
    let a = label.probs.shape();
    if joint.len() != 4 || joint[0] != a[0] || joint[1] != 2 * a[1] || joint[2..] != a[2..] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: joint.to_vec(),
            rhs: a.to_vec(),
        });
    }
    Ok(())
}

/// Adversarial loss for `G`: untrusted target pixels are pushed towards the
/// `d = 0` block, weighted by their class encoding.
pub fn cra_adv_loss(g: &mut Graph, joint: Var, a_t: &DomainEncodingLabel, untrusted: &Tensor) -> Result<Var> {
    expect_slot("cra_adv_loss", a_t, Slot::Target)?;
    let shape = g.shape(joint).to_vec();
    joint_shape_check("cra_adv_loss", &shape, a_t)?;
    check_mask("cra_adv_loss", &shape, untrusted)?;
    // The target label supervises the source block: G tries to fool D.
    let flipped = DomainEncodingLabel {
        slot: Slot::Source,
        ..a_t.clone()
    };
    masked_weighted_nll(g, joint, untrusted, flipped.embedded())
}

/// Discriminator loss: trusted pixels labelled `[a_s; 0]`, untrusted pixels
/// `[0; a_t]`. The two joint outputs may be the same variable when both
/// regions come from the same images.
pub fn cra_disc_loss(
    g: &mut Graph,
    joint_trusted: Var,
    a_s: &DomainEncodingLabel,
    trusted: &Tensor,
    joint_untrusted: Var,
    a_t: &DomainEncodingLabel,
    untrusted: &Tensor,
) -> Result<Var> {
    expect_slot("cra_disc_loss", a_s, Slot::Source)?;
    expect_slot("cra_disc_loss", a_t, Slot::Target)?;
    let st = g.shape(joint_trusted).to_vec();
    let su = g.shape(joint_untrusted).to_vec();
    joint_shape_check("cra_disc_loss", &st, a_s)?;
    joint_shape_check("cra_disc_loss", &su, a_t)?;
    check_mask("cra_disc_loss", &st, trusted)?;
    check_mask("cra_disc_loss", &su, untrusted)?;
    let first = masked_weighted_nll(g, joint_trusted, trusted, a_s.embedded())?;
    let second = masked_weighted_nll(g, joint_untrusted, untrusted, a_t.embedded())?;
    g.add(first, second)
}

/// Fine-grained cross-domain adversarial loss: every target pixel is pushed
/// towards the source block.
pub fn cda_adv_loss(g: &mut Graph, joint_target: Var, a_t: &DomainEncodingLabel) -> Result<Var> {
    let mask = full_mask(g.shape(joint_target));
    cra_adv_loss(g, joint_target, a_t, &mask)
}

pub fn cda_disc_loss(
    g: &mut Graph,
    joint_source: Var,
    a_s: &DomainEncodingLabel,
    joint_target: Var,
    a_t: &DomainEncodingLabel,
) -> Result<Var> {
    let ms = full_mask(g.shape(joint_source));
    let mt = full_mask(g.shape(joint_target));
    cra_disc_loss(g, joint_source, a_s, &ms, joint_target, a_t, &mt)
}

/// `(1/B) Σ_i untrusted_i · e_i` with `e_i = -(1/(K ln K)) Σ_k p_ik ln p_ik`.
pub fn entropy_min_loss(g: &mut Graph, probs: Var, untrusted: &Tensor) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    check_mask("entropy_min_loss", &shape, untrusted)?;
    let k = shape[1] as f64;
    if shape[1] < 2 {
        return Err(Error::invalid("entropy_min_loss", "needs at least two classes"));
    }
    let m = g.constant(untrusted.clone());
    let lp = g.log_clamped(probs, LOG_FLOOR)?;
    let plp = g.mul(probs, lp)?;
    let masked = g.mask_mul(plp, m)?;
    let s = g.sum(masked)?;
    g.scale(s, -1.0 / (k * k.ln() * shape[0] as f64))
}
