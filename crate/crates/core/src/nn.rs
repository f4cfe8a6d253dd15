//! Segmentation network `G = C ∘ F` and the joint domain/class discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Output widths of the 3x3 feature layers; the last one is the feature
    /// dimension seen by the classifier and the discriminator.
    pub feature_widths: Vec<usize>,
    /// Hidden widths of the discriminator; its output layer has `2K` channels.
    pub disc_widths: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            feature_widths: vec![16, 32, 32, 32],
            disc_widths: vec![32, 32],
        }
    }
}

impl ModelSpec {
    pub fn feature_dim(&self) -> usize {
        *self.feature_widths.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_widths.is_empty() || self.feature_widths.contains(&0) || self.disc_widths.contains(&0) {
            return Err(Error::Config(format!("invalid model widths {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

impl Conv2d {
    /// He-scaled uniform weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero bias.
    pub fn init(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn zeroed(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Graph handles for one convolution's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
}

impl BoundConv {
    fn bind(g: &mut Graph, conv: &Conv2d, trainable: bool) -> Self {
        Self {
            weight: g.leaf(conv.weight.clone(), trainable),
            bias: g.leaf(conv.bias.clone(), trainable),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, Some(self.bias))
    }
}

/// Anything holding named parameter tensors in a fixed order.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

fn conv_params<'a>(prefix: &str, convs: impl Iterator<Item = (String, &'a Conv2d)>) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    for (name, c) in convs {
        out.push((format!("{prefix}.{name}.weight"), &c.weight));
        out.push((format!("{prefix}.{name}.bias"), &c.bias));
    }
    out
}

/// Feature extractor `F` (3x3 convolutions, ReLU after each) followed by
/// the 1x1 classifier `C`. No downsampling: features share the image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub features: Vec<Conv2d>,
    pub classifier: Conv2d,
}

/// Which parts of `G` receive gradients in a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegTrain {
    All,
    FeaturesOnly,
    Frozen,
}

pub struct BoundSeg {
    features: Vec<BoundConv>,
    classifier: BoundConv,
    in_channels: usize,
}

pub struct SegOutput {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
}

impl SegModel {
    pub fn init(spec: &ModelSpec, in_channels: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(spec.feature_widths.len());
        let mut prev = in_channels;
        for &w in &spec.feature_widths {
            features.push(Conv2d::init(prev, w, 3, &mut rng));
            prev = w;
        }
        let classifier = Conv2d::init(prev, classes, 1, &mut rng);
        Self { features, classifier }
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_channels()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_channels()
    }

    pub fn in_channels(&self) -> usize {
        self.features[0].in_channels()
    }

    pub fn bind(&self, g: &mut Graph, train: SegTrain) -> BoundSeg {
        let (tf, tc) = match train {
            SegTrain::All => (true, true),
            SegTrain::FeaturesOnly => (true, false),
            SegTrain::Frozen => (false, false),
        };
        BoundSeg {
            features: self.features.iter().map(|c| BoundConv::bind(g, c, tf)).collect(),
            classifier: BoundConv::bind(g, &self.classifier, tc),
            in_channels: self.in_channels(),
        }
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, SegTrain::Frozen);
        let x = g.constant(images.clone());
        let out = bound.forward(&mut g, x)?;
        Ok((
            g.value(out.features).clone(),
            g.value(out.logits).clone(),
            g.value(out.probs).clone(),
        ))
    }
}

impl BoundSeg {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<SegOutput> {
        let c = g.value(x).dims4()?.1;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "seg_forward",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.in_channels],
            });
        }
        let mut h = x;
        for layer in &self.features {
            h = layer.apply(g, h)?;
            h = g.relu(h)?;
        }
        let logits = self.classifier.apply(g, h)?;
        let probs = g.softmax(logits)?;
        Ok(SegOutput {
            features: h,
            logits,
            probs,
        })
    }

    /// Parameter handles in [`Parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.features
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|b| [b.weight, b.bias])
            .collect()
    }

    pub fn classifier_vars(&self) -> [Var; 2] {
        [self.classifier.weight, self.classifier.bias]
    }
}

impl Parameters for SegModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let feats = self.features.iter().enumerate().map(|(i, c)| (format!("features.{i}"), c));
        let mut v = conv_params("seg", feats);
        v.extend(conv_params("seg", std::iter::once(("classifier".to_string(), &self.classifier))));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.features
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }
}

/// Three-layer convolutional discriminator over features, with a softmax
/// over `2K` channels: channel `k` is `P(d=0, c=k | f)`, channel `K + k` is
/// `P(d=1, c=k | f)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub layers: Vec<Conv2d>,
}

pub struct BoundDisc {
    layers: Vec<BoundConv>,
    feature_dim: usize,
}

impl Discriminator {
    pub fn init(spec: &ModelSpec, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut prev = spec.feature_dim();
        for &w in &spec.disc_widths {
            layers.push(Conv2d::init(prev, w, 3, &mut rng));
            prev = w;
        }
        layers.push(Conv2d::init(prev, 2 * classes, 3, &mut rng));
        Self { layers }
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.out_channels() / 2).unwrap_or(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDisc {
        BoundDisc {
            layers: self.layers.iter().map(|c| BoundConv::bind(g, c, trainable)).collect(),
            feature_dim: self.feature_dim(),
        }
    }

    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let p = bound.forward(&mut g, f)?;
        Ok(g.value(p).clone())
    }
}

impl BoundDisc {
    /// Joint probabilities `[B, 2K, H, W]`.
    pub fn forward(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let c = g.value(f).dims4()?.1;
        if c != self.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "disc_forward",
                lhs: g.shape(f).to_vec(),
                rhs: vec![self.feature_dim],
            });
        }
        let mut h = f;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, h)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        g.softmax(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|b| [b.weight, b.bias]).collect()
    }
}

impl Parameters for Discriminator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        conv_params("disc", self.layers.iter().enumerate().map(|(i, c)| (i.to_string(), c)))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect()
    }
}

/// Collects the gradients of `vars` after a backward pass, `None` where no
/// gradient arrived.
pub fn collect_grads(g: &Graph, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| g.grad(v).cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            feature_widths: vec![4, 6],
            disc_widths: vec![5, 5],
        }
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[2, 3, 5, 4], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn forward_shapes_and_normalisation() {
        let spec = small_spec();
        let m = SegModel::init(&spec, 3, 7, 42);
        let (f, z, p) = m.predict(&image(1)).unwrap();
        assert_eq!(f.shape(), &[2, 6, 5, 4]);
        assert_eq!(z.shape(), &[2, 7, 5, 4]);
        for b in 0..2 {
            for s in 0..20 {
                let total: f64 = (0..7).map(|k| p.data()[(b * 7 + k) * 20 + s]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let d = Discriminator::init(&spec, 7, 43);
        let joint = d.predict(&f).unwrap();
        assert_eq!(joint.shape(), &[2, 14, 5, 4]);
        for s in 0..40 {
            let (b, s) = (s / 20, s % 20);
            let d0: f64 = (0..7).map(|k| joint.data()[(b * 14 + k) * 20 + s]).sum();
            let d1: f64 = (7..14).map(|k| joint.data()[(b * 14 + k) * 20 + s]).sum();
            assert!((d0 + d1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let mut m = SegModel::init(&small_spec(), 3, 5, 1);
        m.classifier = Conv2d::zeroed(6, 5, 1);
        let (_, _, p) = m.predict(&image(2)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let mut d = Discriminator::init(&small_spec(), 5, 1);
        let last = d.layers.len() - 1;
        d.layers[last] = Conv2d::zeroed(5, 10, 3);
        let f = Tensor::full(&[1, 6, 3, 3], 0.4);
        assert!(d.predict(&f).unwrap().data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let spec = small_spec();
        let m = SegModel::init(&spec, 3, 5, 1);
        assert!(m.predict(&Tensor::zeros(&[1, 4, 3, 3])).is_err());
        let d = Discriminator::init(&spec, 5, 1);
        assert!(d.predict(&Tensor::zeros(&[1, 5, 3, 3])).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let spec = ModelSpec::default();
        let a = SegModel::init(&spec, 3, 5, 42);
        let b = SegModel::init(&spec, 3, 5, 42);
        let c = SegModel::init(&spec, 3, 5, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let x = image(3);
        let (f1, z1, p1) = a.predict(&x).unwrap();
        let (f2, z2, p2) = b.predict(&x).unwrap();
        assert!(f1.bit_eq(&f2) && z1.bit_eq(&z2) && p1.bit_eq(&p2));
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let m = SegModel::init(&small_spec(), 3, 5, 1);
        let names: Vec<_> = m.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "seg.features.0.weight");
        assert_eq!(names.last().unwrap(), "seg.classifier.bias");
        let mut dedup = names.clone();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
        assert_eq!(m.clone().params_mut().len(), names.len());
    }

    #[test]
    fn disc_log_likelihood_gradients_pass_finite_differences() {
        let spec = small_spec();
        let d = Discriminator::init(&spec, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::from_fn(&[1, 6, 3, 3], |_| rng.gen_range(0.0..1.0));
        for layer in 0..d.layers.len() {
            let check = |g: &mut Graph, w: Var| {
                let mut bound = d.bind(g, false);
                bound.layers[layer].weight = w;
                let fv = g.constant(f.clone());
                let p = bound.forward(g, fv)?;
                let lp = g.log(p)?;
                g.sum(lp)
            };
            let err = grad_check(check, &d.layers[layer].weight, 1e-5).unwrap();
            assert!(err < 1e-4, "layer {layer}: {err}");
        }
    }

    #[test]
    fn features_only_leaves_classifier_without_gradient() {
        let m = SegModel::init(&small_spec(), 3, 5, 1);
        let mut g = Graph::new();
        let bound = m.bind(&mut g, SegTrain::FeaturesOnly);
        let x = g.constant(image(5));
        let out = bound.forward(&mut g, x).unwrap();
        let lp = g.log(out.probs).unwrap();
        let s = g.sum(lp).unwrap();
        g.backward(s).unwrap();
        for v in bound.classifier_vars() {
            assert!(g.grad(v).is_none());
        }
        assert!(g.grad(bound.vars()[0]).is_some());
    }
}
