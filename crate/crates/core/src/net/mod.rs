//! A small fully-convolutional per-pixel classifier with exact reverse-mode
//! gradients.
//!
//! The network is a stack of same-padded convolutions with rectifiers,
//! followed by a 1x1 classifier producing one score per label at every pixel.

mod checkpoint;
mod conv;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Image, LabelMap, ScoreMap};
use conv::ConvShape;

/// One hidden convolution: output channels and (odd) kernel size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HiddenLayer {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub hidden: Vec<HiddenLayer>,
    /// Labels including background; the width of the 1x1 classifier.
    pub num_labels: usize,
    pub seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("network needs at least one input channel"));
        }
        if self.num_labels < 2 || self.num_labels > crate::tensor::MAX_LABELS {
            return Err(Error::config(format!(
                "num_labels = {} outside 2..={}",
                self.num_labels,
                crate::tensor::MAX_LABELS
            )));
        }
        for (i, l) in self.hidden.iter().enumerate() {
            if l.channels == 0 {
                return Err(Error::config(format!("hidden layer {i} has zero channels")));
            }
            if l.kernel % 2 == 0 {
                return Err(Error::config(format!(
                    "hidden layer {i} kernel {} is not odd",
                    l.kernel
                )));
            }
        }
        Ok(())
    }

    pub fn max_kernel(&self) -> usize {
        self.hidden.iter().map(|l| l.kernel).max().unwrap_or(1)
    }

    /// Layer table: hidden layers then the 1x1 classifier.
    fn layer_specs(&self) -> Vec<(usize, usize, usize)> {
        let mut specs = Vec::with_capacity(self.hidden.len() + 1);
        let mut in_c = self.in_channels;
        for l in &self.hidden {
            specs.push((in_c, l.channels, l.kernel));
            in_c = l.channels;
        }
        specs.push((in_c, self.num_labels, 1));
        specs
    }
}

/// Location of one layer's weights and biases inside the flat parameter
/// vector. Weights are laid out `[out][in][ky][kx]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Range covering this layer's weights and biases.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.bias_offset + self.out_channels
    }
}

/// Flat parameter vector with its layer table.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    config: NetConfig,
    layers: Vec<LayerLayout>,
    values: Vec<f64>,
}

fn build_layout(config: &NetConfig) -> (Vec<LayerLayout>, usize) {
    let mut offset = 0;
    let layers = config
        .layer_specs()
        .into_iter()
        .map(|(in_c, out_c, k)| {
            let weight_offset = offset;
            let bias_offset = weight_offset + out_c * in_c * k * k;
            offset = bias_offset + out_c;
            LayerLayout {
                in_channels: in_c,
                out_channels: out_c,
                kernel: k,
                weight_offset,
                bias_offset,
            }
        })
        .collect();
    (layers, offset)
}

impl NetParams {
    /// He-style fan-in scaled uniform weights, zero biases.
    pub fn init(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let (layers, len) = build_layout(config);
        let mut values = vec![0.0; len];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for l in &layers {
            let fan_in = (l.in_channels * l.kernel * l.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for v in &mut values[l.weight_offset..l.bias_offset] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(NetParams {
            config: config.clone(),
            layers,
            values,
        })
    }

    pub fn from_values(config: &NetConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layers, len) = build_layout(config);
        if values.len() != len {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, config needs {len}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(NetParams {
            config: config.clone(),
            layers,
            values,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerLayout] {
        &self.layers
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.channels() != self.config.in_channels {
            return Err(Error::invalid(format!(
                "image has {} channels, network expects {}",
                image.channels(),
                self.config.in_channels
            )));
        }
        let k = self.config.max_kernel();
        if image.height() < k || image.width() < k {
            return Err(Error::invalid(format!(
                "image {}x{} smaller than the largest kernel {k}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Scores for every pixel and label.
    pub fn forward(&self, image: &Image) -> Result<ScoreMap> {
        Ok(self.forward_cached(image)?.scores())
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_cached(&self, image: &Image) -> Result<Activations> {
        self.check_image(image)?;
        let (h, w) = (image.height(), image.width());
        let plane = h * w;
        let c = image.channels();
        let mut planar = vec![0.0; c * plane];
        for (m, px) in image.data().chunks_exact(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                planar[ch * plane + m] = *v;
            }
        }
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(planar);
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let shape = self.shape(l, h, w);
            let mut out = vec![0.0; l.out_channels * plane];
            conv::forward(
                &shape,
                &outputs[li],
                &self.values[l.weight_offset..l.bias_offset],
                &self.values[l.bias_offset..l.bias_offset + l.out_channels],
                &mut out,
            );
            if li != last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            outputs.push(out);
        }
        Ok(Activations {
            height: h,
            width: w,
            num_labels: self.config.num_labels,
            outputs,
        })
    }

    fn shape(&self, l: &LayerLayout, height: usize, width: usize) -> ConvShape {
        ConvShape {
            in_c: l.in_channels,
            out_c: l.out_channels,
            kernel: l.kernel,
            height,
            width,
        }
    }

    /// Mean negative log-likelihood of `target` over non-ignored pixels and
    /// its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        image: &Image,
        target: &LabelMap,
        ignore: Option<&[bool]>,
    ) -> Result<(f64, Vec<f64>)> {
        let acts = self.forward_cached(image)?;
        self.backward(&acts, target, ignore)
    }

    pub fn backward(
        &self,
        acts: &Activations,
        target: &LabelMap,
        ignore: Option<&[bool]>,
    ) -> Result<(f64, Vec<f64>)> {
        let (h, w) = (acts.height, acts.width);
        if target.height() != h || target.width() != w {
            return Err(Error::invalid(format!(
                "target {}x{} does not match image {h}x{w}",
                target.height(),
                target.width()
            )));
        }
        target.check_labels(self.config.num_labels)?;
        if let Some(mask) = ignore {
            if mask.len() != h * w {
                return Err(Error::invalid("ignore mask size does not match image"));
            }
        }
        let plane = h * w;
        let n_labels = self.config.num_labels;
        let valid = match ignore {
            Some(mask) => mask.iter().filter(|&&i| !i).count(),
            None => plane,
        };
        if valid == 0 {
            return Err(Error::invalid("every pixel is ignored"));
        }
        let inv = 1.0 / valid as f64;

        let scores = acts.outputs.last().expect("output layer");
        let mut grad_scores = vec![0.0; n_labels * plane];
        let mut loss = 0.0;
        let mut px = vec![0.0; n_labels];
        for m in 0..plane {
            if ignore.is_some_and(|mask| mask[m]) {
                continue;
            }
            for (l, p) in px.iter_mut().enumerate() {
                *p = scores[l * plane + m];
            }
            let t = target.labels()[m] as usize;
            loss += nll(&px, t) * inv;
            let mx = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = px.iter().map(|s| (s - mx).exp()).sum();
            for (l, s) in px.iter().enumerate() {
                let p = (s - mx).exp() / sum;
                let onehot = if l == t { 1.0 } else { 0.0 };
                grad_scores[l * plane + m] = (p - onehot) * inv;
            }
        }

        let mut grad = vec![0.0; self.values.len()];
        let mut g_out = grad_scores;
        for (li, l) in self.layers.iter().enumerate().rev() {
            let shape = self.shape(l, h, w);
            let input = &acts.outputs[li];
            let (gw, gb) = grad[l.weight_offset..l.bias_offset + l.out_channels]
                .split_at_mut(l.weight_len());
            let mut g_in = if li > 0 {
                Some(vec![0.0; l.in_channels * plane])
            } else {
                None
            };
            conv::backward(
                &shape,
                input,
                &self.values[l.weight_offset..l.bias_offset],
                &g_out,
                gw,
                gb,
                g_in.as_deref_mut(),
            );
            if let Some(mut g) = g_in {
                // rectifier: the input of this layer is a post-ReLU output
                for (gv, a) in g.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g_out = g;
            }
        }
        Ok((loss, grad))
    }
}

/// `-log softmax(scores)[target]`, accurate when the target dominates.
fn nll(scores: &[f64], target: usize) -> f64 {
    let st = scores[target];
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if st >= mx {
        let rest: f64 = scores
            .iter()
            .enumerate()
            .filter(|&(l, _)| l != target)
            .map(|(_, s)| (s - st).exp())
            .sum();
        rest.ln_1p()
    } else {
        let sum: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        mx - st + sum.ln()
    }
}

/// Per-layer outputs of one forward pass, planar `[channel][pixel]`.
#[derive(Clone, Debug)]
pub struct Activations {
    height: usize,
    width: usize,
    num_labels: usize,
    outputs: Vec<Vec<f64>>,
}

impl Activations {
    pub fn scores(&self) -> ScoreMap {
        let plane = self.height * self.width;
        let out = self.outputs.last().expect("output layer");
        let mut data = vec![0.0; plane * self.num_labels];
        for l in 0..self.num_labels {
            for m in 0..plane {
                data[m * self.num_labels + l] = out[l * plane + m];
            }
        }
        ScoreMap::new(self.height, self.width, self.num_labels, data).expect("consistent shape")
    }
}

/// Momentum SGD with L2 weight decay:
/// `v <- momentum * v - lr * (g + weight_decay * p)`, `p <- p + v`.
pub fn sgd_update(
    params: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grad.len() {
        return Err(Error::invalid(format!(
            "sgd shapes disagree: params {}, velocity {}, grad {}",
            params.len(),
            velocity.len(),
            grad.len()
        )));
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * (g + weight_decay * *p);
        *p += *v;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    /// Multiplier applied to the classifier layer's learning rate.
    pub classifier_lr_mult: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_gamma` every `lr_step` steps; 0 disables.
    pub lr_step: usize,
    pub lr_gamma: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.001,
            classifier_lr_mult: 10.0,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_step: 0,
            lr_gamma: 0.1,
        }
    }
}

impl SgdConfig {
    /// Base learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_step {
            0 => self.lr,
            s => self.lr * self.lr_gamma.powi((step / s) as i32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.classifier_lr_mult > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.lr_gamma > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid SGD settings {self:?}")))
        }
    }
}

/// Applies one SGD step with the classifier layer's learning rate scaled.
pub fn sgd_step(
    params: &mut NetParams,
    velocity: &mut [f64],
    grad: &[f64],
    cfg: &SgdConfig,
    step: usize,
) -> Result<()> {
    let lr = cfg.lr_at(step);
    let last = params.layers.len() - 1;
    let layers = params.layers.clone();
    for (li, l) in layers.iter().enumerate() {
        let mult = if li == last { cfg.classifier_lr_mult } else { 1.0 };
        let r = l.range();
        sgd_update(
            &mut params.values[r.clone()],
            &mut velocity[r.clone()],
            &grad[r],
            lr * mult,
            cfg.momentum,
            cfg.weight_decay,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> NetConfig {
        NetConfig {
            in_channels: 3,
            hidden: vec![
                HiddenLayer {
                    channels: 8,
                    kernel: 3,
                },
                HiddenLayer {
                    channels: 8,
                    kernel: 3,
                },
            ],
            num_labels: 4,
            seed,
        }
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_classifier_passes_channels_through() {
        let cfg = NetConfig {
            in_channels: 3,
            hidden: vec![],
            num_labels: 3,
            seed: 0,
        };
        let mut values = vec![0.0; 12];
        values[0] = 1.0;
        values[4] = 1.0;
        values[8] = 1.0;
        let params = NetParams::from_values(&cfg, values).unwrap();
        let img = random_image(4, 5, 3, 1);
        let s = params.forward(&img).unwrap();
        assert_eq!(s.data(), img.data());
    }

    #[test]
    fn output_shape_contract() {
        let params = NetParams::init(&small_config(1)).unwrap();
        let s = params.forward(&random_image(6, 7, 3, 2)).unwrap();
        assert_eq!((s.height(), s.width(), s.num_labels()), (6, 7, 4));
    }

    #[test]
    fn zero_weights_give_bias_everywhere() {
        let cfg = small_config(1);
        let mut params = NetParams::init(&cfg).unwrap();
        params.values_mut().fill(0.0);
        let last = *params.layers().last().unwrap();
        let bias = [0.5, -1.0, 2.0, 0.25];
        params.values_mut()[last.bias_offset..last.bias_offset + 4].copy_from_slice(&bias);
        let s = params.forward(&random_image(5, 5, 3, 3)).unwrap();
        for px in s.pixels() {
            assert_eq!(px, &bias);
        }
    }

    #[test]
    fn forward_rejects_bad_images() {
        let params = NetParams::init(&small_config(1)).unwrap();
        assert!(params.forward(&random_image(5, 5, 2, 0)).is_err());
        assert!(params.forward(&random_image(2, 5, 3, 0)).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let params = NetParams::init(&small_config(4)).unwrap();
        let img = random_image(6, 6, 3, 4);
        let a = params.forward(&img).unwrap();
        let b = params.forward(&img).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn confident_correct_net_has_vanishing_loss() {
        let cfg = NetConfig {
            in_channels: 1,
            hidden: vec![],
            num_labels: 3,
            seed: 0,
        };
        // scores [0, 50, 0] everywhere
        let params = NetParams::from_values(&cfg, vec![0.0, 0.0, 0.0, 0.0, 50.0, 0.0]).unwrap();
        let img = Image::filled(3, 3, 1, 0.5);
        let target = LabelMap::filled(3, 3, 1);
        let (loss, _) = params.loss_and_grad(&img, &target, None).unwrap();
        assert!(loss < 1e-20 && loss >= 0.0, "loss = {loss}");
    }

    #[test]
    fn uniform_scores_give_log_label_count() {
        let cfg = NetConfig {
            in_channels: 1,
            hidden: vec![],
            num_labels: 21,
            seed: 0,
        };
        let params = NetParams::from_values(&cfg, vec![0.0; 42]).unwrap();
        let img = Image::filled(4, 4, 1, 0.3);
        let mut target = LabelMap::filled(4, 4, 0);
        target.set(1, 2, 20);
        let (loss, _) = params.loss_and_grad(&img, &target, None).unwrap();
        assert!((loss - 21f64.ln()).abs() < 1e-12);
        assert!((loss - 3.0445).abs() < 1e-4);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let params = NetParams::init(&small_config(1)).unwrap();
        let img = random_image(4, 4, 3, 0);
        let target = LabelMap::filled(4, 4, 0);
        let mask = vec![true; 16];
        assert!(params.loss_and_grad(&img, &target, Some(&mask)).is_err());
    }

    #[test]
    fn ignored_pixels_do_not_contribute() {
        let params = NetParams::init(&small_config(2)).unwrap();
        let img = random_image(5, 5, 3, 2);
        let mut mask = vec![false; 25];
        mask[3] = true;
        mask[17] = true;
        let mut a = LabelMap::filled(5, 5, 1);
        let mut b = a.clone();
        a.labels_mut()[3] = 2;
        b.labels_mut()[3] = 3;
        b.labels_mut()[17] = 0;
        let ga = params.loss_and_grad(&img, &a, Some(&mask)).unwrap();
        let gb = params.loss_and_grad(&img, &b, Some(&mask)).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let params = NetParams::init(&small_config(9)).unwrap();
        let img = random_image(8, 8, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let target =
            LabelMap::new(8, 8, (0..64).map(|_| rng.gen_range(0..4u8)).collect()).unwrap();
        let (_, grad) = params.loss_and_grad(&img, &target, None).unwrap();
        let h = 1e-4;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let lp = plus.loss_and_grad(&img, &target, None).unwrap().0;
            let lm = minus.loss_and_grad(&img, &target, None).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            // absolute floor for near-zero coordinates
            assert!(err <= 1e-4 || (fd - grad[i]).abs() <= 1e-9, "coord {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_update(&mut p, &mut v, &[2.0], 0.1, 0.9, 0.0).unwrap();
        assert!((v[0] + 0.2).abs() < 1e-15);
        assert!((p[0] - 0.8).abs() < 1e-15);

        let mut p = vec![0.3, -0.7];
        let mut v = vec![0.0, 0.0];
        sgd_update(&mut p, &mut v, &[0.0, 0.0], 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![0.3, -0.7]);

        assert!(sgd_update(&mut p, &mut v, &[0.0], 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn default_schedule() {
        let cfg = SgdConfig {
            lr_step: 100,
            ..SgdConfig::default()
        };
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 0.0005);
        assert_eq!(cfg.lr_at(99), 0.001);
        assert!((cfg.lr_at(100) - 0.0001).abs() < 1e-18);
        assert!((cfg.lr_at(0) * cfg.classifier_lr_mult - 0.01).abs() < 1e-18);
    }

    #[test]
    fn layer_table_is_contiguous() {
        let params = NetParams::init(&small_config(0)).unwrap();
        let mut end = 0;
        for l in params.layers() {
            assert_eq!(l.weight_offset, end);
            end = l.range().end;
        }
        assert_eq!(end, params.len());
        assert_eq!(params.layers().last().unwrap().kernel, 1);
        assert_eq!(params.layers().last().unwrap().out_channels, 4);
    }
}
