//! Fully convolutional segmentation network with a class head and a dataset-posterior head.
//!
//! ```text
//! image ─ [conv k×k ─ norm ─ relu] × stages ─► pre-logits t
//!   t ─ conv 1×1 ─► logits s                       (K channels)
//!   t ─ norm ─ relu ─ conv 1×1 ─► head logit z     (1 channel, P(d_in|x) = sigmoid(z))
//! ```
//!
//! Convolutions are stride 1 with same padding, so every output keeps the
//! input resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{BatchMoments, Graph, NormStats, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::labels::MAX_CLASSES;
use crate::math::{posterior_logit_bound, DatasetPosteriorMap, LogitMap, PreLogitMap};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_channels: usize,
    /// Output width of every feature stage; the last one is the pre-logit width.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Side of the square feature kernels (odd). 1 turns the network into a per-pixel MLP.
    pub kernel_size: usize,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be ≥ 1".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "widths must be non-empty and ≥ 1, got {:?}",
                self.widths
            )));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn num_features(&self) -> usize {
        *self.widths.last().expect("validated config has stages")
    }

    /// Side of the square receptive field of one pre-logit pixel.
    pub fn receptive_field(&self) -> usize {
        1 + self.num_stages() * (self.kernel_size - 1)
    }

    /// Number of trainable tensors.
    pub fn num_tensors(&self) -> usize {
        4 * self.num_stages() + 6
    }

    /// Shapes of all trainable tensors in declaration order.
    pub fn tensor_shapes(&self) -> Vec<[usize; 4]> {
        let k = self.kernel_size;
        let mut shapes = Vec::with_capacity(self.num_tensors());
        let mut cin = self.input_channels;
        for &w in &self.widths {
            shapes.push([w, cin, k, k]);
            shapes.push([w, 1, 1, 1]);
            shapes.push([w, 1, 1, 1]);
            shapes.push([w, 1, 1, 1]);
            cin = w;
        }
        let f = self.num_features();
        shapes.push([self.num_classes, f, 1, 1]);
        shapes.push([self.num_classes, 1, 1, 1]);
        shapes.push([f, 1, 1, 1]);
        shapes.push([f, 1, 1, 1]);
        shapes.push([1, f, 1, 1]);
        shapes.push([1, 1, 1, 1]);
        shapes
    }

    /// Channel counts of the normalization layers (one per stage, then the head's).
    pub fn norm_widths(&self) -> Vec<usize> {
        let mut w = self.widths.clone();
        w.push(self.num_features());
        w
    }
}

/// Which part of the model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Shared feature extractor producing pre-logits.
    Features,
    /// 1×1 projection from pre-logits to class logits.
    Classifier,
    /// Normalization and 1×1 projection of the dataset-posterior head.
    PosteriorHead,
}

/// Index of each named tensor inside [`ModelParams::tensors`].
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    stages: usize,
}

impl Layout {
    pub fn conv_weight(self, stage: usize) -> usize {
        4 * stage
    }
    pub fn conv_bias(self, stage: usize) -> usize {
        4 * stage + 1
    }
    pub fn norm_scale(self, stage: usize) -> usize {
        4 * stage + 2
    }
    pub fn norm_shift(self, stage: usize) -> usize {
        4 * stage + 3
    }
    pub fn classifier_weight(self) -> usize {
        4 * self.stages
    }
    pub fn classifier_bias(self) -> usize {
        4 * self.stages + 1
    }
    pub fn head_norm_scale(self) -> usize {
        4 * self.stages + 2
    }
    pub fn head_norm_shift(self) -> usize {
        4 * self.stages + 3
    }
    pub fn head_weight(self) -> usize {
        4 * self.stages + 4
    }
    pub fn head_bias(self) -> usize {
        4 * self.stages + 5
    }

    pub fn group(self, index: usize) -> ParamGroup {
        match index.checked_sub(4 * self.stages) {
            None => ParamGroup::Features,
            Some(0 | 1) => ParamGroup::Classifier,
            Some(_) => ParamGroup::PosteriorHead,
        }
    }

    pub fn name(self, index: usize) -> String {
        if index < 4 * self.stages {
            let part = ["conv_weight", "conv_bias", "norm_scale", "norm_shift"][index % 4];
            return format!("stage{}.{part}", index / 4);
        }
        [
            "classifier.weight",
            "classifier.bias",
            "head.norm_scale",
            "head.norm_shift",
            "head.weight",
            "head.bias",
        ][index - 4 * self.stages]
            .to_string()
    }
}

/// Running normalization statistics used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: NetworkConfig,
    tensors: Vec<Tensor>,
    norms: Vec<RunningNorm>,
}

impl ModelParams {
    /// Fan-in scaled uniform initialization; both final projections start at zero.
    pub fn init(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = Layout {
            stages: config.num_stages(),
        };
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let is_conv = i < 4 * layout.stages && i % 4 == 0;
                let is_scale = (i < 4 * layout.stages && i % 4 == 2) || i == layout.head_norm_scale();
                if is_conv {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::from_vec(shape, data).expect("shape product matches")
                } else if is_scale {
                    Tensor::full(shape, 1.0)
                } else {
                    Tensor::zeros(shape)
                }
            })
            .collect();
        let norms = config
            .norm_widths()
            .into_iter()
            .map(|c| RunningNorm {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            })
            .collect();
        Ok(ModelParams { config, tensors, norms })
    }

    /// Assembles parameters from raw parts, checking every shape against `config`.
    pub fn from_parts(config: NetworkConfig, tensors: Vec<Tensor>, norms: Vec<RunningNorm>) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::shape(format!("{} tensors", shapes.len()), tensors.len()));
        }
        for (t, s) in tensors.iter().zip(&shapes) {
            if t.shape() != *s {
                return Err(Error::shape(format!("{s:?}"), format!("{:?}", t.shape())));
            }
        }
        let widths = config.norm_widths();
        if norms.len() != widths.len()
            || norms
                .iter()
                .zip(&widths)
                .any(|(n, &c)| n.mean.len() != c || n.var.len() != c)
        {
            return Err(Error::shape(format!("norm widths {widths:?}"), "mismatched statistics"));
        }
        Ok(ModelParams { config, tensors, norms })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        Layout {
            stages: self.config.num_stages(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn norms(&self) -> &[RunningNorm] {
        &self.norms
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Exponential moving average of the batch statistics of a training forward pass.
    pub fn update_running_stats(&mut self, moments: &[BatchMoments], momentum: f64) {
        for (norm, m) in self.norms.iter_mut().zip(moments) {
            let unbias = if m.count > 1 {
                m.count as f64 / (m.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..norm.mean.len() {
                norm.mean[c] = (1.0 - momentum) * norm.mean[c] + momentum * m.mean[c];
                norm.var[c] = (1.0 - momentum) * norm.var[c] + momentum * m.var[c] * unbias;
            }
        }
    }
}

/// Whether normalization layers use batch statistics (training) or running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A recorded forward pass; differentiate with `graph.backward(loss)`.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    /// Leaf of each trainable tensor, in declaration order.
    pub params: Vec<Var>,
    /// `[N, F, H, W]`
    pub prelogits: Var,
    /// `[N, K, H, W]`
    pub logits: Var,
    /// `[N, 1, H, W]` pre-sigmoid output of the posterior head.
    pub head_logit: Var,
    /// Batch statistics of every normalization layer (training mode only).
    pub moments: Vec<BatchMoments>,
}

/// Per-image network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutputs {
    pub prelogits: PreLogitMap,
    pub logits: LogitMap,
    pub posterior: DatasetPosteriorMap,
}

/// Runs the network on an `[N, C, H, W]` batch and records the graph.
pub fn forward_graph(params: &ModelParams, image: &Tensor, mode: Mode) -> Result<ForwardPass> {
    let cfg = &params.config;
    if image.channels() != cfg.input_channels || image.batch() == 0 {
        return Err(Error::shape(
            format!("[N≥1, {}, H, W]", cfg.input_channels),
            format!("{:?}", image.shape()),
        ));
    }
    let layout = params.layout();
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| g.leaf(t.clone())).collect();
    let mut moments = Vec::new();

    let mut norm = |g: &mut Graph, x: Var, scale: Var, shift: Var, layer: usize| -> Result<Var> {
        let stats = match mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Fixed {
                mean: &params.norms[layer].mean,
                var: &params.norms[layer].var,
            },
        };
        let (y, m) = g.batch_norm(x, scale, shift, stats)?;
        moments.extend(m);
        Ok(y)
    };

    let mut x = g.leaf(image.clone());
    for stage in 0..cfg.num_stages() {
        let c = g.conv2d(x, vars[layout.conv_weight(stage)], vars[layout.conv_bias(stage)])?;
        let n = norm(
            &mut g,
            c,
            vars[layout.norm_scale(stage)],
            vars[layout.norm_shift(stage)],
            stage,
        )?;
        x = g.relu(n);
    }
    let prelogits = x;
    let logits = g.conv2d(
        prelogits,
        vars[layout.classifier_weight()],
        vars[layout.classifier_bias()],
    )?;
    let hn = norm(
        &mut g,
        prelogits,
        vars[layout.head_norm_scale()],
        vars[layout.head_norm_shift()],
        cfg.num_stages(),
    )?;
    let hr = g.relu(hn);
    let head_logit = g.conv2d(hr, vars[layout.head_weight()], vars[layout.head_bias()])?;

    for (what, v) in [
        ("pre-logits", prelogits),
        ("logits", logits),
        ("posterior head", head_logit),
    ] {
        if !g.value(v).is_finite() {
            return Err(Error::NonFinite(format!("{what} activation")));
        }
    }
    Ok(ForwardPass {
        graph: g,
        params: vars,
        prelogits,
        logits,
        head_logit,
        moments,
    })
}

/// Converts item `n` of an `[N, C, H, W]` tensor to pixel-major order.
pub(crate) fn pixel_major(t: &Tensor, n: usize) -> Vec<f64> {
    let [_, c, h, w] = t.shape();
    let p = h * w;
    let item = t.item_slice(n);
    let mut out = vec![0.0; c * p];
    for ch in 0..c {
        for j in 0..p {
            out[j * c + ch] = item[ch * p + j];
        }
    }
    out
}

impl ForwardPass {
    pub fn batch(&self) -> usize {
        self.graph.value(self.logits).batch()
    }

    pub fn outputs(&self, n: usize) -> Result<NetworkOutputs> {
        let t = self.graph.value(self.prelogits);
        let s = self.graph.value(self.logits);
        let z = self.graph.value(self.head_logit);
        let (h, w) = (s.height(), s.width());
        let bound = posterior_logit_bound();
        let head: Vec<f64> = z.plane(n, 0).iter().map(|v| v.clamp(-bound, bound)).collect();
        Ok(NetworkOutputs {
            prelogits: PreLogitMap::new(h, w, t.channels(), pixel_major(t, n))?,
            logits: LogitMap::new(h, w, s.channels(), pixel_major(s, n))?,
            posterior: DatasetPosteriorMap::from_logits(h, w, &head)?,
        })
    }
}

/// Inference with running normalization statistics, one output per batch item.
pub fn forward(params: &ModelParams, image: &Tensor) -> Result<Vec<NetworkOutputs>> {
    let pass = forward_graph(params, image, Mode::Eval)?;
    (0..pass.batch()).map(|n| pass.outputs(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(kernel_size: usize) -> NetworkConfig {
        NetworkConfig {
            input_channels: 3,
            widths: vec![4, 6],
            num_classes: 3,
            kernel_size,
            seed: 7,
        }
    }

    fn image(n: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * 3 * h * w).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        Tensor::from_vec([n, 3, h, w], data).unwrap()
    }

    #[test]
    fn zero_projections_give_uniform_outputs() {
        let params = ModelParams::init(config(3)).unwrap();
        for out in forward(&params, &image(2, 5, 7)).unwrap() {
            assert!(out.logits.values().iter().all(|&v| v == 0.0));
            assert!(out.posterior.values().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn outputs_keep_input_resolution() {
        let params = ModelParams::init(config(3)).unwrap();
        for (h, w) in [(1, 1), (3, 8), (9, 4)] {
            for mode in [Mode::Train, Mode::Eval] {
                let pass = forward_graph(&params, &image(1, h, w), mode).unwrap();
                for v in [pass.prelogits, pass.logits, pass.head_logit] {
                    let s = pass.graph.value(v).shape();
                    assert_eq!((s[2], s[3]), (h, w));
                }
            }
        }
    }

    #[test]
    fn duplicated_items_give_identical_outputs() {
        let mut params = ModelParams::init(config(3)).unwrap();
        // Non-zero heads so the check is not vacuous.
        let l = params.layout();
        for idx in [l.classifier_weight(), l.head_weight()] {
            for (i, v) in params.tensors_mut()[idx].data_mut().iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin();
            }
        }
        let one = image(1, 4, 4);
        let two = Tensor::stack(&[&one, &one]).unwrap();
        let outs = forward(&params, &two).unwrap();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], forward(&params, &one).unwrap()[0]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let params = ModelParams::init(config(1)).unwrap();
        let bad = Tensor::zeros([1, 2, 3, 3]);
        assert!(matches!(forward(&params, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn config_validation() {
        let mut c = config(3);
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = config(2);
        c.widths = vec![3];
        assert!(c.validate().is_err());
        assert_eq!(config(3).receptive_field(), 5);
        assert_eq!(config(1).receptive_field(), 1);
    }

    #[test]
    fn layout_groups_cover_all_tensors() {
        let params = ModelParams::init(config(3)).unwrap();
        let l = params.layout();
        let groups: Vec<_> = (0..params.tensors().len()).map(|i| l.group(i)).collect();
        assert_eq!(groups.iter().filter(|g| **g == ParamGroup::Features).count(), 8);
        assert_eq!(groups.iter().filter(|g| **g == ParamGroup::Classifier).count(), 2);
        assert_eq!(groups.iter().filter(|g| **g == ParamGroup::PosteriorHead).count(), 4);
        assert_eq!(l.name(l.head_bias()), "head.bias");
        assert_eq!(l.name(5), "stage1.conv_bias");
    }
}
