//! A small from-scratch convolutional classifier with a sigmoid output.
//!
//! Networks are an ordered list of [`LayerSpec`]s plus one flat parameter
//! vector. Shapes are composed and checked when the network is built; the
//! network must end in a single-unit dense layer followed by a sigmoid, so
//! every forward pass yields a probability `p(class 1 | image)`.

mod layers;
mod model_io;
mod train;

use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelImage, Tensor};
use crate::interpret::PredictionDistribution;
use crate::seed::{rng_for, Rng};
use crate::{Error, Result};

pub use layers::{ActShape, LayerSpec, Padding};
pub use model_io::{load_model, save_model, MODEL_VERSION};
pub use train::{evaluate, loss_and_gradients, train, EpochRecord, History, TrainConfig};

use layers::{compile, Aux, Compiled};

/// Anything that maps an image to `p(class 1 | image)`.
///
/// [`Network`] is the main implementation; the corruption and
/// interpretation stages only rely on this trait, so stub classifiers work
/// there too.
pub trait Classifier: Sync {
    fn predict(&self, img: &ChannelImage) -> Result<f64>;

    /// Predictions for every image, in order.
    fn predict_batch(&self, imgs: &[ChannelImage]) -> Result<PredictionDistribution> {
        let values = imgs
            .par_iter()
            .map(|img| self.predict(img))
            .collect::<Result<Vec<_>>>()?;
        PredictionDistribution::new(values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    plan: Vec<Compiled>,
}

/// Intermediate values of one forward pass.
pub(crate) struct Trace {
    // acts[0] is the input, acts[i + 1] the output of layer i
    acts: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

impl Trace {
    pub(crate) fn output(&self) -> f64 {
        self.acts.last().expect("non-empty")[0]
    }

    /// Pre-sigmoid logit.
    pub(crate) fn logit(&self) -> f64 {
        self.acts[self.acts.len() - 2][0]
    }
}

fn plan_for(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Compiled>> {
    let plan = compile(ActShape::from_input(input_shape)?, layers)?;
    let n = plan.len();
    let ends_right = n >= 2
        && matches!(plan[n - 1].spec, LayerSpec::Sigmoid)
        && matches!(plan[n - 2].spec, LayerSpec::Dense { units: 1 });
    if !ends_right {
        return Err(Error::Shape(
            "network must end with dense(1) followed by sigmoid".into(),
        ));
    }
    Ok(plan)
}

impl Network {
    /// Builds a network with seeded Glorot-uniform weights and zero biases.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let plan = plan_for(input_shape, &layers)?;
        let total = plan.last().map_or(0, |c| c.param_offset + c.param_len);
        let mut params = vec![0.0; total];
        let mut rng = rng_for(&[seed, 0x1417]);
        for c in plan.iter().filter(|c| c.weight_len > 0) {
            let (fan_in, fan_out) = c.fan;
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new(-a, a).expect("finite positive bound");
            params[c.param_offset..c.param_offset + c.weight_len]
                .iter_mut()
                .for_each(|v| *v = dist.sample(&mut rng));
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            plan,
        })
    }

    /// Builds a network around an existing parameter vector.
    pub fn with_params(input_shape: &[usize], layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let plan = plan_for(input_shape, &layers)?;
        let total = plan.last().map_or(0, |c| c.param_offset + c.param_len);
        if params.len() != total {
            return Err(Error::Shape(format!(
                "parameter vector has {} values, layers need {total}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            plan,
        })
    }

    /// Channels followed by 2 or 3 spatial extents.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Output shape of layer `index`.
    pub fn layer_output_shape(&self, index: usize) -> Option<ActShape> {
        self.plan.get(index).map(|c| c.output)
    }

    fn check_input(&self, img: &ChannelImage) -> Result<()> {
        if img.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match network input {:?}",
                img.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, input: &[f64], mut dropout: Option<&mut Rng>) -> Trace {
        let mut acts = Vec::with_capacity(self.plan.len() + 1);
        let mut aux = Vec::with_capacity(self.plan.len());
        acts.push(input.to_vec());
        for c in &self.plan {
            let (y, a) = layers::forward(c, &self.params, acts.last().expect("non-empty"), dropout.as_deref_mut());
            acts.push(y);
            aux.push(a);
        }
        Trace { acts, aux }
    }

    /// Backpropagates `d loss / d logit` and adds parameter gradients to `grad`.
    pub(crate) fn backward(&self, trace: &Trace, dlogit: f64, grad: &mut [f64]) {
        let last = self.plan.len() - 1;
        let mut dy = vec![dlogit];
        // the final sigmoid is folded into dlogit
        for (i, c) in self.plan.iter().enumerate().take(last).rev() {
            dy = layers::backward(c, &self.params, &trace.acts[i], &trace.acts[i + 1], &trace.aux[i], &dy, grad);
        }
    }

    /// `p(class 1 | img)`. Dropout is active only when `train_mode` is set.
    pub fn forward(&self, img: &ChannelImage, train_mode: bool, rng: &mut Rng) -> Result<f64> {
        self.check_input(img)?;
        let t = self.trace(img.values(), train_mode.then_some(rng));
        Ok(t.output())
    }

    /// Per-filter mean activation maps of conv layer `layer_index` over `imgs`.
    ///
    /// Maps are the convolution outputs themselves (before any following
    /// nonlinearity), one tensor per filter with that layer's spatial extents.
    pub fn activation_maps(&self, imgs: &[ChannelImage], layer_index: usize) -> Result<Vec<Tensor>> {
        let c = self
            .plan
            .get(layer_index)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {layer_index}")))?;
        if !c.spec.is_conv() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer_index} is {}, not a convolution",
                c.spec.kind()
            )));
        }
        if imgs.is_empty() {
            return Err(Error::Empty("activation maps need at least one image".into()));
        }
        for img in imgs {
            self.check_input(img)?;
        }
        let outs: Vec<Vec<f64>> = imgs
            .par_iter()
            .map(|img| self.trace(img.values(), None).acts.swap_remove(layer_index + 1))
            .collect();
        let mut sum = vec![0.0; c.output.len()];
        for o in &outs {
            sum.iter_mut().zip(o).for_each(|(s, v)| *s += v);
        }
        let n = imgs.len() as f64;
        let ActShape::Volume { channels, .. } = c.output else {
            unreachable!("conv output is spatial")
        };
        let per = c.output.len() / channels;
        (0..channels)
            .map(|f| Tensor::new(c.output.spatial(), sum[f * per..(f + 1) * per].iter().map(|v| v / n).collect()))
            .collect()
    }
}

impl Classifier for Network {
    fn predict(&self, img: &ChannelImage) -> Result<f64> {
        self.check_input(img)?;
        Ok(self.trace(img.values(), None).output())
    }
}

/// Free-function form of [`Classifier::predict_batch`].
pub fn predict_batch(f: &impl Classifier, imgs: &[ChannelImage]) -> Result<PredictionDistribution> {
    f.predict_batch(imgs)
}

/// The 2-layer CNN used for the striped-image benchmark:
/// conv(3×3, 4) → relu → pool 2 → conv(3×3, 8) → relu → pool 2 → flatten →
/// dense(1) → sigmoid.
pub fn build_synth_cnn(input_shape: &[usize], seed: u64) -> Result<Network> {
    if input_shape.len() != 3 {
        return Err(Error::Shape(format!(
            "synthetic CNN takes channels × height × width, got {input_shape:?}"
        )));
    }
    let layers = vec![
        LayerSpec::Conv2d { filters: 4, kernel: [3, 3], padding: Padding::Valid },
        LayerSpec::Relu,
        LayerSpec::Maxpool { size: 2 },
        LayerSpec::Conv2d { filters: 8, kernel: [3, 3], padding: Padding::Valid },
        LayerSpec::Relu,
        LayerSpec::Maxpool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 1 },
        LayerSpec::Sigmoid,
    ];
    Network::new(input_shape, layers, seed)
}

/// Filter counts and hidden width of the 3D (mean, std) volume classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Cc3dPreset {
    pub filters: [usize; 6],
    pub hidden: usize,
}

impl Default for Cc3dPreset {
    fn default() -> Self {
        Cc3dPreset {
            filters: [8, 16, 16, 32, 32, 64],
            hidden: 64,
        }
    }
}

/// Six 3×3×3 same-padded convolutions, four 2× max-pools, two dense layers
/// (with dropout before each) and a sigmoid output. Expects a 2-channel
/// volume whose extents survive four halvings (e.g. 2×32×32×32).
pub fn build_2cc3d(input_shape: &[usize], preset: &Cc3dPreset, seed: u64) -> Result<Network> {
    match input_shape {
        [2, d, h, w] if [d, h, w].iter().all(|&&e| e >= 16) => {}
        _ => {
            return Err(Error::Shape(format!(
                "2CC3D expects a 2-channel volume of at least 16³, got {input_shape:?}"
            )))
        }
    }
    let conv = |filters| LayerSpec::Conv3d { filters, kernel: [3, 3, 3], padding: Padding::Same };
    let f = preset.filters;
    let layers = vec![
        conv(f[0]),
        LayerSpec::Relu,
        LayerSpec::Maxpool { size: 2 },
        conv(f[1]),
        LayerSpec::Relu,
        LayerSpec::Maxpool { size: 2 },
        conv(f[2]),
        LayerSpec::Relu,
        conv(f[3]),
        LayerSpec::Relu,
        LayerSpec::Maxpool { size: 2 },
        conv(f[4]),
        LayerSpec::Relu,
        conv(f[5]),
        LayerSpec::Relu,
        LayerSpec::Maxpool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dropout { p: 0.5 },
        LayerSpec::Dense { units: preset.hidden },
        LayerSpec::Relu,
        LayerSpec::Dropout { p: 0.5 },
        LayerSpec::Dense { units: 1 },
        LayerSpec::Sigmoid,
    ];
    Network::new(input_shape, layers, seed)
}
