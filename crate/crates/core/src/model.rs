//! Model assembly: conv/ReLU backbone, ε-augmented hypersphere features,
//! deformable prototype layer and last layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvLayer;
use crate::deform::{CenterGrad, DeformableLayer, DeformablePrototype, LayerCache, OffsetBranch, PartGrid};
use crate::error::{shape_err, Error, Result};
use crate::losses::LastLayer;
use crate::sphere::{augment_epsilon, normalize_backward, normalize_locations, strip_epsilon, UnitFeatureMap};
use crate::tensor::{relu, relu_backward, sgd_update, Real, Tensor4};

/// One backbone convolution: output channels, square kernel, stride.
/// Padding is `kernel / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    /// Parses a comma-separated list of `channels:kernel:stride` triples.
    pub fn parse_list(s: &str) -> Result<Vec<LayerSpec>> {
        s.split(',')
            .map(|item| {
                let parts: Vec<&str> = item.trim().split(':').collect();
                let nums: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
                match nums.as_deref() {
                    Some(&[channels, kernel, stride]) if channels > 0 && kernel % 2 == 1 && stride > 0 => Ok(LayerSpec {
                        channels,
                        kernel,
                        stride,
                    }),
                    _ => Err(Error::Config(format!(
                        "backbone layer `{item}` must be channels:kernel:stride with an odd kernel"
                    ))),
                }
            })
            .collect()
    }

    pub fn format_list(specs: &[LayerSpec]) -> String {
        specs
            .iter()
            .map(|s| format!("{}:{}:{}", s.channels, s.kernel, s.stride))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Square input side length in pixels.
    pub image_size: usize,
    pub backbone: Vec<LayerSpec>,
    pub num_classes: usize,
    pub protos_per_class: usize,
    pub grid: PartGrid,
    pub epsilon: f64,
    pub offset_hidden: usize,
    pub deformable: bool,
    pub interior_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 64,
            backbone: LayerSpec::parse_list("8:3:2,16:3:2,16:3:2").expect("valid default"),
            num_classes: 3,
            protos_per_class: 2,
            grid: PartGrid::new(2, 2, 2).expect("valid default"),
            epsilon: 1e-5,
            offset_hidden: 32,
            deformable: true,
            interior_only: false,
        }
    }
}

impl ModelConfig {
    /// Backbone output side length.
    pub fn latent_size(&self) -> Result<usize> {
        let mut s = self.image_size;
        for spec in &self.backbone {
            let pad = spec.kernel / 2;
            if s + 2 * pad < spec.kernel {
                return Err(Error::Config(format!("image size {} too small for backbone", self.image_size)));
            }
            s = (s + 2 * pad - spec.kernel) / spec.stride + 1;
        }
        Ok(s)
    }

    /// Raw feature channels `d` (before the ε channel).
    pub fn feature_channels(&self) -> usize {
        self.backbone.last().map_or(self.in_channels, |s| s.channels)
    }

    pub fn num_prototypes(&self) -> usize {
        self.num_classes * self.protos_per_class
    }

    /// Image-to-latent downsampling factor γ.
    pub fn gamma(&self) -> Result<usize> {
        let latent = self.latent_size()?;
        if !self.image_size.is_multiple_of(latent) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of the latent size {latent}",
                self.image_size
            )));
        }
        Ok(self.image_size / latent)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.image_size == 0 || self.backbone.is_empty() {
            return Err(Error::Config("need input channels, an image size and at least one backbone layer".into()));
        }
        if self.num_classes < 2 || self.protos_per_class == 0 {
            return Err(Error::Config("need at least 2 classes and 1 prototype per class".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.deformable && self.offset_hidden == 0 {
            return Err(Error::Config("offset_hidden must be >= 1".into()));
        }
        let latent = self.latent_size()?;
        if self.interior_only && !(0..latent).any(|a| self.grid.is_interior(a, a, latent, latent)) {
            return Err(Error::Config(format!(
                "interior_only leaves no center for a {}x{} prototype on a {latent}x{latent} grid",
                self.grid.rows, self.grid.cols
            )));
        }
        Ok(())
    }
}

/// Conv/ReLU stack; every layer (including the last) is followed by ReLU,
/// which keeps features non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T = f32> {
    pub layers: Vec<ConvLayer<T>>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache<T = f32> {
    pub inputs: Vec<Tensor4<T>>,
    pub pre: Vec<Tensor4<T>>,
}

impl<T: Real> Backbone<T> {
    pub fn forward(&self, x: &Tensor4<T>) -> Result<(BackboneCache<T>, Tensor4<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let p = layer.forward(&cur)?;
            inputs.push(cur);
            cur = relu(&p);
            pre.push(p);
        }
        Ok((BackboneCache { inputs, pre }, cur))
    }

    /// Parameter gradients (weight, bias) per layer plus the input gradient.
    pub fn backward(&self, cache: &BackboneCache<T>, grad_out: &Tensor4<T>) -> Result<(Vec<(Tensor4<T>, Vec<T>)>, Tensor4<T>)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let gp = relu_backward(&cache.pre[i], &g)?;
            let cg = layer.backward(&cache.inputs[i], &gp)?;
            grads.push((cg.weight, cg.bias));
            g = cg.input;
        }
        grads.reverse();
        Ok((grads, g))
    }
}

/// Parameter groups with their own learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Prototypes,
    Offsets,
    Last,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub layer: DeformableLayer<T>,
    pub last: LastLayer<T>,
}

/// Everything computed on one image by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward<T = f32> {
    pub backbone: BackboneCache<T>,
    /// Backbone output (after ReLU), `1 × d × η × η`.
    pub z: Tensor4<T>,
    pub z_aug: Tensor4<T>,
    pub zhat: UnitFeatureMap<T>,
    pub layer: LayerCache<T>,
}

impl<T: Real> Forward<T> {
    pub fn scores(&self) -> &[T] {
        &self.layer.scores
    }
}

/// Gradients mirroring the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T = f32> {
    pub backbone: Vec<(Tensor4<T>, Vec<T>)>,
    pub parts: Vec<Vec<T>>,
    /// Hidden and output layer (weight, bias) of the offset branch.
    pub branch: Option<[(Tensor4<T>, Vec<T>); 2]>,
    pub last: Vec<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        let zl = |l: &ConvLayer<T>| (Tensor4::zeros(l.weight.dims()), vec![T::zero(); l.bias.len()]);
        Self {
            backbone: model.backbone.layers.iter().map(zl).collect(),
            parts: model.layer.prototypes.iter().map(|p| vec![T::zero(); p.parts.len()]).collect(),
            branch: model.layer.branch.as_ref().map(|b| [zl(&b.hidden), zl(&b.output)]),
            last: vec![T::zero(); model.last.weights.len()],
        }
    }

    pub fn group(&self, group: Group) -> Vec<&[T]> {
        match group {
            Group::Backbone => self.backbone.iter().flat_map(|(w, b)| [w.data(), b.as_slice()]).collect(),
            Group::Prototypes => self.parts.iter().map(|p| p.as_slice()).collect(),
            Group::Offsets => self
                .branch
                .iter()
                .flat_map(|br| br.iter().flat_map(|(w, b)| [w.data(), b.as_slice()]))
                .collect(),
            Group::Last => vec![self.last.as_slice()],
        }
    }

    pub fn group_mut(&mut self, group: Group) -> Vec<&mut [T]> {
        match group {
            Group::Backbone => self
                .backbone
                .iter_mut()
                .flat_map(|(w, b)| [w.data_mut(), b.as_mut_slice()])
                .collect(),
            Group::Prototypes => self.parts.iter_mut().map(|p| p.as_mut_slice()).collect(),
            Group::Offsets => self
                .branch
                .iter_mut()
                .flat_map(|br| br.iter_mut().flat_map(|(w, b)| [w.data_mut(), b.as_mut_slice()]))
                .collect(),
            Group::Last => vec![self.last.as_mut_slice()],
        }
    }

    /// Elementwise `self += other`, group by group.
    pub fn add_assign(&mut self, other: &ModelGrads<T>) {
        for g in [Group::Backbone, Group::Prototypes, Group::Offsets, Group::Last] {
            for (dst, src) in self.group_mut(g).into_iter().zip(other.group(g)) {
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
    }

    pub fn scale(&mut self, a: T) {
        for g in [Group::Backbone, Group::Prototypes, Group::Offsets, Group::Last] {
            for dst in self.group_mut(g) {
                dst.iter_mut().for_each(|d| *d *= a);
            }
        }
    }
}

impl<T: Real> Model<T> {
    pub fn proto_classes(&self) -> Vec<usize> {
        self.layer.prototypes.iter().map(|p| p.class_id).collect()
    }

    pub fn num_prototypes(&self) -> usize {
        self.layer.prototypes.len()
    }

    pub fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let want = [1, self.config.in_channels, self.config.image_size, self.config.image_size];
        if x.dims() != want {
            return shape_err(format!("model expects an image {want:?}, got {:?}", x.dims()));
        }
        Ok(())
    }

    /// Backbone, ε channel and per-location normalization.
    pub fn embed(&self, x: &Tensor4<T>) -> Result<(BackboneCache<T>, Tensor4<T>, Tensor4<T>, UnitFeatureMap<T>)> {
        self.check_input(x)?;
        let (cache, z) = self.backbone.forward(x)?;
        let (z_aug, zhat) = self.normalize(&z)?;
        Ok((cache, z, z_aug, zhat))
    }

    /// ε channel plus normalization of raw backbone features.
    pub fn normalize(&self, z: &Tensor4<T>) -> Result<(Tensor4<T>, UnitFeatureMap<T>)> {
        let z_aug = augment_epsilon(z, T::of(self.config.epsilon));
        let zhat = normalize_locations(&z_aug, self.layer.grid.rho())?;
        Ok((z_aug, zhat))
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Forward<T>> {
        let (backbone, z, z_aug, zhat) = self.embed(x)?;
        let layer = self.layer.forward(&zhat)?;
        Ok(Forward {
            backbone,
            z,
            z_aug,
            zhat,
            layer,
        })
    }

    pub fn logits(&self, fwd: &Forward<T>) -> Vec<f64> {
        self.last.logits(fwd.scores())
    }

    /// Predicted class (lowest index on ties) and class logits.
    pub fn predict(&self, x: &Tensor4<T>) -> Result<(usize, Vec<f64>)> {
        let fwd = self.forward(x)?;
        let logits = self.logits(&fwd);
        Ok((argmax_first(&logits), logits))
    }

    /// Gradients of `Σ weight · g_proto(center)` with respect to every
    /// parameter below the last layer (the last-layer entry is zero).
    pub fn backward(&self, fwd: &Forward<T>, upstream: &[CenterGrad<T>]) -> Result<ModelGrads<T>> {
        let lg = self.layer.backward(&fwd.zhat, &fwd.layer, upstream)?;
        let g_aug = normalize_backward(&fwd.z_aug, fwd.zhat.radius, &lg.zhat)?;
        let g_z = strip_epsilon(&g_aug);
        let (backbone, _) = self.backbone.backward(&fwd.backbone, &g_z)?;
        Ok(ModelGrads {
            backbone,
            parts: lg.parts,
            branch: lg
                .branch
                .map(|b| [(b.hidden.weight, b.hidden.bias), (b.output.weight, b.output.bias)]),
            last: vec![T::zero(); self.last.weights.len()],
        })
    }

    pub fn params(&self, group: Group) -> Vec<&[T]> {
        match group {
            Group::Backbone => self
                .backbone
                .layers
                .iter()
                .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
                .collect(),
            Group::Prototypes => self.layer.prototypes.iter().map(|p| p.parts.as_slice()).collect(),
            Group::Offsets => self
                .layer
                .branch
                .iter()
                .flat_map(|b| [b.hidden.weight.data(), b.hidden.bias.as_slice(), b.output.weight.data(), b.output.bias.as_slice()])
                .collect(),
            Group::Last => vec![self.last.weights.as_slice()],
        }
    }

    pub fn params_mut(&mut self, group: Group) -> Vec<&mut [T]> {
        match group {
            Group::Backbone => self
                .backbone
                .layers
                .iter_mut()
                .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
                .collect(),
            Group::Prototypes => self.layer.prototypes.iter_mut().map(|p| p.parts.as_mut_slice()).collect(),
            Group::Offsets => self
                .layer
                .branch
                .iter_mut()
                .flat_map(|b| {
                    [
                        b.hidden.weight.data_mut(),
                        b.hidden.bias.as_mut_slice(),
                        b.output.weight.data_mut(),
                        b.output.bias.as_mut_slice(),
                    ]
                })
                .collect(),
            Group::Last => vec![self.last.weights.as_mut_slice()],
        }
    }

    /// One momentum-SGD step on `group`; prototype parts are pulled back to
    /// norm `r` afterwards.
    pub fn sgd_group(&mut self, group: Group, grads: &ModelGrads<T>, velocity: &mut ModelGrads<T>, lr: T, momentum: T) {
        let params = self.params_mut(group);
        for ((p, g), v) in params.into_iter().zip(grads.group(group)).zip(velocity.group_mut(group)) {
            sgd_update(p, g, v, lr, momentum);
        }
        if group == Group::Prototypes {
            self.layer.prototypes.iter_mut().for_each(|p| p.renormalize());
        }
    }
}

/// Index of the largest value; ties keep the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Seeded initialization: He-normal backbone, Gaussian prototype parts
/// rescaled to `r`, offset branch with a zero output layer, and last layer
/// with own-class connections 1 and all others −0.5.
pub fn init_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(config.backbone.len());
    let mut in_c = config.in_channels;
    for spec in &config.backbone {
        layers.push(ConvLayer::he_init(spec.channels, in_c, spec.kernel, spec.stride, spec.kernel / 2, &mut rng)?);
        in_c = spec.channels;
    }
    let channels = config.feature_channels() + 1;
    let mut prototypes = Vec::with_capacity(config.num_prototypes());
    for class in 0..config.num_classes {
        for l in 0..config.protos_per_class {
            prototypes.push(DeformablePrototype::random(class, l, config.grid, channels, &mut rng));
        }
    }
    let branch = if config.deformable {
        Some(OffsetBranch::new(channels, config.offset_hidden, config.grid.rho(), &mut rng)?)
    } else {
        None
    };
    let classes: Vec<usize> = prototypes.iter().map(|p| p.class_id).collect();
    Ok(Model {
        config: config.clone(),
        backbone: Backbone { layers },
        layer: DeformableLayer::new(config.grid, prototypes, branch, config.interior_only)?,
        last: LastLayer::class_connection_init(&classes, config.num_classes),
    })
}
