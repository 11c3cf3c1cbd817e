//! The deformable prototype layer: offset prediction, per-center deformed
//! similarity maps, global max pooling, and the backward pass through parts,
//! sampled features and offsets.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conv::{ConvGrads, ConvLayer};
use crate::error::{shape_err, Error, Result};
use crate::sphere::{radius_for, FeatureGrid, UnitFeatureMap};
use crate::tensor::{relu, relu_backward, Real, Tensor4};

/// Geometry of a `rows × cols` prototype: part `k = i·cols + j` sits at
/// `((i − (rows−1)/2)·dilation, (j − (cols−1)/2)·dilation)` relative to the
/// center, so a 3×3 grid at dilation 1 covers `{−1,0,1}²` and a 2×2 grid at
/// dilation 2 covers `{−1,1}²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartGrid {
    pub rows: usize,
    pub cols: usize,
    pub dilation: usize,
}

impl PartGrid {
    pub fn new(rows: usize, cols: usize, dilation: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || dilation == 0 {
            return Err(Error::Config(format!(
                "prototype grid {rows}x{cols} with dilation {dilation} is degenerate"
            )));
        }
        if !((rows - 1) * dilation).is_multiple_of(2) || !((cols - 1) * dilation).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "prototype grid {rows}x{cols} with dilation {dilation} has no integer center; \
                 even sides need an even dilation"
            )));
        }
        Ok(Self { rows, cols, dilation })
    }

    pub fn rho(&self) -> usize {
        self.rows * self.cols
    }

    pub fn radius<T: Real>(&self) -> T {
        radius_for(self.rho())
    }

    /// Integer displacement of part `k` from the prototype center.
    pub fn part_offset(&self, k: usize) -> (isize, isize) {
        let (i, j) = (k / self.cols, k % self.cols);
        let half_r = ((self.rows - 1) * self.dilation / 2) as isize;
        let half_c = ((self.cols - 1) * self.dilation / 2) as isize;
        (
            (i * self.dilation) as isize - half_r,
            (j * self.dilation) as isize - half_c,
        )
    }

    pub fn part_offsets(&self) -> Vec<(isize, isize)> {
        (0..self.rho()).map(|k| self.part_offset(k)).collect()
    }

    /// True when every undeformed part of a prototype centered at `(a, b)`
    /// falls inside an `h × w` grid.
    pub fn is_interior(&self, a: usize, b: usize, h: usize, w: usize) -> bool {
        self.part_offsets().iter().all(|&(dm, dn)| {
            let (r, c) = (a as isize + dm, b as isize + dn);
            r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w
        })
    }
}

/// One prototype: `rho` parts of dimension `channels`, stored part-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformablePrototype<T = f32> {
    pub class_id: usize,
    pub index: usize,
    pub grid: PartGrid,
    pub channels: usize,
    pub parts: Vec<T>,
}

impl<T: Real> DeformablePrototype<T> {
    pub fn new(class_id: usize, index: usize, grid: PartGrid, channels: usize, parts: Vec<T>) -> Result<Self> {
        if parts.len() != grid.rho() * channels {
            return shape_err(format!(
                "prototype needs {} values, got {}",
                grid.rho() * channels,
                parts.len()
            ));
        }
        Ok(Self {
            class_id,
            index,
            grid,
            channels,
            parts,
        })
    }

    /// Parts drawn from an isotropic Gaussian, then rescaled to norm `r`.
    pub fn random<R: Rng + ?Sized>(
        class_id: usize,
        index: usize,
        grid: PartGrid,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let parts = (0..grid.rho() * channels)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::of(v)
            })
            .collect();
        let mut p = Self {
            class_id,
            index,
            grid,
            channels,
            parts,
        };
        p.renormalize();
        p
    }

    pub fn rho(&self) -> usize {
        self.grid.rho()
    }

    pub fn radius(&self) -> T {
        self.grid.radius()
    }

    pub fn part(&self, k: usize) -> &[T] {
        &self.parts[k * self.channels..(k + 1) * self.channels]
    }

    pub fn part_mut(&mut self, k: usize) -> &mut [T] {
        &mut self.parts[k * self.channels..(k + 1) * self.channels]
    }

    /// Rescales every part back onto the radius-`r` sphere. A part that
    /// collapsed to zero is reset to `r·e_last` (the ε direction).
    pub fn renormalize(&mut self) {
        let r = self.radius().as_f64();
        for k in 0..self.rho() {
            let part = self.part_mut(k);
            let norm = part.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                part.iter_mut().for_each(|v| *v = T::of(v.as_f64() * r / norm));
            } else {
                part.iter_mut().for_each(|v| *v = T::zero());
                *part.last_mut().expect("parts have at least one channel") = T::of(r);
            }
        }
    }
}

/// Per-center part displacements for a batch, `batch × 2ρ × η₁ × η₂`;
/// channel `2k` is the row shift Δ₁ and `2k+1` the column shift Δ₂ of part `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T = f32> {
    pub tensor: Tensor4<T>,
}

impl<T: Real> OffsetField<T> {
    pub fn zeros(batch: usize, rho: usize, h: usize, w: usize) -> Self {
        Self {
            tensor: Tensor4::zeros([batch, 2 * rho, h, w]),
        }
    }

    pub fn rho(&self) -> usize {
        self.tensor.channels() / 2
    }

    #[inline]
    pub fn delta(&self, image: usize, part: usize, a: usize, b: usize) -> (T, T) {
        (
            self.tensor.get(image, 2 * part, a, b),
            self.tensor.get(image, 2 * part + 1, a, b),
        )
    }
}

/// Two 3×3 same-padding convolutions with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetBranch<T = f32> {
    pub hidden: ConvLayer<T>,
    pub output: ConvLayer<T>,
}

/// Intermediate activations of [`OffsetBranch::forward`].
#[derive(Clone, Debug)]
pub struct BranchCache<T = f32> {
    pub hidden_pre: Tensor4<T>,
    pub hidden: Tensor4<T>,
    pub offsets: OffsetField<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchGrads<T = f32> {
    pub hidden: ConvGrads<T>,
    pub output: ConvGrads<T>,
}

impl<T: Real> OffsetBranch<T> {
    /// He-initialized hidden layer, zero output layer (so offsets start at 0).
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rho: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            hidden: ConvLayer::he_init(hidden, channels, 3, 1, 1, rng)?,
            output: ConvLayer::zeros_same(2 * rho, hidden, 3)?,
        })
    }

    pub fn rho(&self) -> usize {
        self.output.out_channels() / 2
    }

    pub fn forward(&self, zhat: &Tensor4<T>) -> Result<BranchCache<T>> {
        if !self.output.out_channels().is_multiple_of(2) {
            return shape_err("offset branch must emit an even channel count");
        }
        let hidden_pre = self.hidden.forward(zhat)?;
        let hidden = relu(&hidden_pre);
        let tensor = self.output.forward(&hidden)?;
        Ok(BranchCache {
            hidden_pre,
            hidden,
            offsets: OffsetField { tensor },
        })
    }

    /// Returns the parameter gradients; `hidden.input` is the gradient with
    /// respect to `zhat`.
    pub fn backward(&self, zhat: &Tensor4<T>, cache: &BranchCache<T>, grad_offsets: &Tensor4<T>) -> Result<BranchGrads<T>> {
        let output = self.output.backward(&cache.hidden, grad_offsets)?;
        let grad_pre = relu_backward(&cache.hidden_pre, &output.input)?;
        let hidden = self.hidden.backward(zhat, &grad_pre)?;
        Ok(BranchGrads { hidden, output })
    }
}

pub fn predict_offsets<T: Real>(zhat: &UnitFeatureMap<T>, branch: &OffsetBranch<T>, rho: usize) -> Result<OffsetField<T>> {
    if branch.output.out_channels() != 2 * rho {
        return shape_err(format!(
            "offset branch emits {} channels, prototypes need {}",
            branch.output.out_channels(),
            2 * rho
        ));
    }
    Ok(branch.forward(&zhat.tensor)?.offsets)
}

/// Similarity of one prototype at every center of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap<T = f32> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
    /// Centers the max pool may select.
    pub eligible: Vec<bool>,
}

impl<T: Real> SimilarityMap<T> {
    pub fn get(&self, a: usize, b: usize) -> T {
        self.values[a * self.width + b]
    }
}

/// Sampling position of part `k` for the prototype centered at `(a, b)`.
#[inline]
pub fn sample_position<T: Real>(
    grid: &PartGrid,
    offsets: Option<(&OffsetField<T>, usize)>,
    k: usize,
    a: usize,
    b: usize,
) -> (T, T) {
    let (dm, dn) = grid.part_offset(k);
    let (d1, d2) = match offsets {
        Some((field, image)) => field.delta(image, k, a, b),
        None => (T::zero(), T::zero()),
    };
    (T::of((a as isize + dm) as f64) + d1, T::of((b as isize + dn) as f64) + d2)
}

fn eligibility(grid: &PartGrid, h: usize, w: usize, interior_only: bool) -> Vec<bool> {
    (0..h * w)
        .map(|i| !interior_only || grid.is_interior(i / w, i % w, h, w))
        .collect()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

/// Per-part dot products `p̂_k · ẑ(sample_k)` at center `(a, b)`.
pub fn part_contributions<T: Real>(
    grid: &FeatureGrid<'_, T>,
    proto: &DeformablePrototype<T>,
    offsets: Option<(&OffsetField<T>, usize)>,
    a: usize,
    b: usize,
) -> Vec<T> {
    let mut buf = vec![T::zero(); grid.channels()];
    (0..proto.rho())
        .map(|k| {
            let (x, y) = sample_position(&proto.grid, offsets, k, a, b);
            grid.interpolate_into(x, y, &mut buf);
            T::of(dot(proto.part(k), &buf))
        })
        .collect()
}

fn check_proto<T: Real>(zhat: &UnitFeatureMap<T>, proto: &DeformablePrototype<T>) -> Result<()> {
    if zhat.channels() != proto.channels {
        return shape_err(format!(
            "features have {} channels, prototype parts {}",
            zhat.channels(),
            proto.channels
        ));
    }
    Ok(())
}

/// `g_{a,b} = Σ_k p̂_k · ẑ(a + m_k + Δ₁, b + n_k + Δ₂)` over every center.
pub fn similarity_map<T: Real>(
    zhat: &UnitFeatureMap<T>,
    image: usize,
    proto: &DeformablePrototype<T>,
    offsets: &OffsetField<T>,
    interior_only: bool,
) -> Result<SimilarityMap<T>> {
    check_proto(zhat, proto)?;
    if offsets.rho() != proto.rho() || offsets.tensor.height() != zhat.height() || offsets.tensor.width() != zhat.width() {
        return shape_err(format!(
            "offset field {:?} does not fit {} parts on a {}x{} grid",
            offsets.tensor.dims(),
            proto.rho(),
            zhat.height(),
            zhat.width()
        ));
    }
    Ok(similarity_with(zhat, image, proto, Some((offsets, image)), interior_only))
}

fn similarity_with<T: Real>(
    zhat: &UnitFeatureMap<T>,
    image: usize,
    proto: &DeformablePrototype<T>,
    offsets: Option<(&OffsetField<T>, usize)>,
    interior_only: bool,
) -> SimilarityMap<T> {
    let (h, w) = (zhat.height(), zhat.width());
    let grid = zhat.grid(image);
    let mut buf = vec![T::zero(); grid.channels()];
    let mut values = Vec::with_capacity(h * w);
    for a in 0..h {
        for b in 0..w {
            let mut acc = 0f64;
            for k in 0..proto.rho() {
                let (x, y) = sample_position(&proto.grid, offsets, k, a, b);
                grid.interpolate_into(x, y, &mut buf);
                acc += dot(proto.part(k), &buf);
            }
            values.push(T::of(acc));
        }
    }
    SimilarityMap {
        height: h,
        width: w,
        values,
        eligible: eligibility(&proto.grid, h, w, interior_only),
    }
}

/// The rigid form: integer sampling positions read straight from the grid,
/// no interpolation and no offset branch.
pub fn similarity_nondeformable<T: Real>(
    zhat: &UnitFeatureMap<T>,
    image: usize,
    proto: &DeformablePrototype<T>,
    interior_only: bool,
) -> Result<SimilarityMap<T>> {
    check_proto(zhat, proto)?;
    let (h, w) = (zhat.height(), zhat.width());
    let grid = zhat.grid(image);
    let mut values = Vec::with_capacity(h * w);
    for a in 0..h {
        for b in 0..w {
            let mut acc = 0f64;
            for (k, (dm, dn)) in proto.grid.part_offsets().into_iter().enumerate() {
                let (r, c) = (a as isize + dm, b as isize + dn);
                if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
                    continue;
                }
                acc += dot(proto.part(k), &grid.column(r as usize, c as usize));
            }
            values.push(T::of(acc));
        }
    }
    Ok(SimilarityMap {
        height: h,
        width: w,
        values,
        eligible: eligibility(&proto.grid, h, w, interior_only),
    })
}

/// Largest eligible value and its center; ties keep the earliest in
/// row-major order. `None` when no center is eligible.
pub fn max_pool_similarity<T: Real>(map: &SimilarityMap<T>) -> Option<(T, (usize, usize))> {
    let mut best: Option<(T, usize)> = None;
    for (i, (&v, &ok)) in map.values.iter().zip(&map.eligible).enumerate() {
        if ok && best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, i));
        }
    }
    best.map(|(v, i)| (v, (i / map.width, i % map.width)))
}

/// A set of prototypes sharing one part grid and (optionally) one offset branch.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableLayer<T = f32> {
    pub grid: PartGrid,
    pub prototypes: Vec<DeformablePrototype<T>>,
    /// `None` runs the rigid (non-deformable) variant.
    pub branch: Option<OffsetBranch<T>>,
    pub interior_only: bool,
}

/// Everything [`layer_backward`] needs for one image.
#[derive(Clone, Debug)]
pub struct LayerCache<T = f32> {
    pub branch: Option<BranchCache<T>>,
    pub maps: Vec<SimilarityMap<T>>,
    pub scores: Vec<T>,
    pub centers: Vec<(usize, usize)>,
}

impl<T: Real> LayerCache<T> {
    pub fn offsets(&self) -> Option<&OffsetField<T>> {
        self.branch.as_ref().map(|c| &c.offsets)
    }
}

/// Upstream gradient `weight` on prototype `proto`'s similarity at `center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterGrad<T = f32> {
    pub proto: usize,
    pub center: (usize, usize),
    pub weight: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T = f32> {
    /// Gradient with respect to `ẑ` through all paths (sampling and offsets).
    pub zhat: Tensor4<T>,
    pub parts: Vec<Vec<T>>,
    pub branch: Option<BranchGrads<T>>,
    /// Gradient with respect to the offset field itself.
    pub offsets: Option<Tensor4<T>>,
}

impl<T: Real> DeformableLayer<T> {
    pub fn new(grid: PartGrid, prototypes: Vec<DeformablePrototype<T>>, branch: Option<OffsetBranch<T>>, interior_only: bool) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(Error::Config("layer needs at least one prototype".into()));
        }
        let channels = prototypes[0].channels;
        if prototypes.iter().any(|p| p.grid != grid || p.channels != channels) {
            return shape_err("all prototypes must share the layer's part grid and channel count");
        }
        if let Some(br) = &branch {
            if br.rho() != grid.rho() || br.hidden.in_channels() != channels {
                return shape_err(format!(
                    "offset branch maps {} channels to {} parts; layer has {} channels, {} parts",
                    br.hidden.in_channels(),
                    br.rho(),
                    channels,
                    grid.rho()
                ));
            }
        }
        Ok(Self {
            grid,
            prototypes,
            branch,
            interior_only,
        })
    }

    pub fn channels(&self) -> usize {
        self.prototypes[0].channels
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn is_deformable(&self) -> bool {
        self.branch.is_some()
    }

    /// Forward for a single image (`zhat` with batch 1).
    pub fn forward(&self, zhat: &UnitFeatureMap<T>) -> Result<LayerCache<T>> {
        let branch = match &self.branch {
            Some(br) => Some(br.forward(&zhat.tensor)?),
            None => None,
        };
        self.forward_with_offsets(zhat, branch)
    }

    /// Forward with an externally supplied offset field (the branch is not
    /// evaluated). `None` means rigid sampling.
    pub fn forward_with_offsets(&self, zhat: &UnitFeatureMap<T>, branch: Option<BranchCache<T>>) -> Result<LayerCache<T>> {
        if zhat.batch() != 1 {
            return shape_err(format!("layer forward takes one image, got batch {}", zhat.batch()));
        }
        let mut maps = Vec::with_capacity(self.len());
        let mut scores = Vec::with_capacity(self.len());
        let mut centers = Vec::with_capacity(self.len());
        for proto in &self.prototypes {
            let map = match &branch {
                Some(cache) => similarity_map(zhat, 0, proto, &cache.offsets, self.interior_only)?,
                None => similarity_nondeformable(zhat, 0, proto, self.interior_only)?,
            };
            let (score, center) = max_pool_similarity(&map).ok_or_else(|| {
                Error::Config("no eligible prototype center; latent grid too small for interior_only".into())
            })?;
            scores.push(score);
            centers.push(center);
            maps.push(map);
        }
        Ok(LayerCache {
            branch,
            maps,
            scores,
            centers,
        })
    }

    /// Backward for a list of per-center upstream gradients.
    pub fn backward(&self, zhat: &UnitFeatureMap<T>, cache: &LayerCache<T>, upstream: &[CenterGrad<T>]) -> Result<LayerGrads<T>> {
        let grid = zhat.grid(0);
        let mut grad_zhat = Tensor4::zeros(zhat.tensor.dims());
        let mut grad_offsets = cache.offsets().map(|o| Tensor4::zeros(o.tensor.dims()));
        let mut parts: Vec<Vec<T>> = self.prototypes.iter().map(|p| vec![T::zero(); p.parts.len()]).collect();
        let channels = self.channels();
        let mut sample = vec![T::zero(); channels];
        let mut up = vec![T::zero(); channels];
        for cg in upstream {
            if cg.weight == T::zero() {
                continue;
            }
            let proto = self.prototypes.get(cg.proto).ok_or_else(|| {
                Error::InvalidInput(format!("center gradient for missing prototype {}", cg.proto))
            })?;
            let (a, b) = cg.center;
            let offsets = cache.offsets().map(|o| (o, 0));
            for k in 0..proto.rho() {
                let (x, y) = sample_position(&proto.grid, offsets, k, a, b);
                grid.interpolate_into(x, y, &mut sample);
                for (g, &s) in parts[cg.proto][k * channels..(k + 1) * channels].iter_mut().zip(&sample) {
                    *g += cg.weight * s;
                }
                for (u, &p) in up.iter_mut().zip(proto.part(k)) {
                    *u = cg.weight * p;
                }
                let (gx, gy) = grid.interpolate_backward_into(x, y, &up, grad_zhat.data_mut());
                if let Some(go) = grad_offsets.as_mut() {
                    let i = go.index(0, 2 * k, a, b);
                    go.data_mut()[i] += gx;
                    let i = go.index(0, 2 * k + 1, a, b);
                    go.data_mut()[i] += gy;
                }
            }
        }
        let branch = match (&self.branch, &cache.branch, &grad_offsets) {
            (Some(br), Some(bc), Some(go)) => {
                let g = br.backward(&zhat.tensor, bc, go)?;
                grad_zhat.add_assign(&g.hidden.input)?;
                Some(g)
            }
            _ => None,
        };
        Ok(LayerGrads {
            zhat: grad_zhat,
            parts,
            branch,
            offsets: grad_offsets,
        })
    }

    /// Backward with one upstream value per prototype, routed to its argmax center.
    pub fn backward_scores(&self, zhat: &UnitFeatureMap<T>, cache: &LayerCache<T>, upstream: &[T]) -> Result<LayerGrads<T>> {
        if upstream.len() != self.len() {
            return shape_err(format!("{} upstream scores for {} prototypes", upstream.len(), self.len()));
        }
        let grads: Vec<CenterGrad<T>> = upstream
            .iter()
            .zip(&cache.centers)
            .enumerate()
            .map(|(proto, (&weight, &center))| CenterGrad { proto, center, weight })
            .collect();
        self.backward(zhat, cache, &grads)
    }
}

pub fn layer_forward<T: Real>(layer: &DeformableLayer<T>, zhat: &UnitFeatureMap<T>) -> Result<LayerCache<T>> {
    layer.forward(zhat)
}

pub fn layer_backward<T: Real>(
    layer: &DeformableLayer<T>,
    zhat: &UnitFeatureMap<T>,
    cache: &LayerCache<T>,
    upstream: &[T],
) -> Result<LayerGrads<T>> {
    layer.backward_scores(zhat, cache, upstream)
}
