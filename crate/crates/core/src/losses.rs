//! Training objectives and their gradients: cluster and separation terms,
//! subtractive-margin cross entropy, part orthogonality, and the last-layer
//! objective with its off-class L1 penalty.
//!
//! Losses are computed in f64 regardless of the model precision.

use crate::deform::{max_pool_similarity, CenterGrad, DeformablePrototype, SimilarityMap};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Real;

/// Clamp applied to cosines before `arccos`.
pub const ARCCOS_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_sep: f64,
    pub lambda_clst: f64,
    pub lambda_ortho: f64,
    pub margin_phi: f64,
    pub lambda_l1_last: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sep: 0.01,
            lambda_clst: 0.1,
            lambda_ortho: 0.1,
            margin_phi: 0.1,
            lambda_l1_last: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_sep,
            self.lambda_clst,
            self.lambda_ortho,
            self.margin_phi,
            self.lambda_l1_last,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Prototype-to-class connections, `num_prototypes × num_classes` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LastLayer<T = f32> {
    pub num_prototypes: usize,
    pub num_classes: usize,
    pub weights: Vec<T>,
}

impl<T: Real> LastLayer<T> {
    /// Own-class connections 1, all others −0.5.
    pub fn class_connection_init(proto_classes: &[usize], num_classes: usize) -> Self {
        let weights = proto_classes
            .iter()
            .flat_map(|&pc| (0..num_classes).map(move |c| T::of(if c == pc { 1.0 } else { -0.5 })))
            .collect();
        Self {
            num_prototypes: proto_classes.len(),
            num_classes,
            weights,
        }
    }

    #[inline]
    pub fn get(&self, proto: usize, class: usize) -> T {
        self.weights[proto * self.num_classes + class]
    }

    pub fn logits(&self, scores: &[T]) -> Vec<f64> {
        let mut out = vec![0f64; self.num_classes];
        for (p, &s) in scores.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.get(p, c).as_f64() * s.as_f64();
            }
        }
        out
    }

    pub fn logits_f64(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = vec![0f64; self.num_classes];
        for (p, &s) in scores.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.get(p, c).as_f64() * s;
            }
        }
        out
    }
}

fn check_labels(labels: &[usize], n: usize, num_classes: usize) -> Result<()> {
    if labels.len() != n {
        return shape_err(format!("{} labels for {n} examples", labels.len()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidInput(format!("label {l} out of range for {num_classes} classes")));
    }
    Ok(())
}

/// Mean over images of the best score among prototypes selected by `pick`,
/// and the gradient (one-hot on the winning prototype, scaled by 1/N).
fn mean_of_maxima<T: Real>(
    scores: &[Vec<T>],
    labels: &[usize],
    proto_classes: &[usize],
    pick: impl Fn(usize, usize) -> bool,
    what: &str,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::InvalidInput(format!("{what} loss over an empty batch")));
    }
    let mut total = 0f64;
    let mut grads = Vec::with_capacity(n);
    for (row, &label) in scores.iter().zip(labels) {
        if row.len() != proto_classes.len() {
            return shape_err(format!("{} scores for {} prototypes", row.len(), proto_classes.len()));
        }
        let mut best: Option<(f64, usize)> = None;
        for (p, (&s, &pc)) in row.iter().zip(proto_classes).enumerate() {
            if pick(pc, label) && best.is_none_or(|(b, _)| s.as_f64() > b) {
                best = Some((s.as_f64(), p));
            }
        }
        let (value, arg) = best.ok_or_else(|| {
            Error::Config(format!("class {label} has no prototypes eligible for the {what} term"))
        })?;
        total += value;
        let mut g = vec![0f64; row.len()];
        g[arg] = 1.0 / n as f64;
        grads.push(g);
    }
    Ok((total / n as f64, grads))
}

/// `−(1/N) Σᵢ max_{same-class p} score_{i,p}`.
pub fn cluster_loss<T: Real>(scores: &[Vec<T>], labels: &[usize], proto_classes: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if labels.len() != scores.len() {
        return shape_err(format!("{} labels for {} examples", labels.len(), scores.len()));
    }
    let (v, mut g) = mean_of_maxima(scores, labels, proto_classes, |pc, l| pc == l, "cluster")?;
    g.iter_mut().flatten().for_each(|x| *x = -*x);
    Ok((-v, g))
}

/// `+(1/N) Σᵢ max_{other-class p} score_{i,p}`.
pub fn separation_loss<T: Real>(scores: &[Vec<T>], labels: &[usize], proto_classes: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if labels.len() != scores.len() {
        return shape_err(format!("{} labels for {} examples", labels.len(), scores.len()));
    }
    mean_of_maxima(scores, labels, proto_classes, |pc, l| pc != l, "separation")
}

/// `cos(max(0, arccos(g) − φ))` and its derivative with respect to `g`.
/// `φ = 0` returns `g` unchanged.
pub fn margin_adjust(g: f64, phi: f64) -> (f64, f64) {
    if phi == 0.0 {
        return (g, 1.0);
    }
    let lo = -1.0 + ARCCOS_CLAMP;
    let hi = 1.0 - ARCCOS_CLAMP;
    let clamped = g.clamp(lo, hi);
    let theta = clamped.acos();
    if theta <= phi {
        return (1.0, 0.0);
    }
    let value = (theta - phi).cos();
    let deriv = if g < lo || g > hi { 0.0 } else { (theta - phi).sin() / theta.sin() };
    (value, deriv)
}

/// Result of re-maxing a similarity map after the margin adjustment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginPick {
    pub value: f64,
    pub center: (usize, usize),
    /// `∂value/∂g` at `center`.
    pub derivative: f64,
}

/// Max over eligible centers of `margin_adjust(g_{a,b})`; ties keep the earliest.
pub fn margin_adjusted_max<T: Real>(map: &SimilarityMap<T>, phi: f64) -> Option<MarginPick> {
    let mut best: Option<MarginPick> = None;
    for (i, (&v, &ok)) in map.values.iter().zip(&map.eligible).enumerate() {
        if !ok {
            continue;
        }
        let (value, derivative) = margin_adjust(v.as_f64(), phi);
        if best.is_none_or(|b| value > b.value) {
            best = Some(MarginPick {
                value,
                center: (i / map.width, i % map.width),
                derivative,
            });
        }
    }
    best
}

/// Scores fed to the margin cross entropy for one image: target-class
/// prototypes keep their pooled score, the others are re-maxed after the
/// angular margin.
pub fn subtractive_margin_scores<T: Real>(
    maps: &[SimilarityMap<T>],
    label: usize,
    proto_classes: &[usize],
    phi: f64,
) -> Result<Vec<MarginPick>> {
    if maps.len() != proto_classes.len() {
        return shape_err(format!("{} maps for {} prototypes", maps.len(), proto_classes.len()));
    }
    maps.iter()
        .zip(proto_classes)
        .map(|(m, &pc)| {
            let pick = if pc == label {
                max_pool_similarity(m).map(|(v, center)| MarginPick {
                    value: v.as_f64(),
                    center,
                    derivative: 1.0,
                })
            } else {
                margin_adjusted_max(m, phi)
            };
            pick.ok_or_else(|| Error::InvalidInput("similarity map has no eligible center".into()))
        })
        .collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Mean softmax cross entropy over class logits `Σ_p w_{p,c} s_p`. Returns
/// the loss, `∂/∂s` per example and `∂/∂w`.
pub fn cross_entropy<T: Real>(scores: &[Vec<f64>], last: &LastLayer<T>, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::InvalidInput("cross entropy over an empty batch".into()));
    }
    check_labels(labels, n, last.num_classes)?;
    let k = last.num_classes;
    let mut loss = 0f64;
    let mut grad_s = Vec::with_capacity(n);
    let mut grad_w = vec![0f64; last.weights.len()];
    for (row, &label) in scores.iter().zip(labels) {
        if row.len() != last.num_prototypes {
            return shape_err(format!("{} scores for {} prototypes", row.len(), last.num_prototypes));
        }
        let lsm = log_softmax(&last.logits_f64(row));
        loss -= lsm[label];
        // ∂/∂logit_c = softmax_c − [c = label], averaged over the batch
        let dl: Vec<f64> = lsm
            .iter()
            .enumerate()
            .map(|(c, &l)| (l.exp() - if c == label { 1.0 } else { 0.0 }) / n as f64)
            .collect();
        let gs = (0..row.len())
            .map(|p| (0..k).map(|c| last.get(p, c).as_f64() * dl[c]).sum())
            .collect();
        for (p, &s) in row.iter().enumerate() {
            for c in 0..k {
                grad_w[p * k + c] += s * dl[c];
            }
        }
        grad_s.push(gs);
    }
    Ok((loss / n as f64, grad_s, grad_w))
}

/// Cross entropy over margin-adjusted scores.
pub fn margin_cross_entropy<T: Real>(adjusted: &[Vec<f64>], last: &LastLayer<T>, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    cross_entropy(adjusted, last, labels)
}

/// `Σ_c ‖P⁽ᶜ⁾P⁽ᶜ⁾ᵀ − r²I‖²_F` where `P⁽ᶜ⁾` stacks every part of every
/// prototype of class `c`. Returns the loss and its gradient per prototype.
pub fn orthogonality_loss<T: Real>(prototypes: &[DeformablePrototype<T>]) -> (f64, Vec<Vec<f64>>) {
    let mut grads: Vec<Vec<f64>> = prototypes.iter().map(|p| vec![0f64; p.parts.len()]).collect();
    let num_classes = prototypes.iter().map(|p| p.class_id + 1).max().unwrap_or(0);
    let mut loss = 0f64;
    for class in 0..num_classes {
        // (prototype index, part index) rows of P
        let rows: Vec<(usize, usize)> = prototypes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class_id == class)
            .flat_map(|(i, p)| (0..p.rho()).map(move |k| (i, k)))
            .collect();
        let row = |&(i, k): &(usize, usize)| prototypes[i].part(k);
        let n = rows.len();
        let mut resid = vec![0f64; n * n];
        for a in 0..n {
            let r2 = prototypes[rows[a].0].radius().as_f64().powi(2);
            for b in 0..n {
                let dot: f64 = row(&rows[a]).iter().zip(row(&rows[b])).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                let v = dot - if a == b { r2 } else { 0.0 };
                resid[a * n + b] = v;
                loss += v * v;
            }
        }
        // ∂/∂P = 4 (PPᵀ − r²I) P
        for a in 0..n {
            let (i, k) = rows[a];
            let ch = prototypes[i].channels;
            for b in 0..n {
                let m = 4.0 * resid[a * n + b];
                if m == 0.0 {
                    continue;
                }
                for (j, &v) in row(&rows[b]).iter().enumerate() {
                    grads[i][k * ch + j] += m * v.as_f64();
                }
            }
        }
    }
    (loss, grads)
}

/// `CE(scores) + λ Σ_{p, c ≠ class(p)} |w_{p,c}|`, with the L1 subgradient 0 at 0.
pub fn last_layer_loss<T: Real>(
    scores: &[Vec<f64>],
    last: &LastLayer<T>,
    labels: &[usize],
    proto_classes: &[usize],
    lambda_l1: f64,
) -> Result<(f64, Vec<f64>)> {
    let (ce, _, mut grad_w) = cross_entropy(scores, last, labels)?;
    let mut l1 = 0f64;
    for (p, &pc) in proto_classes.iter().enumerate() {
        for c in (0..last.num_classes).filter(|&c| c != pc) {
            let w = last.get(p, c).as_f64();
            l1 += w.abs();
            let sign = if w > 0.0 {
                1.0
            } else if w < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad_w[p * last.num_classes + c] += lambda_l1 * sign;
        }
    }
    Ok((ce + lambda_l1 * l1, grad_w))
}

/// Per-image part of the stage-1 objective:
/// `CE⁽⁻⁾ + λ_sep·sep + λ_clst·clst` for a single example.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageObjective<T = f32> {
    pub ce: f64,
    pub sep: f64,
    pub clst: f64,
    pub scores: Vec<f64>,
    pub grads: Vec<CenterGrad<T>>,
}

impl<T> ImageObjective<T> {
    pub fn value(&self, w: &LossWeights) -> f64 {
        self.ce + w.lambda_sep * self.sep + w.lambda_clst * self.clst
    }
}

pub fn image_objective<T: Real>(
    maps: &[SimilarityMap<T>],
    label: usize,
    proto_classes: &[usize],
    last: &LastLayer<T>,
    weights: &LossWeights,
) -> Result<ImageObjective<T>> {
    let pooled: Vec<(T, (usize, usize))> = maps
        .iter()
        .map(|m| max_pool_similarity(m).ok_or_else(|| Error::InvalidInput("similarity map has no eligible center".into())))
        .collect::<Result<_>>()?;
    let scores: Vec<T> = pooled.iter().map(|p| p.0).collect();
    let labels = [label];
    let (clst, gc) = cluster_loss(std::slice::from_ref(&scores), &labels, proto_classes)?;
    let (sep, gs) = separation_loss(std::slice::from_ref(&scores), &labels, proto_classes)?;
    let picks = subtractive_margin_scores(maps, label, proto_classes, weights.margin_phi)?;
    let adjusted = vec![picks.iter().map(|p| p.value).collect::<Vec<_>>()];
    let (ce, gce, _) = margin_cross_entropy(&adjusted, last, &labels)?;

    let mut grads = Vec::new();
    for p in 0..maps.len() {
        let w = weights.lambda_clst * gc[0][p] + weights.lambda_sep * gs[0][p];
        if w != 0.0 {
            grads.push(CenterGrad {
                proto: p,
                center: pooled[p].1,
                weight: T::of(w),
            });
        }
        let w = gce[0][p] * picks[p].derivative;
        if w != 0.0 {
            grads.push(CenterGrad {
                proto: p,
                center: picks[p].center,
                weight: T::of(w),
            });
        }
    }
    Ok(ImageObjective {
        ce,
        sep,
        clst,
        scores: scores.iter().map(|s| s.as_f64()).collect(),
        grads,
    })
}

/// Batch stage-1 objective `CE⁽⁻⁾ + λ_sep·sep + λ_clst·clst + λ_ortho·ortho`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Loss<T = f32> {
    pub total: f64,
    pub ce: f64,
    pub sep: f64,
    pub clst: f64,
    pub ortho: f64,
    /// Per-image center gradients, already divided by the batch size.
    pub center_grads: Vec<Vec<CenterGrad<T>>>,
    /// Orthogonality gradient per prototype, already multiplied by `λ_ortho`.
    pub part_grads: Vec<Vec<f64>>,
}

pub fn stage1_loss<T: Real>(
    maps: &[Vec<SimilarityMap<T>>],
    labels: &[usize],
    prototypes: &[DeformablePrototype<T>],
    last: &LastLayer<T>,
    weights: &LossWeights,
) -> Result<Stage1Loss<T>> {
    if maps.is_empty() {
        return Err(Error::InvalidInput("stage-1 loss over an empty batch".into()));
    }
    check_labels(labels, maps.len(), last.num_classes)?;
    let proto_classes: Vec<usize> = prototypes.iter().map(|p| p.class_id).collect();
    let n = maps.len() as f64;
    let (mut ce, mut sep, mut clst) = (0f64, 0f64, 0f64);
    let mut center_grads = Vec::with_capacity(maps.len());
    for (m, &label) in maps.iter().zip(labels) {
        let obj = image_objective(m, label, &proto_classes, last, weights)?;
        ce += obj.ce / n;
        sep += obj.sep / n;
        clst += obj.clst / n;
        center_grads.push(
            obj.grads
                .into_iter()
                .map(|g| CenterGrad {
                    weight: T::of(g.weight.as_f64() / n),
                    ..g
                })
                .collect(),
        );
    }
    let (ortho, mut part_grads) = orthogonality_loss(prototypes);
    part_grads.iter_mut().flatten().for_each(|g| *g *= weights.lambda_ortho);
    Ok(Stage1Loss {
        total: ce + weights.lambda_sep * sep + weights.lambda_clst * clst + weights.lambda_ortho * ortho,
        ce,
        sep,
        clst,
        ortho,
        center_grads,
        part_grads,
    })
}
