//! Finite-difference verification of every hand-derived gradient on a tiny
//! random model, in f64.
//!
//! The instance is chosen so central differences never straddle a kink:
//! inputs and backbone/hidden-branch weights are positive (every ReLU stays
//! active), the ε channel is large, and the instance is resampled until every
//! max (over centers, over prototypes, after the margin) wins by a clear gap
//! and every sampling position sits away from integer coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{sample_position, BranchCache, PartGrid};
use crate::error::{Error, Result};
use crate::losses::{image_objective, last_layer_loss, margin_adjust, orthogonality_loss, LossWeights};
use crate::model::{init_model, LayerSpec, Model, ModelConfig, ModelGrads};
use crate::tensor::{finite_difference_gradient, max_rel_error, Tensor4, GRAD_ABS_FLOOR, GRAD_REL_TOL, GRAD_STEP};

/// Group names in report order.
pub const GROUPS: [&str; 8] = [
    "backbone",
    "normalization",
    "interpolation/features",
    "interpolation/delta1",
    "interpolation/delta2",
    "parts",
    "offset-branch",
    "last-layer",
];

const GAP: f64 = 1e-2;
const FRAC_MARGIN: f64 = 0.02;
const MAX_TRIES: u64 = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub entries: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    /// Number of instances rejected before a kink-free one was found.
    pub resamples: u64,
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>8} {:>12}  status\n", "group", "entries", "max_rel_err");
        for g in &self.groups {
            out.push_str(&format!(
                "{:<24} {:>8} {:>12.3e}  {}\n",
                g.name,
                g.entries,
                g.max_rel_error,
                if g.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Tiny model and batch used by the check.
#[derive(Clone, Debug)]
pub struct Instance {
    pub model: Model<f64>,
    pub images: Vec<Tensor4<f64>>,
    pub labels: Vec<usize>,
    pub weights: LossWeights,
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        in_channels: 2,
        image_size: 6,
        backbone: LayerSpec::parse_list("3:3:1,3:3:1").expect("valid spec"),
        num_classes: 2,
        protos_per_class: 2,
        grid: PartGrid::new(2, 2, 2).expect("valid grid"),
        epsilon: 0.5,
        offset_hidden: 3,
        deformable: true,
        interior_only: false,
    }
}

impl Instance {
    fn sample(rng: &mut ChaCha8Rng) -> Result<Self> {
        let config = tiny_config();
        let mut model: Model<f64> = init_model(&config, rng.random())?;
        for layer in &mut model.backbone.layers {
            let fan_in = (layer.in_channels() * 9) as f64;
            layer.weight.data_mut().iter_mut().for_each(|w| *w = rng.random_range(0.1..1.0) / fan_in);
            layer.bias.iter_mut().for_each(|b| *b = rng.random_range(0.05..0.2));
        }
        let br = model.layer.branch.as_mut().expect("deformable");
        br.hidden.weight.data_mut().iter_mut().for_each(|w| *w = rng.random_range(0.05..0.5));
        br.hidden.bias.iter_mut().for_each(|b| *b = rng.random_range(0.05..0.2));
        br.output.weight.data_mut().iter_mut().for_each(|w| *w = rng.random_range(-0.3..0.3));
        br.output.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        model.last.weights.iter_mut().for_each(|w| *w += rng.random_range(-0.2..0.2));
        let images = (0..3)
            .map(|_| {
                let data = (0..2 * 36).map(|_| rng.random_range(0.1..1.0)).collect();
                Tensor4::from_vec([1, 2, 6, 6], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            images,
            labels: vec![0, 1, 0],
            weights: LossWeights::default(),
        })
    }

    /// Mean per-image objective plus the orthogonality term.
    pub fn loss(&self, model: &Model<f64>) -> f64 {
        let classes = model.proto_classes();
        let n = self.images.len() as f64;
        let mut total = 0.0;
        for (x, &y) in self.images.iter().zip(&self.labels) {
            let f = model.forward(x).expect("forward");
            let obj = image_objective(&f.layer.maps, y, &classes, &model.last, &self.weights).expect("objective");
            total += obj.value(&self.weights) / n;
        }
        total + self.weights.lambda_ortho * orthogonality_loss(&model.layer.prototypes).0
    }

    fn last_layer_loss(&self, model: &Model<f64>) -> f64 {
        let scores = self.scores(model);
        last_layer_loss(&scores, &model.last, &self.labels, &model.proto_classes(), self.weights.lambda_l1_last)
            .expect("last-layer loss")
            .0
    }

    fn scores(&self, model: &Model<f64>) -> Vec<Vec<f64>> {
        self.images
            .iter()
            .map(|x| model.forward(x).expect("forward").layer.scores)
            .collect()
    }

    /// True when no finite-difference probe can cross a non-smooth point.
    fn is_generic(&self) -> bool {
        let m = &self.model;
        let classes = m.proto_classes();
        for (x, &y) in self.images.iter().zip(&self.labels) {
            let Ok(f) = m.forward(x) else { return false };
            let pre = f.backbone.pre.iter().chain(f.layer.branch.iter().map(|b| &b.hidden_pre));
            if pre.flat_map(|t| t.data()).any(|&v| v.abs() < GAP) {
                return false;
            }
            for (p, map) in f.layer.maps.iter().enumerate() {
                let mut v = map.values.clone();
                v.sort_by(|a, b| b.total_cmp(a));
                if v[0] - v[1] < GAP {
                    return false;
                }
                if classes[p] != y && (v[0].clamp(-1.0, 1.0).acos() - self.weights.margin_phi).abs() < GAP {
                    return false;
                }
                let (a, b) = f.layer.centers[p];
                for k in 0..m.layer.grid.rho() {
                    let (sx, sy) = sample_position(&m.layer.grid, f.layer.offsets().map(|o| (o, 0)), k, a, b);
                    for t in [sx, sy] {
                        let frac = t - t.floor();
                        if !(FRAC_MARGIN..=1.0 - FRAC_MARGIN).contains(&frac) {
                            return false;
                        }
                    }
                }
            }
            for same in [true, false] {
                let mut s: Vec<f64> = f
                    .scores()
                    .iter()
                    .zip(&classes)
                    .filter(|(_, &c)| (c == y) == same)
                    .map(|(s, _)| *s)
                    .collect();
                s.sort_by(|a, b| b.total_cmp(a));
                if s.len() > 1 && s[0] - s[1] < GAP {
                    return false;
                }
            }
        }
        // margin derivative must stay smooth: no adjusted value clamped to 1
        self.scores(m).iter().zip(&self.labels).all(|(row, &y)| {
            row.iter()
                .zip(&classes)
                .all(|(&s, &c)| c == y || margin_adjust(s, self.weights.margin_phi).1 > 0.0)
        })
    }

    /// Analytic gradient of [`Self::loss`] with respect to every parameter.
    pub fn analytic(&self) -> Result<ModelGrads<f64>> {
        let m = &self.model;
        let classes = m.proto_classes();
        let n = self.images.len() as f64;
        let mut total = ModelGrads::zeros_like(m);
        for (x, &y) in self.images.iter().zip(&self.labels) {
            let f = m.forward(x)?;
            let obj = image_objective(&f.layer.maps, y, &classes, &m.last, &self.weights)?;
            let mut g = m.backward(&f, &obj.grads)?;
            g.scale(1.0 / n);
            total.add_assign(&g);
        }
        let (_, ortho) = orthogonality_loss(&m.layer.prototypes);
        for (dst, src) in total.parts.iter_mut().zip(ortho) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += self.weights.lambda_ortho * s);
        }
        Ok(total)
    }
}

/// Draws instances from `seed` until one is kink-free.
pub fn generic_instance(seed: u64) -> Result<(Instance, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for tries in 0..MAX_TRIES {
        let inst = Instance::sample(&mut rng)?;
        if inst.is_generic() {
            return Ok((inst, tries));
        }
    }
    Err(Error::InvalidInput(format!("no kink-free instance in {MAX_TRIES} draws from seed {seed}")))
}

fn flat(slices: &[&[f64]]) -> Vec<f64> {
    slices.iter().flat_map(|s| s.iter().copied()).collect()
}

fn as_tensor(v: Vec<f64>) -> Tensor4<f64> {
    let n = v.len();
    Tensor4::from_vec([1, 1, 1, n], v).expect("non-empty")
}

/// Finite differences over the concatenated parameter slices of `get`,
/// written back through `set`.
fn numeric_params(
    model: &Model<f64>,
    get: impl Fn(&Model<f64>) -> Vec<f64>,
    set: impl Fn(&mut Model<f64>, &[f64]),
    loss: impl Fn(&Model<f64>) -> f64,
) -> Vec<f64> {
    let x = as_tensor(get(model));
    finite_difference_gradient(
        |t| {
            let mut m = model.clone();
            set(&mut m, t.data());
            loss(&m)
        },
        &x,
        GRAD_STEP,
    )
    .into_vec()
}

fn write_group(model: &mut Model<f64>, group: crate::model::Group, values: &[f64]) {
    let mut off = 0;
    for s in model.params_mut(group) {
        let n = s.len();
        s.copy_from_slice(&values[off..off + n]);
        off += n;
    }
}

fn result(name: &'static str, analytic: &[f64], numeric: &[f64]) -> GroupResult {
    let err = max_rel_error(analytic, numeric, GRAD_ABS_FLOOR);
    GroupResult {
        name,
        max_rel_error: err,
        entries: analytic.len(),
        passed: err <= GRAD_REL_TOL && analytic.len() == numeric.len(),
    }
}

/// Per-image objective of image `i` as a function of its normalized
/// features with the offset field held fixed.
fn image_loss_fixed_offsets(inst: &Instance, i: usize, zhat: &crate::sphere::UnitFeatureMap<f64>, branch: Option<BranchCache<f64>>) -> f64 {
    let m = &inst.model;
    let cache = m.layer.forward_with_offsets(zhat, branch).expect("layer forward");
    image_objective(&cache.maps, inst.labels[i], &m.proto_classes(), &m.last, &inst.weights)
        .expect("objective")
        .value(&inst.weights)
}

pub fn run(seed: u64) -> Result<GradCheckReport> {
    use crate::model::Group;
    let (inst, resamples) = generic_instance(seed)?;
    let m = &inst.model;
    let analytic = inst.analytic()?;
    let loss = |model: &Model<f64>| inst.loss(model);
    let mut groups = Vec::new();

    for (name, group) in [("backbone", Group::Backbone), ("parts", Group::Prototypes), ("offset-branch", Group::Offsets)] {
        let num = numeric_params(m, |mm| flat(&mm.params(group)), |mm, v| write_group(mm, group, v), loss);
        groups.push(result(name, &flat(&analytic.group(group)), &num));
    }

    // Per-image paths, checked on the first image with the objective of that
    // image alone.
    let classes = m.proto_classes();
    let x = &inst.images[0];
    let f = m.forward(x)?;
    let obj = image_objective(&f.layer.maps, inst.labels[0], &classes, &m.last, &inst.weights)?;
    let lg = m.layer.backward(&f.zhat, &f.layer, &obj.grads)?;

    // raw backbone features through ε, normalization, sampling and offsets
    let g_aug = crate::sphere::normalize_backward(&f.z_aug, f.zhat.radius, &lg.zhat)?;
    let g_z = crate::sphere::strip_epsilon(&g_aug);
    let num = finite_difference_gradient(
        |z| {
            let (_, zhat) = m.normalize(z).expect("normalize");
            image_loss_fixed_offsets(&inst, 0, &zhat, m.layer.branch.as_ref().map(|b| b.forward(&zhat.tensor).expect("branch")))
        },
        &f.z,
        GRAD_STEP,
    );
    groups.push(result("normalization", g_z.data(), num.data()));

    // sampled features with offsets frozen: remove the branch path
    let mut direct = lg.zhat.clone();
    if let Some(bg) = &lg.branch {
        direct.data_mut().iter_mut().zip(bg.hidden.input.data()).for_each(|(d, b)| *d -= b);
    }
    let num = finite_difference_gradient(
        |t| {
            let zhat = crate::sphere::UnitFeatureMap {
                tensor: t.clone(),
                ..f.zhat.clone()
            };
            image_loss_fixed_offsets(&inst, 0, &zhat, f.layer.branch.clone())
        },
        &f.zhat.tensor,
        GRAD_STEP,
    );
    groups.push(result("interpolation/features", direct.data(), num.data()));

    // offsets, split by coordinate
    let bc = f.layer.branch.clone().expect("deformable instance");
    let num = finite_difference_gradient(
        |t| {
            let mut c = bc.clone();
            c.offsets.tensor = t.clone();
            image_loss_fixed_offsets(&inst, 0, &f.zhat, Some(c))
        },
        &bc.offsets.tensor,
        GRAD_STEP,
    );
    let ga = lg.offsets.as_ref().expect("offset gradient");
    let plane = ga.height() * ga.width();
    let split = |t: &[f64], parity: usize| -> Vec<f64> {
        t.chunks(plane)
            .enumerate()
            .filter(|(c, _)| c % 2 == parity)
            .flat_map(|(_, ch)| ch.iter().copied())
            .collect()
    };
    groups.push(result("interpolation/delta1", &split(ga.data(), 0), &split(num.data(), 0)));
    groups.push(result("interpolation/delta2", &split(ga.data(), 1), &split(num.data(), 1)));

    // last layer under its own objective
    let scores = inst.scores(m);
    let (_, g_last) = last_layer_loss(&scores, &m.last, &inst.labels, &classes, inst.weights.lambda_l1_last)?;
    let num = numeric_params(m, |mm| mm.last.weights.clone(), |mm, v| mm.last.weights.copy_from_slice(v), |mm| inst.last_layer_loss(mm));
    groups.push(result("last-layer", &g_last, &num));

    groups.sort_by_key(|g| GROUPS.iter().position(|n| *n == g.name));
    Ok(GradCheckReport { seed, resamples, groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_seed_passes_every_group() {
        let r = run(0).unwrap();
        assert_eq!(r.groups.iter().map(|g| g.name).collect::<Vec<_>>(), GROUPS.to_vec());
        assert!(r.passed(), "{}", r.table());
        assert!(r.groups.iter().all(|g| g.entries > 0));
    }

    #[test]
    fn report_is_deterministic() {
        assert_eq!(run(3).unwrap(), run(3).unwrap());
    }
}
