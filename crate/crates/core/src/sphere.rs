//! Keeping features on the radius-`r` hypersphere.
//!
//! Raw backbone features get a constant ε channel appended (so no column can
//! have zero norm), every spatial column is rescaled to length `r = 1/√ρ`,
//! and fractional positions are sampled with the square/blend/sqrt
//! interpolation, which keeps interpolated columns at length `r` whenever all
//! four corners lie on the grid.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor4};

/// Default ε appended to every feature column.
pub const DEFAULT_EPSILON: f32 = 1e-5;

/// Column radius for a prototype with `rho` parts.
pub fn radius_for<T: Real>(rho: usize) -> T {
    T::of(1.0 / (rho as f64).sqrt())
}

/// ε-augmented features whose every spatial column has length `radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitFeatureMap<T = f32> {
    pub tensor: Tensor4<T>,
    pub radius: T,
    pub rho: usize,
}

impl<T: Real> UnitFeatureMap<T> {
    pub fn grid(&self, image: usize) -> FeatureGrid<'_, T> {
        FeatureGrid::new(
            self.tensor.image_slice(image),
            self.tensor.channels(),
            self.tensor.height(),
            self.tensor.width(),
        )
    }

    pub fn batch(&self) -> usize {
        self.tensor.batch()
    }

    pub fn channels(&self) -> usize {
        self.tensor.channels()
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }

    pub fn width(&self) -> usize {
        self.tensor.width()
    }
}

/// Appends channel `d` holding `epsilon` everywhere.
pub fn augment_epsilon<T: Real>(z: &Tensor4<T>, epsilon: T) -> Tensor4<T> {
    let [n, c, h, w] = z.dims();
    let plane = h * w;
    let mut out = Tensor4::zeros([n, c + 1, h, w]);
    for b in 0..n {
        let src = z.image_slice(b);
        let dst = out.image_slice_mut(b);
        dst[..c * plane].copy_from_slice(src);
        dst[c * plane..].iter_mut().for_each(|v| *v = epsilon);
    }
    out
}

/// Drops the trailing ε channel from a gradient with respect to augmented features.
pub fn strip_epsilon<T: Real>(grad_aug: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = grad_aug.dims();
    let plane = h * w;
    let mut out = Tensor4::zeros([n, c - 1, h, w]);
    for b in 0..n {
        out.image_slice_mut(b)
            .copy_from_slice(&grad_aug.image_slice(b)[..(c - 1) * plane]);
    }
    out
}

fn column_norms<T: Real>(t: &Tensor4<T>) -> Vec<f64> {
    let [n, c, h, w] = t.dims();
    let plane = h * w;
    let mut norms = vec![0f64; n * plane];
    for b in 0..n {
        let img = t.image_slice(b);
        for k in 0..c {
            for p in 0..plane {
                let v = img[k * plane + p].as_f64();
                norms[b * plane + p] += v * v;
            }
        }
    }
    norms.iter_mut().for_each(|v| *v = v.sqrt());
    norms
}

/// `ẑ = r z / ‖z‖` per spatial column, with `r = 1/√rho`.
pub fn normalize_locations<T: Real>(z_aug: &Tensor4<T>, rho: usize) -> Result<UnitFeatureMap<T>> {
    let radius = radius_for::<T>(rho);
    let norms = column_norms(z_aug);
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::InvalidInput(format!(
            "feature column {i} has zero norm; append the epsilon channel first"
        )));
    }
    let [n, c, h, w] = z_aug.dims();
    let plane = h * w;
    let r = radius.as_f64();
    let mut out = z_aug.clone();
    for b in 0..n {
        let img = out.image_slice_mut(b);
        for k in 0..c {
            for p in 0..plane {
                let v = &mut img[k * plane + p];
                *v = T::of(r * v.as_f64() / norms[b * plane + p]);
            }
        }
    }
    Ok(UnitFeatureMap {
        tensor: out,
        radius,
        rho,
    })
}

/// Per column, applies `(r/‖x‖)(I − x xᵀ/‖x‖²)` to the upstream gradient.
pub fn normalize_backward<T: Real>(
    z_aug: &Tensor4<T>,
    radius: T,
    upstream: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if !z_aug.same_dims(upstream) {
        return shape_err(format!(
            "normalize_backward: features {:?} vs upstream {:?}",
            z_aug.dims(),
            upstream.dims()
        ));
    }
    let norms = column_norms(z_aug);
    if norms.contains(&0.0) {
        return Err(Error::InvalidInput("zero-norm feature column".into()));
    }
    let [n, c, h, w] = z_aug.dims();
    let plane = h * w;
    let mut grad = Tensor4::zeros(z_aug.dims());
    for b in 0..n {
        let x = z_aug.image_slice(b);
        let u = upstream.image_slice(b);
        let g = grad.image_slice_mut(b);
        for p in 0..plane {
            let norm = norms[b * plane + p];
            let dot: f64 = (0..c)
                .map(|k| x[k * plane + p].as_f64() * u[k * plane + p].as_f64())
                .sum();
            let scale = radius.as_f64() / norm;
            let radial = dot / (norm * norm);
            for k in 0..c {
                let i = k * plane + p;
                g[i] = T::of(scale * (u[i].as_f64() - x[i].as_f64() * radial));
            }
        }
    }
    Ok(grad)
}

/// Floor corner and fractional parts of a sampling position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpCoeffs<T = f32> {
    pub row0: isize,
    pub col0: isize,
    pub alpha: T,
    pub beta: T,
}

impl<T: Real> InterpCoeffs<T> {
    pub fn at(x: T, y: T) -> Self {
        let fx = x.floor();
        let fy = y.floor();
        Self {
            row0: fx.as_f64() as isize,
            col0: fy.as_f64() as isize,
            alpha: x - fx,
            beta: y - fy,
        }
    }

    /// The four corners `(⌊x⌋,⌊y⌋), (⌊x⌋,⌊y⌋+1), (⌊x⌋+1,⌊y⌋), (⌊x⌋+1,⌊y⌋+1)`
    /// with their blend weights.
    pub fn corners(&self) -> [(isize, isize, T); 4] {
        let (a, b) = (self.alpha, self.beta);
        let one = T::one();
        [
            (self.row0, self.col0, (one - a) * (one - b)),
            (self.row0, self.col0 + 1, (one - a) * b),
            (self.row0 + 1, self.col0, a * (one - b)),
            (self.row0 + 1, self.col0 + 1, a * b),
        ]
    }
}

/// Slopes of the tent weights `max(0, 1 − |t − i|)` for the floor and
/// floor+1 neighbours, using the right-hand case at integer `t`
/// (`−1` for `0 ≤ t − i < 1`, `+1` for `−1 < t − i < 0`, else 0).
#[inline]
fn tent_slopes(frac: f64) -> (f64, f64) {
    (-1.0, if frac > 0.0 { 1.0 } else { 0.0 })
}

/// Borrowed `channels × height × width` feature grid of one image.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid<'a, T = f32> {
    data: &'a [T],
    channels: usize,
    height: usize,
    width: usize,
}

impl<'a, T: Real> FeatureGrid<'a, T> {
    pub fn new(data: &'a [T], channels: usize, height: usize, width: usize) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            data,
            channels,
            height,
            width,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    fn plane_index(&self, row: isize, col: isize) -> Option<usize> {
        (row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width)
            .then(|| row as usize * self.width + col as usize)
    }

    pub fn column(&self, row: usize, col: usize) -> Vec<T> {
        let plane = self.height * self.width;
        let p = row * self.width + col;
        (0..self.channels).map(|k| self.data[k * plane + p]).collect()
    }

    /// True when every corner with non-zero weight lies on the grid, i.e.
    /// the interpolated column is guaranteed to have the grid's norm.
    pub fn fully_supported(&self, x: T, y: T) -> bool {
        InterpCoeffs::at(x, y)
            .corners()
            .iter()
            .all(|&(i, j, w)| w == T::zero() || self.plane_index(i, j).is_some())
    }

    /// `sqrt(Σ w_corner ẑ_corner²)` elementwise; corners off the grid contribute zero.
    pub fn interpolate_into(&self, x: T, y: T, out: &mut [T]) {
        assert_eq!(out.len(), self.channels);
        let mut acc = vec![0f64; self.channels];
        let plane = self.height * self.width;
        for (i, j, w) in InterpCoeffs::at(x, y).corners() {
            if w == T::zero() {
                continue;
            }
            let Some(p) = self.plane_index(i, j) else { continue };
            let w = w.as_f64();
            for (k, a) in acc.iter_mut().enumerate() {
                let z = self.data[k * plane + p].as_f64();
                *a += w * z * z;
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = T::of(a.sqrt());
        }
    }

    pub fn interpolate(&self, x: T, y: T) -> Vec<T> {
        let mut out = vec![T::zero(); self.channels];
        self.interpolate_into(x, y, &mut out);
        out
    }

    /// Backward of [`Self::interpolate_into`]. Accumulates the corner-feature
    /// gradient into `grad` (same layout as the grid) and returns the
    /// gradients with respect to the row and column coordinates.
    ///
    /// Components whose interpolated value is exactly zero pass no gradient.
    pub fn interpolate_backward_into(&self, x: T, y: T, upstream: &[T], grad: &mut [T]) -> (T, T) {
        assert_eq!(upstream.len(), self.channels);
        assert_eq!(grad.len(), self.data.len());
        let plane = self.height * self.width;
        let coeffs = InterpCoeffs::at(x, y);
        let corners = coeffs.corners();

        let interp = self.interpolate(x, y);
        // dL/dζ_k = u_k / (2 √ζ_k)
        let dzeta: Vec<f64> = interp
            .iter()
            .zip(upstream)
            .map(|(&s, &u)| {
                let s = s.as_f64();
                if s > 0.0 {
                    u.as_f64() / (2.0 * s)
                } else {
                    0.0
                }
            })
            .collect();

        let (alpha, beta) = (coeffs.alpha.as_f64(), coeffs.beta.as_f64());
        let (sx0, sx1) = tent_slopes(alpha);
        let (sy0, sy1) = tent_slopes(beta);
        let (wx0, wx1) = (1.0 - alpha, alpha);
        let (wy0, wy1) = (1.0 - beta, beta);
        // Per-corner ∂weight/∂x and ∂weight/∂y, same order as `corners()`.
        let dwx = [sx0 * wy0, sx0 * wy1, sx1 * wy0, sx1 * wy1];
        let dwy = [wx0 * sy0, wx0 * sy1, wx1 * sy0, wx1 * sy1];

        let mut gx = 0f64;
        let mut gy = 0f64;
        for (c, &(i, j, w)) in corners.iter().enumerate() {
            let Some(p) = self.plane_index(i, j) else { continue };
            let w = w.as_f64();
            for (k, &dz) in dzeta.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                let z = self.data[k * plane + p].as_f64();
                grad[k * plane + p] += T::of(dz * 2.0 * z * w);
                let sq = z * z * dz;
                gx += sq * dwx[c];
                gy += sq * dwy[c];
            }
        }
        (T::of(gx), T::of(gy))
    }
}

pub fn norm_preserving_interpolate<T: Real>(zhat: &UnitFeatureMap<T>, image: usize, x: T, y: T) -> Vec<T> {
    zhat.grid(image).interpolate(x, y)
}

/// Gradients of `upstream · interpolate(x, y)`.
#[derive(Clone, Debug)]
pub struct InterpGrad<T = f32> {
    /// Same shape as one image of the feature map (`1 × d̃ × η₁ × η₂`).
    pub features: Tensor4<T>,
    pub x: T,
    pub y: T,
}

pub fn interpolate_backward<T: Real>(
    zhat: &UnitFeatureMap<T>,
    image: usize,
    x: T,
    y: T,
    upstream: &[T],
) -> InterpGrad<T> {
    let [_, c, h, w] = zhat.tensor.dims();
    let mut features = Tensor4::zeros([1, c, h, w]);
    let (gx, gy) = zhat
        .grid(image)
        .interpolate_backward_into(x, y, upstream, features.data_mut());
    InterpGrad { features, x: gx, y: gy }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{
        finite_difference_gradient, max_rel_error, GRAD_ABS_FLOOR, GRAD_REL_TOL, GRAD_STEP,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(values: &[f32]) -> Tensor4 {
        Tensor4::from_vec([1, values.len(), 1, 1], values.to_vec()).unwrap()
    }

    /// Non-negative features (post-ReLU) plus ε, normalized.
    fn random_unit_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize, rho: usize) -> UnitFeatureMap {
        let raw: Vec<f32> = (0..d * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let z = Tensor4::from_vec([1, d, h, w], raw).unwrap();
        normalize_locations(&augment_epsilon(&z, DEFAULT_EPSILON), rho).unwrap()
    }

    /// Components bounded away from zero so central differences never
    /// straddle the kink of `sqrt(z²)`.
    fn smooth_unit_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize, rho: usize) -> UnitFeatureMap<f64> {
        let raw: Vec<f64> = (0..d * h * w).map(|_| rng.random_range(0.2..1.0)).collect();
        let z = Tensor4::from_vec([1, d, h, w], raw).unwrap();
        normalize_locations(&augment_epsilon(&z, 0.5), rho).unwrap()
    }

    fn norm(v: &[f32]) -> f32 {
        v.iter().map(|x| x * x).sum::<f32>().sqrt()
    }

    #[test]
    fn epsilon_channel_examples() {
        let z = Tensor4::<f32>::zeros([1, 2, 1, 1]);
        let a = augment_epsilon(&z, 1e-5);
        assert_eq!(a.data(), &[0.0, 0.0, 1e-5]);
        assert_eq!(norm(a.data()), 1e-5);

        let z = Tensor4::from_vec([1, 2, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let a = augment_epsilon(&z, 0.1);
        assert_eq!(&a.data()[..4], z.data());

        let a = augment_epsilon(&Tensor4::<f32>::zeros([2, 1, 3, 3]), 0.5);
        assert_eq!(a.channels(), 2);
        for b in 0..2 {
            assert!(a.image_slice(b)[9..].iter().all(|&v| v == 0.5));
            assert!(a.image_slice(b)[..9].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn normalize_examples() {
        // ‖(3, 4, 1e-5)‖ = 5.00000000001, so r/‖·‖ = 0.1 to 11 digits.
        let u = normalize_locations(&col(&[3.0, 4.0, 1e-5]), 4).unwrap();
        assert_eq!(u.radius, 0.5);
        let d = u.tensor.data();
        assert!((d[0] - 0.3).abs() < 1e-7);
        assert!((d[1] - 0.4).abs() < 1e-7);
        assert!((d[2] - 1e-6).abs() < 1e-12);
        assert!((norm(d) - 0.5).abs() < 1e-7);

        let u = normalize_locations(&col(&[0.0, 0.0, 1e-5]), 9).unwrap();
        assert_eq!(u.tensor.data(), &[0.0, 0.0, radius_for::<f32>(9)]);

        let already = col(&[0.3, 0.4, 0.0]);
        let u = normalize_locations(&already, 4).unwrap();
        for (a, b) in u.tensor.data().iter().zip(already.data()) {
            assert!((a - b).abs() < 1e-7);
        }

        assert!(normalize_locations(&col(&[0.0, 0.0]), 4).is_err());
    }

    #[test]
    fn normalize_backward_examples() {
        let x = col(&[0.3, 0.4, 0.0]);
        let g = normalize_backward(&x, 0.5, &col(&[0.6, 0.8, 0.0])).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-6));

        let up = col(&[-0.4, 0.3, 0.7]);
        let g = normalize_backward(&x, 0.5, &up).unwrap();
        for (a, b) in g.data().iter().zip(up.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor4::from_vec([1, 4, 3, 3], raw).unwrap();
        let up: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = Tensor4::from_vec([1, 4, 3, 3], up).unwrap();
        let analytic = normalize_backward(&x, radius_for(4), &up).unwrap();
        let numeric = finite_difference_gradient(
            |t| {
                let u = normalize_locations(t, 4).unwrap();
                u.tensor.data().iter().zip(up.data()).map(|(&a, &b)| a * b).sum()
            },
            &x,
            GRAD_STEP,
        );
        let err = max_rel_error(analytic.data(), numeric.data(), GRAD_ABS_FLOOR);
        assert!(err <= GRAD_REL_TOL, "{err}");
    }

    #[test]
    fn integer_position_reproduces_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_unit_map(&mut rng, 5, 4, 4, 4);
        let g = u.grid(0);
        for a in 0..4 {
            for b in 0..4 {
                let v = g.interpolate(a as f32, b as f32);
                for (x, y) in v.iter().zip(g.column(a, b)) {
                    assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-30));
                }
            }
        }
    }

    /// Plain bilinear blending, kept only to reproduce the counterexample.
    fn bilinear(corners: [&[f32]; 4], alpha: f32, beta: f32) -> Vec<f32> {
        let w = [
            (1.0 - alpha) * (1.0 - beta),
            (1.0 - alpha) * beta,
            alpha * (1.0 - beta),
            alpha * beta,
        ];
        (0..corners[0].len())
            .map(|k| (0..4).map(|c| w[c] * corners[c][k]).sum())
            .collect()
    }

    #[test]
    fn orthogonal_corner_counterexample() {
        let r = 0.5f32;
        // 2×2 grid, 4 channels, corner (i,j) holds r·e_{2i+j}.
        let mut t = Tensor4::<f32>::zeros([1, 4, 2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                t.set(0, 2 * i + j, i, j, r);
            }
        }
        let g = FeatureGrid::new(t.data(), 4, 2, 2);
        let v = g.interpolate(0.5, 0.5);
        for &x in &v {
            assert!((x - r / 2.0).abs() <= 1e-6);
        }
        assert!((norm(&v) - r).abs() <= 1e-6);

        let cols: Vec<Vec<f32>> = [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|&(i, j)| g.column(i, j)).collect();
        let b = bilinear([&cols[0], &cols[1], &cols[2], &cols[3]], 0.5, 0.5);
        for &x in &b {
            assert!((x - r / 4.0).abs() <= 1e-6);
        }
        assert!((norm(&b) - r / 2.0).abs() <= 1e-6);
    }

    #[test]
    fn out_of_grid_corners_contribute_zero() {
        let t = Tensor4::full([1, 1, 2, 2], 1.0f32);
        let g = FeatureGrid::new(t.data(), 1, 2, 2);
        let v = g.interpolate(-0.75, 0.0);
        assert!((v[0] - 0.25f32.sqrt()).abs() < 1e-6);
        assert!(!g.fully_supported(-0.75, 0.0));
        assert!(g.fully_supported(0.5, 0.25));
        assert!(g.fully_supported(1.0, 1.0));
        assert_eq!(g.interpolate(5.0, 5.0), vec![0.0]);
    }

    #[test]
    fn backward_at_integer_flows_to_single_corner() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_unit_map(&mut rng, 3, 3, 3, 4);
        let up = [0.3, -1.2, 0.7, 2.0];
        let g = interpolate_backward(&u, 0, 1.0, 2.0, &up);
        for k in 0..4 {
            for i in 0..3 {
                for j in 0..3 {
                    let v = g.features.get(0, k, i, j);
                    if (i, j) == (1, 2) {
                        assert!((v - up[k]).abs() < 1e-5, "{v} vs {}", up[k]);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let u = smooth_unit_map(&mut rng, 4, 4, 4, 4);
            let up: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            // keep fractional parts away from the kinks at integers
            let x = rng.random_range(0..3) as f64 + rng.random_range(0.05..0.95);
            let y = rng.random_range(0..3) as f64 + rng.random_range(0.05..0.95);
            let g = interpolate_backward(&u, 0, x, y, &up);
            let dot = |v: &[f64]| v.iter().zip(&up).map(|(&a, &b)| a * b).sum::<f64>();

            let numeric = finite_difference_gradient(
                |t| dot(&FeatureGrid::new(t.data(), 5, 4, 4).interpolate(x, y)),
                &u.tensor,
                GRAD_STEP,
            );
            let err = max_rel_error(g.features.data(), numeric.data(), GRAD_ABS_FLOOR);
            assert!(err <= GRAD_REL_TOL, "features {err}");

            let pos = Tensor4::from_vec([1, 1, 1, 2], vec![x, y]).unwrap();
            let numeric = finite_difference_gradient(
                |p| dot(&u.grid(0).interpolate(p.data()[0], p.data()[1])),
                &pos,
                GRAD_STEP,
            );
            let err = max_rel_error(&[g.x, g.y], numeric.data(), GRAD_ABS_FLOOR);
            assert!(err <= GRAD_REL_TOL, "position {err}: {:?} vs {:?}", (g.x, g.y), numeric.data());
        }
    }

    #[test]
    fn position_slope_uses_right_hand_case_at_integers() {
        // One channel, values 1 at row 0 and 2 at row 1 (squares 1 and 4).
        let t = Tensor4::from_vec([1, 1, 2, 1], vec![1.0f32, 2.0]).unwrap();
        let g = FeatureGrid::new(t.data(), 1, 2, 1);
        let mut sink = vec![0.0; 2];
        // At x = 0 only the floor corner has slope −1: dζ/dx = −1, √ζ = 1.
        let (gx, _) = g.interpolate_backward_into(0.0f32, 0.0, &[1.0], &mut sink);
        assert!((gx + 0.5).abs() < 1e-7);
        // Inside the cell dζ/dx = 4 − 1 = 3.
        let mut sink = vec![0.0; 2];
        let (gx, _) = g.interpolate_backward_into(0.5, 0.0, &[1.0], &mut sink);
        let s = 2.5f32.sqrt();
        assert!((gx - 3.0 / (2.0 * s)).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn norm_preserved_in_grid(seed in any::<u64>(), rho in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_unit_map(&mut rng, 6, 5, 5, rho);
            let g = u.grid(0);
            for _ in 0..50 {
                let x = rng.random_range(0.0..4.0f32);
                let y = rng.random_range(0.0..4.0f32);
                let v = g.interpolate(x, y);
                prop_assert!((norm(&v) - u.radius).abs() <= 1e-5);
            }
        }

        #[test]
        fn squared_components_are_convex_blends(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_unit_map(&mut rng, 4, 3, 3, 4);
            let g = u.grid(0);
            let x = rng.random_range(0.0..2.0f32);
            let y = rng.random_range(0.0..2.0f32);
            let v = g.interpolate(x, y);
            let c = InterpCoeffs::at(x, y);
            for k in 0..5 {
                let vals: Vec<f32> = c
                    .corners()
                    .iter()
                    .map(|&(i, j, _)| g.column(i.min(2) as usize, j.min(2) as usize)[k].abs())
                    .collect();
                let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().cloned().fold(0.0, f32::max);
                prop_assert!(v[k] >= lo - 1e-6 && v[k] <= hi + 1e-6);
            }
        }
    }
}
