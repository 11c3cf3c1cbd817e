//! Direct 2-D cross-correlation with zero padding and its hand-written backward.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    /// `out_c × in_c × k_h × k_w`
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(
        weight: Tensor4<T>,
        bias: Vec<T>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        if bias.len() != weight.batch() {
            return shape_err(format!(
                "bias has {} entries for {} output channels",
                bias.len(),
                weight.batch()
            ));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Config("stride and dilation must be >= 1".into()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            dilation,
        })
    }

    /// Square odd kernel with "same" padding at stride 1; zero weights.
    pub fn zeros_same(out_c: usize, in_c: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "same padding needs an odd kernel, got {kernel}"
            )));
        }
        Self::new(
            Tensor4::zeros([out_c, in_c, kernel, kernel]),
            vec![T::zero(); out_c],
            1,
            kernel / 2,
            1,
        )
    }

    /// He-normal weights, zero bias.
    pub fn he_init<R: Rng + ?Sized>(
        out_c: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / (in_c * kernel * kernel) as f64).sqrt();
        let mut weight = Tensor4::zeros([out_c, in_c, kernel, kernel]);
        for w in weight.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *w = T::of(z * std);
        }
        Self::new(weight, vec![T::zero(); out_c], stride, padding, 1)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.channels()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.batch()
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.height(), self.weight.width())
    }

    /// Output spatial size for an `h × w` input, or `None` if the kernel
    /// does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let span_h = self.dilation * (kh - 1) + 1;
        let span_w = self.dilation * (kw - 1) + 1;
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < span_h || pw < span_w {
            return None;
        }
        Some(((ph - span_h) / self.stride + 1, (pw - span_w) / self.stride + 1))
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<(usize, usize)> {
        if input.channels() != self.in_channels() {
            return shape_err(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                input.channels()
            ));
        }
        self.output_hw(input.height(), input.width()).ok_or_else(|| {
            Error::Shape(format!(
                "kernel {:?} does not fit input {:?}",
                self.kernel(),
                input.dims()
            ))
        })
    }

    #[inline]
    fn source(&self, out: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d_forward(input, self)
    }

    pub fn backward(&self, input: &Tensor4<T>, upstream: &Tensor4<T>) -> Result<ConvGrads<T>> {
        conv2d_backward(input, self, upstream)
    }
}

pub fn conv2d_forward<T: Real>(input: &Tensor4<T>, layer: &ConvLayer<T>) -> Result<Tensor4<T>> {
    let (oh, ow) = layer.check_input(input)?;
    let [n, ic, ih, iw] = input.dims();
    let oc = layer.out_channels();
    let (kh, kw) = layer.kernel();
    let mut out = Tensor4::zeros([n, oc, oh, ow]);
    for b in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = layer.bias[o].as_f64();
                    for c in 0..ic {
                        for ky in 0..kh {
                            let Some(sy) = layer.source(y, ky, ih) else { continue };
                            for kx in 0..kw {
                                let Some(sx) = layer.source(x, kx, iw) else { continue };
                                acc += layer.weight.get(o, c, ky, kx).as_f64()
                                    * input.get(b, c, sy, sx).as_f64();
                            }
                        }
                    }
                    out.set(b, o, y, x, T::of(acc));
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `sum(upstream ⊙ conv2d_forward(input, layer))`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    layer: &ConvLayer<T>,
    upstream: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let (oh, ow) = layer.check_input(input)?;
    let [n, ic, ih, iw] = input.dims();
    let oc = layer.out_channels();
    if upstream.dims() != [n, oc, oh, ow] {
        return shape_err(format!(
            "upstream {:?} does not match conv output {:?}",
            upstream.dims(),
            [n, oc, oh, ow]
        ));
    }
    let (kh, kw) = layer.kernel();
    let mut grad_in = vec![0f64; input.len()];
    let mut grad_w = vec![0f64; layer.weight.len()];
    let mut grad_b = vec![0f64; oc];
    for b in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let g = upstream.get(b, o, y, x).as_f64();
                    if g == 0.0 {
                        continue;
                    }
                    grad_b[o] += g;
                    for c in 0..ic {
                        for ky in 0..kh {
                            let Some(sy) = layer.source(y, ky, ih) else { continue };
                            for kx in 0..kw {
                                let Some(sx) = layer.source(x, kx, iw) else { continue };
                                let wi = layer.weight.index(o, c, ky, kx);
                                let xi = input.index(b, c, sy, sx);
                                grad_w[wi] += g * input.data()[xi].as_f64();
                                grad_in[xi] += g * layer.weight.data()[wi].as_f64();
                            }
                        }
                    }
                }
            }
        }
    }
    let narrow = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<_>>();
    Ok(ConvGrads {
        input: Tensor4::from_vec(input.dims(), narrow(grad_in))?,
        weight: Tensor4::from_vec(layer.weight.dims(), narrow(grad_w))?,
        bias: narrow(grad_b),
    })
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

    fn random_tensor<T: Real>(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<T> {
        let n = dims.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
        Tensor4::from_vec(dims, data).unwrap()
    }

    fn weighted_sum<T: Real>(t: &Tensor4<T>, w: &Tensor4<T>) -> f64 {
        t.data().iter().zip(w.data()).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor4::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let layer = ConvLayer::new(Tensor4::full([1, 1, 1, 1], 1.0), vec![0.0], 1, 0, 1).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y, x);
        let g = layer.backward(&x, &Tensor4::full([1, 1, 3, 3], 1.0)).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor::<f32>([2, 3, 5, 5], &mut rng);
        let layer = ConvLayer::zeros_same(4, 3, 3).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), [2, 4, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_cross_correlation() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor4::from_vec([1, 1, 2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let layer = ConvLayer::new(k, vec![0.0], 1, 0, 1).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn output_size_formula() {
        let layer = ConvLayer::new(Tensor4::<f32>::zeros([1, 1, 3, 3]), vec![0.0], 2, 1, 1).unwrap();
        assert_eq!(layer.output_hw(64, 64), Some((32, 32)));
        let dil = ConvLayer::new(Tensor4::<f32>::zeros([1, 1, 3, 3]), vec![0.0], 1, 0, 2).unwrap();
        assert_eq!(dil.output_hw(7, 9), Some((3, 5)));
        assert_eq!(dil.output_hw(4, 4), None);
    }

    #[test]
    fn mismatched_channels_rejected() {
        let layer = ConvLayer::<f32>::zeros_same(2, 3, 3).unwrap();
        let x = Tensor4::zeros([1, 2, 4, 4]);
        assert!(layer.forward(&x).is_err());
        let x = Tensor4::zeros([1, 3, 4, 4]);
        assert!(layer.backward(&x, &Tensor4::zeros([1, 2, 3, 4])).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor::<f32>([1, 2, 4, 4], &mut rng);
        let layer = ConvLayer::new(random_tensor([3, 2, 3, 3], &mut rng), vec![0.1; 3], 1, 1, 1).unwrap();
        let g = layer.backward(&x, &Tensor4::zeros([1, 3, 4, 4])).unwrap();
        assert!(g.input.data().iter().chain(g.weight.data()).chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, padding, dilation) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 0, 1)] {
            let x = random_tensor::<f64>([1, 2, 4, 4], &mut rng);
            let weight = random_tensor([3, 2, 3, 3], &mut rng);
            let bias: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let layer = ConvLayer::new(weight, bias, stride, padding, dilation).unwrap();
            let (oh, ow) = layer.output_hw(4, 4).unwrap();
            let up = random_tensor([1, 3, oh, ow], &mut rng);
            let g = layer.backward(&x, &up).unwrap();

            let num_x = finite_difference_gradient(
                |t| weighted_sum(&layer.forward(t).unwrap(), &up),
                &x,
                GRAD_STEP,
            );
            let err = max_rel_error(g.input.data(), num_x.data(), GRAD_ABS_FLOOR);
            assert!(err <= GRAD_REL_TOL, "input grad err {err}");

            let num_w = finite_difference_gradient(
                |w| {
                    let mut l = layer.clone();
                    l.weight = w.clone();
                    weighted_sum(&l.forward(&x).unwrap(), &up)
                },
                &layer.weight,
                GRAD_STEP,
            );
            let err = max_rel_error(g.weight.data(), num_w.data(), GRAD_ABS_FLOOR);
            assert!(err <= GRAD_REL_TOL, "weight grad err {err}");

            let bias_t = Tensor4::from_vec([1, 1, 1, 3], layer.bias.clone()).unwrap();
            let num_b = finite_difference_gradient(
                |b| {
                    let mut l = layer.clone();
                    l.bias = b.data().to_vec();
                    weighted_sum(&l.forward(&x).unwrap(), &up)
                },
                &bias_t,
                GRAD_STEP,
            );
            let err = max_rel_error(&g.bias, num_b.data(), GRAD_ABS_FLOOR);
            assert!(err <= GRAD_REL_TOL, "bias grad err {err}");
        }
    }

    proptest! {
        #[test]
        fn forward_is_linear_in_input_and_weights(seed in any::<u64>(), a in -4.0f32..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor::<f32>([1, 2, 4, 4], &mut rng);
            let layer = ConvLayer::new(random_tensor([2, 2, 3, 3], &mut rng), vec![0.0; 2], 1, 1, 1).unwrap();
            let base = layer.forward(&x).unwrap();
            let scaled_x = layer.forward(&x.map(|v| v * a)).unwrap();
            let mut scaled_layer = layer.clone();
            scaled_layer.weight.scale(a);
            let scaled_w = scaled_layer.forward(&x).unwrap();
            for ((&b, &sx), &sw) in base.data().iter().zip(scaled_x.data()).zip(scaled_w.data()) {
                let want = a * b;
                let tol = 1e-6 * want.abs().max(1.0);
                prop_assert!((sx - want).abs() <= tol);
                prop_assert!((sw - want).abs() <= tol);
            }
        }
    }
}
