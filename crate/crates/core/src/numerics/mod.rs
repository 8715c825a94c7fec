//! Minimal dense-tensor engine: forward kernels plus reverse-mode
//! differentiation for exactly the operator set the flow-guided deformable
//! warp needs (convolution, residual blocks, bilinear sampling, modulated
//! deformable convolution, channel concat/split, pointwise nonlinearities),
//! with finite-difference verification tooling.
//!
//! Plain functions in this module run eagerly on [`Tensor`] values; the same
//! operators are available as tape ops on [`Graph`] when gradients are
//! needed.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{
    analytic_gradient, compare_gradients, finite_diff_check, numeric_gradient, GradCheckReport,
    InputReport,
};
pub use graph::{Graph, Var};
pub use tensor::{Dtype, Scalar, Tensor};

use crate::error::{Error, Result};

/// Negative slope shared by every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.1;

/// A 2-D convolution: hyperparameters plus its weight and bias tensors.
/// Weight layout is (out_channels, in_channels, k_h, k_w).
#[derive(Clone, Debug)]
pub struct ConvSpec<T: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        weight: Tensor<T>,
        bias: Tensor<T>,
    ) -> Result<Self> {
        let expected = [out_channels, in_channels, kernel.0, kernel.1];
        if weight.shape() != expected {
            return Err(Error::shape(format!(
                "conv weight shape {:?}, expected {:?}",
                weight.shape(),
                expected
            )));
        }
        if bias.shape() != [out_channels] {
            return Err(Error::shape(format!(
                "conv bias shape {:?}, expected [{out_channels}]",
                bias.shape()
            )));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        })
    }

    /// All-zero weights and biases.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel.0, kernel.1]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    /// Spatial-size-preserving check: stride 1 and symmetric padding that
    /// keeps output extents equal to input extents for odd kernels.
    pub fn preserves_size(&self) -> bool {
        self.stride == 1
            && 2 * self.padding + 1 == self.kernel.0
            && 2 * self.padding + 1 == self.kernel.1
    }
}

/// Residual block: `x + conv2(leaky_relu(conv1(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlockSpec<T: Scalar> {
    pub conv1: ConvSpec<T>,
    pub conv2: ConvSpec<T>,
}

impl<T: Scalar> ResBlockSpec<T> {
    pub fn new(conv1: ConvSpec<T>, conv2: ConvSpec<T>) -> Result<Self> {
        if conv1.out_channels != conv2.in_channels || conv1.in_channels != conv2.out_channels {
            return Err(Error::shape(format!(
                "resblock channels do not chain: {}→{} then {}→{}",
                conv1.in_channels, conv1.out_channels, conv2.in_channels, conv2.out_channels
            )));
        }
        if !conv1.preserves_size() || !conv2.preserves_size() {
            return Err(Error::shape(
                "resblock convolutions must preserve spatial size".to_string(),
            ));
        }
        Ok(ResBlockSpec { conv1, conv2 })
    }

    pub fn zeros(channels: usize, kernel: usize) -> Self {
        let pad = (kernel - 1) / 2;
        ResBlockSpec {
            conv1: ConvSpec::zeros(channels, channels, (kernel, kernel), 1, pad),
            conv2: ConvSpec::zeros(channels, channels, (kernel, kernel), 1, pad),
        }
    }
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let (_, cin, _, _) = input.dims4()?;
    if cin != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {cin} channels, conv expects {} (input {:?})",
            spec.in_channels,
            input.shape()
        )));
    }
    kernels::conv2d_forward(input, &spec.weight, &spec.bias, spec.stride, spec.padding)
}

pub fn apply_resblock<T: Scalar>(input: &Tensor<T>, spec: &ResBlockSpec<T>) -> Result<Tensor<T>> {
    let (_, cin, _, _) = input.dims4()?;
    if cin != spec.conv1.in_channels {
        return Err(Error::shape(format!(
            "resblock expects {} channels, input has {cin}",
            spec.conv1.in_channels
        )));
    }
    let h = conv2d(input, &spec.conv1)?;
    let h = leaky_relu(&h, LEAKY_SLOPE);
    let h = conv2d(&h, &spec.conv2)?;
    add(input, &h)
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, negative_slope: f64) -> Tensor<T> {
    let s = T::of(negative_slope);
    input.map(|v| if v >= T::zero() { v } else { v * s })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_elementwise(a, b, |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_elementwise(a, b, |x, y| x * y)
}

fn zip_elementwise<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "elementwise operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let g: Graph<T> = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let cat = g.concat_channels(&vars)?;
    Ok(g.tensor(cat))
}

pub fn split_channels<T: Scalar>(input: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let g: Graph<T> = Graph::new();
    let v = g.constant(input.clone());
    let parts = g.split_channels(v, sizes)?;
    Ok(parts.into_iter().map(|p| g.tensor(p)).collect())
}

/// Bilinear gather of `feature` at the absolute positions in `coords`
/// (channel 0 = x, channel 1 = y); out-of-frame positions edge-clamp.
pub fn bilinear_sample<T: Scalar>(feature: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::bilinear_sample_forward(feature, coords)
}

/// Modulated deformable convolution with `groups` deformable groups.
pub fn deformable_conv<T: Scalar>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
    spec: &ConvSpec<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    kernels::deform_conv_forward(
        input,
        offsets,
        mask,
        &spec.weight,
        &spec.bias,
        spec.stride,
        spec.padding,
        groups,
    )
}

/// Identity coordinate grid, shaped (n, 2, h, w): channel 0 holds x,
/// channel 1 holds y. Sampling a (n, c, h, w) tensor at this grid is the
/// identity.
pub fn identity_grid<T: Scalar>(n: usize, h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for _y in 0..h {
            for x in 0..w {
                data.push(T::of(x as f64));
            }
        }
        for y in 0..h {
            for _x in 0..w {
                data.push(T::of(y as f64));
            }
        }
    }
    Tensor::new(&[n, 2, h, w], data).expect("grid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: &[usize]) -> Tensor<f64> {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn box_kernel_counts_neighbors() {
        // 1×1×3×3 ones, 3×3 ones kernel, pad 1 → center 9, corners 4.
        let input = ones(&[1, 1, 3, 3]);
        let spec = ConvSpec::new(
            1,
            1,
            (3, 3),
            1,
            1,
            ones(&[1, 1, 3, 3]),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        let out = conv2d(&input, &spec).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.data()[2], 4.0);
        assert_eq!(out.data()[6], 4.0);
        assert_eq!(out.data()[8], 4.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = Tensor::from_fn(&[1, 1, 4, 5], |i| (i as f64) * 0.37 - 2.0);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let spec = ConvSpec::new(1, 1, (3, 3), 1, 1, w, Tensor::zeros(&[1])).unwrap();
        let out = conv2d(&input, &spec).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::<f64>::from_fn(&[2, 4, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let weight = Tensor::from_fn(&[3, 4, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let bias = Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0));
        let spec = ConvSpec::new(4, 3, (3, 3), 2, 1, weight.clone(), bias.clone()).unwrap();
        let out = conv2d(&input, &spec).unwrap();

        // Direct nested-loop oracle, independent index arithmetic.
        let (oh, ow) = (4, 4);
        for b in 0..2 {
            for oc in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[oc];
                        for ic in 0..4 {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || iy >= 8 || ix < 0 || ix >= 8 {
                                        continue;
                                    }
                                    let x =
                                        input.data()[((b * 4 + ic) * 8 + iy as usize) * 8
                                            + ix as usize];
                                    let w =
                                        weight.data()[((oc * 4 + ic) * 3 + ky) * 3 + kx];
                                    acc += w * x;
                                }
                            }
                        }
                        let got = out.data()[((b * 3 + oc) * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "got {got}, oracle {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_with_dimension_report() {
        let input = ones(&[1, 2, 4, 4]);
        let spec = ConvSpec::zeros(3, 1, (3, 3), 1, 1);
        let err = conv2d(&input, &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "message: {msg}");
    }

    #[test]
    fn resblock_with_zero_weights_is_identity() {
        let input = Tensor::from_fn(&[1, 3, 5, 5], |i| (i as f64).sqrt());
        let spec = ResBlockSpec::zeros(3, 3);
        let out = apply_resblock(&input, &spec).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn resblock_identity_path_gradient_is_ones() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64), true);
        let spec = ResBlockSpec::<f64>::zeros(2, 3);
        let w1 = g.constant(spec.conv1.weight.clone());
        let b1 = g.constant(spec.conv1.bias.clone());
        let w2 = g.constant(spec.conv2.weight.clone());
        let b2 = g.constant(spec.conv2.bias.clone());
        let h = g.conv2d(x, w1, b1, 1, 1).unwrap();
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = g.conv2d(h, w2, b2, 1, 1).unwrap();
        let y = g.add(x, h).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert!(grad.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn leaky_relu_negative_side() {
        let x = Tensor::<f64>::scalar(-1.0);
        let y = leaky_relu(&x, 0.1);
        assert!((y.data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_outputs_stay_in_open_interval() {
        let x = Tensor::new(&[3], vec![-800.0, 0.0, 800.0]).unwrap();
        let y = sigmoid(&x);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0 || v == 1.0 || v == 0.0));
        // Extreme saturation may round to the closed bounds in f64; the
        // finite-input contract is checked on moderate values.
        let x = Tensor::new(&[3], vec![-30.0, 0.5, 30.0]).unwrap();
        let y = sigmoid(&x);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bilinear_integer_coords_gather_exactly() {
        let feature = Tensor::from_fn(&[1, 2, 4, 4], |i| (i * i) as f64);
        let grid = identity_grid::<f64>(1, 4, 4);
        let out = bilinear_sample(&feature, &grid).unwrap();
        assert_eq!(out, feature);
    }

    #[test]
    fn bilinear_midpoint_on_linear_ramp_is_exact() {
        // Horizontal ramp f(x) = 3x + 1; sampling at x+0.5 must give the
        // analytic midpoint.
        let feature = Tensor::from_fn(&[1, 1, 2, 5], |i| 3.0 * ((i % 5) as f64) + 1.0);
        let mut coords = identity_grid::<f64>(1, 2, 5);
        for v in coords.data_mut()[..10].iter_mut() {
            *v += 0.5;
        }
        let out = bilinear_sample(&feature, &coords).unwrap();
        // Last column clamps to the edge; interior columns hit midpoints.
        for y in 0..2 {
            for x in 0..4 {
                let got = out.data()[y * 5 + x];
                let want = 3.0 * (x as f64 + 0.5) + 1.0;
                assert!((got - want).abs() < 1e-12, "({x},{y}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn deformable_zero_offsets_unit_mask_equals_conv_bitwise() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::from_fn(&[1, 4, 6, 6], |_| rng.gen_range(-2.0..2.0));
        let weight = Tensor::from_fn(&[5, 4, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let bias = Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0));
        let spec = ConvSpec::new(4, 5, (3, 3), 1, 1, weight, bias).unwrap();
        let offsets = Tensor::zeros(&[1, 18, 6, 6]);
        let mask = Tensor::full(&[1, 9, 6, 6], 1.0);
        let a = deformable_conv(&input, &offsets, &mask, &spec, 1).unwrap();
        let b = conv2d(&input, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deformable_constant_offset_matches_shifted_conv_interior() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (8, 8);
        let image = Tensor::<f64>::from_fn(&[1, 1, h, w], |_| rng.gen_range(0.0..1.0));
        // Shift image 2 px left so that shifted(x) = image(x + 2).
        let shifted = Tensor::from_fn(&[1, 1, h, w], |i| {
            let y = i / w;
            let x = i % w;
            let sx = (x + 2).min(w - 1);
            image.data()[y * w + sx]
        });
        let weight = Tensor::from_fn(&[1, 1, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let spec = ConvSpec::new(1, 1, (3, 3), 1, 1, weight, Tensor::zeros(&[1])).unwrap();
        // Deformable conv on the original with Δx = +2 samples image(x+2).
        let mut offsets = Tensor::zeros(&[1, 18, h, w]);
        for t in 0..9 {
            let ch = 2 * t;
            for i in 0..h * w {
                offsets.data_mut()[ch * h * w + i] = 2.0;
            }
        }
        let mask = Tensor::full(&[1, 9, h, w], 1.0);
        let a = deformable_conv(&image, &offsets, &mask, &spec, 1).unwrap();
        let b = conv2d(&shifted, &spec).unwrap();
        // Compare away from every border the shift or padding can touch.
        for y in 1..h - 1 {
            for x in 1..w - 3 {
                let i = y * w + x;
                assert!(
                    (a.data()[i] - b.data()[i]).abs() < 1e-12,
                    "({x},{y}): {} vs {}",
                    a.data()[i],
                    b.data()[i]
                );
            }
        }
    }

    #[test]
    fn deformable_rejects_bad_offset_channels() {
        let input = ones(&[1, 4, 6, 6]);
        let spec = ConvSpec::zeros(4, 4, (3, 3), 1, 1);
        let offsets = Tensor::zeros(&[1, 17, 6, 6]);
        let mask = Tensor::full(&[1, 9, 6, 6], 1.0);
        assert!(deformable_conv(&input, &offsets, &mask, &spec, 1).is_err());
    }

    #[test]
    fn deformable_zero_mask_gives_bias_only_response() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.gen_range(-1.0..1.0));
        let weight = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let bias = Tensor::new(&[3], vec![0.25, -1.5, 2.0]).unwrap();
        let spec = ConvSpec::new(2, 3, (3, 3), 1, 1, weight, bias.clone()).unwrap();
        let offsets = Tensor::zeros(&[1, 18, 5, 5]);
        let mask = Tensor::zeros(&[1, 9, 5, 5]);
        let out = deformable_conv(&input, &offsets, &mask, &spec, 1).unwrap();
        for oc in 0..3 {
            for i in 0..25 {
                assert_eq!(out.data()[oc * 25 + i], bias.data()[oc]);
            }
        }
    }
}
