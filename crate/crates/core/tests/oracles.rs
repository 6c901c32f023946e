use proptest::prelude::*;
use quan::layers::reference::{full_hamilton_reference, separable_reference};
use quan::layers::{
    init_weights, qconv2d_backward, qconv2d_forward, qconv2d_forward_unfused, ConvMode, ConvSpec, InitScheme,
    OpCounter, QConvParams,
};
use quan::{QTensor, Shape};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> QTensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    QTensor::from_vec(shape.dims(), data).unwrap()
}

/// Largest elementwise deviation relative to the reference's largest magnitude.
fn rel_dev(a: &QTensor<f64>, b: &QTensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let scale = b.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

struct Case {
    input: Shape,
    spec: ConvSpec,
    weights: Vec<f64>,
    bias: Vec<f64>,
    x: QTensor<f64>,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let k = rng.random_range(1..=3usize) * 2 - 1;
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=k / 2 + 1);
    let input = Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(k..=k + 5), rng.random_range(k..=k + 5));
    let spec = ConvSpec::new(input.channels, rng.random_range(1..=3), k).stride(stride).padding(padding);
    let weights = init_weights(spec.weight_dims(), InitScheme::ComponentHe, rng);
    let bias = (0..spec.bias_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = random_tensor(input, rng);
    Case { input, spec, weights, bias, x }
}

#[test]
fn full_hamilton_matches_five_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..12 {
        let c = random_case(&mut rng);
        let p = QConvParams::new(c.spec.mode(ConvMode::FullHamilton), &c.weights, Some(&c.bias)).unwrap();
        let dev = rel_dev(&qconv2d_forward(&c.x, &p).unwrap(), &full_hamilton_reference(&c.x, &p).unwrap());
        assert!(dev < 1e-12, "{:?} {:?}: {dev:e}", c.input, c.spec);
    }
}

#[test]
fn separable_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..12 {
        let c = random_case(&mut rng);
        let p = QConvParams::new(c.spec, &c.weights, Some(&c.bias)).unwrap();
        let dev = rel_dev(&qconv2d_forward(&c.x, &p).unwrap(), &separable_reference(&c.x, &p).unwrap());
        assert!(dev < 1e-12, "{:?} {:?}: {dev:e}", c.input, c.spec);
    }
}

#[test]
fn multi_pass_matches_fused_and_counts_four_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..6 {
        let c = random_case(&mut rng);
        let mut counts = Vec::new();
        for mode in [ConvMode::Separable, ConvMode::FullHamilton] {
            let spec = c.spec.mode(mode);
            let p = QConvParams::new(spec, &c.weights, Some(&c.bias)).unwrap();
            let mut counter = OpCounter::default();
            let multi = qconv2d_forward_unfused(&c.x, &p, &mut counter).unwrap();
            assert!(rel_dev(&multi, &qconv2d_forward(&c.x, &p).unwrap()) < 1e-12);
            assert_eq!(counter.multiplies, spec.multiplies(c.input).unwrap());
            counts.push(counter);
        }
        assert_eq!(counts[0].component_convolutions, 4);
        assert_eq!(counts[1].component_convolutions, 16);
        assert_eq!(counts[1].multiplies, 4 * counts[0].multiplies);
    }
}

#[test]
fn separable_differs_from_full_in_general() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let c = random_case(&mut rng);
    let sep = QConvParams::new(c.spec, &c.weights, None).unwrap();
    let full = QConvParams::new(c.spec.mode(ConvMode::FullHamilton), &c.weights, None).unwrap();
    assert!(rel_dev(&qconv2d_forward(&c.x, &sep).unwrap(), &qconv2d_forward(&c.x, &full).unwrap()) > 1e-3);
}

fn dot(a: &QTensor<f64>, b: &QTensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn convolution_is_linear_in_the_input(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0, full in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&mut rng);
        let mode = if full { ConvMode::FullHamilton } else { ConvMode::Separable };
        let p = QConvParams::new(c.spec.mode(mode), &c.weights, None).unwrap();
        let z = random_tensor(c.input, &mut rng);
        let combo = QTensor::from_vec(c.input.dims(), c.x.data().iter().zip(z.data()).map(|(x, z)| a * x + b * z).collect()).unwrap();
        let lhs = qconv2d_forward(&combo, &p).unwrap();
        let (yx, yz) = (qconv2d_forward(&c.x, &p).unwrap(), qconv2d_forward(&z, &p).unwrap());
        let rhs = QTensor::from_vec(lhs.dims(), yx.data().iter().zip(yz.data()).map(|(x, z)| a * x + b * z).collect()).unwrap();
        prop_assert!(rel_dev(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn input_gradient_is_the_adjoint(seed in any::<u64>(), full in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&mut rng);
        let mode = if full { ConvMode::FullHamilton } else { ConvMode::Separable };
        let p = QConvParams::new(c.spec.mode(mode), &c.weights, None).unwrap();
        let y = qconv2d_forward(&c.x, &p).unwrap();
        let r = random_tensor(y.shape(), &mut rng);
        let g = qconv2d_backward(&c.x, &p, &r).unwrap();
        let (lhs, rhs) = (dot(&r, &y), dot(&g.dx, &c.x));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn weight_gradient_is_the_adjoint(seed in any::<u64>(), full in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&mut rng);
        let mode = if full { ConvMode::FullHamilton } else { ConvMode::Separable };
        let p = QConvParams::new(c.spec.mode(mode), &c.weights, None).unwrap();
        let y = qconv2d_forward(&c.x, &p).unwrap();
        let r = random_tensor(y.shape(), &mut rng);
        let g = qconv2d_backward(&c.x, &p, &r).unwrap();
        // The output is linear in the weights too, so <r, y> = <dW, W>.
        let rhs: f64 = g.dweights.iter().zip(&c.weights).map(|(a, b)| a * b).sum();
        let lhs = dot(&r, &y);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
    }
}
