use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Scalar objective for gradient checking: sum of squares of the output.
fn objective(net: &Network, ps: &ParamSet<f64>, x: &ArrayD<f64>) -> f64 {
    let y = net.forward(ps, x.clone());
    y.iter().map(|v| v * v).sum()
}

/// Checks analytic parameter and input gradients against central finite
/// differences for the given network.
fn gradcheck(net: &Network, ps: &mut ParamSet<f64>, x: &ArrayD<f64>, tol: f64) {
    let (y, caches) = net.forward_cached(ps, x.clone());
    let gy = y.mapv(|v| 2.0 * v);
    let mut grads = GradBuf::zeros_like(ps);
    let gx = net.backward(ps, &caches, gy, &mut grads);

    let h = 1e-5;
    for i in 0..ps.len() {
        let orig = ps.data()[i];
        ps.data_mut()[i] = orig + h;
        let fp = objective(net, ps, x);
        ps.data_mut()[i] = orig - h;
        let fm = objective(net, ps, x);
        ps.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let g = grads.data()[i];
        let denom = fd.abs().max(1e-6);
        assert!(
            (g - fd).abs() / denom < tol,
            "param grad {i}: analytic {g} vs fd {fd}"
        );
    }

    let mut xm = x.clone();
    for i in 0..x.len() {
        let orig = xm.as_slice().unwrap()[i];
        xm.as_slice_mut().unwrap()[i] = orig + h;
        let fp = objective(net, ps, &xm);
        xm.as_slice_mut().unwrap()[i] = orig - h;
        let fm = objective(net, ps, &xm);
        xm.as_slice_mut().unwrap()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let g = gx.as_slice().unwrap()[i];
        let denom = fd.abs().max(1e-6);
        assert!(
            (g - fd).abs() / denom < tol,
            "input grad {i}: analytic {g} vs fd {fd}"
        );
    }
}

#[test]
fn conv2d_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamSet::<f64>::new();
    let conv = Conv2d::new(&mut ps, "c", 3, 8, 3, 2, &mut rng);
    let net = Network::new(vec![Layer::Conv2d(conv)]);
    let x = random_input(&[2, 3, 8, 8], 1);
    let y = net.forward(&ps, x);
    assert_eq!(y.shape(), &[2, 8, 4, 4]);
}

#[test]
fn convt2d_doubles_spatial_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamSet::<f64>::new();
    let deconv = ConvT2d::new(&mut ps, "d", 8, 4, &mut rng);
    let net = Network::new(vec![Layer::ConvT2d(deconv)]);
    for &(h, w) in &[(1usize, 1usize), (2, 2), (4, 4)] {
        let x = random_input(&[1, 8, h, w], 2);
        let y = net.forward(&ps, x);
        assert_eq!(y.shape(), &[1, 4, 2 * h, 2 * w]);
    }
}

#[test]
fn conv2d_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ps = ParamSet::<f64>::new();
    let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 2, &mut rng);
    let net = Network::new(vec![Layer::Conv2d(conv)]);
    let x = random_input(&[2, 2, 6, 6], 11);
    gradcheck(&net, &mut ps, &x, 1e-5);
}

#[test]
fn conv2d_k1_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ps = ParamSet::<f64>::new();
    let conv = Conv2d::new(&mut ps, "c", 3, 2, 1, 2, &mut rng);
    let net = Network::new(vec![Layer::Conv2d(conv)]);
    let x = random_input(&[2, 3, 4, 4], 13);
    gradcheck(&net, &mut ps, &x, 1e-5);
}

#[test]
fn convt2d_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut ps = ParamSet::<f64>::new();
    let deconv = ConvT2d::new(&mut ps, "d", 3, 2, &mut rng);
    let net = Network::new(vec![Layer::ConvT2d(deconv)]);
    let x = random_input(&[2, 3, 3, 3], 21);
    gradcheck(&net, &mut ps, &x, 1e-5);
}

#[test]
fn convt2d_is_adjoint_of_conv2d() {
    // <conv(x), y> == <x, convT(y)> when both share the same weight.
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut ps = ParamSet::<f64>::new();
    let geom = ConvGeom {
        in_ch: 2,
        out_ch: 3,
        k: 3,
        stride: 2,
        pad: 1,
    };
    let w = ps.add_he("w", &[3, 2, 3, 3], 18, &mut rng);
    let x = random_input(&[1, 2, 8, 8], 31)
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
    let y = random_input(&[1, 3, 4, 4], 32)
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
    let cx = conv_forward_raw(&x, &ps.view2_flat(w), None, &geom);
    let ty = conv_grad_input_raw(&y, &ps.view2_flat(w), &geom, (8, 8));
    let lhs: f64 = cx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.iter().zip(ty.iter()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn groupnorm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut ps = ParamSet::<f64>::new();
    let gn = GroupNorm::new(&mut ps, "gn", 4, 2);
    // Perturb gamma/beta away from the identity so the check is nontrivial.
    for v in ps.data_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let net = Network::new(vec![Layer::GroupNorm(gn)]);
    let x = random_input(&[2, 4, 3, 3], 41);
    gradcheck(&net, &mut ps, &x, 1e-4);
}

#[test]
fn linear_l2norm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut ps = ParamSet::<f64>::new();
    let lin = Linear::new(&mut ps, "fc", 6, 4, &mut rng);
    let net = Network::new(vec![
        Layer::Linear(lin),
        Layer::Relu,
        Layer::L2Normalize { eps: 1e-12 },
    ]);
    let x = random_input(&[3, 6], 51);
    gradcheck(&net, &mut ps, &x, 1e-4);
}

#[test]
fn residual_block_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut ps = ParamSet::<f64>::new();
    let main = Network::new(vec![
        Layer::Conv2d(Conv2d::new(&mut ps, "r.main0", 2, 3, 3, 2, &mut rng)),
        Layer::Relu,
        Layer::Conv2d(Conv2d::new(&mut ps, "r.main1", 3, 3, 3, 1, &mut rng)),
    ]);
    let skip = Network::new(vec![Layer::Conv2d(Conv2d::new(
        &mut ps, "r.skip", 2, 3, 1, 2, &mut rng,
    ))]);
    let net = Network::new(vec![Layer::Residual(Box::new(ResidualBlock {
        main,
        skip,
        final_relu: true,
    }))]);
    let x = random_input(&[2, 2, 4, 4], 61);
    gradcheck(&net, &mut ps, &x, 1e-4);
}

#[test]
fn deep_stack_gradcheck() {
    // Conv -> GN -> ReLU -> Conv -> Flatten -> Linear -> L2Normalize, the
    // same layer sequence the real encoder and head are made of.
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut ps = ParamSet::<f64>::new();
    let net = Network::new(vec![
        Layer::Conv2d(Conv2d::new(&mut ps, "c0", 1, 2, 3, 2, &mut rng)),
        Layer::GroupNorm(GroupNorm::new(&mut ps, "g0", 2, 2)),
        Layer::Relu,
        Layer::Conv2d(Conv2d::new(&mut ps, "c1", 2, 4, 3, 2, &mut rng)),
        Layer::Flatten,
        Layer::Linear(Linear::new(&mut ps, "fc", 16, 3, &mut rng)),
        Layer::L2Normalize { eps: 1e-12 },
    ]);
    let x = random_input(&[2, 1, 8, 8], 71);
    gradcheck(&net, &mut ps, &x, 1e-4);
}

#[test]
fn forward_is_deterministic_and_batch_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut ps = ParamSet::<f32>::new();
    let net = Network::new(vec![
        Layer::Conv2d(Conv2d::new(&mut ps, "c0", 3, 4, 3, 2, &mut rng)),
        Layer::GroupNorm(GroupNorm::new(&mut ps, "g0", 4, 2)),
        Layer::Relu,
        Layer::Flatten,
    ]);
    let mut rng2 = ChaCha8Rng::seed_from_u64(81);
    let batch =
        ArrayD::from_shape_fn(IxDyn(&[8, 3, 8, 8]), |_| rng2.gen_range(-1.0..1.0f32));
    let full = net.forward(&ps, batch.clone());
    let full2 = net.forward(&ps, batch.clone());
    assert_eq!(full, full2);
    // Row 3 alone must reproduce row 3 of the batch bit-for-bit.
    let single = batch
        .slice(ndarray::s![3..4, .., .., ..])
        .to_owned()
        .into_dyn();
    let y_single = net.forward(&ps, single);
    let y2 = y_single.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let yf = full.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    for j in 0..y2.ncols() {
        assert_eq!(y2[(0, j)].to_bits(), yf[(3, j)].to_bits());
    }
}

#[test]
fn param_set_named_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut ps = ParamSet::<f32>::new();
    let _ = Conv2d::new(&mut ps, "enc.conv0", 3, 8, 3, 2, &mut rng);
    let names: Vec<_> = ps.iter_named().map(|(n, _, _)| n.to_string()).collect();
    assert_eq!(names, vec!["enc.conv0.weight", "enc.conv0.bias"]);
    let vals: Vec<f32> = ps.iter_named().next().unwrap().2.to_vec();
    let mut ps2 = ps.clone();
    for v in ps2.data_mut() {
        *v = 0.0;
    }
    ps2.load_named("enc.conv0.weight", &vals).unwrap();
    assert_eq!(ps2.view1(ParamId(0)), ps.view1(ParamId(0)));
    assert!(ps2.load_named("nope", &vals).is_err());
}
