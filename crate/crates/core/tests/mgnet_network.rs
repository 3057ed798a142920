use mgnet::autodiff::{finite_diff_check, Array, Tape};
use mgnet::mgnet::{ExtractorStrategy, FInit, MgNet, MgNetConfig, Mode, PiVariant, Smoothing};
use mgnet::rng::seeded;
use mgnet::{conv2d, conv2d_depthwise, conv2d_transpose, relu, ConvKernel, Padding, Tensor};

fn kernel(net: &MgNet<f64>, prefix: &str) -> ConvKernel<f64> {
    let w = net.params().get(&format!("{prefix}.w")).unwrap();
    let s = w.shape();
    let bias = net
        .params()
        .get(&format!("{prefix}.b"))
        .ok()
        .map(|b| b.data().to_vec());
    ConvKernel::new((s[2] - 1) / 2, s[1], s[0], w.data().to_vec(), bias).unwrap()
}

fn conv(x: &Tensor<f64>, k: &ConvKernel<f64>, stride: usize) -> Tensor<f64> {
    conv2d(x, k, stride, Padding::Zero).unwrap()
}

fn image(h: usize, c: usize, seed: u64) -> Tensor<f64> {
    Tensor::random_normal(h, h, c, 1.0, &mut seeded(seed))
}

/// Random values for every parameter, biases included, so that no
/// structural zero hides a wrong wiring.
fn randomize(net: &mut MgNet<f64>, seed: u64) {
    let mut rng = seeded(seed);
    let names: Vec<String> = net.params().iter().map(|(n, _, _)| n.to_string()).collect();
    for name in names {
        if name.contains("logits") || name.contains("omega") || name.contains("alpha") {
            continue;
        }
        let n = net.params().get(&name).unwrap().len();
        let data = Tensor::<f64>::random_normal(1, n, 1, 0.3, &mut rng).into_vec();
        net.params_mut().set(&name, data).unwrap();
    }
}

fn zero_param(net: &mut MgNet<f64>, name: &str) {
    let n = net.params().get(name).unwrap().len();
    net.params_mut().set(name, vec![0.0; n]).unwrap();
}

#[test]
fn zero_weights_give_a_downsampling_chain() {
    let cfg = MgNetConfig::new(3, 2, 3, 2, 1, 2);
    let mut net = MgNet::<f64>::new(cfg, 4).unwrap();
    randomize(&mut net, 9);
    let names: Vec<String> = net.params().iter().map(|(n, _, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.contains(".A.") || n.contains(".eta") || n.contains(".pi.")) {
        zero_param(&mut net, n);
    }
    let (_, trace) = net.forward(&image(9, 1, 1)).unwrap();
    for level in &trace.u {
        for u in level {
            assert_eq!(u.max_abs(), 0.0);
        }
    }
    for l in 1..3 {
        let expect = conv(&trace.f[l - 1], &kernel(&net, &format!("l{l}.R")), 2);
        assert_eq!(trace.f[l].max_abs_diff(&expect).unwrap(), 0.0);
    }
}

#[test]
fn trace_obeys_the_transfer_formulas_for_every_pi() {
    for pi in [PiVariant::Pi0, PiVariant::Pi1, PiVariant::Pi2] {
        let mut cfg = MgNetConfig::new(3, 2, 3, 4, 2, 3);
        cfg.pi = pi;
        let mut net = MgNet::<f64>::new(cfg, 11).unwrap();
        randomize(&mut net, 12);
        let (_, trace) = net.forward(&image(10, 2, 2)).unwrap();
        for l in 1..3 {
            let u = trace.level_output(l);
            let u0 = match pi {
                PiVariant::Pi0 => Tensor::zeros(u.height().div_ceil(2), u.width().div_ceil(2), u.channels()),
                PiVariant::Pi1 => conv(u, &kernel(&net, &format!("l{l}.pi")), 2),
                PiVariant::Pi2 => {
                    conv2d_depthwise(u, &kernel(&net, &format!("l{l}.pi")), 2, Padding::Zero).unwrap()
                }
            };
            assert!(trace.u[l][0].max_abs_diff(&u0).unwrap() < 1e-13);
            let a = kernel(&net, &format!("l{l}.A"));
            let a_next = kernel(&net, &format!("l{}.A", l + 1));
            let r = trace.f[l - 1].sub(&conv(u, &a, 1)).unwrap();
            let f_next = conv(&r, &kernel(&net, &format!("l{l}.R")), 2)
                .add(&conv(&u0, &a_next, 1))
                .unwrap();
            assert!(trace.f[l].max_abs_diff(&f_next).unwrap() < 1e-12, "{pi:?} level {l}");
        }
    }
}

#[test]
fn single_step_matches_a_hand_unrolled_reference() {
    let cfg = MgNetConfig::new(2, 2, 3, 2, 1, 2);
    let mut net = MgNet::<f64>::new(cfg, 3).unwrap();
    randomize(&mut net, 5);
    let f = image(7, 1, 6);
    let (out, _) = net.forward(&f).unwrap();

    let k = |p: &str| kernel(&net, p);
    let b = |l: usize, i: usize, r: &Tensor<f64>| relu(&conv(&relu(r), &k(&format!("l{l}.eta{i}")), 1));
    let f1 = relu(&conv(&f, &k("theta0"), 1));
    let mut u = Tensor::zeros(7, 7, 3);
    for i in 1..=2 {
        let r = f1.sub(&conv(&u, &k("l1.A"), 1)).unwrap();
        u = u.add(&b(1, i, &r)).unwrap();
    }
    let u0 = conv(&u, &k("l1.pi"), 2);
    let r = f1.sub(&conv(&u, &k("l1.A"), 1)).unwrap();
    let f2 = conv(&r, &k("l1.R"), 2).add(&conv(&u0, &k("l2.A"), 1)).unwrap();
    let mut u = u0;
    for i in 1..=2 {
        let r = f2.sub(&conv(&u, &k("l2.A"), 1)).unwrap();
        u = u.add(&b(2, i, &r)).unwrap();
    }
    assert!(out.max_abs_diff(&u).unwrap() < 1e-12);
}

#[test]
fn v_cycle_matches_a_hand_unrolled_reference() {
    let mut cfg = MgNetConfig::new(2, 1, 3, 2, 1, 2);
    cfg.nu_up = vec![1, 0];
    let mut net = MgNet::<f64>::new(cfg, 21).unwrap();
    randomize(&mut net, 22);
    let f = image(9, 1, 23);
    let (out, _) = net.forward(&f).unwrap();

    let k = |p: &str| kernel(&net, p);
    let b = |eta: &str, r: &Tensor<f64>| relu(&conv(&relu(r), &k(eta), 1));
    let f1 = relu(&conv(&f, &k("theta0"), 1));
    let u10 = Tensor::zeros(9, 9, 3);
    let u1 = u10.add(&b("l1.eta1", &f1.sub(&conv(&u10, &k("l1.A"), 1)).unwrap())).unwrap();
    let u20 = conv(&u1, &k("l1.pi"), 2);
    let f2 = conv(&f1.sub(&conv(&u1, &k("l1.A"), 1)).unwrap(), &k("l1.R"), 2)
        .add(&conv(&u20, &k("l2.A"), 1))
        .unwrap();
    let u2 = u20.add(&b("l2.eta1", &f2.sub(&conv(&u20, &k("l2.A"), 1)).unwrap())).unwrap();
    let d = u2.sub(&u20).unwrap();
    let corrected = u1
        .add(&conv2d_transpose(&d, &k("l1.P"), 2, Padding::Zero, 9, 9).unwrap())
        .unwrap();
    let up = b("l1.up1.eta", &f1.sub(&conv(&corrected, &k("l1.A"), 1)).unwrap());
    let expect = corrected.add(&up).unwrap();
    assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
}

#[test]
fn v_cycle_without_correction_returns_the_down_sweep_iterate() {
    let mut cfg = MgNetConfig::new(3, 2, 2, 2, 1, 2);
    cfg.nu_up = vec![0, 0, 0];
    let mut net = MgNet::<f64>::new(cfg, 31).unwrap();
    randomize(&mut net, 32);
    zero_param(&mut net, "l1.P.w");
    zero_param(&mut net, "l2.P.w");
    let (out, trace) = net.forward(&image(9, 1, 33)).unwrap();
    assert_eq!(out.max_abs_diff(trace.level_output(1)).unwrap(), 0.0);
}

#[test]
fn v_cycle_output_does_not_depend_on_pi() {
    // with a linear A the coarse residuals, hence u^(l+1) - u^(l+1,0), are
    // independent of the initial coarse feature
    let mut cfg = MgNetConfig::new(3, 2, 3, 3, 1, 2);
    cfg.nu_up = vec![1, 1, 0];
    cfg.use_batchnorm = true;
    let mut net = MgNet::<f64>::new(cfg, 61).unwrap();
    randomize(&mut net, 62);
    let f = image(9, 1, 63);
    let (a, _) = net.forward(&f).unwrap();
    for l in 1..3 {
        let n = net.params().get(&format!("l{l}.pi.w")).unwrap().len();
        let other = Tensor::<f64>::random_normal(1, n, 1, 1.0, &mut seeded(64 + l as u64)).into_vec();
        net.params_mut().set(&format!("l{l}.pi.w"), other).unwrap();
    }
    let (b, _) = net.forward(&f).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn v_cycle_with_zero_weights_outputs_zero() {
    let mut cfg = MgNetConfig::new(2, 1, 2, 2, 1, 2);
    cfg.nu_up = vec![1, 1];
    let mut net = MgNet::<f64>::new(cfg, 1).unwrap();
    let names: Vec<String> = net.params().iter().map(|(n, _, _)| n.to_string()).collect();
    for n in &names {
        zero_param(&mut net, n);
    }
    let (out, _) = net.forward(&image(8, 1, 2)).unwrap();
    assert_eq!(out.max_abs(), 0.0);
}

fn shared_copy(base: &MgNet<f64>, smoothing: Smoothing) -> MgNet<f64> {
    let mut cfg = base.config().clone();
    cfg.smoothing = smoothing;
    let mut net = MgNet::new(cfg, 999).unwrap();
    for (name, value, _) in base.params().iter() {
        net.params_mut().set(name, value.data().to_vec()).unwrap();
    }
    net
}

#[test]
fn degenerate_variants_reproduce_single_step_bitwise() {
    for (bn, extractor) in [
        (false, ExtractorStrategy::Variable),
        (true, ExtractorStrategy::Variable),
        (false, ExtractorStrategy::Scaled),
    ] {
        let mut cfg = MgNetConfig::new(3, 3, 3, 3, 1, 2);
        cfg.use_batchnorm = bn;
        cfg.extractor = extractor;
        let mut base = MgNet::<f64>::new(cfg, 41).unwrap();
        randomize(&mut base, 42);
        let f = image(9, 1, 43);
        let (_, reference) = base.forward(&f).unwrap();

        let mut multi = shared_copy(&base, Smoothing::MultiStep);
        multi.set_multistep_degenerate().unwrap();
        let cheb = shared_copy(&base, Smoothing::ChebyshevSemi);
        for net in [&multi, &cheb] {
            let (_, trace) = net.forward(&f).unwrap();
            for (a, b) in trace.u.iter().flatten().zip(reference.u.iter().flatten()) {
                assert_eq!(a.as_slice(), b.as_slice());
            }
            for (a, b) in trace.f.iter().zip(&reference.f) {
                assert_eq!(a.as_slice(), b.as_slice());
            }
        }
    }
}

#[test]
fn non_degenerate_variants_differ() {
    let mut base = MgNet::<f64>::new(MgNetConfig::new(2, 3, 2, 2, 1, 2), 5).unwrap();
    randomize(&mut base, 6);
    let f = image(8, 1, 7);
    let (u_single, _) = base.forward(&f).unwrap();
    let mut cheb = shared_copy(&base, Smoothing::ChebyshevSemi);
    cheb.params_mut().set("l1.omega2", vec![0.5]).unwrap();
    let (u_cheb, _) = cheb.forward(&f).unwrap();
    assert!(u_cheb.max_abs_diff(&u_single).unwrap() > 1e-6);
    let multi = shared_copy(&base, Smoothing::MultiStep);
    let (u_multi, _) = multi.forward(&f).unwrap();
    assert!(u_multi.max_abs_diff(&u_single).unwrap() > 1e-6);
}

#[test]
fn multistep_weights_must_lie_on_the_simplex() {
    let mut cfg = MgNetConfig::new(1, 2, 2, 2, 1, 2);
    cfg.smoothing = Smoothing::MultiStep;
    let mut net = MgNet::<f64>::new(cfg, 1).unwrap();
    assert!(net.set_multistep_weights(1, 2, &[0.7, 0.7]).is_err());
    assert!(net.set_multistep_weights(1, 2, &[-0.5, 1.5]).is_err());
    net.set_multistep_weights(1, 2, &[0.25, 0.75]).unwrap();
    let logits = net.params().get("l1.step2.logits").unwrap().data().to_vec();
    let w = mgnet::softmax(&logits);
    assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
}

#[test]
fn classifier_outputs_a_distribution() {
    let cfg = MgNetConfig::new(2, 1, 4, 4, 1, 5);
    let mut net = MgNet::<f64>::new(cfg, 8).unwrap();
    let p = net.classify(&image(4, 4, 1)).unwrap();
    assert_eq!(p.len(), 5);
    assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);

    let p = net.classify(&Tensor::zeros(4, 4, 4)).unwrap();
    assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert_eq!(mgnet::argmax(&p), 0);

    zero_param(&mut net, "head.w");
    let p = net.classify(&image(4, 4, 2)).unwrap();
    assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert!(net.classify(&Tensor::zeros(4, 4, 3)).is_err());
}

#[test]
fn batched_probabilities_agree_with_single_sample_path() {
    let cfg = MgNetConfig::new(2, 2, 3, 3, 1, 3);
    let mut net = MgNet::<f64>::new(cfg, 2).unwrap();
    randomize(&mut net, 3);
    let imgs: Vec<Tensor<f64>> = (0..3).map(|s| image(8, 1, 50 + s)).collect();
    let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
    let batched = net.predict_proba(&refs).unwrap();
    for (img, probs) in imgs.iter().zip(&batched) {
        let (u, _) = net.forward(img).unwrap();
        let single = net.classify(&u).unwrap();
        for (a, b) in single.iter().zip(probs) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

fn identity_f_in(in_channels: usize, f_in: FInit) -> MgNet<f64> {
    let mut cfg = MgNetConfig::new(1, 1, in_channels, in_channels, in_channels, 2);
    cfg.f_in = f_in;
    let mut net = MgNet::<f64>::new(cfg, 0).unwrap();
    let id = ConvKernel::<f64>::identity(1, in_channels);
    net.params_mut().set("theta0.w", id.weights().to_vec()).unwrap();
    net
}

#[test]
fn f_in_examples() {
    let net = identity_f_in(2, FInit::ConvRelu);
    let pos = image(5, 2, 1).map(f64::abs);
    assert_eq!(net.f_in(&pos).unwrap(), pos);
    let mixed = image(5, 2, 2);
    assert_eq!(net.f_in(&mixed).unwrap(), relu(&mixed));

    let pooled = identity_f_in(1, FInit::ConvReluMaxpool);
    for n in [7, 8] {
        let y = pooled.f_in(&image(n, 1, 3)).unwrap();
        assert_eq!(y.shape(), (n.div_ceil(2), n.div_ceil(2), 1));
    }
}

#[test]
fn f_in_is_positively_homogeneous_without_bias() {
    let mut net = MgNet::<f64>::new(MgNetConfig::new(1, 1, 3, 3, 2, 2), 1).unwrap();
    let f = image(6, 2, 4);
    let lambda = 2.5;
    let a = net.f_in(&f.scale(lambda)).unwrap();
    let b = net.f_in(&f).unwrap().scale(lambda);
    assert!(a.max_abs_diff(&b).unwrap() < 1e-13);
    net.params_mut().set("theta0.b", vec![0.3, -0.1, 0.2]).unwrap();
    let a = net.f_in(&f.scale(lambda)).unwrap();
    let b = net.f_in(&f).unwrap().scale(lambda);
    assert!(a.max_abs_diff(&b).unwrap() > 1e-3);
}

#[test]
fn cifar_shape_walk() {
    let mut cfg = MgNetConfig::new(5, 1, 2, 2, 3, 10);
    cfg.use_batchnorm = true;
    let net = MgNet::<f64>::new(cfg, 1).unwrap();
    let (_, trace) = net.forward(&image(32, 3, 1)).unwrap();
    let sizes: Vec<usize> = trace.f.iter().map(Tensor::height).collect();
    assert_eq!(sizes, [32, 16, 8, 4, 2]);
}

#[test]
fn wrong_input_channels_are_reported() {
    let net = MgNet::<f64>::new(MgNetConfig::new(2, 1, 2, 2, 3, 2), 1).unwrap();
    let err = net.forward(&image(8, 1, 1)).unwrap_err();
    assert!(err.to_string().contains("channels"));
}

fn grad_check(bn: bool, smoothing: Smoothing, nu_up: Vec<usize>) -> f64 {
    let mut cfg = MgNetConfig::new(2, 2, 4, 4, 1, 3);
    if !nu_up.is_empty() {
        // the V-cycle output does not depend on Pi (see below), so its
        // gradient is zero and the relative error would only measure noise
        cfg.pi = PiVariant::Pi0;
    }
    cfg.use_batchnorm = bn;
    cfg.smoothing = smoothing;
    cfg.nu_up = nu_up;
    let mut net = MgNet::<f64>::new(cfg, 1).unwrap();
    let head = Tensor::<f64>::random_normal(1, 12, 1, 0.5, &mut seeded(2)).into_vec();
    net.params_mut().set("head.w", head).unwrap();
    if smoothing != Smoothing::SingleStep {
        for (name, v) in [("l1.omega2", vec![0.7]), ("l1.step2.logits", vec![0.3, -0.2])] {
            if net.params().contains(name) {
                net.params_mut().set(name, v).unwrap();
            }
        }
    }
    let mut rng = seeded(5);
    let imgs: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::random_normal(8, 8, 1, 1.0, &mut rng)).collect();
    let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
    let batch = Array::batch(&refs).unwrap();
    let params: Vec<(String, Array<f64>)> = net
        .params()
        .trainable()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    let mode = if bn { Mode::Train } else { Mode::Eval };
    let report = finite_diff_check(&params, |p, tape| {
        let mut probe = net.clone();
        for (name, v) in p {
            probe.params_mut().set(name, v.data().to_vec())?;
        }
        Ok(probe.record_loss(tape, batch.clone(), &[0, 1, 2, 1], mode)?.0)
    })
    .unwrap();
    assert_eq!(report.groups.len(), params.len());
    report.worst_relative_error
}

#[test]
fn gradients_match_finite_differences() {
    assert!(grad_check(false, Smoothing::SingleStep, vec![]) < 1e-5);
    assert!(grad_check(true, Smoothing::SingleStep, vec![]) < 1e-4);
    assert!(grad_check(false, Smoothing::ChebyshevSemi, vec![]) < 1e-5);
    assert!(grad_check(false, Smoothing::MultiStep, vec![]) < 1e-5);
    assert!(grad_check(false, Smoothing::SingleStep, vec![1, 0]) < 1e-5);
}

#[test]
fn recording_is_deterministic() {
    let cfg = MgNetConfig::new(2, 2, 3, 3, 1, 2);
    let a = MgNet::<f64>::new(cfg.clone(), 7).unwrap();
    let b = MgNet::<f64>::new(cfg, 7).unwrap();
    assert_eq!(a, b);
    let batch = Array::batch(&[&image(8, 1, 1), &image(8, 1, 2)]).unwrap();
    let mut tape = Tape::new();
    let (loss, _) = a.record_loss(&mut tape, batch, &[0, 1], Mode::Eval).unwrap();
    assert!(tape.replay_matches().unwrap());
    assert!(tape.value(loss).data()[0].is_finite());
}

#[test]
fn running_statistics_follow_the_batch() {
    let mut cfg = MgNetConfig::new(1, 1, 2, 2, 1, 2);
    cfg.use_batchnorm = true;
    let mut net = MgNet::<f64>::new(cfg, 3).unwrap();
    let batch = Array::batch(&[&image(4, 1, 1), &image(4, 1, 2)]).unwrap();
    let mut tape = Tape::new();
    let (_, out) = net.record_loss(&mut tape, batch, &[0, 1], Mode::Train).unwrap();
    let (mean, var) = tape.batch_stats(out.batch_norms[0].1).unwrap();
    let (mean, var) = (mean.to_vec(), var.to_vec());
    net.update_running_stats(&tape, &out.batch_norms).unwrap();
    let run_mean = net.params().get("theta0.bn.mean").unwrap().data();
    let run_var = net.params().get("theta0.bn.var").unwrap().data();
    let n = 2.0 * 16.0;
    for c in 0..2 {
        assert!((run_mean[c] - 0.1 * mean[c]).abs() < 1e-15);
        assert!((run_var[c] - (0.9 + 0.1 * var[c] * n / (n - 1.0))).abs() < 1e-14);
    }
}

#[test]
fn initial_loss_is_near_uniform_guess() {
    let cfg = MgNetConfig::new(3, 2, 16, 16, 3, 10);
    let net = MgNet::<f64>::new(cfg, 1).unwrap();
    let imgs: Vec<Tensor<f64>> = (0..8).map(|s| image(16, 3, s)).collect();
    let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
    let mut tape = Tape::new();
    let labels: Vec<usize> = (0..8).collect();
    let (loss, _) = net
        .record_loss(&mut tape, Array::batch(&refs).unwrap(), &labels, Mode::Eval)
        .unwrap();
    let loss = tape.value(loss).data()[0];
    println!("initial loss {loss}");
    assert!((loss - 10f64.ln()).abs() < 0.1, "{loss}");
}
