mod common;

use common::{grad_check, rng, uniform, GradCheck};
use mkpn::model::{forward_node, init_weights, ParamVars};
use mkpn::{Graph, ModelConfig, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_ok(name: &str, r: &GradCheck) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.worst < TOL, "{name}: worst relative error {:.3e}", r.worst);
}

/// Quadratic read-out against a fixed random target, so every output
/// coordinate carries a distinct non-zero sensitivity.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let target = uniform(&shape, -1.0, 1.0, &mut rng(seed));
    let t = g.constant(target).unwrap();
    let d = g.sub(y, t).unwrap();
    g.mean_square(d).unwrap()
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(10);
    let params = [
        uniform(&[4, 5, 2], -1.0, 1.0, &mut r),
        uniform(&[3, 3, 2, 3], -1.0, 1.0, &mut r),
        uniform(&[3], -1.0, 1.0, &mut r),
    ];
    let res = grad_check(&params, H, None, 0, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2]).unwrap();
        readout(g, y, 11)
    });
    assert_ok("conv2d", &res);
}

#[test]
fn pool_upsample_relu_gradients() {
    let mut r = rng(12);
    let params = [uniform(&[4, 6, 2], -1.0, 1.0, &mut r)];
    let res = grad_check(&params, H, None, 0, |g, v| {
        let p = g.avg_pool2(v[0]).unwrap();
        let u = g.upsample_bilinear2(p).unwrap();
        let y = g.relu(u).unwrap();
        readout(g, y, 13)
    });
    assert_ok("pool/upsample/relu", &res);
}

#[test]
fn concat_slice_channel_gradients() {
    let mut r = rng(14);
    let params = [uniform(&[3, 3, 2], -1.0, 1.0, &mut r), uniform(&[3, 3, 3], -1.0, 1.0, &mut r)];
    let res = grad_check(&params, H, None, 0, |g, v| {
        let c = g.concat_channels(v[0], v[1]).unwrap();
        let s = g.slice_channels(c, 1, 3).unwrap();
        let ch = g.channel(c, 4).unwrap();
        let a = readout(g, s, 15);
        let b = readout(g, ch, 16);
        g.weighted_sum(&[(a, 1.0), (b, 0.7)]).unwrap()
    });
    assert_ok("concat/slice/channel", &res);
}

#[test]
fn compose_and_local_conv_gradients() {
    let mut r = rng(17);
    let params = [
        uniform(&[5, 6], -1.0, 1.0, &mut r),
        uniform(&[5, 6, 3], -1.0, 1.0, &mut r),
        uniform(&[5, 6, 3], -1.0, 1.0, &mut r),
    ];
    let res = grad_check(&params, H, None, 0, |g, v| {
        let k = g.compose_2d(v[1], v[2]).unwrap();
        let y = g.local_conv(v[0], k).unwrap();
        readout(g, y, 18)
    });
    assert_ok("compose/local_conv", &res);
}

#[test]
fn loss_building_block_gradients() {
    let mut r = rng(19);
    let params = [uniform(&[6, 5], 0.0, 1.0, &mut r), uniform(&[6, 5], 0.0, 1.0, &mut r)];
    let res = grad_check(&params, H, None, 0, |g, v| {
        let d = g.sub(v[0], v[1]).unwrap();
        let gi = g.image_gradient(d).unwrap();
        let l1 = g.mean_abs(gi).unwrap();
        let a = g.add(v[0], v[1]).unwrap();
        let sc = g.scale(a, 0.3).unwrap();
        let ms = g.mean_square(sc).unwrap();
        let m = g.mean(&[v[0], v[1]]).unwrap();
        let s = g.sum(m).unwrap();
        g.weighted_sum(&[(l1, 0.5), (ms, 2.0), (s, 0.01)]).unwrap()
    });
    assert_ok("loss blocks", &res);
    assert!(res.skipped * 10 < res.checked, "too many kink crossings: {res:?}");
}

#[test]
fn tiny_network_gradients() {
    let config = ModelConfig::new(2, &[3], &[8, 16]).unwrap();
    let ckpt = init_weights::<f64>(&config, 5).unwrap();
    assert!(config.parameter_count() > 1000);
    let mut r = rng(20);
    let input = uniform(&[8, 8, 3], 0.0, 1.0, &mut r);
    let names: Vec<String> = ckpt.params.keys().cloned().collect();
    // Non-zero biases so every bias coordinate is exercised.
    let params: Vec<Tensor<f64>> = ckpt
        .params
        .values()
        .map(|t| {
            if t.ndim() == 1 {
                uniform(t.shape(), -0.1, 0.1, &mut r)
            } else {
                t.clone()
            }
        })
        .collect();
    let res = grad_check(&params, H, Some(12), 21, |g, v| {
        let p: ParamVars = names.iter().cloned().zip(v.iter().copied()).collect();
        let x = g.constant(input.clone()).unwrap();
        let y = forward_node(g, &config, &p, x).unwrap();
        assert!(g.value(y).data().iter().all(|u| u.is_finite()));
        readout(g, y, 22)
    });
    assert_ok("tiny network", &res);
    assert!(res.checked >= 100, "{res:?}");
}

#[test]
fn multi_size_total_loss_gradients() {
    use mkpn::corpus::procedural_corpus;
    use mkpn::synth::{make_burst, seeded_rng};
    use mkpn::train::{batch_gradients, batch_graph};
    use mkpn::{gain_preset, BurstSpec, Gain, LossSchedule};

    let config = ModelConfig::new(2, &[1, 3, 5], &[4, 8]).unwrap();
    let ckpt = init_weights::<f64>(&config, 8).unwrap();
    let spec = BurstSpec { burst_len: 2, patch: 16, poisson_lambda: 1.5 };
    let source = &procedural_corpus(1, spec.min_source(), 9)[0];
    let samples = [make_burst(source, &spec, &gain_preset(Gain::X2), &mut seeded_rng(10)).unwrap()];
    let schedule = LossSchedule::default();
    let eval = |ck: &mkpn::Checkpoint<f64>| {
        let b = batch_graph(ck, &samples, &schedule, false).unwrap();
        (b.graph.value(b.total).data()[0], b.graph.nonsmooth_pattern())
    };
    let base = eval(&ckpt).1;
    let grads = batch_gradients(&ckpt, &samples, &schedule).unwrap().grads;

    // The step-0 loss is about 150 (annealing dominates), so h = 1e-5 leaves
    // round-off near 3e-9 on gradients of order 1e-5. Away from kinks the loss
    // is piecewise quadratic along one coordinate, so a wider step is exact.
    let h = 1e-4;
    // Every coordinate of the head, a stride through the rest.
    let (mut checked, mut worst) = (0, 0.0f64);
    for (name, t) in &ckpt.params {
        let stride = if name.starts_with("head") { 1 } else { 37 };
        for i in (0..t.len()).step_by(stride) {
            let mut ck = ckpt.clone();
            let orig = t.data()[i];
            ck.params.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let (plus, pp) = eval(&ck);
            ck.params.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let (minus, pm) = eval(&ck);
            if pp != base || pm != base {
                continue;
            }
            let n = (plus - minus) / (2.0 * h);
            let a = grads[name].data()[i];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked >= 300, "{checked}");
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}
