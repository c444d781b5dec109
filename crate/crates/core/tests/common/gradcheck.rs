//! Central finite-difference checks shared by the gradient and acceptance
//! suites. Each `*_gradients` function panics on the first mismatch.

use periscope::network::{Model, NetworkConfig};
use periscope::tensor::{Graph, RunningStats, Tensor, Var};
use periscope::training::{berhu_loss_pinned, berhu_pinned};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, for kinked ops.
fn random_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Builds `op` on fresh leaves, reduces with a fixed random projection and
/// compares the analytic gradient of every input element with central
/// differences.
fn check<F>(name: &str, inputs: &[Tensor], op: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut proj: Option<Tensor> = None;
    let mut eval = |ins: &[Tensor], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let y = op(&mut g, &vars);
        let p = proj
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                random(g.value(y).shape(), &mut rng)
            })
            .clone();
        let pv = g.leaf(p);
        let prod = g.mul(y, pv).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        if !want_grad {
            return (value, Vec::new());
        }
        g.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
            })
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
            let e = rel_err(analytic[i][j], numeric);
            worst = worst.max(e);
            assert!(
                e < TOL,
                "{name}: input {i} element {j}: analytic {} numeric {numeric}",
                analytic[i][j]
            );
        }
    }
    worst
}

pub fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    check("conv3x3", &[x.clone(), w.clone(), b.clone()], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()
    });
    check("conv3x3 stride 2", &[x.clone(), w, b], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
    });
    let w1 = random(&[2, 3, 1, 1], &mut rng);
    check("conv1x1", &[x, w1], |g, v| {
        g.conv2d(v[0], v[1], None, 1, 0).unwrap()
    });
}

pub fn maxpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 4, 8, 8], &mut rng);
    check("maxpool2", &[x.clone()], |g, v| {
        g.maxpool2d(v[0], 2, 2).unwrap()
    });
    check("maxpool4", &[x], |g, v| g.maxpool2d(v[0], 4, 4).unwrap());
}

pub fn upsample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 4, 4, 4], &mut rng);
    check("upsample2", &[x.clone()], |g, v| {
        g.upsample_bilinear(v[0], 2).unwrap()
    });
    check("upsample4", &[x], |g, v| {
        g.upsample_bilinear(v[0], 4).unwrap()
    });
}

pub fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 4, 8, 8], &mut rng);
    let gamma = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    check(
        "batchnorm train",
        &[x.clone(), gamma.clone(), beta.clone()],
        |g, v| {
            let mut s = RunningStats::new(4);
            g.batchnorm(v[0], v[1], v[2], &mut s, true).unwrap()
        },
    );
    let mut stats = RunningStats::new(4);
    for (i, (m, var)) in stats.mean.iter_mut().zip(stats.var.iter_mut()).enumerate() {
        *m = 0.1 * i as f64;
        *var = 0.5 + i as f64;
    }
    check("batchnorm eval", &[x, gamma, beta], |g, v| {
        let mut s = stats.clone();
        g.batchnorm(v[0], v[1], v[2], &mut s, false).unwrap()
    });
}

pub fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_away_from_zero(&[2, 4, 8, 8], &mut rng);
    check("relu", &[x.clone()], |g, v| g.relu(v[0]));
    check("sigmoid", &[x.clone()], |g, v| g.sigmoid(v[0]));
    check("dropout", &[x], |g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        g.dropout(v[0], 0.5, true, &mut r).unwrap()
    });
}

pub fn concat_sum_mul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 2, 8, 8], &mut rng);
    let b = random(&[2, 3, 8, 8], &mut rng);
    check("weighted_concat", &[a.clone(), b], |g, v| {
        g.weighted_concat(&[(v[0], 0.2), (v[1], 0.8)]).unwrap()
    });
    let c = random(&[2, 2, 8, 8], &mut rng);
    check("mul", &[a.clone(), c], |g, v| g.mul(v[0], v[1]).unwrap());
    check("sum", &[a], |g, v| g.sum(v[0]));
}

pub fn berhu_gradient_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let target = random(&[2, 1, 8, 8], &mut rng);
    let mut pred = random(&[2, 1, 8, 8], &mut rng);
    let c = 0.3;
    // keep every error at least 0.01 away from +-c and from 0
    for (p, t) in pred.data_mut().iter_mut().zip(target.data()) {
        let x = *p - t;
        if (x.abs() - c).abs() < 0.01 || x.abs() < 0.01 {
            *p += 0.05;
        }
    }
    let (_, analytic) = berhu_pinned(&pred, &target, c).unwrap();
    for j in 0..pred.numel() {
        let mut plus = pred.clone();
        plus.data_mut()[j] += H;
        let mut minus = pred.clone();
        minus.data_mut()[j] -= H;
        let numeric = (berhu_pinned(&plus, &target, c).unwrap().0
            - berhu_pinned(&minus, &target, c).unwrap().0)
            / (2.0 * H);
        assert!(rel_err(analytic[j], numeric) < TOL, "element {j}");
    }
    // chained through the graph as well
    check("berhu", &[pred], |g, v| {
        berhu_loss_pinned(g, v[0], &target, c).unwrap()
    });
}

pub fn berhu_one_sided_derivatives_at_kink() {
    let c = 0.4;
    for x in [c, -c] {
        let target = Tensor::new(vec![1, 1, 1, 1], vec![0.0]).unwrap();
        let at = |d: f64| {
            let p = Tensor::new(vec![1, 1, 1, 1], vec![x + d]).unwrap();
            berhu_pinned(&p, &target, c).unwrap().0
        };
        let right = (at(H) - at(0.0)) / H;
        let left = (at(0.0) - at(-H)) / H;
        assert!((right - x.signum()).abs() < 1e-4, "right {right}");
        assert!((left - x.signum()).abs() < 1e-4, "left {left}");
    }
}

/// Returns the worst relative error over 20 random parameters.
pub fn network_end_to_end_spot_check() -> f64 {
    let cfg = NetworkConfig {
        base_channels: 2,
        input_resolution: 64,
        ..NetworkConfig::default()
    };
    let mut model = Model::build(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = random(&[1, 1, 64, 64], &mut rng);
    let mut target = random(&[1, 1, 64, 64], &mut rng);
    for v in target.data_mut() {
        *v = 0.5 + 0.4 * *v;
    }
    let c = 0.1;

    let loss_of = |m: &mut Model, grads: bool| -> f64 {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let pass = m.forward(&mut g, &input, true, &mut r).unwrap();
        let loss = berhu_loss_pinned(&mut g, pass.output, &target, c).unwrap();
        let value = g.value(loss).item();
        if grads {
            g.backward(loss).unwrap();
            m.absorb_grads(&mut g, &pass);
        }
        value
    };
    loss_of(&mut model, true);
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad().unwrap().to_vec())
        .collect();

    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut picked = 0;
    let mut worst: f64 = 0.0;
    while picked < 20 {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let a = analytic[t][flat];
        // ReLU and max-pool kinks are dense at full resolution, so a fixed
        // step may straddle one. Use the step whose one-sided differences
        // agree best: too large crosses kinks, too small drowns in roundoff.
        let orig = model.params()[t].data()[flat];
        let eval_at = |m: &mut Model, v: f64| {
            m.params_mut()[t].data_mut()[flat] = v;
            loss_of(m, false)
        };
        let l0 = eval_at(&mut model, orig);
        let mut best = (f64::INFINITY, 0.0);
        for h in [1e-5, 1e-6, 1e-7, 1e-8] {
            let lp = eval_at(&mut model, orig + h);
            let lm = eval_at(&mut model, orig - h);
            let asym = ((lp - l0) / h - (l0 - lm) / h).abs();
            if asym < best.0 {
                best = (asym, (lp - lm) / (2.0 * h));
            }
        }
        eval_at(&mut model, orig);
        let numeric = best.1;
        if a.abs() < 1e-9 && numeric.abs() < 1e-9 {
            // parameter has no influence (e.g. dropped channel); still counts
            picked += 1;
            continue;
        }
        let e = rel_err(a, numeric);
        worst = worst.max(e);
        assert!(
            e < 1e-3,
            "param {t}[{flat}]: analytic {a} numeric {numeric}"
        );
        picked += 1;
    }
    worst
}
