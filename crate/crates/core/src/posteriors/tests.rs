use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::error::Error;
use crate::nn::ParamSet;
use crate::scalar::softplus_inverse;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss<'t>(tape: &'t Tape<f64>, mean: &[f64], sigma: &[f64]) -> GaussianPosterior<'t, f64> {
    let rho: Vec<f64> = sigma.iter().map(|&s| softplus_inverse(s - 1e-4)).collect();
    GaussianPosterior::from_hyper(
        tape.constant(Tensor::vector(mean.to_vec())),
        tape.constant(Tensor::zeros([mean.len()])),
        tape.constant(Tensor::vector(rho)),
    )
    .unwrap()
}

#[test]
fn floor_sigma_samples_sit_on_the_mean() {
    let tape = Tape::<f64>::new();
    let q = GaussianPosterior::from_hyper(
        tape.constant(Tensor::vector(vec![0.3, -2.0, 1.0])),
        tape.constant(Tensor::vector(vec![0.1, 0.0, 0.0])),
        tape.constant(Tensor::full([3], -60.0)),
    )
    .unwrap();
    assert!(q.sigma.value().data().iter().all(|&s| (s - 1e-4).abs() < 1e-15));
    let s = q.sample(&mut rng(0), 100).unwrap().value();
    for row in s.data().chunks(3) {
        for (a, b) in row.iter().zip([0.4, -2.0, 1.0]) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}

#[test]
fn sample_mean_obeys_clt() {
    let tape = Tape::new();
    let (mean, sigma) = ([0.5, -1.0, 2.0], [0.3, 1.5, 0.05]);
    let q = gauss(&tape, &mean, &sigma);
    let n = 100_000;
    let s = q.sample(&mut rng(1), n).unwrap().value();
    for j in 0..3 {
        let m: f64 = (0..n).map(|i| s.data()[i * 3 + j]).sum::<f64>() / n as f64;
        assert!((m - mean[j]).abs() < 4.0 * sigma[j] / (n as f64).sqrt(), "coord {j}: {m}");
    }
}

#[test]
fn sampling_is_reproducible() {
    let tape = Tape::new();
    let q = gauss(&tape, &[0.0, 1.0], &[1.0, 0.5]);
    let a = q.sample(&mut rng(7), 4).unwrap().value();
    let b = q.sample(&mut rng(7), 4).unwrap().value();
    assert_eq!(a, b);
}

#[test]
fn kl_of_prior_is_zero() {
    let tape = Tape::new();
    let kl = gauss(&tape, &[0.0; 4], &[1.0; 4]).kl().unwrap().item();
    assert!(kl.abs() < 1e-12, "{kl}");
}

/// Monte Carlo `E_q[log q − log p]` with its standard error.
fn mc_kl(mean: &[f64], sigma: &[f64], n: usize, seed: u64) -> (f64, f64) {
    let eps: Tensor<f64> = standard_normal(&mut rng(seed), &[n, mean.len()]);
    let mut sum = 0.0;
    let mut sq = 0.0;
    for row in eps.data().chunks(mean.len()) {
        let mut v = 0.0;
        for ((e, m), s) in row.iter().zip(mean).zip(sigma) {
            let x = m + s * e;
            v += -0.5 * e * e - s.ln() + 0.5 * x * x;
        }
        sum += v;
        sq += v * v;
    }
    let m = sum / n as f64;
    let var = (sq / n as f64 - m * m) * n as f64 / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

#[test]
fn kl_unit_shift_is_half() {
    let tape = Tape::new();
    let kl = gauss(&tape, &[1.0], &[1.0]).kl().unwrap().item();
    assert!((kl - 0.5).abs() < 1e-12);
    let (m, se) = mc_kl(&[1.0], &[1.0], 1_000_000, 3);
    assert!((m - kl).abs() < 3.0 * se, "{m} ± {se}");
}

#[test]
fn kl_matches_monte_carlo_on_random_posteriors() {
    use rand::Rng;
    let mut r = rng(4);
    for k in 0..5 {
        let d = r.random_range(1..6);
        let mean: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| r.random_range(0.1..2.0)).collect();
        let tape = Tape::new();
        let kl = gauss(&tape, &mean, &sigma).kl().unwrap().item();
        let (m, se) = mc_kl(&mean, &sigma, 200_000, 100 + k);
        assert!((m - kl).abs() < 3.0 * se, "{m} ± {se} vs {kl}");
    }
}

/// Random dynamics parameters; `scale` multiplies every tensor.
fn eta(dim: usize, c_dim: usize, hidden: usize, scale: f64, seed: u64) -> ParamSet<f64> {
    let spec = FlowSpec {
        hidden,
        ..FlowSpec::default()
    };
    spec.init(dim, c_dim, &mut rng(seed))
        .unwrap()
        .map(|t| t.map(|v| v * scale))
}

fn cond(c_dim: usize) -> Tensor<f64> {
    Tensor::vector((0..c_dim).map(|i| (i as f64 * 0.7).sin()).collect())
}

#[test]
fn zero_parameters_give_zero_dynamics() {
    for mode in [TraceMode::Exact, TraceMode::Analytic, TraceMode::Hutchinson] {
        let tape = Tape::new();
        let p = eta(3, 2, 5, 0.0, 0).bind(&tape);
        let probe = rademacher(&mut rng(0), &[2, 3]);
        let net = FlowNet::new(&p, tape.constant(cond(2)), mode, Some(probe)).unwrap();
        let z = tape.constant(Tensor::from_f64([2, 3], &[1., 2., 3., -1., 0.5, 0.]).unwrap());
        let (dz, tr) = net.eval(z, 0.3).unwrap();
        assert!(dz.value().data().iter().all(|&v| v == 0.0));
        assert!(tr.value().data().iter().all(|&v| v == 0.0));
        let fwd = cnf_forward(&net, z, 8).unwrap();
        assert_eq!(fwd.output.value(), z.value());
        assert!(fwd.logdet.value().data().iter().all(|&v| v == 0.0));
        let inv = cnf_inverse(&net, z, 8).unwrap();
        assert_eq!(inv.output.value(), z.value());
    }
}

#[test]
fn linear_dynamics_match_analytic_solution() {
    let tape = Tape::<f64>::new();
    let a: f64 = 0.7;
    let dynamics = LinearDynamics { a };
    let z0 = Tensor::from_f64([2, 3], &[1., -2., 0.5, 3., 0.1, -1.]).unwrap();
    let (_, tr) = dynamics.eval(tape.constant(z0.clone()), 0.0).unwrap();
    assert_eq!(tr.value().data(), &[a * 3.0; 2]);
    let out = cnf_forward(&dynamics, tape.constant(z0.clone()), 32).unwrap();
    for (o, z) in out.output.value().data().iter().zip(z0.data()) {
        assert!((o - z * a.exp()).abs() < 1e-6);
    }
    for &l in out.logdet.value().data() {
        assert!((l - a * 3.0).abs() < 1e-6);
    }
}

#[test]
fn analytic_and_exact_traces_agree_with_finite_differences() {
    let (d, c_dim) = (4, 3);
    let params = eta(d, c_dim, 6, 1.5, 1);
    let z0 = Tensor::from_f64([2, d], &[0.3, -0.2, 0.8, 0.1, -1.0, 0.4, 0.0, 0.6]).unwrap();
    let t = 0.37;
    let run = |mode| {
        let tape = Tape::new();
        let net = FlowNet::new(&params.bind(&tape), tape.constant(cond(c_dim)), mode, None).unwrap();
        let (dz, tr) = net.eval(tape.constant(z0.clone()), t).unwrap();
        (dz.value(), tr.value())
    };
    let (dz_e, tr_e) = run(TraceMode::Exact);
    let (dz_a, tr_a) = run(TraceMode::Analytic);
    for (a, b) in dz_e.data().iter().zip(dz_a.data()) {
        assert!((a - b).abs() < 1e-14);
    }
    for (a, b) in tr_e.data().iter().zip(tr_a.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // Diagonal of the Jacobian by central differences.
    let h = 1e-6;
    for row in 0..2 {
        let mut fd = 0.0;
        for j in 0..d {
            let eval_at = |delta: f64| {
                let mut z = z0.to_vec();
                z[row * d + j] += delta;
                let tape = Tape::new();
                let net =
                    FlowNet::new(&params.bind(&tape), tape.constant(cond(c_dim)), TraceMode::Analytic, None).unwrap();
                let (dz, _) = net.eval(tape.constant(Tensor::new([2, d], z).unwrap()), t).unwrap();
                dz.value().data()[row * d + j]
            };
            fd += (eval_at(h) - eval_at(-h)) / (2.0 * h);
        }
        assert!((fd - tr_e.data()[row]).abs() < 1e-6);
    }
}

#[test]
fn hutchinson_mean_matches_exact_trace() {
    let (d, c_dim) = (5, 2);
    let params = eta(d, c_dim, 8, 1.5, 2);
    let tape = Tape::new();
    let p = params.bind(&tape);
    let z = Tensor::from_f64([1, d], &[0.2, -0.4, 0.9, 0.0, 0.3]).unwrap();
    let exact = FlowNet::new(&p, tape.constant(cond(c_dim)), TraceMode::Exact, None)
        .unwrap()
        .eval(tape.constant(z.clone()), 0.5)
        .unwrap()
        .1
        .item();
    // Many probes evaluated as one batch of repeated rows.
    let n = 10_000;
    let zs = Tensor::new([n, d], z.data().repeat(n)).unwrap();
    let probe = rademacher(&mut rng(3), &[n, d]);
    let est = FlowNet::new(&p, tape.constant(cond(c_dim)), TraceMode::Hutchinson, Some(probe))
        .unwrap()
        .eval(tape.constant(zs), 0.5)
        .unwrap()
        .1
        .value();
    let m = est.sum() / n as f64;
    let var = est.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((m - exact).abs() < 3.0 * se, "{m} ± {se} vs {exact}");
}

#[test]
fn forward_inverse_roundtrip() {
    let (d, c_dim) = (6, 3);
    let params = eta(d, c_dim, 16, 2.0, 5);
    let tape = Tape::new();
    let net = FlowNet::new(&params.bind(&tape), tape.constant(cond(c_dim)), TraceMode::Exact, None).unwrap();
    let z0: Tensor<f64> = standard_normal(&mut rng(6), &[3, d]);
    let fwd = cnf_forward(&net, tape.constant(z0.clone()), 32).unwrap();
    assert!(fwd.output.value().zip_with(&z0, "t", |a, b| (a - b).abs()).unwrap().max_abs() > 1e-2);
    let inv = cnf_inverse(&net, fwd.output, 32).unwrap();
    let err = inv.output.value().zip_with(&z0, "t", |a, b| a - b).unwrap().max_abs();
    assert!(err < 1e-4, "{err}");
    let anti = fwd.logdet.value().zip_with(&inv.logdet.value(), "t", |a, b| a + b).unwrap().max_abs();
    assert!(anti < 1e-4, "{anti}");
}

#[test]
fn halving_the_step_changes_little() {
    let (d, c_dim) = (4, 2);
    let params = eta(d, c_dim, 16, 1.0, 8);
    let z0: Tensor<f64> = standard_normal(&mut rng(9), &[2, d]);
    let run = |steps| {
        let tape = Tape::new();
        let net = FlowNet::new(&params.bind(&tape), tape.constant(cond(c_dim)), TraceMode::Analytic, None).unwrap();
        cnf_forward(&net, tape.constant(z0.clone()), steps).unwrap().output.value()
    };
    let diff = run(32).zip_with(&run(64), "t", |a, b| a - b).unwrap().max_abs();
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn blowup_reports_step() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::from_f64([1, 2], &[1e10, 1e10]).unwrap());
    match cnf_forward(&LinearDynamics { a: 1e5 }, z, 32) {
        Err(Error::Numerical { step, .. }) => assert!(step > 0 && step < 32),
        other => panic!("{other:?}"),
    }
}

#[test]
fn kl_is_zero_when_flow_posterior_equals_prior() {
    let tape = Tape::new();
    let eps: Tensor<f64> = standard_normal(&mut rng(10), &[50, 3]);
    let theta = tape.constant(Tensor::zeros([3]));
    let s = cnf_sample_and_kl(theta, &LinearDynamics { a: 0.0 }, 1.0, 8, &eps).unwrap();
    assert!(s.kl.item().abs() < 1e-12);
}

#[test]
fn kl_of_narrow_base_matches_closed_form() {
    let tape = Tape::new();
    let n = 200_000;
    let eps: Tensor<f64> = standard_normal(&mut rng(11), &[n, 1]);
    let theta = tape.constant(Tensor::zeros([1]));
    let s = cnf_sample_and_kl(theta, &LinearDynamics { a: 0.0 }, 0.1, 4, &eps).unwrap();
    let closed = 0.5 * (0.1 - 1.0 - 0.1f64.ln());
    assert!((closed - 0.7013).abs() < 1e-4);
    // Per-sample terms: ½ z²(1 − 1/t) − ½ ln t with z = √t·eps.
    let terms: Vec<f64> = eps.data().iter().map(|e| 0.5 * 0.1 * e * e * (1.0 - 10.0) - 0.5 * 0.1f64.ln()).collect();
    let m = terms.iter().sum::<f64>() / n as f64;
    assert!((m - s.kl.item()).abs() < 1e-9);
    let se = (terms.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
    assert!((s.kl.item() - closed).abs() < 3.0 * se, "{} ± {se}", s.kl.item());
}

#[test]
fn gaussian_and_flow_paths_are_reparameterized() {
    use crate::autodiff::grad_check;
    let eps: Tensor<f64> = standard_normal(&mut rng(12), &[3, 4]);
    let err = grad_check(
        |_, p| {
            let q = GaussianPosterior::from_hyper(p[0], p[1], p[2])?;
            q.sample_with(&eps)?.tanh().sum().add(q.kl()?)
        },
        &[
            Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]),
            Tensor::vector(vec![0.5, 0.1, -0.3, 0.2]),
            Tensor::vector(vec![-1.0, 0.0, 0.5, -3.0]),
        ],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let (d, c_dim) = (3, 2);
    let params = eta(d, c_dim, 4, 1.0, 13);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    tensors.push(cond(c_dim));
    tensors.push(Tensor::vector(vec![0.2, -0.1, 0.4]));
    let eps: Tensor<f64> = standard_normal(&mut rng(14), &[2, d]);
    for mode in [TraceMode::Exact, TraceMode::Analytic] {
        let err = grad_check(
            |_, p| {
                let k = names.len();
                let bound = crate::nn::Bound::from_vars(names.iter().cloned().zip(p[..k].iter().copied()));
                let net = FlowNet::new(&bound, p[k], mode, None)?;
                let s = cnf_sample_and_kl(p[k + 1], &net, 0.1, 4, &eps)?;
                s.theta.tanh().sum().add(s.kl)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{mode:?}: {err}");
    }
}

const QUAD_HALF_WIDTH: f64 = 4.0;
const QUAD_POINTS: usize = 240;

/// Flow density `q(δ)` and `log q(δ)` on a midpoint grid over the plane,
/// through the inverse flow. Returns `(δ, log q)` per grid cell.
fn flow_log_density_grid(params: &ParamSet<f64>, c: &Tensor<f64>, t_prior: f64) -> Vec<([f64; 2], f64)> {
    let h = 2.0 * QUAD_HALF_WIDTH / QUAD_POINTS as f64;
    let points: Vec<[f64; 2]> = (0..QUAD_POINTS * QUAD_POINTS)
        .map(|k| {
            let (i, j) = (k / QUAD_POINTS, k % QUAD_POINTS);
            [
                -QUAD_HALF_WIDTH + (i as f64 + 0.5) * h,
                -QUAD_HALF_WIDTH + (j as f64 + 0.5) * h,
            ]
        })
        .collect();
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(400) {
        let tape = Tape::new();
        let net = FlowNet::new(&params.bind_const(&tape), tape.constant(c.clone()), TraceMode::Analytic, None).unwrap();
        let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
        let delta = tape.constant(Tensor::new([chunk.len(), 2], flat).unwrap());
        let inv = cnf_inverse(&net, delta, 32).unwrap();
        let z = inv.output.value();
        let ld = inv.logdet.value();
        for (r, p) in chunk.iter().enumerate() {
            let (z0, z1) = (z.data()[2 * r], z.data()[2 * r + 1]);
            let log_base = -(z0 * z0 + z1 * z1) / (2.0 * t_prior) - (2.0 * std::f64::consts::PI * t_prior).ln();
            out.push((*p, log_base + ld.data()[r]));
        }
    }
    out
}

fn quad_flow() -> (ParamSet<f64>, Tensor<f64>) {
    (eta(2, 2, 12, 1.2, 21), cond(2))
}

#[test]
fn flow_density_integrates_to_one() {
    let (params, c) = quad_flow();
    let h = 2.0 * QUAD_HALF_WIDTH / QUAD_POINTS as f64;
    let grid = flow_log_density_grid(&params, &c, 0.1);
    let mass: f64 = grid.iter().map(|(_, lq)| lq.exp()).sum::<f64>() * h * h;
    assert!((mass - 1.0).abs() < 1e-2, "{mass}");
}

#[test]
fn flow_kl_estimator_matches_quadrature() {
    let (params, c) = quad_flow();
    let head = [0.3, -0.2];
    let t_prior = 0.1;
    let h = 2.0 * QUAD_HALF_WIDTH / QUAD_POINTS as f64;
    let log_prior = |x: [f64; 2]| -> f64 {
        let (a, b) = (x[0] + head[0], x[1] + head[1]);
        -(a * a + b * b) / 2.0 - (2.0 * std::f64::consts::PI).ln()
    };
    let quad: f64 = flow_log_density_grid(&params, &c, t_prior)
        .iter()
        .map(|&(p, lq)| lq.exp() * (lq - log_prior(p)))
        .sum::<f64>()
        * h
        * h;

    // The estimator averages its rows with equal weight, so a stratified
    // grid of base points (normal quantiles of cell midpoints) turns it
    // into a deterministic quasi-Monte Carlo integral.
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    let m = 200;
    let q: Vec<f64> = (0..m)
        .map(|i| statrs::distribution::ContinuousCDF::inverse_cdf(&normal, (i as f64 + 0.5) / m as f64))
        .collect();
    let eps_all: Vec<f64> = (0..m * m).flat_map(|k| [q[k / m], q[k % m]]).collect();
    let chunks: Vec<f64> = eps_all
        .chunks(2 * 400)
        .map(|e| {
            let tape = Tape::new();
            let net = FlowNet::new(&params.bind_const(&tape), tape.constant(c.clone()), TraceMode::Analytic, None).unwrap();
            let eps = Tensor::new([e.len() / 2, 2], e.to_vec()).unwrap();
            let s = cnf_sample_and_kl(tape.constant(Tensor::vector(head.to_vec())), &net, t_prior, 32, &eps).unwrap();
            s.kl.item()
        })
        .collect();
    let mc = chunks.iter().sum::<f64>() / chunks.len() as f64;
    assert!((quad - mc).abs() < 1e-2, "quadrature {quad} vs estimator {mc}");
}
