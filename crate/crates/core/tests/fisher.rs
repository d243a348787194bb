use fastattrib::diffusion::{make_dataset, BlockSample, BlockSpec, DenoiserArch, DenoiserParams, NoiseSchedule};
use fastattrib::fisher::*;
use fastattrib::numerics::{cholesky_solve, sym_eigh, Matrix, Rng};
use fastattrib::Error;

fn tiny() -> (DenoiserParams, NoiseSchedule) {
    let arch = DenoiserArch {
        dim: 4,
        classes: 2,
        cond_dim: 2,
        time_dim: 2,
        hidden: vec![3],
    };
    let theta = DenoiserParams::init(&arch, &mut Rng::new(17));
    (theta, NoiseSchedule::linear(50, 1e-4, 0.05).unwrap())
}

fn all_blocks(theta: &DenoiserParams) -> Vec<String> {
    theta.arch.blocks().into_iter().map(|b| b.name).collect()
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
}

fn single_block_stream(d_out: usize, d_in: usize, samples: Vec<(Vec<f64>, Vec<f64>)>) -> SampleStream {
    SampleStream {
        blocks: vec![BlockSpec {
            name: "w".into(),
            d_out,
            d_in,
            offset: 0,
            cond_pathway: false,
        }],
        samples: samples.into_iter().map(|(a, g)| vec![BlockSample { a, g }]).collect(),
    }
}

/// Gradients `s_k · g aᵀ` with fixed `a`, `g`: the Kronecker factorization is exact.
fn rank_one_stream() -> SampleStream {
    let mut rng = Rng::new(3);
    let a = rng.normal_vec(5);
    let g = rng.normal_vec(4);
    let samples = (0..30)
        .map(|_| {
            let s = rng.normal();
            (a.iter().map(|x| s * x).collect(), g.clone())
        })
        .collect();
    single_block_stream(4, 5, samples)
}

fn general_stream(n: usize) -> SampleStream {
    let mut rng = Rng::new(8);
    let mix = Matrix::from_fn(4, 4, |_, _| rng.normal());
    let samples = (0..n)
        .map(|_| {
            let a = rng.normal_vec(5);
            // g correlated with a so that E[aaᵀ ⊗ ggᵀ] is not a Kronecker product
            let mut g = mix.matvec(&rng.normal_vec(4)).unwrap();
            g[0] += 2.0 * a[0] * a[1];
            g[2] *= 1.0 + a[3].abs();
            (a, g)
        })
        .collect();
    single_block_stream(4, 5, samples)
}

#[test]
fn single_sample_diag_is_squared_gradient() {
    let (theta, sched) = tiny();
    let data = make_dataset(2, 10, 4, 1).unwrap();
    let z = &data[5..6];
    let plan = FisherPlan::new(4, 1, 100);
    let fd = estimate_diag(&theta, z, &plan, &sched).unwrap();
    let d = &plan.draws_for(z[0].id, sched.steps(), 4)[0];
    let mut g = vec![0.0; theta.param_count()];
    theta
        .accumulate_grad(&z[0].x, z[0].c, d.t, &d.eps, &sched, &mut g, 1.0)
        .unwrap();
    let sq: Vec<f64> = g.iter().map(|x| x * x).collect();
    assert_eq!(fd.sample_count, 1);
    for (x, y) in fd.diag.iter().zip(&sq) {
        assert!((x - y).abs() <= 1e-14 * y.abs().max(1e-300), "{x} vs {y}");
    }
}

#[test]
fn duplicated_dataset_keeps_diag() {
    let (theta, sched) = tiny();
    let data = make_dataset(2, 10, 4, 1).unwrap();
    let doubled: Vec<_> = data.iter().chain(&data).cloned().collect();
    let plan = FisherPlan::new(9, 2, 1000);
    let a = estimate_diag(&theta, &data, &plan, &sched).unwrap();
    let b = estimate_diag(&theta, &doubled, &plan, &sched).unwrap();
    for (x, y) in a.diag.iter().zip(&b.diag) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
    }
}

#[test]
fn diag_equals_dense_diagonal_exactly() {
    let (theta, sched) = tiny();
    let data = make_dataset(2, 10, 4, 2).unwrap();
    let plan = FisherPlan::new(5, 1, 20);
    let names = all_blocks(&theta);
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let dense = brute_force_fisher(&theta, &data, &plan, &sched, &refs).unwrap();
    let diag = estimate_diag(&theta, &data, &plan, &sched).unwrap();
    assert_eq!(diag.sample_count, 20);
    for k in 0..diag.diag.len() {
        assert_eq!(diag.diag[k].to_bits(), dense[(k, k)].to_bits(), "entry {k}");
    }
    let trace: f64 = dense.trace();
    let sum: f64 = diag.diag.iter().sum();
    assert!((trace - sum).abs() <= 1e-12 * sum);
}

#[test]
fn dense_fisher_single_sample_and_psd() {
    let (theta, sched) = tiny();
    let data = make_dataset(2, 10, 4, 2).unwrap();
    let plan = FisherPlan::new(1, 1, 100);
    let z = &data[3..4];
    let f = brute_force_fisher(&theta, z, &plan, &sched, &["trunk.1"]).unwrap();
    let d = &plan.draws_for(z[0].id, sched.steps(), 4)[0];
    let mut g = vec![0.0; theta.param_count()];
    theta
        .accumulate_grad(&z[0].x, z[0].c, d.t, &d.eps, &sched, &mut g, 1.0)
        .unwrap();
    let block = theta.arch.blocks().into_iter().find(|b| b.name == "trunk.1").unwrap();
    let gb = &g[block.range()];
    assert!(rel(&f, &Matrix::outer(gb, gb)) < 1e-14);

    let names = all_blocks(&theta);
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let full = brute_force_fisher(&theta, &data, &FisherPlan::new(2, 3, 100), &sched, &refs).unwrap();
    assert!(full.asymmetry() == 0.0);
    let e = sym_eigh(&full).unwrap();
    assert!(e.values.iter().all(|&v| v >= -1e-10 * e.values[0]));
}

#[test]
fn dense_size_guard() {
    let arch = DenoiserArch {
        dim: 16,
        classes: 2,
        cond_dim: 2,
        time_dim: 4,
        hidden: vec![12],
    };
    let theta = DenoiserParams::init(&arch, &mut Rng::new(0));
    let sched = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
    let data = make_dataset(2, 10, 16, 0).unwrap();
    let err = brute_force_fisher(&theta, &data, &FisherPlan::new(0, 1, 5), &sched, &["trunk.0.main"]);
    assert!(matches!(err, Err(Error::Precondition(_))));
}

#[test]
fn kfac_single_sample_factors() {
    let a = vec![0.5, -1.0, 2.0];
    let g = vec![3.0, 0.25];
    let k = kfac_from_samples(&single_block_stream(2, 3, vec![(a.clone(), g.clone())])).unwrap();
    assert_eq!(k[0].a, Matrix::outer(&a, &a));
    assert_eq!(k[0].b, Matrix::outer(&g, &g));
}

#[test]
fn rank_one_kronecker_is_exact() {
    let s = rank_one_stream();
    let dense = dense_from_samples(&s, &["w"]).unwrap();
    let kfac = kfac_from_samples(&s).unwrap();
    let kron = kfac[0].a.kron(&kfac[0].b);
    assert!(rel(&kron, &dense) < 1e-8);

    let ekfac = ekfac_from_samples(&s, &kfac).unwrap();
    let blocks = s.blocks.clone();
    let fk = FisherApprox::from_kfac(blocks.clone(), &kfac, Some(0.0)).unwrap();
    let fe = FisherApprox::from_ekfac(blocks, ekfac, Some(0.0)).unwrap();
    assert!(rel(&fe.dense_block("w").unwrap(), &dense) < 1e-8);
    assert!(rel(&fk.dense_block("w").unwrap(), &dense) < 1e-8);

    let v = Rng::new(1).normal_vec(20);
    let dv = dense.matvec(&v).unwrap();
    for f in [&fk, &fe] {
        let got = f.vprod(&v).unwrap();
        let err: f64 = got.iter().zip(&dv).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = dv.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err / norm < 1e-8, "{:?} matvec rel err {}", f.kind, err / norm);
    }
}

#[test]
fn rank_one_inverse_matches_dense_solve() {
    let s = rank_one_stream();
    let dense = dense_from_samples(&s, &["w"]).unwrap();
    let kfac = kfac_from_samples(&s).unwrap();
    let ekfac = ekfac_from_samples(&s, &kfac).unwrap();
    let lambda = 0.05;
    let fe = FisherApprox::from_ekfac(s.blocks.clone(), ekfac, Some(lambda)).unwrap();
    let v = Rng::new(2).normal_vec(20);
    let damped = Matrix::from_fn(20, 20, |i, j| dense[(i, j)] + if i == j { lambda } else { 0.0 });
    let want = cholesky_solve(&damped, &v).unwrap();
    let got = fisher_inv_vprod(&fe, &v).unwrap();
    let err: f64 = got.iter().zip(&want).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = want.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(err / norm < 1e-6, "rel err {}", err / norm);
}

#[test]
fn general_factors_are_symmetric_psd() {
    let s = general_stream(200);
    for k in kfac_from_samples(&s).unwrap() {
        for m in [&k.a, &k.b] {
            assert!(m.asymmetry() <= 1e-9);
            let e = sym_eigh(m).unwrap();
            assert!(e.values.iter().all(|&v| v >= -1e-9 * e.values[0].abs()));
        }
    }
}

#[test]
fn ekfac_error_at_most_kfac_error() {
    let s = general_stream(500);
    let dense = dense_from_samples(&s, &["w"]).unwrap();
    let kfac = kfac_from_samples(&s).unwrap();
    let ekfac = ekfac_from_samples(&s, &kfac).unwrap();
    let fk = FisherApprox::from_kfac(s.blocks.clone(), &kfac, None).unwrap();
    let fe = FisherApprox::from_ekfac(s.blocks.clone(), ekfac, None).unwrap();
    let ek = fk.dense_block("w").unwrap().sub(&dense).unwrap().frobenius_norm();
    let ee = fe.dense_block("w").unwrap().sub(&dense).unwrap().frobenius_norm();
    assert!(ee <= ek, "ekfac {ee} kfac {ek}");
}

#[test]
fn ekfac_with_identity_bases_is_gradient_second_moment() {
    // one-hot activations and gradients with decreasing scale give diagonal,
    // already-sorted factors
    let (d_in, d_out) = (3, 2);
    let mut samples = Vec::new();
    for k in 0..12 {
        let j = k % d_in;
        let i = (k / d_in) % d_out;
        let mut a = vec![0.0; d_in];
        a[j] = (d_in - j) as f64;
        let mut g = vec![0.0; d_out];
        g[i] = 2.0 * (d_out - i) as f64 + 0.1 * k as f64;
        samples.push((a, g));
    }
    let s = single_block_stream(d_out, d_in, samples);
    let kfac = kfac_from_samples(&s).unwrap();
    let e = ekfac_from_samples(&s, &kfac).unwrap();
    assert_eq!(e[0].u_a, Matrix::identity(d_in));
    assert_eq!(e[0].u_b, Matrix::identity(d_out));
    let diag = diag_from_samples(&s).unwrap();
    for (x, y) in e[0].s.iter().zip(&diag.diag) {
        assert!((x - y).abs() <= 1e-14 * y.abs());
    }
}

#[test]
fn ekfac_eigenvalues_nonnegative_on_denoiser() {
    let (theta, sched) = tiny();
    let data = make_dataset(2, 10, 4, 5).unwrap();
    let plan = FisherPlan::new(6, 2, 100);
    let kfac = estimate_kfac(&theta, &data, &plan, &sched).unwrap();
    let e = ekfac_correct(&theta, &data, &kfac, &plan, &sched).unwrap();
    for b in &e {
        assert!(b.s.iter().all(|v| v.is_finite() && *v >= 0.0));
        for u in [&b.u_a, &b.u_b] {
            let gram = u.transpose().matmul(u).unwrap();
            assert!(gram.sub(&Matrix::identity(u.rows())).unwrap().frobenius_norm() < 1e-8);
        }
    }
    let f = FisherApprox::from_ekfac(theta.arch.blocks(), e, None).unwrap();
    let expected: usize = theta
        .arch
        .blocks()
        .iter()
        .map(|b| b.d_in * b.d_in + b.d_out * b.d_out + b.d_in * b.d_out)
        .sum();
    assert_eq!(f.stored_floats(), expected);
}

#[test]
fn diagonal_inverse_examples() {
    let blocks = vec![BlockSpec {
        name: "w".into(),
        d_out: 2,
        d_in: 1,
        offset: 0,
        cond_pathway: false,
    }];
    let ones = FisherApprox::from_diag(
        blocks.clone(),
        FisherDiag {
            diag: vec![1.0, 1.0],
            sample_count: 1,
        },
        Some(0.0),
    )
    .unwrap();
    assert_eq!(ones.inv_vprod(&[0.3, -7.0]).unwrap(), vec![0.3, -7.0]);
    let d = FisherApprox::from_diag(
        blocks.clone(),
        FisherDiag {
            diag: vec![2.0, 4.0],
            sample_count: 1,
        },
        Some(0.0),
    )
    .unwrap();
    assert_eq!(d.inv_vprod(&[2.0, 4.0]).unwrap(), vec![1.0, 1.0]);
    assert!(d.inv_vprod(&[1.0]).is_err());
}

#[test]
fn zero_damping_with_null_direction_is_singular() {
    let s = single_block_stream(2, 2, vec![(vec![1.0, 0.0], vec![0.0, 1.0])]);
    let kfac = kfac_from_samples(&s).unwrap();
    let f = FisherApprox::from_kfac(s.blocks.clone(), &kfac, Some(0.0)).unwrap();
    match f.inv_vprod(&[1.0; 4]) {
        Err(Error::Singular(name)) => assert_eq!(name, "w"),
        other => panic!("expected singular error, got {other:?}"),
    }
}

#[test]
fn default_damping_is_relative_to_mean_eigenvalue() {
    let s = general_stream(50);
    let kfac = kfac_from_samples(&s).unwrap();
    let e = ekfac_from_samples(&s, &kfac).unwrap();
    let mean = e[0].s.iter().sum::<f64>() / e[0].s.len() as f64;
    let f = FisherApprox::from_ekfac(s.blocks.clone(), e, None).unwrap();
    assert!((f.damping - 1e-4 * mean).abs() <= 1e-15 * mean);
}

#[test]
fn persistence_roundtrip() {
    let (theta, sched) = tiny();
    let data = make_dataset(2, 10, 4, 5).unwrap();
    let plan = FisherPlan::new(6, 1, 100);
    let kfac = estimate_kfac(&theta, &data, &plan, &sched).unwrap();
    let e = ekfac_correct(&theta, &data, &kfac, &plan, &sched).unwrap();
    let f = FisherApprox::from_ekfac(theta.arch.blocks(), e, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    f.save(dir.path()).unwrap();
    assert_eq!(FisherApprox::load(dir.path()).unwrap(), f);

    let d = FisherApprox::from_diag(
        theta.arch.blocks(),
        estimate_diag(&theta, &data, &plan, &sched).unwrap(),
        None,
    )
    .unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    d.save(dir2.path()).unwrap();
    assert_eq!(FisherApprox::load(dir2.path()).unwrap(), d);
}
