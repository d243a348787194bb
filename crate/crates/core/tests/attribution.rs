use fastattrib::attribution::*;
use fastattrib::diffusion::*;
use fastattrib::eval::spearman;
use fastattrib::fisher::*;
use fastattrib::numerics::dot;

struct World {
    data: Vec<TrainExample>,
    theta: DenoiserParams,
    sched: NoiseSchedule,
    fisher: FisherApprox,
    queries: Vec<SynthQuery>,
}

fn world() -> World {
    let data = make_dataset_with(&DatasetConfig {
        modes_per_class: 6,
        ..DatasetConfig::new(3, 40, 16, 3)
    })
    .unwrap();
    let batch = 16;
    let cfg = TrainConfig {
        epochs: 40,
        batch,
        lr: 5e-3,
        weight_decay: 0.0,
        adam_eps: 0.1,
        cosine_decay: true,
        epoch_batches: Some(data.len().div_ceil(batch)),
        schedule: ScheduleConfig {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.05,
        },
        arch: DenoiserArch {
            dim: 16,
            classes: 3,
            cond_dim: 4,
            time_dim: 8,
            hidden: vec![32],
        },
    };
    let sched = cfg.schedule.build().unwrap();
    let theta = train_model(&data, &cfg, 0).unwrap();
    let stream = collect_samples(&theta, &data, &FisherPlan::new(5, 1, data.len()), &sched).unwrap();
    let kfac = kfac_from_samples(&stream).unwrap();
    let fisher =
        FisherApprox::from_ekfac(theta.arch.blocks(), ekfac_from_samples(&stream, &kfac).unwrap(), None).unwrap();
    let queries = generate_queries(&theta, 20, 77, 20, &sched).unwrap();
    World {
        data,
        theta,
        sched,
        fisher,
        queries,
    }
}

fn unlearn_cfg(n: usize, alpha: f64, scope: UpdateScope) -> UnlearnConfig {
    UnlearnConfig {
        step_size: alpha,
        train_count: n,
        fisher: FisherKind::Ekfac,
        update_scope: scope,
        grad_plan: McPlan::equally_spaced(50, 10, 3, 11).unwrap(),
        eval_plan: McPlan::equally_spaced(50, 10, 3, 12).unwrap(),
    }
}

fn identity_fisher(theta: &DenoiserParams) -> FisherApprox {
    let diag = FisherDiag {
        diag: vec![1.0; theta.param_count()],
        sample_count: 1,
    };
    FisherApprox::from_diag(theta.arch.blocks(), diag, Some(0.0)).unwrap()
}

#[test]
fn identities_and_scope() {
    let w = world();
    let n = w.data.len();
    let q = &w.queries[0];

    // α = 0 leaves the model and every score exactly unchanged
    let zero = unlearn_cfg(n, 0.0, UpdateScope::AllParams);
    let same = unlearn(&w.theta, q, &w.fisher, &zero, &w.sched).unwrap();
    assert_eq!(same, w.theta);
    let mut teacher = Teacher::new(&w.theta, &w.fisher, zero, &w.sched, &w.data).unwrap();
    let ids: Vec<usize> = w.data.iter().map(|z| z.id).collect();
    assert!(teacher.scores(q, &ids).unwrap().iter().all(|&t| t == 0.0));

    // the condition pathway update leaves every other parameter bit-identical
    let cfg = unlearn_cfg(n, 3.0, UpdateScope::ConditionPathway);
    let u = unlearn(&w.theta, q, &w.fisher, &cfg, &w.sched).unwrap();
    let (a, b) = (w.theta.to_flat(), u.to_flat());
    let mut moved = 0;
    for blk in w.theta.arch.blocks() {
        for k in blk.range() {
            if blk.cond_pathway {
                moved += usize::from(a[k] != b[k]);
            } else {
                assert_eq!(a[k].to_bits(), b[k].to_bits(), "{} entry {k}", blk.name);
            }
        }
    }
    assert!(moved > 0);

    // F = I with α/N = 1 is plain gradient ascent
    let eye = identity_fisher(&w.theta);
    let unit = UnlearnConfig {
        step_size: n as f64,
        ..unlearn_cfg(n, 0.0, UpdateScope::AllParams)
    };
    let u = unlearn(&w.theta, q, &eye, &unit, &w.sched).unwrap();
    let g = mc_loss_grad(&w.theta, &q.as_example(), &unit.grad_plan, &w.sched).unwrap();
    for ((x, y), gk) in u.to_flat().iter().zip(&a).zip(&g) {
        assert!((x - (y + gk)).abs() <= 1e-12 * (1.0 + y.abs()));
    }
}

#[test]
fn scores_are_antisymmetric_and_scale_linearly() {
    let w = world();
    let n = w.data.len();
    let q = &w.queries[1];
    let cfg = unlearn_cfg(n, 3.0, UpdateScope::ConditionPathway);
    let u = unlearn(&w.theta, q, &w.fisher, &cfg, &w.sched).unwrap();
    let fwd = attribution_scores(&w.theta, &u, &w.data, &cfg.eval_plan, &w.sched).unwrap();
    let bwd = attribution_scores(&u, &w.theta, &w.data, &cfg.eval_plan, &w.sched).unwrap();
    for (f, b) in fwd.iter().zip(&bwd) {
        assert_eq!(*f, -*b);
    }

    let base = w.theta.to_flat();
    let delta = |alpha: f64| -> Vec<f64> {
        let c = UnlearnConfig {
            step_size: alpha,
            ..cfg.clone()
        };
        let t = unlearn(&w.theta, q, &w.fisher, &c, &w.sched).unwrap().to_flat();
        t.iter().zip(&base).map(|(x, y)| x - y).collect()
    };
    let d1 = delta(1.0);
    let norm: f64 = d1.iter().map(|x| x * x).sum::<f64>().sqrt();
    for s in [0.5, 2.0] {
        let ds = delta(s);
        let err: f64 = ds.iter().zip(&d1).map(|(a, b)| (a - s * b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-9 * s * norm, "scale {s}: {err}");
    }
    let rel = relative_change(&w.theta, &unlearn(&w.theta, q, &w.fisher, &cfg, &w.sched).unwrap());
    assert!(rel > 0.0, "relative change {rel}");
}

#[test]
fn small_step_top_decile_is_stable_across_scales() {
    let w = world();
    let n = w.data.len();
    let ids: Vec<usize> = w.data.iter().map(|z| z.id).collect();
    let top = |alpha: f64, q: &SynthQuery| -> Vec<usize> {
        let cfg = unlearn_cfg(n, alpha, UpdateScope::ConditionPathway);
        abu_rank(q, &ids, &w.data, &w.theta, &w.fisher, &cfg, &w.sched).unwrap()[..n / 10]
            .iter()
            .map(|r| r.candidate_id)
            .collect()
    };
    let (mut kept, mut total) = (0, 0);
    for q in &w.queries[..5] {
        let base = top(1.0, q);
        for s in [0.5, 2.0] {
            let other = top(s, q);
            kept += base.iter().filter(|i| other.contains(i)).count();
            total += base.len();
        }
    }
    assert!(kept as f64 >= 0.9 * total as f64, "{kept}/{total}");
}

#[test]
fn nearest_training_example_is_influential() {
    let w = world();
    let n = w.data.len();
    let ids: Vec<usize> = w.data.iter().map(|z| z.id).collect();
    let cfg = unlearn_cfg(n, 3.0, UpdateScope::ConditionPathway);
    let mut teacher = Teacher::new(&w.theta, &w.fisher, cfg, &w.sched, &w.data).unwrap();
    let mut hits = 0;
    for q in &w.queries {
        let nearest = w
            .data
            .iter()
            .min_by(|a, b| {
                let d = |z: &TrainExample| z.x.iter().zip(&q.x).map(|(p, r)| (p - r).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap()
            .id;
        let recs = teacher.rank(q, &ids).unwrap();
        hits += usize::from(recs[..n / 10].iter().any(|r| r.candidate_id == nearest));
    }
    // chance is one in ten; this toy world measures 9 of 20
    assert!(hits * 10 >= 3 * w.queries.len(), "{hits}/{}", w.queries.len());
}

#[test]
fn influence_scores_match_gradient_oracle_and_agree_with_unlearning() {
    let w = world();
    let n = w.data.len();
    let q = &w.queries[2];
    let cfg = unlearn_cfg(n, 3.0, UpdateScope::AllParams);
    let eye = identity_fisher(&w.theta);
    let cands = &w.data[..10];
    let got = influence_scores(
        &w.theta,
        q,
        cands,
        &eye,
        &cfg.grad_plan,
        UpdateScope::AllParams,
        &w.sched,
    )
    .unwrap();
    let gq = mc_loss_grad(&w.theta, &q.as_example(), &cfg.grad_plan, &w.sched).unwrap();
    for (z, s) in cands.iter().zip(&got) {
        let gz = mc_loss_grad(&w.theta, z, &cfg.grad_plan.for_example(z.id), &w.sched).unwrap();
        let want = dot(&gq, &gz);
        assert!((s - want).abs() <= 1e-10 * want.abs().max(1e-12));
    }
    let own = TrainExample {
        id: 10_000,
        ..q.as_example()
    };
    let s = influence_scores(
        &w.theta,
        q,
        &[own],
        &eye,
        &cfg.grad_plan,
        UpdateScope::AllParams,
        &w.sched,
    )
    .unwrap()[0];
    assert!(s > 0.0);

    // both teachers estimate the same removal effect, so their orders agree
    let cond = unlearn_cfg(n, 3.0, UpdateScope::ConditionPathway);
    let mut rhos = Vec::new();
    for q in &w.queries[..5] {
        let u = unlearn(&w.theta, q, &w.fisher, &cond, &w.sched).unwrap();
        let tau = attribution_scores(&w.theta, &u, &w.data, &cond.eval_plan, &w.sched).unwrap();
        let inf = influence_scores(
            &w.theta,
            q,
            &w.data,
            &w.fisher,
            &cond.grad_plan,
            cond.update_scope,
            &w.sched,
        )
        .unwrap();
        rhos.push(spearman(&tau, &inf).unwrap());
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    assert!(mean > 0.0, "{rhos:?}");
}
