use fastattrib::diffusion::*;
use fastattrib::eval::*;
use fastattrib::numerics::Rng;
use fastattrib::retrieval::{fit_encoder, EncoderMode};

fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut v);
    v
}

/// Precision at each positive's predicted position, averaged over positives.
fn brute_force_ap(pred: &[usize], truth: &[usize], l: usize) -> f64 {
    let positives = &truth[..l];
    let mut ranks: Vec<usize> = positives
        .iter()
        .map(|p| pred.iter().position(|x| x == p).unwrap() + 1)
        .collect();
    ranks.sort_unstable();
    let mut sum = 0.0;
    for (i, &r) in ranks.iter().enumerate() {
        sum += (i + 1) as f64 / r as f64;
    }
    sum / l as f64
}

/// `E[AP]` of a uniformly random order: a positive at rank r has
/// `1 + (r−1)(L−1)/(n−1)` expected positives at or above it.
pub fn random_ap_expectation(n: usize, l: usize) -> f64 {
    let h: f64 = (1..=n).map(|r| 1.0 / r as f64).sum();
    let nf = n as f64;
    h / nf + (l as f64 - 1.0) / (nf - 1.0) * (1.0 - h / nf)
}

#[test]
fn map_matches_brute_force_oracle() {
    let mut rng = Rng::new(1);
    for _ in 0..1000 {
        let n = 2 + rng.below(80);
        let l = 1 + rng.below(n);
        let pred = permutation(n, &mut rng);
        let truth = permutation(n, &mut rng);
        assert_eq!(map_at_l(&pred, &truth, l).unwrap(), brute_force_ap(&pred, &truth, l));
    }
}

#[test]
fn map_examples() {
    let truth: Vec<usize> = (0..50).collect();
    assert_eq!(map_at_l(&truth, &truth, 10).unwrap(), 1.0);
    let mut rng = Rng::new(2);
    for r in 1..=50 {
        let mut pred: Vec<usize> = (1..50).collect();
        rng.shuffle(&mut pred);
        pred.insert(r - 1, 0);
        assert_eq!(map_at_l(&pred, &truth, 1).unwrap(), 1.0 / r as f64);
    }
    let mut other = truth.clone();
    other[3] = 77;
    assert!(map_at_l(&other, &truth, 5).is_err());
}

#[test]
fn map_depends_only_on_order() {
    let mut rng = Rng::new(3);
    let scores: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
    let order = |f: &dyn Fn(f64) -> f64| {
        let mut idx: Vec<usize> = (0..100).collect();
        idx.sort_by(|&a, &b| f(scores[b]).total_cmp(&f(scores[a])).then(a.cmp(&b)));
        idx
    };
    let truth = permutation(100, &mut rng);
    let a = map_at_l(&order(&|x| x), &truth, 20).unwrap();
    let b = map_at_l(&order(&|x| x.exp() * 3.0 + 1.0), &truth, 20).unwrap();
    assert_eq!(a, b);
}

#[test]
fn random_orders_match_analytic_expectation() {
    let (n, l, sims) = (200, 20, 10_000);
    let mut rng = Rng::new(4);
    let truth: Vec<usize> = (0..n).collect();
    let aps: Vec<f64> = (0..sims)
        .map(|_| map_at_l(&permutation(n, &mut rng), &truth, l).unwrap())
        .collect();
    let (mean, se) = mean_and_se(&aps);
    let expect = random_ap_expectation(n, l);
    assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect} ± {se}");
}

#[test]
fn report_aggregates_queries() {
    let t: Vec<usize> = (0..10).collect();
    let rev: Vec<usize> = (0..10).rev().collect();
    let reports = eval_orders(&[(t.clone(), t.clone()), (rev, t)], &[1, 5]).unwrap();
    assert_eq!(reports[0].per_query, vec![1.0, 0.1]);
    assert!((reports[0].mean - 0.55).abs() < 1e-15);
    assert!((reports[0].std_err - 0.45).abs() < 1e-12);
    assert!(eval_orders(&[], &[1]).is_err());
}

#[test]
fn zero_removal_has_zero_effect() {
    let dc = DatasetConfig::new(2, 10, 16, 1);
    let data = make_dataset_with(&dc).unwrap();
    let train = TrainConfig {
        epochs: 2,
        batch: 8,
        lr: 1e-3,
        weight_decay: 0.0,
        adam_eps: 0.1,
        cosine_decay: true,
        epoch_batches: Some(3),
        schedule: ScheduleConfig::default(),
        arch: DenoiserArch {
            dim: 16,
            classes: 2,
            cond_dim: 2,
            time_dim: 4,
            hidden: vec![8],
        },
    };
    let encoder = fit_encoder(&data, Some(3), EncoderMode::Image, 2, 0).unwrap();
    let ctx = RemovalContext {
        data: &data,
        train: &train,
        encoder: &encoder,
        eval_plan: McPlan::equally_spaced(100, 5, 1, 3).unwrap(),
        ddim_steps: 10,
    };
    let reference = ctx.reference(7).unwrap();
    let sched = train.schedule.build().unwrap();
    let q = &generate_queries(&reference.theta, 1, 5, 10, &sched).unwrap()[0];
    let ranking: Vec<usize> = (0..20).collect();
    let row = counterfactual_eval(&ctx, &reference, "m", &ranking, q, 0).unwrap();
    assert_eq!(row.effect.delta_loss, 0.0);
    assert_eq!(row.effect.delta_gen_mse, 0.0);
    assert!((row.effect.gen_feat_cos - 1.0).abs() < 1e-12);
    let removed = counterfactual_eval(&ctx, &reference, "m", &ranking, q, 5).unwrap();
    assert_ne!(removed.effect.delta_loss, 0.0);
    assert_eq!(
        removed,
        counterfactual_eval(&ctx, &reference, "m", &ranking, q, 5).unwrap()
    );

    let r = random_removal(&ranking, 5, q.id, 7);
    assert_eq!(r.len(), 5);
    assert_eq!(r, random_removal(&ranking, 5, q.id, 7));
}

#[test]
fn bench_reports_consistent_stats() {
    let stats = bench(2, 20, |i| Ok(std::hint::black_box((0..2000 + i).sum::<usize>()))).unwrap();
    assert_eq!(stats.reps, 20);
    assert!(stats.median <= stats.p95 && stats.median > 0.0);
}
