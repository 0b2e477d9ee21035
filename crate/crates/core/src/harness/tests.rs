use proptest::prelude::*;

use super::*;
use crate::disentangle::FairCdaNetwork;
use crate::metrics::{delta_dp, delta_eo, EvalSlice};
use crate::trainer::{run_stage1, Selected};

fn tiny_ds() -> EncodedDataset {
    synth_generate(&SynthSpec { n: 800, dim: 4, ..SynthSpec::default() }, 3).unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig { stage1_iters: 30, stage2_iters: 3, per_group: 16, hidden: vec![8], branch: 4, ..TrainConfig::default() }
}

fn hand_batch() -> LabeledBatch {
    LabeledBatch {
        x: Tensor::from_vec(&[6, 1], vec![0.0; 6]),
        y: vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        a: vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        rows: (0..6).collect(),
    }
}

#[test]
fn batch_gap_matches_metric_definitions() {
    let logits = [1.2, -0.3, 0.4, 2.0, -1.5, 0.1];
    let b = hand_batch();
    let p: Vec<f64> = logits.iter().map(|&u| sigmoid(u)).collect();
    let s = EvalSlice::new(&p, &b.y, &b.a).unwrap();
    for (metric, want) in [(GapMetric::Dp, delta_dp(&s).unwrap()), (GapMetric::Eo, delta_eo(&s).unwrap())] {
        let mut g = Graph::new();
        let u = g.constant(Tensor::column(logits.to_vec())).unwrap();
        let gap = batch_gap(&mut g, u, &b, metric).unwrap();
        assert!((g.value(gap).item().unwrap() - want).abs() < 1e-12, "{metric:?}");
    }
}

#[test]
fn batch_gap_gradient_matches_finite_differences() {
    let logits = vec![1.2, -0.3, 0.4, 2.0, -1.5, 0.1];
    let b = hand_batch();
    for metric in [GapMetric::Dp, GapMetric::Eo] {
        let eval = |v: &[f64]| {
            let mut g = Graph::new();
            let u = g.constant(Tensor::column(v.to_vec())).unwrap();
            let gap = batch_gap(&mut g, u, &b, metric).unwrap();
            g.value(gap).item().unwrap()
        };
        let mut g = Graph::new();
        let u = g.param(Tensor::column(logits.clone())).unwrap();
        let gap = batch_gap(&mut g, u, &b, metric).unwrap();
        let grad = g.grad_wrt(gap, u).unwrap();
        let analytic = g.value(grad.node).data().to_vec();
        for i in 0..logits.len() {
            let h = 1e-6;
            let (mut up, mut dn) = (logits.clone(), logits.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "{metric:?} {i}: {fd} vs {}", analytic[i]);
        }
    }
}

#[test]
fn batch_gap_skips_missing_cells() {
    let b = LabeledBatch { x: Tensor::from_vec(&[2, 1], vec![0.0; 2]), y: vec![1.0, 1.0], a: vec![1.0, 0.0], rows: vec![0, 1] };
    let mut g = Graph::new();
    let u = g.constant(Tensor::column(vec![0.5, -0.5])).unwrap();
    let eo = batch_gap(&mut g, u, &b, GapMetric::Eo).unwrap();
    let want = sigmoid(0.5) - sigmoid(-0.5);
    assert!((g.value(eo).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn dominance_example() {
    let flags = dominated_flags(&[(0.9, 0.1), (0.8, 0.05), (0.85, 0.2)]);
    assert_eq!(flags, [false, false, true]);
    assert_eq!(dominated_flags(&[(0.5, 0.1), (0.5, 0.1)]), [false, false]);
}

/// Sweep over gaps: a point is dominated by a strictly smaller gap with no lower
/// task value, or by an equal gap with a strictly higher task value.
fn dominated_oracle(points: &[(f64, f64)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| points[i].1.total_cmp(&points[j].1));
    let mut out = vec![false; points.len()];
    let mut best_before = f64::NEG_INFINITY;
    let mut k = 0;
    while k < order.len() {
        let gap = points[order[k]].1;
        let mut end = k;
        while end < order.len() && points[order[end]].1 == gap {
            end += 1;
        }
        let best_here = order[k..end].iter().map(|&i| points[i].0).fold(f64::NEG_INFINITY, f64::max);
        for &i in &order[k..end] {
            out[i] = best_before >= points[i].0 || best_here > points[i].0;
        }
        best_before = best_before.max(best_here);
        k = end;
    }
    out
}

proptest! {
    #[test]
    fn dominance_matches_oracle(pts in prop::collection::vec((0u8..6, 0u8..6), 0..=10)) {
        let pts: Vec<(f64, f64)> = pts.into_iter().map(|(t, g)| (t as f64 / 5.0, g as f64 / 10.0)).collect();
        prop_assert_eq!(dominated_flags(&pts), dominated_oracle(&pts));
    }

    #[test]
    fn front_is_never_empty(pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..=10)) {
        prop_assert!(dominated_flags(&pts).iter().any(|d| !d));
    }
}

#[test]
fn default_grids() {
    let g = Method::FairCda.default_grid();
    assert_eq!(g.len(), 20);
    assert_eq!((g[0], g[19]), (0.0, 1000.0));
    assert!(g.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(Method::Erm.default_grid(), [0.0]);
    assert_eq!(linear_grid(2.0, 9.0, 1), [2.0]);
    assert!(linear_grid(0.0, 1.0, 0).is_empty());
}

#[test]
fn methods_parse_and_configure() {
    for m in Method::ALL {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
    }
    assert!("fair_cda".parse::<Method>().is_err());
    let base = TrainConfig::default();
    let c = Method::FairCdaNoIm.configure(&base, 7.0);
    assert_eq!((c.lambda, c.gamma), (7.0, 1.0));
    assert!(!Method::FairCdaNoOrth.configure(&base, 1.0).orth);
    let e = Method::Erm.configure(&base, 3.0);
    assert_eq!((e.beta, e.lambda, e.stage2_iters), (Some(0.0), 0.0, 0));
    assert_eq!(Method::Gapreg.configure(&base, 2.0).baseline, Some(Baseline::GapReg { weight: 2.0 }));
    assert_eq!(Method::AttributeLevel.configure(&base, 0.2).baseline, Some(Baseline::AttributeFlip { p: 0.2 }));
}

#[test]
fn pareto_tsv_round_trip() {
    let pts = vec![
        ParetoPoint {
            method: Method::FairCda,
            lambda: 52.631578947368425,
            seed_count: 5,
            task_mean: 0.7812345678901234,
            task_std: Some(0.0041),
            gap_metric: GapMetric::Dp,
            gap_mean: 0.021,
            gap_std: Some(0.003),
            dominated: false,
        },
        ParetoPoint {
            method: Method::Gapreg,
            lambda: 0.0,
            seed_count: 1,
            task_mean: 0.7,
            task_std: None,
            gap_metric: GapMetric::Eo,
            gap_mean: 0.2,
            gap_std: None,
            dominated: true,
        },
    ];
    let text = pareto_tsv(&pts);
    assert_eq!(text.lines().next().unwrap(), PARETO_HEADER);
    assert_eq!(text.lines().nth(2).unwrap(), "gapreg\t0\t1\t0.7\t\tdelta_eo\t0.2\t\ttrue");
    assert_eq!(parse_pareto_tsv(&text).unwrap(), pts);
    assert!(parse_pareto_tsv("nope\n").is_err());
    assert!(parse_pareto_tsv(&format!("{PARETO_HEADER}\nfair-cda\t1\n")).is_err());
}

#[test]
fn spearman_values() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    assert!((spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]) - 0.9486832980505138).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]) - 1.0).abs() < 1e-15);
}

#[test]
fn quantiles_with_infinity() {
    let v = [Some(3.0), None, Some(1.0), Some(2.0)];
    assert_eq!(quantile(&v, 0.0), Some(1.0));
    assert_eq!(quantile(&v, 0.5), Some(2.0));
    assert_eq!(quantile(&v, 0.75), Some(3.0));
    assert_eq!(quantile(&v, 1.0), None);
    assert_eq!(quantile(&[], 0.5), None);
}

#[test]
fn front_lookups() {
    let front = [(0.9, 0.1), (0.8, 0.05), (0.85, 0.2)];
    assert_eq!(task_at_gap(&front, 0.1), Some(0.9));
    assert_eq!(task_at_gap(&front, 0.04), None);
    assert_eq!(gap_at_task(&front, 0.82), Some(0.1));
    assert_eq!(gap_at_task(&front, 0.95), None);
}

fn constant_model() -> TrainedModel {
    let mut net = FairCdaNetwork::new(crate::disentangle::Architecture { input: 4, hidden: vec![8], branch: 4 }, 1).unwrap();
    net.params.get_mut("g.0.weight").unwrap().data_mut().iter_mut().for_each(|w| *w = 0.0);
    TrainedModel { net, head: Head::Task }
}

#[test]
fn audit_of_a_constant_predictor_never_flips() {
    let ds = tiny_ds();
    let batch = ds.slice(Split::Test);
    let r = audit(&constant_model(), &batch, 5.0, 0.5, 2.0).unwrap();
    assert_eq!(r.alpha_star.len(), batch.len());
    assert!(r.alpha_star.iter().all(Option::is_none));
    assert_eq!(r.flipped_fraction, 0.0);
    assert_eq!(r.fraction_above_lambda, 1.0);
    assert!(r.quantiles.iter().all(|(_, v)| v.is_none()));
    assert!(r.warnings.is_empty());
}

#[test]
fn audit_with_empty_grid_warns() {
    let ds = tiny_ds();
    let out = crate::trainer::train_full(&tiny_cfg(), &ds).unwrap();
    let r = audit(&out.model, &ds.slice(Split::Test), 0.0, 0.5, 1.0).unwrap();
    assert!(r.alpha_star.iter().all(Option::is_none));
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn audit_reports_the_first_flip_on_the_grid() {
    let ds = tiny_ds();
    let out = crate::trainer::train_full(&tiny_cfg(), &ds).unwrap();
    let batch = ds.rows(&(0..40).collect::<Vec<_>>());
    let step = 0.25;
    let r = audit(&out.model, &batch, 30.0, step, 1.0).unwrap();
    let net = &out.model.net;
    // independent check through the augmentation path, one row at a time
    let prob_at = |i: usize, alpha: f64| {
        let row = batch.x.select_rows(&[i]);
        let one = LabeledBatch { x: row, y: vec![batch.y[i]], a: vec![batch.a[i]], rows: vec![i] };
        let aug = crate::augment::augment_with(net, &one, vec![alpha]).unwrap();
        let mut g = Graph::new();
        let b = net.params.bind(&mut g, false).unwrap();
        let zy = g.constant(aug.z_y).unwrap();
        let za = g.constant(aug.z_a_tilde).unwrap();
        let u = net.task_logits(&mut g, &b, zy, za, true).unwrap();
        sigmoid(g.value(u).data()[0])
    };
    let mut flipped = 0;
    for (i, a) in r.alpha_star.iter().enumerate() {
        let base = prob_at(i, 0.0) >= 0.5;
        match a {
            Some(a) => {
                flipped += 1;
                assert_ne!(prob_at(i, *a) >= 0.5, base, "row {i}");
                let k = (a / step).round() as usize;
                for j in 1..k {
                    assert_eq!(prob_at(i, j as f64 * step) >= 0.5, base, "row {i} flips before {a}");
                }
            }
            None => assert_eq!(prob_at(i, 30.0) >= 0.5, base),
        }
    }
    assert!(flipped > 0);
}

#[test]
fn run_cell_routes_methods() {
    let ds = tiny_ds();
    let data = SweepData { plain: &ds, with_sensitive: None };
    let erm = run_cell(Method::Erm, &tiny_cfg(), 0.0, 0, &data, None).unwrap();
    assert_eq!(erm.record.summary.selected, Selected { stage: 1, iter: 30 });
    assert_eq!(erm.record.summary.beta, 0.0);
    assert!(matches!(run_cell(Method::AttributeLevel, &tiny_cfg(), 0.3, 0, &data, None), Err(TrainError::Config(_))));
    let wide = ds.with_sensitive_inputs();
    let data = SweepData { plain: &ds, with_sensitive: Some(&wide) };
    let flip = run_cell(Method::AttributeLevel, &tiny_cfg(), 0.3, 0, &data, None).unwrap();
    assert_eq!(flip.model.net.arch.input, ds.width() + 2);
}

#[test]
fn sweep_writes_resumable_results() {
    let ds = tiny_ds();
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec {
        methods: vec![Method::FairCda, Method::Erm, Method::AttributeLevel],
        grids: [(Method::FairCda, vec![0.0, 2.0]), (Method::AttributeLevel, vec![0.5])].into_iter().collect(),
        seeds: vec![0, 1],
        task_metric: "ap".into(),
    };
    let data = SweepData { plain: &ds, with_sensitive: None };
    let points = run_sweep(&tiny_cfg(), &data, &spec, dir.path()).unwrap();
    let runs = read_runs(dir.path()).unwrap();
    assert_eq!(runs.len(), 8);
    // the attribute-level cells fail in isolation
    assert_eq!(runs.iter().filter(|c| !c.ok()).count(), 2);
    assert!(runs.iter().filter(|c| c.method == Method::AttributeLevel).all(|c| c.error.is_some()));
    assert_eq!(points.len(), 3);
    assert!(points.iter().all(|p| p.seed_count == 2 && p.task_std.is_some()));
    let tsv = std::fs::read_to_string(dir.path().join(PARETO_FILE)).unwrap();
    assert_eq!(parse_pareto_tsv(&tsv).unwrap(), points);

    // a rerun trains nothing new apart from retrying failures
    let again = run_sweep(&tiny_cfg(), &data, &spec, dir.path()).unwrap();
    assert_eq!(again, points);
    let runs2 = read_runs(dir.path()).unwrap();
    assert_eq!(runs2.len(), 10);
    assert_eq!(runs2[..8], runs[..]);

    // once the missing input is supplied, only those cells run
    let wide = ds.with_sensitive_inputs();
    let data = SweepData { plain: &ds, with_sensitive: Some(&wide) };
    let full = run_sweep(&tiny_cfg(), &data, &spec, dir.path()).unwrap();
    assert_eq!(full.len(), 4);
    assert_eq!(read_runs(dir.path()).unwrap().len(), 12);
    assert_eq!(full.iter().filter(|p| p.method != Method::AttributeLevel).cloned().collect::<Vec<_>>(), points);
}

#[test]
fn aggregation_keeps_the_latest_entry() {
    let cell = |param: f64, seed, task: f64| CellResult {
        method: Method::FairCda,
        param,
        seed,
        task: Some(task),
        gap: Some(0.1),
        stage1_validation: None,
        validation: None,
        error: None,
    };
    let runs = vec![cell(1.0, 0, 0.5), cell(1.0, 1, 0.7), cell(1.0, 0, 0.9)];
    let pts = aggregate_runs(&runs, GapMetric::Dp);
    assert_eq!(pts.len(), 1);
    assert_eq!(pts[0].seed_count, 2);
    assert!((pts[0].task_mean - 0.8).abs() < 1e-15);
}

#[test]
fn gapreg_weight_lowers_the_gap() {
    let ds = synth_generate(&SynthSpec { n: 4000, dim: 4, ..SynthSpec::default() }, 2).unwrap();
    let base = TrainConfig { stage1_iters: 200, per_group: 32, hidden: vec![16], branch: 8, ..TrainConfig::default() };
    let data = SweepData { plain: &ds, with_sensitive: None };
    let weights = linear_grid(0.0, 10.0, 6);
    let gaps: Vec<f64> = weights
        .iter()
        .map(|&w| {
            let vals: Vec<f64> = (0..5)
                .map(|seed| run_cell(Method::Gapreg, &base, w, seed, &data, None).unwrap().record.summary.selected_validation.gap)
                .collect();
            mean_std(&vals).0
        })
        .collect();
    assert!(spearman(&weights, &gaps) < 0.0, "{gaps:?}");
    assert!(gaps[5] < gaps[0], "{gaps:?}");
}

#[test]
fn attribute_flip_at_one_swaps_every_row() {
    let ds = tiny_ds().with_sensitive_inputs();
    let (c0, c1) = ds.sensitive_cols.unwrap();
    let batch = ds.slice(Split::Train);
    for i in 0..batch.len() {
        let row = batch.x.row(i);
        assert_eq!(row[c1], batch.a[i]);
        assert_eq!(row[c0], 1.0 - batch.a[i]);
    }
    let cfg = TrainConfig { baseline: Some(Baseline::AttributeFlip { p: 1.0 }), ..tiny_cfg() };
    let flipped = crate::trainer::train_full(&cfg, &ds).unwrap();
    let plain = crate::trainer::train_full(&TrainConfig { baseline: Some(Baseline::AttributeFlip { p: 0.0 }), ..tiny_cfg() }, &ds).unwrap();
    assert_ne!(flipped.model.net.params, plain.model.net.params);
}

#[test]
fn pair_probe_counts_members() {
    let spec = SynthSpec { n: 600, dim: 4, pairs: 25, ..SynthSpec::default() };
    let ds = synth_generate(&spec, 0).unwrap();
    let s1 = run_stage1(&tiny_cfg(), &ds).unwrap();
    let p = pair_flip_probe(&s1, &ds, 3.0, 0).unwrap();
    assert_eq!(p.members, 50);
    assert!(p.flipped <= 50);
    assert_eq!(pair_flip_probe(&s1, &ds, 3.0, 0).unwrap(), p);
    // without perturbation one member of each pair disagrees with its own label, barring exact 0.5
    let z = pair_flip_probe(&s1, &ds, 0.0, 0).unwrap();
    assert_eq!(z.flipped, 25);
    assert!(pair_flip_probe(&s1, &tiny_ds(), 3.0, 0).is_err());
}

#[test]
fn experiment_config_from_toml() {
    let text = r#"
[data]
source = "synth"
seed = 4
[data.spec]
n = 500
correlation = 0.3

[train]
T = 20
S = 2
lambda = 5.0

[sweep]
methods = ["fair-cda", "erm"]
seeds = [0, 1, 2]
[sweep.grids]
fair-cda = [0.0, 5.0, 10.0]
"#;
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    assert_eq!(cfg.train.stage1_iters, 20);
    assert_eq!(cfg.sweep.grid(Method::FairCda), [0.0, 5.0, 10.0]);
    assert_eq!(cfg.sweep.grid(Method::Erm), [0.0]);
    let ds = cfg.data.load(false).unwrap();
    assert_eq!(ds.len(), 500);
    assert_eq!(cfg.data.load(true).unwrap().width(), ds.width() + 2);
    assert!(ExperimentConfig::from_toml("[train]\ngamma = 2.0\n").is_err());
    assert!(ExperimentConfig::from_toml("[bogus]\n").is_err());
    assert_eq!(ExperimentConfig::default().data, DataSource::default());
}

#[test]
fn evaluate_matches_the_model_report() {
    let ds = tiny_ds();
    let out = crate::trainer::train_full(&tiny_cfg(), &ds).unwrap();
    let r = evaluate(&out.model, &ds, Split::Test, 0).unwrap();
    assert_eq!(r, out.record.summary.test);
}
