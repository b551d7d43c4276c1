//! Acceptance criteria 1–10. Each test prints one `criterion N: PASS|FAIL`
//! line before asserting. Criteria 7 and 8 are long training runs and are
//! ignored by default: `cargo test --release --test acceptance -- --ignored --nocapture`.

mod common;

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uierl::cli::{cmd_synth, run_ablation, synth_dataset, synth_one};
use uierl::config::{DataConfig, RunConfig};
use uierl::diff::{grad_check, scalar_fn, GradCheckOptions, Graph, ParamStore, Var};
use uierl::drfg::{self, Drfg, EncoderPath, GraphBranch, ADJ_DIM, HIDDEN_DIM};
use uierl::imaging::{degrade, restore_oracle, DepthMap, SceneBatch, WaterParams};
use uierl::interact::{self, Aggregate, Interaction, InteractionKind, PliResidual};
use uierl::metrics::{self, psnr};
use uierl::network::{build_model, forward_inputs, forward_scene, prepare_scene, ModelConfig, Variant};
use uierl::nn::{Builder, Conv2d, Ctx};
use uierl::regionseg::{combine_regions, extract_regions, kmeans_depth, KMeansOptions};
use uierl::training::{checkpoint, prepare_dataset, total_loss, Extractor, TrainConfig, Trainer};
use uierl::{Result, Tensor};

use common::{max_diff, Map};

fn report(n: u32, pass: bool, detail: impl std::fmt::Display) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

// ---------------------------------------------------------------- 1

const PHYSICS_CASES: usize = 100;
const PHYSICS_TOL: f64 = 1e-6;
/// `exp(-9.2) ≈ 1.01e-4`, so every drawn case keeps transmission ≥ 1e-4 over depth in [0, 1].
const PHYSICS_BETA_MAX: f64 = 9.2;

#[test]
fn criterion_01_physics_round_trip() {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for case in 0..PHYSICS_CASES {
        let (h, w) = (r.random_range(1..=24), r.random_range(1..=24));
        let clean = uniform(&[3, h, w], 0.0, 1.0, 100 + case as u64);
        let depth = uniform(&[1, h, w], 0.0, 1.0, 200 + case as u64);
        let water = WaterParams::new(
            std::array::from_fn(|_| r.random_range(0.01..=PHYSICS_BETA_MAX)),
            std::array::from_fn(|_| r.random_range(0.0..=1.0)),
        )
        .unwrap();
        let back = restore_oracle(&degrade(&clean, &depth, &water).unwrap(), &depth, &water).unwrap();
        worst = worst.max(back.max_abs_diff(&clean));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < PHYSICS_TOL && secs < 5.0;
    report(1, pass, format!("{PHYSICS_CASES} cases, max abs error {worst:.2e} < {PHYSICS_TOL:e}, {secs:.2} s < 5 s"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn depth_map(values: Vec<f64>, h: usize, w: usize) -> DepthMap {
    DepthMap::new(Tensor::from_vec(&[1, h, w], values).unwrap()).unwrap()
}

#[test]
fn criterion_02_segmentation_exactness() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut r = rng(2);
    // well separated plateaus with a little noise, random layout
    for case in 0..50 {
        let (h, w) = (r.random_range(4..=32), r.random_range(4..=32));
        let levels = [r.random_range(0.02..0.2), r.random_range(0.4..0.6), r.random_range(0.8..0.98)];
        let mut truth: Vec<u8> = (0..h * w).map(|_| r.random_range(0..3u8)).collect();
        truth[0] = 0;
        truth[1] = 1;
        truth[2] = 2;
        let values: Vec<f64> = truth.iter().map(|&l| levels[l as usize] + r.random_range(-0.02..0.02)).collect();
        let m = kmeans_depth(&depth_map(values, h, w), &KMeansOptions::default()).unwrap();
        if m.labels() != truth.as_slice() {
            failures.push(format!("plateau case {case}"));
        }
    }
    // partition and lossless extract → combine on arbitrary depth
    for case in 0..50 {
        let (h, w) = (r.random_range(1..=24), r.random_range(1..=24));
        let k = r.random_range(1..=5);
        let values: Vec<f64> = match case % 3 {
            0 => (0..h * w).map(|_| r.random()).collect(),
            1 => vec![0.3; h * w],
            _ => (0..h * w).map(|_| if r.random::<bool>() { 0.0 } else { 1.0 }).collect(),
        };
        let m = kmeans_depth(&depth_map(values, h, w), &KMeansOptions { k, ..Default::default() }).unwrap();
        let masks: Vec<Tensor<f64>> = (0..k).map(|j| m.mask(j)).collect();
        if (0..h * w).any(|p| masks.iter().map(|t| t.data()[p]).sum::<f64>() != 1.0) {
            failures.push(format!("partition case {case}"));
        }
        let img = uniform(&[3, h, w], -1.0, 1.0, 300 + case);
        let regions = extract_regions(&img, &m).unwrap();
        let sum = regions.iter().skip(1).fold(regions[0].clone(), |a, b| a.zip_map(b, |x, y| x + y).unwrap());
        let back = combine_regions(&vec![Some(img.clone()); k], &m).unwrap();
        if sum != img || back != img {
            failures.push(format!("round trip case {case}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 5.0;
    report(2, pass, format!("100 depth maps, failures {failures:?}, {secs:.2} s < 5 s"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

const GRAPH_TOL: f64 = 1e-5;

fn graph_case(c: usize, h: usize, w: usize, factor: Option<usize>, seed: u64) -> f64 {
    let mut ps = ParamStore::<f64>::new();
    let gb = GraphBranch::new(&mut Builder::new(&mut ps, &mut rng(seed)), c);
    let f = common::random_map(c, h, w, seed + 1);
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let got = drfg::graph_branch(&cx, &gb, g.input(f.tensor()), factor).unwrap().value();
    let k = drfg::pool_factor(h, w, factor).unwrap();
    let d = |m: &uierl::nn::Matrix| ps.get(m.weight).data().to_vec();
    let want = common::graph_branch(&f, k, &d(&gb.p1), &d(&gb.p2), &d(&gb.w1), &d(&gb.w2), ADJ_DIM, HIDDEN_DIM);
    max_diff(got.data(), &want.v)
}

#[test]
fn criterion_03_graph_oracle() {
    let cases =
        [(5, 2, 2, None), (5, 2, 4, None), (7, 1, 8, None), (6, 4, 8, Some(2)), (4, 6, 6, Some(3)), (3, 1, 1, None)];
    let mut worst = 0.0f64;
    for (i, &(c, h, w, f)) in cases.iter().enumerate() {
        assert!((h / f.unwrap_or(1)) * (w / f.unwrap_or(1)) <= 8);
        worst = worst.max(graph_case(c, h, w, f, 10 * i as u64));
    }
    let g = Graph::<f64>::new();
    let eye = drfg::normalize_adjacency(g.input(Tensor::zeros(&[3, 3]))).unwrap().value();
    let identity_ok = eye.data().iter().enumerate().all(|(i, v)| *v == if i % 4 == 0 { 1.0 } else { 0.0 });
    let two = drfg::normalize_adjacency(g.input(Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()))
        .unwrap()
        .value();
    let two_ok = two.data() == [0.5; 4];
    let nodes = uniform(&[4, 5], -1.0, 1.0, 31);
    let (p1, p2) = (uniform(&[5, 3], -1.0, 1.0, 32), uniform(&[5, 3], -1.0, 1.0, 33));
    let a = drfg::build_adjacency(g.input(nodes.clone()), g.input(p1.clone()), g.input(p2.clone())).unwrap().value();
    let adj_err = max_diff(a.data(), &common::adjacency(nodes.data(), p1.data(), p2.data(), 4, 5, 3));
    let pass = worst < GRAPH_TOL && adj_err < GRAPH_TOL && identity_ok && two_ok;
    report(
        3,
        pass,
        format!("graph_branch max dev {worst:.2e}, adjacency {adj_err:.2e} < {GRAPH_TOL:e}; A=0 → I exact: {identity_ok}; 2-node → 0.5 exact: {two_ok}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

const GATE_OFF_TOL: f64 = 1e-6;
const INTERACTION_TOL: f64 = 1e-5;

fn interaction_module(
    c: usize,
    kind: InteractionKind,
    residual: PliResidual,
    seed: u64,
) -> (ParamStore<f64>, Interaction, Aggregate) {
    let mut ps = ParamStore::new();
    let mut r = rng(seed);
    let mut b = Builder::new(&mut ps, &mut r);
    let m = Interaction::new(&mut b, "m", c, kind, residual);
    let agg = Aggregate::new(&mut b, "agg", c);
    (ps, m, agg)
}

fn gate_off(ps: &mut ParamStore<f64>, conv: &Conv2d) {
    ps.get_mut(conv.weight).data_mut().fill(0.0);
    ps.get_mut(conv.bias.unwrap()).data_mut().fill(-30.0);
}

#[test]
fn criterion_04_interaction_identities() {
    let c = 8;
    let (mut ps, m, agg) = interaction_module(c, InteractionKind::Full, PliResidual::Fli, 4);
    gate_off(&mut ps, &m.cli.as_ref().unwrap().excite);
    gate_off(&mut ps, &m.pli.as_ref().unwrap().expand);
    let (x, y) = (common::random_map(c, 16, 16, 41), common::random_map(c, 16, 16, 42));
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let (vx, vy) = (g.input(x.tensor()), g.input(y.tensor()));
    let cli_dev = max_diff(interact::cli(&cx, m.cli.as_ref().unwrap(), vx).unwrap().value().data(), &x.v);
    let fli = interact::fli(&cx, &m, vx, vy).unwrap();
    let pli_dev = max_diff(interact::interact(&cx, &m, vx, vy).unwrap().value().data(), fli.value().data());

    let mut oracle_dev = 0.0f64;
    for (i, (kind, residual)) in [
        (InteractionKind::Full, PliResidual::Fli),
        (InteractionKind::Full, PliResidual::Cli),
        (InteractionKind::FliCli, PliResidual::Fli),
        (InteractionKind::FliOnly, PliResidual::Fli),
    ]
    .into_iter()
    .enumerate()
    {
        let (ps, m, agg) = interaction_module(c, kind, residual, 50 + i as u64);
        let ext = common::random_map(c, 16, 16, 60 + i as u64);
        let internal: Vec<Map> = (0..3).map(|j| common::random_map(c, 16, 16, 70 + 3 * i as u64 + j)).collect();
        let g = Graph::new();
        let cx = Ctx::new(&g, &ps);
        let e = g.input(ext.tensor());
        let ints: Vec<_> = internal.iter().map(|f| g.input(f.tensor())).collect();
        let got = interact::eai(&cx, &m, e, ints[0]).unwrap().value();
        oracle_dev = oracle_dev.max(max_diff(got.data(), &common::interaction(&ps, &m, &ext, &internal[0]).v));
        let got = interact::iae(&cx, &agg, &m, &ints, e).unwrap().value();
        let pooled = common::aggregate(&ps, &agg, &internal);
        oracle_dev = oracle_dev.max(max_diff(got.data(), &common::interaction(&ps, &m, &ext, &pooled).v));
    }
    let _ = agg;
    let pass = cli_dev < GATE_OFF_TOL && pli_dev < GATE_OFF_TOL && oracle_dev < INTERACTION_TOL;
    report(
        4,
        pass,
        format!(
            "gated-off cli dev {cli_dev:.2e}, pli dev {pli_dev:.2e} < {GATE_OFF_TOL:e}; eai/iae vs oracle {oracle_dev:.2e} < {INTERACTION_TOL:e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

const EQUIVARIANCE_TOL: f64 = 1e-5;

fn small_scene(views: usize, size: usize, seed: u64) -> SceneBatch {
    let data = DataConfig { image_size: size, views_min: views, views_max: views, ..DataConfig::default() };
    synth_one(&data, "s", seed).unwrap().0
}

#[test]
fn criterion_05_permutation_contract() {
    let c = 6;
    let (ps, m, agg) = interaction_module(c, InteractionKind::Full, PliResidual::Fli, 5);
    let mut exact = true;
    let mut checked = 0;
    for n in 1..=5 {
        let feats: Vec<Map> = (0..n).map(|j| common::random_map(c, 8, 8, 500 + j as u64)).collect();
        let ext = common::random_map(c, 8, 8, 599);
        let run = |order: &[usize]| {
            let g = Graph::new();
            let cx = Ctx::new(&g, &ps);
            let vs: Vec<_> = order.iter().map(|&i| g.input(feats[i].tensor())).collect();
            let a = interact::aggregate_scene(&cx, &agg, &vs).unwrap().value().data().to_vec();
            let b = interact::iae(&cx, &agg, &m, &vs, g.input(ext.tensor())).unwrap().value().data().to_vec();
            (a, b)
        };
        let base = run(&(0..n).collect::<Vec<_>>());
        for p in common::permutations(n) {
            exact &= run(&p) == base;
            checked += 1;
        }
    }

    let model =
        build_model::<f64>(&ModelConfig { base_channels: 8, ..ModelConfig::for_variant(Variant::M2) }, 5).unwrap();
    let scene = small_scene(3, 16, 55);
    let run = |b: &SceneBatch| {
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.params);
        forward_scene(&cx, &model, b).unwrap().iter().map(|v| v.value().data().to_vec()).collect::<Vec<_>>()
    };
    let base = run(&scene);
    let mut dev = 0.0f64;
    for p in common::permutations(3) {
        let permuted = SceneBatch::new("s", p.iter().map(|&i| scene.views[i].clone()).collect()).unwrap();
        for (j, out) in run(&permuted).iter().enumerate() {
            dev = dev.max(max_diff(out, &base[p[j]]));
        }
    }
    let pass = exact && dev < EQUIVARIANCE_TOL;
    report(
        5,
        pass,
        format!("aggregate/iae bit-identical over {checked} permutations (N ≤ 5): {exact}; forward_scene equivariance dev {dev:.2e} < {EQUIVARIANCE_TOL:e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

const GRAD_EPS: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;
const GRAD_SUITE_SECS: f64 = 120.0;
/// Whole-model checks run at the default width. Narrow models put enough
/// ReLU and L1 kinks within `GRAD_EPS` of the evaluation point to bias central
/// differences; `tests/gradients.rs` covers them at a smaller step.
const VARIANT_CHANNELS: usize = 64;
/// Parameter tensors sampled per whole-model check (two coordinates each).
const VARIANT_PARAMS: usize = 12;

fn weighted_sum<'g>(g: &'g Graph<f64>, y: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let w = g.input(Tensor::from_fn(&y.shape(), |i| ((i * 37 % 17) as f64 - 8.0) / 5.0));
    Ok(y.mul(w)?.mean())
}

fn grad_opts(max_params: usize) -> GradCheckOptions {
    GradCheckOptions { epsilon: GRAD_EPS, tolerance: GRAD_TOL, coords_per_param: 2, max_params, seed: 6 }
}

fn plateau_masks(h: usize, w: usize) -> uierl::regionseg::RegionMasks {
    let values = (0..h * w).map(|p| [0.1, 0.5, 0.9][(p % w) * 3 / w]).collect();
    kmeans_depth(&depth_map(values, h, w), &KMeansOptions::default()).unwrap()
}

fn variant_loss_check(v: Variant, base_channels: usize, max_params: usize) -> uierl::diff::GradCheckReport {
    let model = build_model::<f64>(&ModelConfig { base_channels, ..ModelConfig::for_variant(v) }, 6).unwrap();
    let scene = small_scene(2, 16, 66);
    let inputs = prepare_scene::<f64>(&model.config, &scene).unwrap();
    let refs: Vec<Tensor<f64>> =
        scene.views.iter().map(|v| uierl::network::to_network(v.reference.as_ref().unwrap())).collect();
    let phi = Extractor::<f64>::fixed_random_pyramid(0);
    let arch_model = &model;
    let f = scalar_fn(|g: &Graph<f64>, p: &ParamStore<f64>| {
        let cx = Ctx::new(g, p);
        let outs = forward_inputs(&cx, arch_model, &inputs)?;
        let rs: Vec<_> = refs.iter().map(|r| g.input(r.clone())).collect();
        Ok(total_loss(g, &outs, &rs, &phi, 0.8, 0.2)?.total)
    });
    grad_check(f, &model.params, &grad_opts(max_params)).unwrap()
}

#[test]
fn criterion_06_gradient_suite() {
    let start = Instant::now();
    let mut results: Vec<(String, uierl::diff::GradCheckReport)> = Vec::new();

    // internal-stage modules, 8 channels
    let c = 8;
    let mut ps = ParamStore::<f64>::new();
    let (path, net) = {
        let mut r = rng(61);
        let mut b = Builder::new(&mut ps, &mut r);
        (EncoderPath::new(&mut b, "path", c, true), Drfg::new(&mut b, c, 3, true, None))
    };
    let region = uniform(&[3, 8, 8], -1.0, 1.0, 62);
    let feat = uniform(&[c, 8, 8], -1.0, 1.0, 63);
    let image = uniform(&[3, 16, 16], -1.0, 1.0, 64);
    let masks = plateau_masks(16, 16);
    {
        let (x, p) = (region.clone(), &path);
        results.push((
            "initial_unit".into(),
            grad_check(
                scalar_fn(|g: &Graph<f64>, ps: &ParamStore<f64>| {
                    weighted_sum(g, drfg::initial_unit(&Ctx::new(g, ps), p, g.input(x.clone()))?)
                }),
                &ps,
                &grad_opts(usize::MAX),
            )
            .unwrap(),
        ));
        let f = feat.clone();
        results.push((
            "content_branch".into(),
            grad_check(
                scalar_fn(|g: &Graph<f64>, ps: &ParamStore<f64>| {
                    weighted_sum(g, drfg::content_branch(&Ctx::new(g, ps), p, g.input(f.clone()))?)
                }),
                &ps,
                &grad_opts(usize::MAX),
            )
            .unwrap(),
        ));
        for factor in [None, Some(2)] {
            let f = feat.clone();
            results.push((
                format!("graph_branch {factor:?}"),
                grad_check(
                    scalar_fn(|g: &Graph<f64>, ps: &ParamStore<f64>| {
                        weighted_sum(
                            g,
                            drfg::graph_branch(
                                &Ctx::new(g, ps),
                                p.graph.as_ref().unwrap(),
                                g.input(f.clone()),
                                factor,
                            )?,
                        )
                    }),
                    &ps,
                    &grad_opts(usize::MAX),
                )
                .unwrap(),
            ));
        }
        results.push((
            "encoder_path".into(),
            grad_check(
                scalar_fn(|g: &Graph<f64>, ps: &ParamStore<f64>| {
                    weighted_sum(g, drfg::encoder_path(&Ctx::new(g, ps), p, g.input(x.clone()), None)?)
                }),
                &ps,
                &grad_opts(usize::MAX),
            )
            .unwrap(),
        ));
        let (img, n, mk) = (image.clone(), &net, &masks);
        results.push((
            "drfg_forward 16×16".into(),
            grad_check(
                scalar_fn(|g: &Graph<f64>, ps: &ParamStore<f64>| {
                    weighted_sum(g, drfg::drfg_forward(&Ctx::new(g, ps), n, g.input(img.clone()), mk)?.fused)
                }),
                &ps,
                &grad_opts(usize::MAX),
            )
            .unwrap(),
        ));
    }

    // interaction modules at 64 channels
    let c = 64;
    let (ps, m, agg) = interaction_module(c, InteractionKind::Full, PliResidual::Fli, 65);
    let (a, b) = (uniform(&[c, 8, 8], -1.0, 1.0, 66), uniform(&[c, 8, 8], -1.0, 1.0, 67));
    let internal: Vec<Tensor<f64>> = (0..3).map(|i| uniform(&[c, 8, 8], -1.0, 1.0, 68 + i)).collect();
    {
        let (m, agg) = (&m, &agg);
        let checks: Vec<(&str, Box<dyn for<'g> Fn(&'g Graph<f64>, &'g ParamStore<f64>) -> Result<Var<'g, f64>>>)> = vec![
            (
                "fli",
                Box::new(|g, ps| {
                    weighted_sum(g, interact::fli(&Ctx::new(g, ps), m, g.input(a.clone()), g.input(b.clone()))?)
                }),
            ),
            (
                "cli",
                Box::new(|g, ps| {
                    let cx = Ctx::new(g, ps);
                    weighted_sum(g, interact::cli(&cx, m.cli.as_ref().unwrap(), g.input(a.clone()))?)
                }),
            ),
            (
                "pli",
                Box::new(|g, ps| {
                    let cx = Ctx::new(g, ps);
                    weighted_sum(
                        g,
                        interact::pli(&cx, m.pli.as_ref().unwrap(), g.input(a.clone()), g.input(b.clone()))?,
                    )
                }),
            ),
            (
                "eai",
                Box::new(|g, ps| {
                    weighted_sum(g, interact::eai(&Ctx::new(g, ps), m, g.input(a.clone()), g.input(b.clone()))?)
                }),
            ),
            (
                "aggregate_scene",
                Box::new(|g, ps| {
                    let vs: Vec<_> = internal.iter().map(|t| g.input(t.clone())).collect();
                    weighted_sum(g, interact::aggregate_scene(&Ctx::new(g, ps), agg, &vs)?)
                }),
            ),
            (
                "iae",
                Box::new(|g, ps| {
                    let vs: Vec<_> = internal.iter().map(|t| g.input(t.clone())).collect();
                    weighted_sum(g, interact::iae(&Ctx::new(g, ps), agg, m, &vs, g.input(a.clone()))?)
                }),
            ),
        ];
        for (name, f) in checks {
            let shape_ok = {
                let g = Graph::new();
                f(&g, &ps).is_ok()
            };
            assert!(shape_ok, "{name}");
            results.push((format!("{name} (64 ch)"), grad_check(|g, p| f(g, p), &ps, &grad_opts(usize::MAX)).unwrap()));
        }
    }

    // every variant, forward + loss on a 2-view 16×16 scene
    // `full` is an alias of M2: same flags, same parameters, same gradients
    assert_eq!(Variant::Full.flags(), Variant::M2.flags());
    for v in Variant::ALL.into_iter().filter(|v| *v != Variant::Full) {
        let t = Instant::now();
        let r = variant_loss_check(v, VARIANT_CHANNELS, VARIANT_PARAMS);
        results.push((format!("{v} forward+loss ({VARIANT_CHANNELS} ch, {:.1} s)", t.elapsed().as_secs_f64()), r));
    }

    for (name, r) in &results {
        eprintln!("grad_check {name}: {r}");
    }
    let failed: Vec<&str> = results.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| n.as_str()).collect();
    let worst = results.iter().map(|(_, r)| r.max_error()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = failed.is_empty() && secs < GRAD_SUITE_SECS;
    report(
        6,
        pass,
        format!(
            "{} compositions, worst error {worst:.2e} ≤ {GRAD_TOL:e} (eps {GRAD_EPS:e}), failed {failed:?}, {secs:.1} s < {GRAD_SUITE_SECS} s",
            results.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

const OVERFIT_MAX_ITERS: u64 = 2000;
const OVERFIT_CONTENT: f64 = 0.05;
const OVERFIT_PSNR: f64 = 25.0;
const OVERFIT_EVAL_EVERY: u64 = 100;

#[test]
#[ignore = "up to two hours on one CPU core"]
fn criterion_07_overfit_single_scene() {
    let data = DataConfig { views_min: 4, views_max: 4, ..DataConfig::default() };
    let (scene, _) = synth_one(&data, "overfit", 7).unwrap();
    assert_eq!((scene.len(), scene.hw()), (4, (64, 64)));
    let train = TrainConfig { iterations: OVERFIT_MAX_ITERS, ..TrainConfig::default() };
    let dataset = prepare_dataset(std::slice::from_ref(&scene), train.input_size).unwrap();
    let model = build_model::<f32>(&ModelConfig::for_variant(Variant::M2), train.seed).unwrap();
    let mut t = Trainer::new(model, train).unwrap();
    let start = Instant::now();
    let (mut content, mut mean_psnr) = (f64::INFINITY, 0.0);
    while t.iteration < OVERFIT_MAX_ITERS {
        t.step(&dataset).unwrap();
        if t.iteration.is_multiple_of(OVERFIT_EVAL_EVERY) {
            let ev = t.evaluate(&scene).unwrap();
            content = ev.content;
            mean_psnr = ev
                .outputs
                .iter()
                .zip(&scene.views)
                .map(|(o, v)| psnr(o, v.reference.as_ref().unwrap()).unwrap())
                .sum::<f64>()
                / scene.len() as f64;
            eprintln!(
                "overfit it={} content={content:.5} psnr={mean_psnr:.3} elapsed={:.0}s",
                t.iteration,
                start.elapsed().as_secs_f64()
            );
            if content < OVERFIT_CONTENT && mean_psnr > OVERFIT_PSNR {
                break;
            }
        }
    }
    let pass = content < OVERFIT_CONTENT && mean_psnr > OVERFIT_PSNR;
    report(
        7,
        pass,
        format!(
            "content_loss {content:.4} < {OVERFIT_CONTENT}, PSNR {mean_psnr:.2} dB > {OVERFIT_PSNR} dB after {} iterations, {:.0} s",
            t.iteration,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

const ABLATION_TRAIN_SCENES: usize = 16;
const ABLATION_TEST_SCENES: usize = 8;
const ABLATION_ITERS: u64 = 1000;
const ABLATION_MARGIN_DB: f64 = 0.3;

#[test]
#[ignore = "about two and a half hours on one CPU core"]
fn criterion_08_directional_ablation() {
    let mut cfg = RunConfig::default();
    cfg.train.iterations = ABLATION_ITERS;
    let scenes: Vec<_> = synth_dataset(&cfg.data, ABLATION_TRAIN_SCENES + ABLATION_TEST_SCENES, 2024)
        .unwrap()
        .into_iter()
        .map(|(b, _)| b)
        .collect();
    let (train, test) = scenes.split_at(ABLATION_TRAIN_SCENES);
    let start = Instant::now();
    let table = run_ablation(
        &cfg,
        train,
        test,
        &[Variant::M0, Variant::M1, Variant::M2],
        |v, r| {
            if r.iteration % 100 == 0 {
                eprintln!(
                    "ablation {v} it={} total={:.5} elapsed={:.0}s",
                    r.iteration,
                    r.total,
                    start.elapsed().as_secs_f64()
                );
            }
        },
        |_, _| Ok(()),
    )
    .unwrap();
    eprintln!("{}", table.to_markdown());
    let p = |v| table.psnr(v).unwrap();
    let (m0, m1, m2) = (p(Variant::M0), p(Variant::M1), p(Variant::M2));
    let pass = m2 >= m1 - ABLATION_MARGIN_DB && m1 >= m0 - ABLATION_MARGIN_DB;
    report(
        8,
        pass,
        format!(
            "held-out PSNR M0 {m0:.3}, M1 {m1:.3}, M2 {m2:.3} dB; margin {ABLATION_MARGIN_DB} dB; {ABLATION_ITERS} iterations each, {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

const METRIC_TOL: f64 = 1e-6;

fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    // smooth color field plus noise so that blocks, edges and chroma all vary
    let mut r = rng(seed);
    let (a, b, c) = (r.random_range(0.0..6.0), r.random_range(0.0..6.0), r.random_range(0.1..0.5));
    let noise = uniform(&[3, h, w], -c, c, seed + 1000);
    Tensor::from_fn(&[3, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let base = 0.5 + 0.3 * ((a * x as f64 / w as f64) + (b * y as f64 / h as f64) + ch as f64).sin();
        (base + noise.data()[i]).clamp(0.0, 1.0)
    })
}

fn checkerboard(h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[3, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        if (y / 8 + x / 8) % 2 == 0 {
            [0.9, 0.7, 0.2][ch]
        } else {
            [0.1, 0.3, 0.6][ch]
        }
    })
}

#[test]
fn criterion_09_metric_oracles() {
    let (h, w) = (64, 64);
    let mut worst = [0.0f64; 6];
    let mut images: Vec<Tensor<f64>> = (0..10).map(|i| random_image(h, w, 900 + i)).collect();
    images.push(checkerboard(h, w));
    for (i, img) in images.iter().enumerate() {
        let reference = random_image(h, w, 950 + i as u64);
        let grid = common::metrics::grid(img.data(), h, w);
        let pairs = [
            (metrics::uiqm(img).unwrap(), common::metrics::uiqm(&grid)),
            (metrics::uciqe(img).unwrap(), common::metrics::uciqe(&grid)),
            (metrics::ccf(img).unwrap(), common::metrics::ccf(&grid)),
            (metrics::edge_intensity(img).unwrap(), common::metrics::edge(&grid)),
            (
                metrics::angular_error(img, &reference).unwrap(),
                common::metrics::angular(img.data(), reference.data(), h, w),
            ),
            (psnr(img, &reference).unwrap(), common::metrics::psnr(img.data(), reference.data())),
        ];
        for (k, (got, want)) in pairs.iter().enumerate() {
            worst[k] = worst[k].max((got - want).abs());
        }
    }

    let gray = Tensor::full(&[3, h, w], 0.5);
    let parts = metrics::uiqm_parts(&gray, &Default::default()).unwrap();
    let uciqe_parts = metrics::uciqe_parts(&gray).unwrap();
    let ccf_parts = metrics::ccf_parts(&gray).unwrap();
    let red = Tensor::from_fn(&[3, h, w], |i| if i < h * w { 1.0 } else { 0.0 });
    let green = Tensor::from_fn(&[3, h, w], |i| if (h * w..2 * h * w).contains(&i) { 1.0 } else { 0.0 });
    let half = images[0].map(|v| 0.5 * v);
    let trivial = [
        ("uiqm parts of constant = 0", parts.uicm == 0.0 && parts.uism == 0.0 && parts.uiconm == 0.0),
        ("uciqe of constant = 0", metrics::uciqe(&gray).unwrap() == 0.0),
        ("uciqe constant terms 0", uciqe_parts.chroma_std == 0.0 && uciqe_parts.contrast == 0.0),
        ("ccf constant = fog only", ccf_parts.colorfulness == 0.0 && ccf_parts.contrast == 0.0),
        ("edge of constant = 0", metrics::edge_intensity(&gray).unwrap() == 0.0),
        ("identical pair = 0°", metrics::angular_error(&images[1], &images[1]).unwrap().abs() < 1e-6),
        ("red vs green = 90°", (metrics::angular_error(&red, &green).unwrap() - 90.0).abs() < 1e-9),
        ("scaled pair = 0°", metrics::angular_error(&half, &images[0]).unwrap().abs() < 1e-6),
        ("identical psnr = 99", psnr(&images[2], &images[2]).unwrap() == 99.0),
        (
            "mse 0.01 = 20 dB",
            (psnr(&Tensor::full(&[3, 4, 4], 0.6), &Tensor::full(&[3, 4, 4], 0.5)).unwrap() - 20.0).abs() < 1e-9,
        ),
    ];
    let failed: Vec<&str> = trivial.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let pass = max < METRIC_TOL && failed.is_empty();
    report(
        9,
        pass,
        format!(
            "11 images; max dev uiqm {:.1e} uciqe {:.1e} ccf {:.1e} edge {:.1e} angular {:.1e} psnr {:.1e} < {METRIC_TOL:e}; trivial examples failed {failed:?}",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10

fn tiny_setup() -> (Vec<SceneBatch>, ModelConfig, TrainConfig) {
    let data = DataConfig { image_size: 16, views_min: 2, views_max: 3, ..DataConfig::default() };
    let scenes: Vec<SceneBatch> = synth_dataset(&data, 2, 10).unwrap().into_iter().map(|(b, _)| b).collect();
    let model = ModelConfig { base_channels: 4, ..ModelConfig::for_variant(Variant::M2) };
    let train = TrainConfig { input_size: 16, iterations: 4, seed: 10, ..TrainConfig::default() };
    (prepare_dataset(&scenes, 16).unwrap(), model, train)
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let (dataset, model_cfg, train) = tiny_setup();
    let run = || {
        let mut t = Trainer::new(build_model::<f32>(&model_cfg, train.seed).unwrap(), train.clone()).unwrap();
        for _ in 0..train.iterations {
            t.step(&dataset).unwrap();
        }
        t
    };
    let (a, b) = (run(), run());
    let history_equal = a.history == b.history;

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.ckpt");
    let mut cont = Trainer::new(build_model::<f32>(&model_cfg, train.seed).unwrap(), train.clone()).unwrap();
    for _ in 0..2 {
        cont.step(&dataset).unwrap();
    }
    cont.save(&ckpt, &serde_json::Value::Null).unwrap();
    let mut resumed = Trainer::resume(&checkpoint::load::<f32>(&ckpt).unwrap(), train.clone()).unwrap();
    let (x, y) = (cont.step(&dataset).unwrap(), resumed.step(&dataset).unwrap());
    let resume_equal = x == y && x.total.to_bits() == y.total.to_bits();

    let cfg = RunConfig { data: DataConfig { image_size: 32, ..DataConfig::default() }, ..RunConfig::default() };
    let (s1, s2) = (dir.path().join("s1"), dir.path().join("s2"));
    cmd_synth(&cfg, &s1, 3, 77, false).unwrap();
    cmd_synth(&cfg, &s2, 3, 77, false).unwrap();
    let synth_equal = dir_bytes(&s1) == dir_bytes(&s2);

    let pass = history_equal && resume_equal && synth_equal;
    report(
        10,
        pass,
        format!(
            "loss history replay identical: {history_equal}; resumed next-step loss {} vs {} identical: {resume_equal}; cmd_synth byte-stable: {synth_equal}",
            x.total, y.total
        ),
    );
    assert!(pass);
}
