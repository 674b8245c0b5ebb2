//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL` line
//! (visible with `--nocapture`) and then asserts the outcome.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use cscn::autograd::Graph;
use cscn::data::{split, LabelMask};
use cscn::fusion::{FusionMode, FusionStage};
use cscn::harness::ablate::{run_variants, variants, AblationTable};
use cscn::harness::train::INIT_STREAM;
use cscn::harness::{evaluate_model, save_model, train, AblationAxis, OptimizerKind, TrainConfig, Trainer};
use cscn::losses::{adaptive_softmax_loss, ce_loss, class_contrastive_loss, ClassProjector};
use cscn::metrics::{report, ConfusionMatrix};
use cscn::model::Cscn;
use cscn::params::{ParamId, ParamStore};
use cscn::rng::seeded;
use cscn::spectra::{derivative, synth_scene, DerivativeSpec, HsiCube, SynthSceneSpec};
use cscn::tensor::Tensor;

fn verdict(n: usize, ok: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore, id: ParamId, scale: f64, rng: &mut ChaCha8Rng) {
    for v in store.get_mut(id).data_mut() {
        *v = rng.random_range(-scale..scale);
    }
}

// 1 ---------------------------------------------------------------------

fn brute_derivative(cube: &HsiCube, order: usize, step: usize) -> Vec<f32> {
    let (h, w, b) = cube.dims();
    let s = step as f32;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let px = cube.spectrum(y, x);
            if order == 1 {
                for k in 0..b - step {
                    out.push((px[k + step] - px[k]) / s);
                }
            } else {
                for k in 0..b - 2 * step {
                    let lo = (px[k + step] - px[k]) / s;
                    let hi = (px[k + 2 * step] - px[k + step]) / s;
                    out.push((hi - lo) / s);
                }
            }
        }
    }
    out
}

#[test]
fn criterion_01_derivative_oracle() {
    let start = Instant::now();
    let mut rng = seeded(1, 1);
    let mut mismatches = 0;
    for _ in 0..100 {
        let order = rng.random_range(1..=2);
        let step = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let bands = rng.random_range(order * step + 1..=64);
        let data: Vec<f32> = (0..h * w * bands).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let cube = HsiCube::new(h, w, bands, data).unwrap();
        let got = derivative(&cube, DerivativeSpec::new(order, step).unwrap()).unwrap();
        let want = brute_derivative(&cube, order, step);
        assert_eq!(got.band_count(), bands - order * step);
        let same = got.data().len() == want.len() && got.data().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = mismatches == 0 && secs < 5.0;
    verdict(1, ok, format!("{mismatches} mismatching cubes of 100, {secs:.3}s"));
    assert!(ok);
}

// 2 ---------------------------------------------------------------------

#[test]
fn criterion_02_fusion_weight_normalization() {
    let mut rng = seeded(2, 2);
    let cf = 8;
    let mut store = ParamStore::new();
    let stage = FusionStage::new(&mut store, "f", FusionMode::Adaptive, cf, cf, cf, 3, &mut rng).unwrap();
    let w_q = store.id("f.w_q.w").unwrap();
    randomize(&mut store, w_q, 0.6, &mut rng);
    let (h, w) = (100, 1000);

    let mut g = Graph::new();
    let query = g.constant(random_tensor(&[h, w, cf], 2.0, &mut rng));
    let x_m = g.constant(random_tensor(&[h, w, cf], 2.0, &mut rng));
    let x_d = g.constant(random_tensor(&[h, w, cf], 2.0, &mut rng));
    let (a_m, a_d) = stage.point_weights(&mut g, &store, query, x_m, x_d).unwrap();
    let (am, ad) = (g.value(a_m).data(), g.value(a_d).data());
    let worst_sum = am.iter().zip(ad).map(|(m, d)| (m + d - 1.0).abs()).fold(0.0, f64::max);
    let open = am.iter().chain(ad).all(|&v| v > 0.0 && v < 1.0);
    let spread = am.iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));

    // Identical keys: same projection weights and same embeddings.
    let k_m = store.get(store.id("f.w_k_m.w").unwrap()).clone();
    *store.get_mut(store.id("f.w_k_d.w").unwrap()) = k_m;
    let mut g = Graph::new();
    let query = g.constant(random_tensor(&[h, w, cf], 2.0, &mut rng));
    let x = random_tensor(&[h, w, cf], 2.0, &mut rng);
    let x_m = g.constant(x.clone());
    let x_d = g.constant(x);
    let (a_m, a_d) = stage.point_weights(&mut g, &store, query, x_m, x_d).unwrap();
    let worst_half = g
        .value(a_m)
        .data()
        .iter()
        .chain(g.value(a_d).data())
        .map(|v| (v - 0.5).abs())
        .fold(0.0, f64::max);

    let ok = worst_sum <= 1e-6 && open && worst_half <= 1e-6;
    verdict(
        2,
        ok,
        format!(
            "max |A_M+A_D-1| {worst_sum:.1e}, all in (0,1): {open}, A_M range [{:.3}, {:.3}], identical keys max |A-0.5| {worst_half:.1e}",
            spread.0, spread.1
        ),
    );
    assert!(ok);
}

// 3 ---------------------------------------------------------------------

fn scalar_loss(f: impl FnOnce(&mut Graph) -> cscn::autograd::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

#[test]
fn criterion_03_asl_dominance() {
    let mut rng = seeded(3, 3);
    let (mut worst_gap, mut worst_equal) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let label = rng.random_range(1..=k as u16);
        let mask = LabelMask::new(1, 1, k as u16, vec![label]).unwrap();
        let r_m = random_tensor(&[1, 1, k], 4.0, &mut rng);
        let r_d = random_tensor(&[1, 1, k], 4.0, &mut rng);
        let ce = |t: &Tensor| {
            scalar_loss(|g| {
                let x = g.constant(t.clone());
                ce_loss(g, x, &mask).unwrap()
            })
        };
        let asl = |a: &Tensor, b: &Tensor| {
            scalar_loss(|g| {
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                adaptive_softmax_loss(g, x, y, &mask).unwrap()
            })
        };
        worst_gap = worst_gap.max(asl(&r_m, &r_d) - ce(&r_m).min(ce(&r_d)));
        worst_equal = worst_equal.max((asl(&r_m, &r_m) - ce(&r_m)).abs());
    }
    let ok = worst_gap <= 1e-7 && worst_equal <= 1e-7;
    verdict(
        3,
        ok,
        format!("max ASL - min(CE) {worst_gap:.2e}, max |ASL - CE| with equal inputs {worst_equal:.1e}"),
    );
    assert!(ok);
}

// 4 ---------------------------------------------------------------------

const FD_STEP: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central-difference comparison over every coordinate of one tensor.
#[derive(Clone, Copy, Debug, Default)]
struct Probe {
    worst: f64,
    /// Some stencil straddles a ReLU kink: its one-sided slopes disagree.
    kinked: bool,
}

impl Probe {
    fn join(self, other: Probe) -> Probe {
        Probe {
            worst: self.worst.max(other.worst),
            kinked: self.kinked || other.kinked,
        }
    }
}

fn fd_probe(x: &Tensor, analytic: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Probe {
    let mut probe = Probe::default();
    let center = f(x);
    for i in 0..x.len() {
        let shifted = |d: f64| {
            let mut t = x.clone();
            t.data_mut()[i] += d;
            f(&t)
        };
        let (up, down) = (shifted(FD_STEP), shifted(-FD_STEP));
        let (fwd, bwd) = ((up - center) / FD_STEP, (center - down) / FD_STEP);
        if (fwd - bwd).abs() > 0.05 * fwd.abs().max(bwd.abs()).max(1e-3) {
            probe.kinked = true;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        probe.worst = probe.worst.max(rel_err(analytic.data()[i], numeric));
    }
    probe
}

fn fd_probe_param(store: &ParamStore, id: ParamId, analytic: &Tensor, f: &dyn Fn(&ParamStore) -> f64) -> Probe {
    let base = store.get(id).clone();
    fd_probe(&base, analytic, &|t: &Tensor| {
        let mut s = store.clone();
        *s.get_mut(id) = t.clone();
        f(&s)
    })
}

/// Draws toys from `check` until one is free of kinks; returns its worst
/// error and the number of redraws.
fn smooth_draw(rng: &mut ChaCha8Rng, check: fn(&mut ChaCha8Rng) -> Probe) -> (f64, usize) {
    for redraws in 0..100 {
        let p = check(rng);
        if !p.kinked {
            return (p.worst, redraws);
        }
    }
    panic!("no kink-free toy in 100 draws");
}

fn asl_check(rng: &mut ChaCha8Rng) -> Probe {
    let mask = LabelMask::new(2, 2, 3, vec![1, 2, 3, 2]).unwrap();
    let targets: Vec<usize> = mask.labels().iter().map(|&l| l as usize - 1).collect();
    let probs = |t: &Tensor, px: usize| {
        let row = &t.data()[px * 3..px * 3 + 3];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        row[targets[px]].exp() / z
    };
    // Resample until every pixel is clear of a probability tie.
    let (r_m, r_d) = loop {
        let a = random_tensor(&[2, 2, 3], 2.0, rng);
        let b = random_tensor(&[2, 2, 3], 2.0, rng);
        if (0..4).all(|px| (probs(&a, px) - probs(&b, px)).abs() > 1e-2) {
            break (a, b);
        }
    };
    let loss = |a: &Tensor, b: &Tensor| {
        scalar_loss(|g| {
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            adaptive_softmax_loss(g, x, y, &mask).unwrap()
        })
    };
    let mut g = Graph::new();
    let (x, y) = (g.variable(r_m.clone()), g.variable(r_d.clone()));
    let l = adaptive_softmax_loss(&mut g, x, y, &mask).unwrap();
    let grads = g.backward(l);
    let zero = Tensor::zeros(&[2, 2, 3]);
    let gm = grads.get(x).unwrap_or(&zero).clone();
    let gd = grads.get(y).unwrap_or(&zero).clone();
    fd_probe(&r_m, &gm, &|t| loss(t, &r_d)).join(fd_probe(&r_d, &gd, &|t| loss(&r_m, t)))
}

fn ccl_check(rng: &mut ChaCha8Rng) -> Probe {
    let mask = LabelMask::new(2, 2, 3, vec![1, 2, 3, 1]).unwrap();
    let mut store = ParamStore::new();
    let p_enc = ClassProjector::new(&mut store, "pe", 3, rng);
    let p_dec = ClassProjector::new(&mut store, "pd", 3, rng);
    for (id, _, _) in store.clone().iter() {
        randomize(&mut store, id, 0.8, rng);
    }
    let f_enc = random_tensor(&[2, 2, 3], 1.0, rng);
    let f_dec = random_tensor(&[2, 2, 3], 1.0, rng);
    let loss = |s: &ParamStore, a: &Tensor, b: &Tensor| {
        scalar_loss(|g| {
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            class_contrastive_loss(g, s, &p_enc, &p_dec, x, y, &mask)
        })
    };
    let mut g = Graph::new();
    let (x, y) = (g.variable(f_enc.clone()), g.variable(f_dec.clone()));
    let l = class_contrastive_loss(&mut g, &store, &p_enc, &p_dec, x, y, &mask);
    assert!(g.value(l).item() > 0.0, "three classes give an active loss");
    let grads = g.backward(l);
    let pg = g.param_grads(&grads, &store);
    let mut worst = fd_probe(&f_enc, grads.get(x).unwrap(), &|t| loss(&store, t, &f_dec))
        .join(fd_probe(&f_dec, grads.get(y).unwrap(), &|t| loss(&store, &f_enc, t)));
    for (id, _, _) in store.iter() {
        worst = worst.join(fd_probe_param(&store, id, &pg[id.index()], &|s| loss(s, &f_enc, &f_dec)));
    }
    worst
}

fn cpfm_check(rng: &mut ChaCha8Rng) -> Probe {
    let mut store = ParamStore::new();
    let stage = FusionStage::new(&mut store, "f", FusionMode::Adaptive, 3, 3, 3, 3, rng).unwrap();
    let w_q = store.id("f.w_q.w").unwrap();
    randomize(&mut store, w_q, 0.8, rng);
    let f_m = random_tensor(&[2, 2, 3], 1.0, rng);
    let f_d = random_tensor(&[2, 2, 3], 1.0, rng);
    let state = random_tensor(&[2, 2, 3], 1.0, rng);
    let mask = LabelMask::new(2, 2, 3, vec![1, 2, 3, 2]).unwrap();
    let build = |g: &mut Graph, s: &ParamStore, a: cscn::autograd::Var, b: cscn::autograd::Var, q| {
        let out = stage.forward(g, s, Some(q), a, b, 1).unwrap();
        ce_loss(g, out.state.fused, &mask).unwrap()
    };
    let loss = |s: &ParamStore, a: &Tensor, b: &Tensor, q: &Tensor| {
        scalar_loss(|g| {
            let (x, y, z) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(q.clone()));
            build(g, s, x, y, z)
        })
    };
    let mut g = Graph::new();
    let (x, y, z) = (g.variable(f_m.clone()), g.variable(f_d.clone()), g.variable(state.clone()));
    let l = build(&mut g, &store, x, y, z);
    let grads = g.backward(l);
    let pg = g.param_grads(&grads, &store);
    let mut worst = fd_probe(&f_m, grads.get(x).unwrap(), &|t| loss(&store, t, &f_d, &state))
        .join(fd_probe(&f_d, grads.get(y).unwrap(), &|t| loss(&store, &f_m, t, &state)))
        .join(fd_probe(&state, grads.get(z).unwrap(), &|t| loss(&store, &f_m, &f_d, t)));
    for name in ["f.w_q.w", "f.w_k_m.w", "f.w_k_d.w"] {
        let id = store.id(name).unwrap();
        worst = worst.join(fd_probe_param(&store, id, &pg[id.index()], &|s| loss(s, &f_m, &f_d, &state)));
    }
    worst
}

#[test]
fn criterion_04_gradient_fidelity() {
    let start = Instant::now();
    let mut rng = seeded(4, 4);
    let (mut asl, mut ccl, mut cpfm, mut redraws) = (0.0f64, 0.0f64, 0.0f64, 0);
    for _ in 0..5 {
        let p = asl_check(&mut rng);
        assert!(!p.kinked, "ASL is smooth away from ties");
        asl = asl.max(p.worst);
        let (w, r) = smooth_draw(&mut rng, ccl_check);
        ccl = ccl.max(w);
        redraws += r;
        let (w, r) = smooth_draw(&mut rng, cpfm_check);
        cpfm = cpfm.max(w);
        redraws += r;
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = asl <= 1e-3 && ccl <= 1e-3 && cpfm <= 1e-3 && secs < 60.0;
    verdict(
        4,
        ok,
        format!("max rel err ASL {asl:.1e}, CCL {ccl:.1e}, CPFM stage {cpfm:.1e}; {redraws} toys redrawn for ReLU kinks, {secs:.2}s"),
    );
    assert!(ok);
}

// 5 ---------------------------------------------------------------------

/// Metrics computed by expanding the matrix into (truth, prediction) pairs.
fn brute_metrics(classes: usize, counts: &[u64]) -> (f64, f64, f64, f64) {
    let mut pairs = Vec::new();
    for t in 0..classes {
        for p in 0..classes {
            for _ in 0..counts[t * classes + p] {
                pairs.push((t, p));
            }
        }
    }
    let n = pairs.len() as f64;
    let correct = pairs.iter().filter(|(t, p)| t == p).count() as f64;
    let oa = correct / n;
    let (mut recalls, mut f1s) = (Vec::new(), Vec::new());
    let mut agree_by_chance = 0.0;
    for c in 0..classes {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let fn_ = pairs.iter().filter(|&&(t, p)| t == c && p != c).count() as f64;
        let fp = pairs.iter().filter(|&&(t, p)| t != c && p == c).count() as f64;
        agree_by_chance += (tp + fn_) / n * ((tp + fp) / n);
        if tp + fn_ == 0.0 {
            continue;
        }
        recalls.push(tp / (tp + fn_));
        f1s.push(if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) });
    }
    let kappa = if agree_by_chance >= 1.0 {
        0.0
    } else {
        (oa - agree_by_chance) / (1.0 - agree_by_chance)
    };
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (oa, avg(&recalls), kappa, avg(&f1s))
}

#[test]
fn criterion_05_metric_oracle() {
    let mut rng = seeded(5, 5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let classes = rng.random_range(2..=7);
        let counts: Vec<u64> = loop {
            let c: Vec<u64> = (0..classes * classes)
                .map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(0..12) })
                .collect();
            if c.iter().sum::<u64>() > 0 {
                break c;
            }
        };
        let r = report(&ConfusionMatrix::from_counts(classes, counts.clone()).unwrap()).unwrap();
        let (oa, aa, kappa, cf1) = brute_metrics(classes, &counts);
        for (a, b) in [(r.oa, oa), (r.aa, aa), (r.kappa, kappa), (r.cf1, cf1)] {
            worst = worst.max((a - b).abs());
        }
    }
    let ex = report(&ConfusionMatrix::from_counts(2, vec![2, 1, 0, 3]).unwrap()).unwrap();
    let example_ok = (ex.oa - 5.0 / 6.0).abs() < 1e-12 && (ex.cf1 - 0.8286).abs() < 5e-5;
    let ok = worst <= 1e-9 && example_ok;
    verdict(
        5,
        ok,
        format!("max deviation {worst:.1e}; example OA {:.6} CF1 {:.4}", ex.oa, ex.cf1),
    );
    assert!(ok);
}

// 6 ---------------------------------------------------------------------

#[test]
fn criterion_06_overfit_capacity() {
    let start = Instant::now();
    let (cube, mask) = synth_scene(&SynthSceneSpec {
        class_count: 3,
        bands: 16,
        height: 32,
        width: 32,
        ..SynthSceneSpec::default()
    })
    .unwrap();
    let sp = split(&mask, 0.5, 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 300,
        channel_schedule: vec![8, 16, 24, 32],
        fused_channels: 16,
        ..TrainConfig::default()
    };
    let mut model = Cscn::new(cfg.model_config(16, 3), &mut seeded(cfg.seed, INIT_STREAM)).unwrap();
    let input = model.cfg.prepare(&cube).unwrap();
    let train_mask = mask.restricted(&sp.train);
    let mut trainer = Trainer::new(&mut model, &input, &train_mask, &cfg);
    let (mut steps, mut oa) = (0, 0.0);
    while steps < cfg.epochs {
        trainer.step().unwrap();
        steps += 1;
        if steps % 10 == 0 {
            oa = evaluate_model(trainer.model, &input, &mask, &sp.train).unwrap().oa;
            if oa >= 0.99 {
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = oa >= 0.99 && secs < 300.0;
    verdict(6, ok, format!("train OA {oa:.4} after {steps} steps, {secs:.1}s"));
    assert!(ok);
}

// 7 and 8 ---------------------------------------------------------------

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BENCH_RATIO: f64 = 0.2;

/// Two confusable pairs whose members share a mean spectrum.
fn benchmark_scene() -> (HsiCube, LabelMask) {
    synth_scene(&SynthSceneSpec {
        class_count: 4,
        bands: 16,
        height: 64,
        width: 64,
        confusable_pairs: vec![(1, 2), (3, 4)],
        magnitude_noise_sigma: 0.01,
        seed: 0,
        block: 8,
        oscillation: 0.015,
        brightness_sigma: 0.3,
    })
    .unwrap()
}

fn benchmark_config() -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::MomentumSgd,
        learning_rate: 3e-2,
        epochs: 200,
        channel_schedule: vec![8, 16, 24, 32],
        fused_channels: 16,
        ..TrainConfig::default()
    }
}

fn components_table() -> &'static AblationTable {
    static TABLE: OnceLock<AblationTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let (cube, mask) = benchmark_scene();
        let base = benchmark_config();
        let vs = variants(&base, AblationAxis::Components);
        run_variants(&cube, &mask, AblationAxis::Components, &vs, &SEEDS, BENCH_RATIO).unwrap()
    })
}

#[test]
fn criterion_07_complementarity() {
    let t = components_table();
    let m = |v: &str| t.mean_cf1(v).unwrap();
    let (base, dual, cpfm, full) = (m("baseline"), m("+dual"), m("+cpfm"), m("+hdloss"));
    let gap = full - base;
    let ordered = base < dual && dual < cpfm && cpfm < full;
    let ok = gap >= 0.05 && ordered;
    verdict(
        7,
        ok,
        format!(
            "mean CF1 baseline {base:.4} +dual {dual:.4} +cpfm {cpfm:.4} +hdloss {full:.4}; gap {gap:.4} (>= 0.05: {}), strict ordering: {ordered}",
            gap >= 0.05
        ),
    );
    assert!(gap >= 0.05, "full model does not beat the baseline by 0.05");
    assert!(ordered, "component means are not strictly increasing");
}

#[test]
fn criterion_08_input_format() {
    let (cube, mask) = benchmark_scene();
    let base = benchmark_config();
    let vs: Vec<_> = variants(&base, AblationAxis::InputFormat)
        .into_iter()
        .filter(|v| v.name != "dual")
        .collect();
    let t = run_variants(&cube, &mask, AblationAxis::InputFormat, &vs, &SEEDS, BENCH_RATIO).unwrap();
    // The dual row of this axis is the same config as the component +dual row.
    let dual = components_table().mean_cf1("+dual").unwrap();
    let concat = t.mean_cf1("concat").unwrap();
    let shared = t.mean_cf1("shared-params").unwrap();
    let ok = concat <= dual && shared <= dual;
    verdict(
        8,
        ok,
        format!("mean CF1 concat {concat:.4} shared-params {shared:.4} dual {dual:.4}"),
    );
    assert!(concat <= dual, "concat input beats the dual encoder");
    assert!(shared <= dual, "shared parameters beat the dual encoder");
}

// 9 ---------------------------------------------------------------------

fn small_scene() -> (HsiCube, LabelMask) {
    synth_scene(&SynthSceneSpec {
        height: 16,
        width: 16,
        ..SynthSceneSpec::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs: 15,
        channel_schedule: vec![4, 8],
        fused_channels: 8,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_09_determinism() {
    let (cube, mask) = small_scene();
    let sp = split(&mask, 0.3, 7).unwrap();
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let run = train(&cube, &mask, &sp, &cfg).unwrap();
        let path = dir.path().join(format!("run{k}.ckpt"));
        save_model(&run.model, &cfg, &path).unwrap();
        runs.push((run, std::fs::read(&path).unwrap()));
    }
    let bits = |r: &cscn::harness::TrainedRun| -> Vec<u64> {
        r.record.trace.iter().flat_map(|b| [b.ce, b.asl, b.ccl, b.total]).map(f64::to_bits).collect()
    };
    let traces = bits(&runs[0].0) == bits(&runs[1].0);
    let checkpoints = runs[0].1 == runs[1].1;
    let reports = runs[0].0.record.report == runs[1].0.record.report;
    let ok = traces && checkpoints && reports;
    verdict(
        9,
        ok,
        format!("traces identical: {traces}, checkpoint bytes identical: {checkpoints}, reports identical: {reports}"),
    );
    assert!(ok);
}

// 10 --------------------------------------------------------------------

fn param_bits(store: &ParamStore) -> Vec<u64> {
    store.iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn criterion_10_leakage_guard() {
    let (cube, mask) = small_scene();
    let sp = split(&mask, 0.3, 7).unwrap();
    let classes = mask.class_count();
    let mut rng = seeded(10, 10);
    let poisoned: Vec<u16> = mask
        .labels()
        .iter()
        .zip(&sp.test)
        .map(|(&l, &test)| if test { rng.random_range(0..=classes) } else { l })
        .collect();
    let poisoned = LabelMask::new(mask.height(), mask.width(), classes, poisoned).unwrap();
    assert_ne!(poisoned, mask);
    let cfg = small_config();

    let trajectory = |labels: &LabelMask| {
        let mut model = Cscn::new(cfg.model_config(cube.band_count(), classes as usize), &mut seeded(cfg.seed, INIT_STREAM)).unwrap();
        let input = model.cfg.prepare(&cube).unwrap();
        let train_mask = labels.restricted(&sp.train);
        let mut trainer = Trainer::new(&mut model, &input, &train_mask, &cfg);
        let mut out = Vec::new();
        for _ in 0..cfg.epochs {
            trainer.step().unwrap();
            out.push(param_bits(&trainer.model.params));
        }
        out
    };
    let stepwise = trajectory(&mask) == trajectory(&poisoned);
    let end_to_end = param_bits(&train(&cube, &mask, &sp, &cfg).unwrap().model.params)
        == param_bits(&train(&cube, &poisoned, &sp, &cfg).unwrap().model.params);
    let ok = stepwise && end_to_end;
    verdict(
        10,
        ok,
        format!("per-step parameters identical: {stepwise}, trained parameters identical: {end_to_end}"),
    );
    assert!(ok);
}
