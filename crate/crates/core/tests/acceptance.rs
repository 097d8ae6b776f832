//! The eleven acceptance criteria. Each test prints one PASS/FAIL line.
//!
//! Criteria 7 to 10 share five pretrained toy networks; they are built once
//! per test binary.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use vsrprune::experiments::{
    error_growth, mean_std, prepare, run_ablation, run_criteria, run_sweep, AblationRow, CriteriaRow, Profile, Scheme,
    SweepRow, Trial, Variant,
};
use vsrprune::graph::{instantiate, load_checkpoint, save_checkpoint, NetworkConfig, NetworkSpec};
use vsrprune::model::{run_bidirectional, HiddenTrace, Sequence};
use vsrprune::pipeline::{run_stage, temporal_finetune_loss, Dataset, Model, TfNorm};
use vsrprune::regularizer::{inject_scaling, sir_penalty_on_tape, AlphaSchedule, Phase};
use vsrprune::rewrite::{apply_shuffle_rewrite, compile, conv_cost, cost};
use vsrprune::scoring::{empty_plan, score_network, select, Policy, ScoreOptions};
use vsrprune::tensor::kernels::{conv2d, pixel_shuffle, ConvGeometry};
use vsrprune::tensor::{grad_check, KernelTensor, Shape, Tape, Tensor, Var};

/// Written straight to stdout so the line survives the harness's output capture.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n:>2} {name}: {verdict} ({detail})").unwrap();
    out.flush().unwrap();
}

/// Desk-scale trend check: the verdict is printed but a FAIL does not abort the run.
fn trend(n: u32, name: &str, pass: bool, detail: &str, values: &[f64]) {
    report(n, name, pass, detail);
    assert!(values.iter().all(|v| v.is_finite()), "non-finite values in criterion {n}");
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_masked_equivalence() {
    let start = std::time::Instant::now();
    let policies = [Policy::MIN_GLOBAL, Policy::RAND_GLOBAL, Policy::MIN_LOCAL];
    let mut worst = 0.0f32;
    let mut triples = 0;
    for (i, p) in [0.3, 0.5, 0.7].into_iter().cycle().take(21).enumerate() {
        let seed = 100 + i as u64;
        let spec = NetworkConfig::toy().build();
        let w = instantiate(&spec, seed);
        let mut s = inject_scaling(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in s.gammas.values_mut() {
            g.iter_mut().for_each(|v| *v = rng.random_range(0.25..1.75));
        }
        let scores = score_network(&spec, &w, ScoreOptions::default()).unwrap();
        let plan = select(&scores, p, policies[i % 3], seed).unwrap();
        s.apply_plan(&plan).unwrap();
        let r = compile(&spec, &w, Some(&s), &plan).unwrap();
        let seq = Sequence::random(seed, 4, 6 + i % 3, 7, 1);
        let (sr_a, tr_a) = run_bidirectional(&spec, &w, Some(&s.masked()), &seq).unwrap();
        let (sr_b, tr_b) = run_bidirectional(&r.spec, &r.weights, None, &seq).unwrap();
        let states = |t: &HiddenTrace| t.forward.iter().chain(&t.backward).cloned().collect::<Vec<_>>();
        for (a, b) in sr_a.iter().chain(&states(&tr_a)).zip(sr_b.iter().chain(&states(&tr_b))) {
            worst = worst.max(a.max_abs_diff(b).unwrap());
        }
        assert!(r.after.macs() < r.before.macs());
        triples += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-5 && triples >= 20 && secs <= 120.0;
    report(1, "masked equivalence", pass, &format!("{triples} triples, max |diff| {worst:.2e}, {secs:.1}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

/// Periodic shuffle by its index formula.
fn shuffle_oracle(x: &Tensor, r: usize) -> Tensor {
    let s = x.shape();
    let c = s.c() / (r * r);
    let mut out = Tensor::zeros(Shape::new(s.n(), c, s.h() * r, s.w() * r));
    for n in 0..s.n() {
        for ch in 0..c {
            for y in 0..s.h() * r {
                for xx in 0..s.w() * r {
                    let src = ch * r * r + (y % r) * r + (xx % r);
                    out.set(n, ch, y, xx, x.at(n, src, y / r, xx / r));
                }
            }
        }
    }
    out
}

#[test]
fn c02_shuffle_commutation() {
    let geo = ConvGeometry { stride: 1, padding: 1 };
    let mut ok = 0;
    let instances = 120;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = rng.random_range(2..6);
        let c_in = rng.random_range(1..5);
        let k = KernelTensor::new(
            Tensor::uniform(Shape::new(4 * groups, c_in, 3, 3), -1.0, 1.0, &mut rng),
            Some((0..4 * groups).map(|_| rng.random_range(-0.5..0.5)).collect()),
        )
        .unwrap();
        let x = Tensor::uniform(Shape::new(1, c_in, rng.random_range(2..6), rng.random_range(2..6)), -1.0, 1.0, &mut rng);
        let mut pruned: Vec<usize> = (0..groups).filter(|_| rng.random_bool(0.4)).collect();
        if pruned.len() == groups {
            pruned.pop();
        }
        let kept: Vec<usize> = (0..groups).filter(|g| !pruned.contains(g)).collect();

        let pk = apply_shuffle_rewrite(&k, None, &kept).unwrap();
        let a = pixel_shuffle(&conv2d(&x, &pk.weight, pk.bias_tensor().as_ref(), geo).unwrap(), 2).unwrap();

        let full = pixel_shuffle(&conv2d(&x, &k.weight, k.bias_tensor().as_ref(), geo).unwrap(), 2).unwrap();
        let fs = full.shape();
        let mut b = Tensor::zeros(Shape::new(1, kept.len(), fs.h(), fs.w()));
        for (i, &g) in kept.iter().enumerate() {
            b.plane_mut(0, i).copy_from_slice(full.plane(0, g));
        }
        let oracle = shuffle_oracle(&conv2d(&x, &k.weight, k.bias_tensor().as_ref(), geo).unwrap(), 2);
        if a.bitwise_eq(&b) && full.bitwise_eq(&oracle) {
            ok += 1;
        }
    }
    let pass = ok == instances;
    report(2, "pixel-shuffle commutation", pass, &format!("{ok}/{instances} bitwise equal"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn projection(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = tape.constant(Tensor::uniform(tape.value(x).shape(), -1.0, 1.0, &mut rng));
    let m = tape.mul(x, w).unwrap();
    tape.sum(m)
}

#[test]
fn c03_gradient_suite() {
    const SEEDS: u64 = 20;
    let (h, tol) = (1e-2, 1e-3);
    let mut failures: BTreeMap<&str, u64> = BTreeMap::new();
    let mut worst = 0.0f64;
    let mut check = |name: &'static str, r: vsrprune::Result<vsrprune::tensor::GradCheckReport>| {
        let r = r.unwrap();
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            *failures.entry(name).or_default() += 1;
        }
    };
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = |s: Shape, rng: &mut ChaCha8Rng| Tensor::uniform(s, -1.0, 1.0, rng);

        let (x, w, b) = (
            u(Shape::new(1, 2, 4, 5), &mut rng),
            u(Shape::new(3, 2, 3, 3), &mut rng),
            u(Shape::new(1, 3, 1, 1), &mut rng),
        );
        check(
            "conv",
            grad_check(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                    Ok(projection(t, y, seed))
                },
                &[x, w, Tensor::vector(b.data().to_vec())],
                h,
                tol,
            ),
        );

        let x = u(Shape::new(1, 8, 2, 3), &mut rng);
        check(
            "shuffle",
            grad_check(
                |t, v| {
                    let y = t.pixel_shuffle(v[0], 2)?;
                    Ok(projection(t, y, seed))
                },
                &[x],
                h,
                tol,
            ),
        );

        let (x, g) = (u(Shape::new(1, 4, 3, 3), &mut rng), Tensor::vector((0..4).map(|_| rng.random_range(0.2..1.5)).collect()));
        check(
            "scale",
            grad_check(
                |t, v| {
                    let y = t.channel_scale(v[0], v[1])?;
                    Ok(projection(t, y, seed))
                },
                &[x, g],
                h,
                tol,
            ),
        );

        let (p, q) = (u(Shape::new(3, 3, 4, 4), &mut rng), u(Shape::new(3, 3, 4, 4), &mut rng));
        check(
            "charbonnier",
            grad_check(|t, v| t.charbonnier(v[0], v[1], 1e-6), &[p, q], h, tol),
        );

        let spec = NetworkConfig {
            trunk_width: 4,
            blocks: 1,
            ..NetworkConfig::toy()
        }
        .build();
        let mut state = inject_scaling(&spec).unwrap();
        let mut sched = AlphaSchedule::new(0.05, 0.3, 1, 1).unwrap();
        (0..rng.random_range(1..7)).for_each(|_| sched.step());
        state.schedule = Some(sched);
        let sites: Vec<String> = state.gammas.keys().cloned().collect();
        for (site, g) in state.gammas.iter_mut() {
            g.iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5));
            let n = g.len();
            state.unimportant.insert(site.clone(), (0..n).filter(|_| rng.random_bool(0.5)).collect());
        }
        let params: Vec<Tensor> = sites.iter().map(|s| Tensor::vector(state.gammas[s].clone())).collect();
        check(
            "sir",
            grad_check(
                |t, v| {
                    let m: BTreeMap<String, Var> = sites.iter().cloned().zip(v.iter().copied()).collect();
                    sir_penalty_on_tape(t, &m, &state)
                },
                &params,
                h,
                tol,
            ),
        );

        let shape = Shape::new(1, 3, 3, 4);
        let teacher = HiddenTrace {
            forward: vec![u(shape, &mut rng), u(shape, &mut rng)],
            backward: vec![u(shape, &mut rng), u(shape, &mut rng)],
        };
        let away = |t: &Tensor, rng: &mut ChaCha8Rng| {
            let mut o = t.clone();
            for v in o.data_mut() {
                let d: f32 = rng.random_range(0.05..1.0);
                *v += if rng.random_bool(0.5) { d } else { -d };
            }
            o
        };
        let (f, b) = (away(&teacher.forward[1], &mut rng), away(&teacher.backward[0], &mut rng));
        for norm in [TfNorm::Mae, TfNorm::Mse] {
            check(
                "tf",
                grad_check(
                    |t, v| temporal_finetune_loss(t, v[0], Some(v[1]), &teacher, norm),
                    &[f.clone(), b.clone()],
                    h,
                    tol,
                ),
            );
        }
    }
    let pass = failures.is_empty();
    report(
        3,
        "gradient suite",
        pass,
        &format!("6 ops x {SEEDS} seeds, worst relative error {worst:.2e}, failures {failures:?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_schedule_arithmetic() {
    let mut s = AlphaSchedule::new(1e-4, 0.1, 5, 3375).unwrap();
    let mut first_tau = None;
    let mut done_at = None;
    let mut it = 0u64;
    while done_at.is_none() && it < 20_000 {
        s.step();
        it += 1;
        if first_tau.is_none() && s.alpha == 0.1 {
            first_tau = Some(it);
        }
        if s.phase() == Phase::Done {
            done_at = Some(it);
        }
    }
    let pass = first_tau == Some(5000) && done_at == Some(8375);
    report(4, "schedule arithmetic", pass, &format!("alpha = tau first at {first_tau:?}, done at {done_at:?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

/// Layer list of a 64-wide, 30-block bidirectional BasicVSR written out by hand.
fn basicvsr_oracle(h: u64, w: u64) -> (u64, u64, u64) {
    let conv = |co: u64, ci: u64, k: u64, px: u64| (co * ci * k * k + co, co * ci * k * k * px);
    let lr = h * w;
    let mut layers = Vec::new();
    for _ in 0..2 {
        layers.push((conv(64, 64 + 3, 3, lr), false));
        for _ in 0..60 {
            layers.push((conv(64, 64, 3, lr), false));
        }
    }
    layers.push((conv(64, 128, 1, lr), true));
    layers.push((conv(256, 64, 3, lr), true));
    layers.push((conv(256, 64, 3, 4 * lr), true));
    layers.push((conv(64, 64, 3, 16 * lr), true));
    layers.push((conv(3, 64, 3, 16 * lr), true));
    let params = layers.iter().map(|l| l.0 .0).sum();
    let macs = layers.iter().map(|l| l.0 .1).sum();
    let up = layers.iter().filter(|l| l.1).map(|l| l.0 .1).sum();
    (params, macs, up)
}

#[test]
fn c05_cost_calibration() {
    let start = std::time::Instant::now();
    let c = cost(&NetworkConfig::paper_scale().build(), (180, 320));
    let (op, om, ou) = basicvsr_oracle(180, 320);
    let share = c.upsampler_share() * 100.0;
    let (p, f) = (c.params() as f64, c.macs() as f64);
    let secs = start.elapsed().as_secs_f64();
    let pass = c.params() == op
        && c.macs() == om
        && (c.upsampler_share() - ou as f64 / om as f64).abs() < 1e-12
        && (p / 4.9e6 - 1.0).abs() <= 0.10
        && (f / 338.5e9 - 1.0).abs() <= 0.10
        && (share - 22.0).abs() <= 4.0
        && secs < 1.0;
    report(
        5,
        "cost calibration",
        pass,
        &format!("{:.3}M params, {:.1}G FLOPs, upsampler {share:.1}%", p / 1e6, f / 1e9),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn c06_rsc_zero_overhead() {
    let spec = NetworkConfig {
        trunk_width: 12,
        blocks: 4,
        ..NetworkConfig::toy()
    }
    .build();
    let res = (9, 13);
    let mut mismatches = 0;
    let trials = 40;
    for seed in 0..trials {
        let w = instantiate(&spec, seed);
        let scores = score_network(&spec, &w, ScoreOptions::default()).unwrap();
        let p = ChaCha8Rng::seed_from_u64(seed).random_range(0.1..0.8);
        let plan = select(&scores, p, Policy::RAND_GLOBAL, seed).unwrap();
        let r = compile(&spec, &w, None, &plan).unwrap();
        let after = cost(&r.spec, res);
        for cell in r.spec.cells() {
            for b in &cell.blocks {
                let (m, ri, o) = (b.first_conv.extents().c_out, b.read_index.len(), b.write_index.len());
                // A plain block with the same kept extents and no index bookkeeping.
                let plain = [conv_cost(m, ri, 3, true, res.0, res.1), conv_cost(o, m, 3, true, res.0, res.1)];
                let got: Vec<(u64, u64)> = after
                    .rows
                    .iter()
                    .filter(|row| row.layer == b.first_conv.id || row.layer == b.second_conv.id)
                    .map(|row| (row.params, row.macs))
                    .collect();
                if got != plain {
                    mismatches += 1;
                }
            }
        }
    }
    let pass = mismatches == 0;
    report(6, "RSC zero overhead", pass, &format!("{trials} random plans, {mismatches} block mismatches"));
    assert!(pass);
}

// ---------------------------------------------------------------- 7 to 10

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn trials() -> &'static [Trial] {
    static T: OnceLock<Vec<Trial>> = OnceLock::new();
    T.get_or_init(|| {
        let profile = Profile::toy();
        SEEDS.par_iter().map(|&s| prepare(&profile, s).unwrap()).collect()
    })
}

const CRITERIA_RATIOS: [f64; 3] = [0.3, 0.5, 0.7];

fn criteria_rows() -> &'static [CriteriaRow] {
    static R: OnceLock<Vec<CriteriaRow>> = OnceLock::new();
    R.get_or_init(|| {
        let mut cells = Vec::new();
        for r in CRITERIA_RATIOS {
            for p in [Policy::MIN_GLOBAL, Policy::RAND_GLOBAL, Policy::MAX_GLOBAL] {
                cells.push((p, r));
            }
        }
        cells.push((Policy::MIN_LOCAL, 0.5));
        run_criteria(trials(), &cells).unwrap()
    })
}

fn ablation_rows() -> &'static [AblationRow] {
    static R: OnceLock<Vec<AblationRow>> = OnceLock::new();
    R.get_or_init(|| run_ablation(trials(), 0.5, &[Variant::Ssl1, Variant::Ssl3, Variant::Ssl4]).unwrap())
}

fn sweep_rows() -> &'static [SweepRow] {
    static R: OnceLock<Vec<SweepRow>> = OnceLock::new();
    R.get_or_init(|| run_sweep(trials(), &[0.25, 0.5, 0.75], &[Scheme::Ssl, Scheme::L1]).unwrap())
}

fn mean_of<T>(rows: &[T], keep: impl Fn(&T) -> bool, value: impl Fn(&T) -> f64) -> f64 {
    let xs: Vec<f64> = rows.iter().filter(|r| keep(r)).map(value).collect();
    assert_eq!(xs.len(), SEEDS.len(), "one row per seed expected");
    mean_std(&xs).0
}

#[test]
fn c07_criterion_ordering() {
    let start = std::time::Instant::now();
    let rows = criteria_rows();
    let m = |policy: &str, r: f64| mean_of(rows, |x| x.policy == policy && x.ratio == r, |x| x.psnr);
    let mut pass = true;
    let mut detail = Vec::new();
    for r in CRITERIA_RATIOS {
        let (mg, rd, mx) = (m("min-global", r), m("rand-global", r), m("max-global", r));
        pass &= mg > rd && rd > mx;
        detail.push(format!("p={r}: min {mg:.3} rand {rd:.3} max {mx:.3}"));
    }
    let ml = m("min-local", 0.5);
    let mg = m("min-global", 0.5);
    pass &= mg >= ml;
    detail.push(format!("min-local p=0.5 {ml:.3}"));
    let mins = start.elapsed().as_secs_f64() / 60.0;
    pass &= mins <= 120.0;
    report(7, "criterion ordering", pass, &format!("{}; {mins:.1} min", detail.join("; ")));
    assert!(pass);
}

#[test]
fn c08_ablation_direction() {
    let rows = ablation_rows();
    let m = |v: Variant, f: fn(&AblationRow) -> f64| mean_of(rows, |x| x.variant == v, f);
    let (p1, p3, p4) = (m(Variant::Ssl1, |x| x.psnr), m(Variant::Ssl3, |x| x.psnr), m(Variant::Ssl4, |x| x.psnr));
    let (e3, e4) = (m(Variant::Ssl3, |x| x.e_t), m(Variant::Ssl4, |x| x.e_t));
    let a = p4 >= p1;
    let b = e4 < e3 && p4 >= p3;
    trend(
        8,
        "ablation direction",
        a && b,
        &format!(
            "(a) RSC {p4:.3} vs skip-last {p1:.3} dB: {}; (b) e_T {e4:.5} with TF vs {e3:.5} without, PSNR {p4:.3} vs {p3:.3}: {}",
            if a { "ok" } else { "violated" },
            if b { "ok" } else { "violated" }
        ),
        &[p1, p3, p4, e3, e4],
    );
}

#[test]
fn c09_error_accumulation() {
    let growth: Vec<_> = trials()
        .par_iter()
        .map(|t| error_growth(t, 0.5, 10, 3).unwrap())
        .collect();
    let rho: Vec<f64> = growth.iter().map(|g| g.rho_forward).collect();
    let positive = rho.iter().filter(|&&r| r > 0.0).count();
    let pass = positive >= 4;
    let list: Vec<String> = rho.iter().map(|r| format!("{r:.2}")).collect();
    trend(
        9,
        "error accumulation",
        pass,
        &format!("rho per seed [{}], {positive}/5 positive", list.join(", ")),
        &rho,
    );
}

#[test]
fn c10_sweep_monotonicity() {
    let rows = sweep_rows();
    let points = 3;
    let curve = |s: Scheme| -> Vec<f64> {
        (0..points)
            .map(|p| mean_of(rows, |x| x.scheme == s && x.point == p, |x| x.psnr))
            .collect()
    };
    let (ssl, l1) = (curve(Scheme::Ssl), curve(Scheme::L1));
    let matched = rows.iter().all(|r| r.macs <= r.target_macs);
    let dominates = ssl.iter().zip(&l1).all(|(a, b)| a > b);
    let monotone = |c: &[f64]| c.windows(2).all(|w| w[1] <= w[0]);
    let pass = matched && dominates && monotone(&ssl) && monotone(&l1);
    let fmt = |c: &[f64]| c.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" > ");
    trend(
        10,
        "sweep monotonicity",
        pass,
        &format!("SSL {} | L1 {} (decreasing FLOPs)", fmt(&ssl), fmt(&l1)),
        &[ssl.as_slice(), l1.as_slice()].concat(),
    );
    assert!(matched, "sweep points exceed their FLOPs targets");
}

// ---------------------------------------------------------------- 11

fn small_profile() -> Profile {
    let mut p = Profile::smoke();
    p.pretrain.iterations = 12;
    p
}

#[test]
fn c11_determinism_and_roundtrip() {
    let p = small_profile();
    let data = Dataset::synthetic(&p.data).unwrap();
    let spec = p.network.build();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let train = || {
        pool.install(|| {
            let m = Model::new(spec.clone(), instantiate(&spec, 7));
            run_stage(&p.pretrain, m, &data, None).unwrap()
        })
    };
    let (a, b) = (train(), train());
    let bits = |o: &vsrprune::pipeline::StageOutcome| -> Vec<u64> {
        o.log
            .iter()
            .flat_map(|r| [r.loss_rec.to_bits(), r.loss_sir.to_bits(), r.loss_tf.to_bits(), r.alpha.to_bits()])
            .collect()
    };
    let logs_equal = bits(&a) == bits(&b) && a.log.len() == 12;

    let dir = tempfile::tempdir().unwrap();
    let mut scaling = inject_scaling(&a.model.spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    scaling.gammas.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v = rng.random()));
    save_checkpoint(&a.model.spec, &a.model.weights, Some(&scaling), dir.path()).unwrap();
    let c = load_checkpoint(dir.path()).unwrap();
    let same_weights = a.model.weights.iter().all(|(id, k)| {
        let l = c.weights.get(id).unwrap();
        k.weight.bitwise_eq(&l.weight)
            && k.bias.as_ref().map(|b| b.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                == l.bias.as_ref().map(|b| b.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    });
    let same_gammas = c.scaling.as_ref().is_some_and(|s| {
        s.gammas.len() == scaling.gammas.len()
            && s.gammas.iter().all(|(k, g)| {
                scaling.gammas[k].iter().map(|v| v.to_bits()).eq(g.iter().map(|v| v.to_bits()))
            })
    });
    let roundtrip = c.spec == a.model.spec && same_weights && same_gammas;

    let identity = identity_at_zero(&a.model.spec, &a.model, &data);
    let pass = logs_equal && roundtrip && identity;
    report(
        11,
        "determinism and round-trip",
        pass,
        &format!("logs bitwise {logs_equal}, checkpoint bitwise {roundtrip}, p=0 identity {identity}"),
    );
    assert!(pass);
}

fn identity_at_zero(spec: &NetworkSpec, model: &Model, data: &Dataset) -> bool {
    let scores = score_network(spec, &model.weights, ScoreOptions::default()).unwrap();
    let plan = select(&scores, 0.0, Policy::MIN_GLOBAL, 0).unwrap();
    let empty = empty_plan(spec, &model.weights).unwrap();
    let r = compile(spec, &model.weights, None, &plan).unwrap();
    let with_ones = compile(spec, &model.weights, Some(&inject_scaling(spec).unwrap()), &plan).unwrap();
    let seq = &data.val[0];
    let (sr_a, tr_a) = run_bidirectional(spec, &model.weights, None, seq).unwrap();
    let (sr_b, tr_b) = run_bidirectional(&r.spec, &r.weights, None, seq).unwrap();
    let outputs = sr_a.iter().zip(&sr_b).all(|(x, y)| x.bitwise_eq(y))
        && tr_a.forward.iter().zip(&tr_b.forward).all(|(x, y)| x.bitwise_eq(y))
        && tr_a.backward.iter().zip(&tr_b.backward).all(|(x, y)| x.bitwise_eq(y));
    plan.pruned.is_empty()
        && plan.sites == empty.sites
        && r.spec == *spec
        && r.weights == model.weights
        && with_ones.weights == model.weights
        && r.before == r.after
        && outputs
}
