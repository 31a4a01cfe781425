//! Exit-gate checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{conv_oracle, dense_kernel, fuse_oracle, mutate, rand_tensor};
use lstc_mda::augment::{
    additive_mix, apply_pipeline_traced, spatial_swap, temporal_splice, AugmentConfig, BodyPartition,
    MixOp, Sample,
};
use lstc_mda::data::{
    derive_modalities, parse_ntu_skeleton, split_every, synth_dataset, synth_long_range, write_ntu_skeleton,
    JointTopology, LongRangeConfig, Modality, SynthConfig,
};
use lstc_mda::gradcheck::{check_toy_model, GradcheckOptions};
use lstc_mda::lstc::{
    fuse_with_weight, long_branch, param_breakdown, LongKernelSpec, LongKernelVariant, LstcLayer, COSINE_EPS,
    LONG_PAD,
};
use lstc_mda::model::{
    ensemble_accuracy, evaluate, train, write_metrics_csv, Downsample, ToyModel, ToyModelConfig, TrainConfig,
};
use lstc_mda::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn gradcheck_toy_model() -> Outcome {
    let cfg = ToyModelConfig { c_embed: 2, t_in: 16, joints: 4, n_classes: 3, ..Default::default() };
    let widest = *cfg.widths().iter().max().unwrap();
    let start = Instant::now();
    let report = check_toy_model(&cfg, 11, &GradcheckOptions::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = report.worst().unwrap();
    let mus = report.params.iter().filter(|p| p.name.ends_with(".mu")).count();
    ensure(
        report.passed() && secs < 60.0 && widest <= 4 && mus == 3,
        format!(
            "{} tensors, {} LSTC layers, C<={widest}; worst {} rel {:.2e} abs {:.2e}; {secs:.1}s",
            report.params.len(),
            mus,
            worst.name,
            worst.max_rel_err,
            worst.max_abs_err
        ),
    )
}

fn run_long(x: &Tensor, l: &LstcLayer) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(l.params.w_long.clone());
    let y = long_branch(&mut tape, xv, w, &l.spec).unwrap();
    tape.value(y).clone()
}

fn sparse_kernel_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut instances, mut worst, mut perturbed) = (0, 0.0f64, 0usize);
    for trial in 0..128 {
        let variant = LongKernelVariant::ALL[trial % 4];
        let t = 2 * rng.random_range(1..=12);
        let (ci, co, v) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2));
        let l = LstcLayer::init(ci, co, t, v, variant, &mut rng).map_err(|e| e.to_string())?;
        let x = rand_tensor(&[ci, t, v], &mut rng);
        let y = run_long(&x, &l);
        let dense = dense_kernel(&l.params.w_long, l.spec.active_indices(), l.spec.span());
        worst = worst.max(y.max_abs_diff(&conv_oracle(&x, &dense, 1, LONG_PAD)).unwrap());
        instances += 1;
        for n in 0..t / 2 {
            let reads: Vec<isize> = l.spec.active_indices().iter().map(|&k| (n + k) as isize - LONG_PAD.0 as isize).collect();
            for f in (0..t).filter(|&f| !reads.contains(&(f as isize))) {
                let mut xp = x.clone();
                for c in 0..ci {
                    for j in 0..v {
                        let i = xp.idx3(c, f, j);
                        xp.data_mut()[i] += rng.random_range(-5.0..5.0);
                    }
                }
                let yp = run_long(&xp, &l);
                for c in 0..co {
                    for j in 0..v {
                        if yp.at3(c, n, j).to_bits() != y.at3(c, n, j).to_bits() {
                            return Err(format!("{variant} T={t}: output {n} moved when frame {f} changed"));
                        }
                    }
                }
                perturbed += 1;
            }
        }
    }
    ensure(
        instances >= 100 && worst <= 1e-12,
        format!("{instances} instances, max |dense oracle diff| {worst:.1e}; {perturbed} out-of-set perturbations bit-identical"),
    )
}

fn fuse_run(fs: &Tensor, fl: &Tensor, l: &LstcLayer) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(fs.clone()), tape.constant(fl.clone()));
    let p = l.params.record(&mut tape);
    let (out, w) = fuse_with_weight(&mut tape, a, b, &p).unwrap();
    (tape.value(out).clone(), tape.value(w).clone())
}

fn fusion_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let (c, t, v) = (rng.random_range(1..=4), 2 * rng.random_range(1..=4), rng.random_range(1..=3));
        let mut l = LstcLayer::init(c, c, t, v, LongKernelVariant::First3Last3, &mut rng).map_err(|e| e.to_string())?;
        if trial % 2 == 0 {
            l.params.mu = rand_tensor(&[c, t / 2, v], &mut rng);
        }
        let fs = rand_tensor(&[c, t / 2, v], &mut rng);
        let fl = rand_tensor(&[c, t / 2, v], &mut rng);
        let (out, w) = fuse_run(&fs, &fl, &l);
        let (want_out, want_w) = fuse_oracle(&fs, &fl, &l.params, COSINE_EPS);
        worst = worst.max(out.max_abs_diff(&want_out).unwrap()).max(w.max_abs_diff(&want_w).unwrap());
    }
    let (mut draws, mut extreme) = (0usize, 0.0f64);
    while draws < 10_000 {
        let scale = 10f64.powi(rng.random_range(-10..=4));
        let mut l = LstcLayer::init(3, 3, 8, 2, LongKernelVariant::First3Last3, &mut rng).map_err(|e| e.to_string())?;
        l.params.mu = Tensor::from_fn(vec![3, 4, 2], |_| scale * rng.random_range(-1.0..1.0));
        let fs = Tensor::from_fn(vec![3, 4, 2], |_| scale * rng.random_range(-1.0..1.0));
        let fl = rand_tensor(&[3, 4, 2], &mut rng);
        let (_, w) = fuse_run(&fs, &fl, &l);
        for &x in w.data() {
            if !(-2.0..=2.0).contains(&x) {
                return Err(format!("fusion weight {x} outside [-2, 2]"));
            }
            extreme = extreme.max(x.abs());
            draws += 1;
        }
    }
    let l = LstcLayer::init(4, 4, 16, 3, LongKernelVariant::First3Last3, &mut rng).map_err(|e| e.to_string())?;
    let fs = rand_tensor(&[4, 8, 3], &mut rng);
    let (out, _) = fuse_run(&fs, &Tensor::zeros(vec![4, 8, 3]), &l);
    let exact = out.data().iter().zip(fs.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(
        worst <= 1e-12 && exact,
        format!("oracle diff {worst:.1e}; {draws} weights in [-2,2] (max |w| {extreme:.3}); F_l=0 exact: {exact}"),
    )
}

fn shape_pipeline() -> Outcome {
    let mut seen = Vec::new();
    for t in [16, 32, 64] {
        for d in [Downsample::Lstc(LongKernelVariant::First3Last3), Downsample::TConv] {
            let cfg = ToyModelConfig { c_embed: 4, t_in: t, joints: 5, ..Default::default() }.with_downsample(d);
            let m = ToyModel::new(cfg).map_err(|e| e.to_string())?;
            let f = m.features(&Tensor::zeros(vec![3, t, 5])).map_err(|e| e.to_string())?;
            if f.shape() != [8, t / 8, 5] {
                return Err(format!("T_in={t} {d}: pre-pool {:?}", f.shape()));
            }
        }
        seen.push(format!("{t}->[8,{},5]", t / 8));
    }
    Ok(seen.join(" "))
}

fn parameter_accounting() -> Outcome {
    let count = |v, t| LongKernelSpec::for_input(v, t).map(|s| param_breakdown(1, 1, 1, t, 1, &s).long);
    let mut violations = Vec::new();
    for t in (16..=128).step_by(2) {
        let [u, f3, f4, e] = LongKernelVariant::ALL.map(|v| count(v, t).unwrap());
        if !(u < f3 && f3 < f4 && f4 < e) {
            violations.push(format!("T={t}: {u}/{f3}/{f4}/{e}"));
        }
    }
    let mut exact = true;
    for (ci, co) in [(1, 1), (3, 5), (64, 64), (7, 128)] {
        for t in [16, 32, 64, 100] {
            let spec = LongKernelSpec::for_input(LongKernelVariant::First3Last3, t).unwrap();
            exact &= param_breakdown(ci, co, co, t, 1, &spec).long == 6 * co * ci;
        }
    }
    let detail = format!(
        "first3_last3 = 6*Co*Ci: {exact}; ordering uniform5<first3_last3<first4_last4<every_other violated at {} of 57 even T in 16..=128{}",
        violations.len(),
        if violations.is_empty() { String::new() } else { format!(" ({} .. {})", violations[0], violations[violations.len() - 1]) }
    );
    ensure(exact && violations.is_empty(), detail)
}

fn batch(n: usize, shape: &[usize], views: u32, classes: usize, rng: &mut impl Rng) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample::one_hot(format!("s{i}"), rand_tensor(shape, rng), i % classes, classes, (i as u32) % views).unwrap())
        .collect()
}

fn mixing_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let part = BodyPartition::singletons(3).unwrap();
    let cfg = AugmentConfig::default();
    let (mut mixed, mut worst_sum) = (0usize, 0.0f64);
    let (mut pairings, mut same_view) = (0usize, 0usize);
    while mixed < 100_000 {
        let b = batch(250, &[3, 4, 3], 4, 5, &mut rng);
        let (out, trace) = apply_pipeline_traced(&b, &cfg, Some(&part), &mut rng).map_err(|e| e.to_string())?;
        for ((s, o), evs) in b.iter().zip(&out).zip(&trace) {
            if o.y.iter().any(|&p| p < 0.0) {
                return Err(format!("negative label weight {:?}", o.y));
            }
            worst_sum = worst_sum.max((o.y.iter().sum::<f64>() - 1.0).abs());
            for e in evs {
                pairings += 1;
                same_view += (e.partner_view == s.view_group && b[e.partner].view_group == s.view_group) as usize;
            }
            mixed += 1;
        }
    }
    let pair = batch(2, &[3, 6, 3], 1, 3, &mut rng);
    let (a, p) = (&pair[0], &pair[1]);
    let bits = |s: &Sample| (s.x.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), s.y.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    let endpoints = [
        (additive_mix(a, p, 1.0, true), a),
        (additive_mix(a, p, 0.0, true), p),
        (temporal_splice(a, p, 0, 0, true), a),
        (temporal_splice(a, p, 6, 0, true), p),
        (spatial_swap(a, p, &part, &[false; 3], true), a),
        (spatial_swap(a, p, &part, &[true; 3], true), p),
    ];
    let exact = endpoints.iter().all(|(m, want)| m.as_ref().map(|m| bits(m) == bits(want)).unwrap_or(false));
    let mut freqs = Vec::new();
    for op in [MixOp::Temporal, MixOp::Spatial, MixOp::Additive] {
        let cfg = AugmentConfig {
            p_temporal: if op == MixOp::Temporal { 0.5 } else { 0.0 },
            p_spatial: if op == MixOp::Spatial { 0.5 } else { 0.0 },
            p_additive: if op == MixOp::Additive { 0.5 } else { 0.0 },
            ..Default::default()
        };
        let (mut hits, mut draws) = (0usize, 0usize);
        while draws < 100_000 {
            let b = batch(500, &[1, 2, 3], 5, 2, &mut rng);
            let (_, trace) = apply_pipeline_traced(&b, &cfg, Some(&part), &mut rng).map_err(|e| e.to_string())?;
            hits += trace.iter().filter(|e| e.iter().any(|e| e.op == op)).count();
            draws += b.len();
        }
        freqs.push(hits as f64 / draws as f64);
    }
    let freq_ok = freqs.iter().all(|f| (f - 0.5).abs() <= 0.005);
    ensure(
        worst_sum <= 1e-9 && exact && same_view == pairings && freq_ok,
        format!(
            "{mixed} mixed labels on simplex (max |sum-1| {worst_sum:.1e}); endpoints exact: {exact}; same-view pairings {same_view}/{pairings}; frequencies T/S/A {:.4}/{:.4}/{:.4}",
            freqs[0], freqs[1], freqs[2]
        ),
    )
}

fn fixture(name: &str) -> Vec<u8> {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", name].iter().collect();
    std::fs::read(p).unwrap()
}

fn parser_robustness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for name in ["S001C002P003R002A013.skeleton", "zero.skeleton"] {
        let seq = parse_ntu_skeleton(&fixture(name)).map_err(|e| format!("{name}: {e}"))?;
        let back = parse_ntu_skeleton(write_ntu_skeleton(&seq).as_bytes()).map_err(|e| e.to_string())?;
        for (fa, fb) in seq.frames.iter().zip(&back.frames) {
            for (ba, bb) in fa.bodies.iter().zip(&fb.bodies) {
                for (ja, jb) in ba.joints.iter().zip(&bb.joints) {
                    worst = worst.max((0..3).map(|c| (ja.pos[c] - jb.pos[c]).abs()).fold(0.0, f64::max));
                }
            }
        }
    }
    let truncated = parse_ntu_skeleton(&fixture("truncated.skeleton")).err().and_then(|e| e.line()).is_some();
    let base = fixture("S001C002P003R002A013.skeleton");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut errors, mut accepted) = (0usize, 0usize);
    let quiet = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for _ in 0..10_000 {
        let m = mutate(&base, &mut rng);
        match std::panic::catch_unwind(|| parse_ntu_skeleton(&m)) {
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(e)) if e.line().is_some() => errors += 1,
            Ok(Err(e)) => {
                std::panic::set_hook(quiet);
                return Err(format!("error without location: {e}"));
            }
            Err(_) => {
                std::panic::set_hook(quiet);
                return Err("parser panicked".into());
            }
        }
    }
    std::panic::set_hook(quiet);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-6 && truncated && secs < 120.0,
        format!("round-trip max diff {worst:.1e}; 10000 mutations: {errors} located errors, {accepted} still valid, 0 panics; {secs:.1}s"),
    )
}

fn toy_convergence() -> Outcome {
    let data = synth_dataset(&SynthConfig { seed: 1, ..Default::default() }).map_err(|e| e.to_string())?;
    let (tr, va) = split_every(data, 4, 1);
    let part = BodyPartition::singletons(8).unwrap();
    let cfg = TrainConfig { seed: 1, eval_train: false, ..TrainConfig::desk() };
    let aug = AugmentConfig { rng_seed: 1, ..Default::default() };
    let run = || -> Result<(lstc_mda::model::TrainOutcome, Duration), String> {
        let start = Instant::now();
        let model = ToyModel::new(ToyModelConfig { seed: 1, ..Default::default() }).map_err(|e| e.to_string())?;
        let out = train(model, &tr, &va, &aug, Some(&part), &cfg).map_err(|e| e.to_string())?;
        Ok((out, start.elapsed()))
    };
    let (a, took) = run()?;
    let (b, _) = run()?;
    let same = write_metrics_csv(&a.log) == write_metrics_csv(&b.log) && a.model.params() == b.model.params();
    let held_out = evaluate(&a.model, &va).map_err(|e| e.to_string())?.accuracy;
    let train_acc = evaluate(&a.model, &tr).map_err(|e| e.to_string())?.accuracy;
    let first = a.log.iter().position(|e| e.val_acc.unwrap_or(0.0) >= 0.95).map(|i| i + 1);
    let k = a.log.len() / 10;
    let early = median(a.log[..k].iter().map(|e| e.loss).collect());
    let late = median(a.log[a.log.len() - k..].iter().map(|e| e.loss).collect());
    let secs = took.as_secs_f64();
    ensure(
        held_out >= 0.95 && same && secs < 600.0 && late < early,
        format!(
            "{} epochs: held-out {:.3}, train {:.3}, >=95% first at epoch {:?}; loss median {early:.3} -> {late:.3}; rerun identical: {same}; {secs:.0}s per run",
            cfg.epochs, held_out, train_acc, first
        ),
    )
}

fn ablation_direction() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let data = synth_long_range(&LongRangeConfig { seed, ..Default::default() }).map_err(|e| e.to_string())?;
        let (tr, va) = split_every(data, 4, 1);
        let mut acc = [0.0; 2];
        for (k, d) in [Downsample::Lstc(LongKernelVariant::First3Last3), Downsample::TConv].into_iter().enumerate() {
            let mcfg = ToyModelConfig { t_in: 64, joints: 4, n_classes: 2, seed, ..Default::default() }.with_downsample(d);
            let model = ToyModel::new(mcfg).map_err(|e| e.to_string())?;
            let cfg = TrainConfig { epochs: 30, warmup_epochs: 1, seed, eval_train: false, ..TrainConfig::desk() };
            let out = train(model, &tr, &va, &AugmentConfig::disabled(), None, &cfg).map_err(|e| e.to_string())?;
            acc[k] = evaluate(&out.model, &va).map_err(|e| e.to_string())?.accuracy;
        }
        wins += (acc[0] > acc[1]) as usize;
        rows.push(format!("{:.2}/{:.2}", acc[0], acc[1]));
    }
    ensure(wins >= 3, format!("LSTC wins {wins}/5 seeds (LSTC/T-Conv held-out: {})", rows.join(" ")))
}

fn ensemble_trend() -> Outcome {
    let mut margins = Vec::new();
    let mut rows = Vec::new();
    let synth = SynthConfig { n_per_class: 50, noise_sigma: 0.6, ..Default::default() };
    for seed in 0..5u64 {
        let data = synth_dataset(&SynthConfig { seed, ..synth.clone() }).map_err(|e| e.to_string())?;
        let topo = JointTopology::chain(synth.joints);
        let mut scores = Vec::new();
        let mut singles = Vec::new();
        let mut labels = Vec::new();
        for m in Modality::ALL {
            let set: Vec<Sample> = data
                .iter()
                .map(|s| {
                    let x = derive_modalities(&s.x, topo.clone()).unwrap().into_modality(m);
                    Sample { x, ..s.clone() }
                })
                .collect();
            let (tr, va) = split_every(set, 4, 1);
            let mcfg = ToyModelConfig { seed, ..Default::default() };
            let model = ToyModel::new(mcfg).map_err(|e| e.to_string())?;
            let cfg = TrainConfig { epochs: 8, warmup_epochs: 1, seed, eval_train: false, ..TrainConfig::desk() };
            let out = train(model, &tr, &va, &AugmentConfig::disabled(), None, &cfg).map_err(|e| e.to_string())?;
            let ev = evaluate(&out.model, &va).map_err(|e| e.to_string())?;
            singles.push(ev.accuracy);
            labels = ev.labels;
            scores.push(ev.logits);
        }
        let e2 = ensemble_accuracy(&scores[..2], &labels).map_err(|e| e.to_string())?;
        let e4 = ensemble_accuracy(&scores, &labels).map_err(|e| e.to_string())?;
        let best = singles.iter().cloned().fold(0.0, f64::max);
        margins.push(e2 - best);
        rows.push(format!("[J {:.2} B {:.2} JM {:.2} BM {:.2} | E2 {e2:.2} E4 {e4:.2}]", singles[0], singles[1], singles[2], singles[3]));
    }
    let med = median(margins);
    ensure(med >= -0.01, format!("median(E2 - best single) = {:+.3}; {}", med, rows.join(" ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradcheck of a 3-layer LSTC toy model", gradcheck_toy_model),
        ("sparse long-kernel semantics", sparse_kernel_semantics),
        ("fusion semantics", fusion_semantics),
        ("pre-pool shape pipeline", shape_pipeline),
        ("long-branch parameter accounting", parameter_accounting),
        ("mixing augmentation properties", mixing_properties),
        ("skeleton parser robustness", parser_robustness),
        ("toy convergence", toy_convergence),
        ("LSTC vs T-Conv on the long-range task", ablation_direction),
        ("E2 ensemble vs best single modality", ensemble_trend),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS {n:>2} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
