//! Acceptance criteria 1–10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use fbsim_core::baseline::{run_baseline, BaselineKind, ARRAY_SIZES};
use fbsim_core::bits::BitMatrix;
use fbsim_core::config::HardwareConfig;
use fbsim_core::crossbar::{write_fb, BasKind, BasOp, CrossbarState};
use fbsim_core::exec::simulate_inference;
use fbsim_core::floorplan::{
    balance_sizes, check_constraints, realize_placement, BalanceOptions, FbShape, Placement,
    SequencePair,
};
use fbsim_core::logic::{tournament_max, LogicCost, TournamentMode};
use fbsim_core::metrics::{adc_tradeoff, baseline_summary};
use fbsim_core::model::{benchmarks, ModelGraph};
use fbsim_core::pipeline::{simulate_timing, stage_to_gemm_ratio, TimingModel};
use fbsim_core::plan::{build_plan, PlanOptions};
use fbsim_core::reference::{reference_run, InferenceOutput};
use fbsim_core::session::{compare, simulate, RunSettings};
use fbsim_core::workload::{random_toy_model, rng, workload};
use rand::seq::SliceRandom;
use rand::Rng;

const BENCHMARKS: [&str; 3] = ["alexnet-cifar", "vgg16-cifar", "resnet18-cifar"];

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Outcome {
    let t = start.elapsed();
    ensure(
        t < limit,
        format!(
            "{detail}; {:.1}s (limit {}s)",
            t.as_secs_f64(),
            limit.as_secs()
        ),
    )
}

fn load(name: &str) -> ModelGraph {
    benchmarks::load(name).unwrap_or_else(|| panic!("shipped model {name}"))
}

fn functional_exactness() -> Outcome {
    let start = Instant::now();
    let cfg = HardwareConfig::reference();
    let mut r = rng(2024);
    let (mut models, mut softmax, mut max_err) = (0, 0, 0.0f64);
    for seed in 0..24u64 {
        let g = random_toy_model(&mut r);
        let array = if seed % 2 == 0 { (128, 128) } else { (64, 64) };
        let plan = build_plan(&g, array, PlanOptions::default())
            .map_err(|e| format!("toy {seed}: {e}"))?;
        let (w, x) = workload(&g, seed);
        let got =
            simulate_inference(&plan, &g, &w, &x, &cfg).map_err(|e| format!("toy {seed}: {e}"))?;
        let want = reference_run(&g, &w, &x);
        if got.activations != want.activations {
            return Err(format!(
                "toy {seed}: activations differ from the integer reference"
            ));
        }
        if let (InferenceOutput::Probabilities(p), InferenceOutput::Probabilities(q)) =
            (&got.output, &want.output)
        {
            softmax += 1;
            max_err = p
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b).abs())
                .fold(max_err, f64::max);
        }
        models += 1;
    }
    if max_err > 1e-2 {
        return Err(format!("softmax error {max_err:.2e} > 1e-2"));
    }
    within(
        Duration::from_secs(60),
        start,
        format!("{models} random CNNs exact ({softmax} with softmax, max error {max_err:.1e})"),
    )
}

fn tournament_logic() -> Outcome {
    let cost = LogicCost::default();
    for a in 0..4u32 {
        for b in 0..4u32 {
            let t = tournament_max(&[a, b], 2, TournamentMode::Max, cost);
            if t.winner != a.max(b) {
                return Err(format!("max({a}, {b}) gave {}", t.winner));
            }
        }
    }
    let mut r = rng(7);
    let n = 10_000;
    for _ in 0..n {
        let p = r.gen_range(2..=16);
        let codes: Vec<u32> = (0..p).map(|_| r.gen_range(0..256)).collect();
        let t = tournament_max(&codes, 8, TournamentMode::Max, cost);
        if t.winner != *codes.iter().max().unwrap() {
            return Err(format!("tournament over {codes:?} gave {}", t.winner));
        }
    }
    let pair = tournament_max(&[1, 2], 2, TournamentMode::Max, cost).cycles;
    ensure(pair == 16, format!("16 exhaustive 2-bit pairs, {n} random 8-bit tournaments; 2-element 2-bit cost {pair} cycles"))
}

fn bas_legality() -> Outcome {
    // Schedules emitted for random plans: every op goes through the
    // voltage-legality check of the crossbar state machine.
    let cfg = HardwareConfig::reference();
    let mut r = rng(31);
    let mut plan_ops = 0;
    for seed in 0..20u64 {
        let g = random_toy_model(&mut r);
        let plan = build_plan(
            &g,
            (64, 64),
            PlanOptions {
                canonical: seed % 2 == 1,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let (w, x) = workload(&g, seed);
        let out =
            simulate_inference(&plan, &g, &w, &x, &cfg).map_err(|e| format!("plan {seed}: {e}"))?;
        plan_ops += out.stats.write_cycles + out.stats.read_cycles + out.stats.logic_steps;
    }
    // Concurrent cycles: disjoint regions, one write-port op, reads elsewhere.
    let cycles = 2_000;
    for _ in 0..cycles {
        let n = 24;
        let cuts = |r: &mut rand_chacha::ChaCha8Rng| {
            let mut c: Vec<usize> = (0..r.gen_range(1..=3)).map(|_| r.gen_range(1..n)).collect();
            c.extend([0, n]);
            c.sort_unstable();
            c.dedup();
            c
        };
        let (rc, cc) = (cuts(&mut r), cuts(&mut r));
        let mut ops = Vec::new();
        for w in rc.windows(2) {
            for v in cc.windows(2) {
                let region = Placement {
                    fb_id: ops.len() as u32 + 1,
                    origin: (w[0], v[0]),
                    extent: (w[1] - w[0], v[1] - v[0]),
                };
                let input = (0..region.extent.0).map(|_| r.gen_bool(0.5)).collect();
                ops.push(BasOp {
                    kind: BasKind::ReadRegion { input },
                    region,
                });
            }
        }
        let i = r.gen_range(0..ops.len());
        let (nr, nc) = ops[i].region.extent;
        ops[i].kind = BasKind::WriteColumn {
            col: r.gen_range(0..nc),
            bits: (0..nr).map(|_| r.gen_bool(0.5)).collect(),
        };
        let mut state = CrossbarState::new(n, n, 9);
        state
            .apply_cycle(&ops)
            .map_err(|e| format!("concurrent cycle: {e}"))?;
    }
    for (rows, cols) in [(1, 1), (9, 16), (64, 37)] {
        for reset in [false, true] {
            let mut state = CrossbarState::new(rows, cols, 7);
            let region = Placement {
                fb_id: 1,
                origin: (0, 0),
                extent: (rows, cols),
            };
            let bits = BitMatrix::from_fn(rows, cols, |i, j| (i * 7 + j * 3) % 5 < 2);
            let w = write_fb(&mut state, region, &bits, reset).map_err(|e| e.to_string())?;
            if w.total() != cols as u64 + reset as u64 {
                return Err(format!(
                    "{rows}x{cols} write took {} cycles (reset {reset})",
                    w.total()
                ));
            }
        }
    }
    Ok(format!("{plan_ops} scheduled ops on 20 random plans and {cycles} random concurrent cycles conflict-free; write cycles = columns (+1 reset)"))
}

fn balance_soundness() -> Outcome {
    let mut r = rng(99);
    let mut feasible = 0;
    while feasible < 1_000 {
        let n = r.gen_range(1..=8);
        let array = (r.gen_range(16..=512), r.gen_range(16..=512));
        let fbs = common::random_fbs(&mut r, n, 64);
        let opts = BalanceOptions {
            literal_index: r.gen_bool(0.5),
        };
        if let Ok(shapes) = balance_sizes(&fbs, array, opts) {
            check_constraints(&fbs, &shapes, array, opts)
                .map_err(|e| format!("recheck failed for {fbs:?}: {e}"))?;
            feasible += 1;
        }
    }
    let mut small = 0;
    for _ in 0..5_000 {
        let n = r.gen_range(1..=4);
        let array = (r.gen_range(1..=16), r.gen_range(1..=16));
        let fbs = common::random_fbs(&mut r, n, 4);
        let opts = BalanceOptions {
            literal_index: r.gen_bool(0.5),
        };
        let got = balance_sizes(&fbs, array, opts)
            .ok()
            .map(|s| s.iter().map(|x| (x.nx, x.ny)).collect::<Vec<_>>());
        let want = common::exhaustive_sizes(&fbs, array, opts);
        if got != want {
            return Err(format!(
                "{fbs:?} in {array:?}: greedy {got:?}, exhaustive {want:?}"
            ));
        }
        small += 1;
    }
    Ok(format!("{feasible} feasible sets recheck; {small} instances (<=4 blocks, <=16x16) equal the exhaustive lexicographic argmax"))
}

fn floorplan_validity() -> Outcome {
    let mut r = rng(5);
    let (mut realized, n_pairs) = (0, 10_000);
    for _ in 0..n_pairs {
        let n = r.gen_range(1..=8);
        let ids: Vec<u32> = (1..=n).collect();
        let (mut seq1, mut seq2) = (ids.clone(), ids.clone());
        seq1.shuffle(&mut r);
        seq2.shuffle(&mut r);
        let sp = SequencePair { seq1, seq2 };
        let shapes: Vec<FbShape> = ids
            .iter()
            .map(|&id| FbShape {
                fb_id: id,
                nx: r.gen_range(1..=16),
                ny: r.gen_range(1..=16),
            })
            .collect();
        let array = (64, 64);
        let Ok(ps) = realize_placement(&sp, &shapes, array) else {
            continue;
        };
        realized += 1;
        for (i, a) in ps.iter().enumerate() {
            if a.end().0 > array.0 || a.end().1 > array.1 {
                return Err(format!("{a:?} out of bounds for {sp}"));
            }
            if let Some(b) = ps[i + 1..].iter().find(|b| a.overlaps(b)) {
                return Err(format!("{a:?} overlaps {b:?} for {sp}"));
            }
        }
    }
    ensure(
        realized >= 10_000 * 9 / 10,
        format!(
            "{realized} of {n_pairs} random sequence pairs realized; all disjoint and in bounds"
        ),
    )
}

fn utilization_trend() -> Outcome {
    let start = Instant::now();
    let g = load("alexnet-cifar");
    let cfg = HardwareConfig::reference();
    let u: Vec<f64> = ARRAY_SIZES
        .iter()
        .map(|&a| {
            baseline_summary(&run_baseline(&g, &cfg, &BaselineKind::Static(a)), &cfg)
                .map(|s| s.mean_spatial)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let ok = u[0] >= 0.90 && u[2] <= 0.70 && u[0] > u[1] && u[1] > u[2];
    if !ok {
        return Err(format!("spatial utilization {u:?} at {ARRAY_SIZES:?}"));
    }
    within(
        Duration::from_secs(10),
        start,
        format!(
            "spatial utilization {:.3} / {:.3} / {:.3} at 128 / 256 / 512",
            u[0], u[1], u[2]
        ),
    )
}

fn adc_ratios() -> Outcome {
    let (p, a) = adc_tradeoff(&HardwareConfig::reference(), 128, 512).map_err(|e| e.to_string())?;
    let near = |x: f64, t: f64| (x - t).abs() <= 0.05 * t;
    ensure(
        near(p, 3.4) && near(a, 3.7),
        format!("16x128^2 vs 1x512^2: ADC power {p:.3}x, area {a:.3}x"),
    )
}

fn benchmark_directions() -> Outcome {
    let start = Instant::now();
    let cfg = HardwareConfig::reference();
    let mut lines = Vec::new();
    let mut failed = false;
    for name in BENCHMARKS {
        let g = load(name);
        let rep = compare(
            &g,
            &cfg,
            PlanOptions::default(),
            &[BaselineKind::Static(512), BaselineKind::MultiSize],
        )
        .map_err(|e| e.to_string())?;
        let (me, st, ms) = (&rep.runs[0], &rep.runs[1], &rep.runs[2]);
        let speedup = rep.relative[0].speedup;
        let ok = speedup >= 1.0
            && me.mean_temporal > st.mean_temporal
            && me.mean_spatial > st.mean_spatial
            && me.spatial_stddev < ms.spatial_stddev;
        failed |= !ok;
        lines.push(format!(
            "{name}: speedup {speedup:.2}, temporal {:.3}>{:.3}, spatial {:.3}>{:.3}, stddev {:.3}<{:.3}",
            me.mean_temporal, st.mean_temporal, me.mean_spatial, st.mean_spatial, me.spatial_stddev, ms.spatial_stddev
        ));
    }
    let detail = lines.join("; ");
    if failed {
        return Err(detail);
    }
    within(Duration::from_secs(600), start, detail)
}

fn pipeline_stalls() -> Outcome {
    let cfg = HardwareConfig::reference();
    let tm = TimingModel::from_config(&cfg);
    let mut arrays = 0;
    for name in BENCHMARKS.iter().chain(&["toy-conv-relu-max"]) {
        let g = load(name);
        let plan =
            build_plan(&g, cfg.array(), PlanOptions::default()).map_err(|e| e.to_string())?;
        for ima in &plan.imas {
            let reqs: Vec<_> = ima.fbs.iter().map(|f| f.requirement()).collect();
            let shapes: Vec<_> = ima.fbs.iter().map(|f| f.shape()).collect();
            check_constraints(&reqs, &shapes, plan.array, plan.options.balance)
                .map_err(|e| format!("{name} array {}: {e}", ima.ima))?;
        }
        let trace = simulate_timing(&plan, &g, &tm);
        arrays += trace.imas.len();
        if let Some(tr) = trace.imas.iter().find(|t| t.steady_stall_cycles > 0) {
            return Err(format!(
                "{name} array {}: {} steady-state stall cycles",
                tr.ima, tr.steady_stall_cycles
            ));
        }
    }
    let g = load("alexnet-cifar");
    let plan = build_plan(&g, cfg.array(), PlanOptions::default()).map_err(|e| e.to_string())?;
    let trace = simulate_timing(&plan, &g, &tm);
    let ratio = stage_to_gemm_ratio(&trace.imas[0], &plan.imas[0])
        .ok_or("first AlexNet array has no stage block")?;
    ensure(ratio <= 1.0, format!("0 steady-state stalls on {arrays} arrays; AlexNet layer 1 (Max+ReLU)/Conv = {ratio:.3}"))
}

fn determinism() -> Outcome {
    let cfg = HardwareConfig::reference();
    let mut r = rng(1);
    let mut models = vec![load("toy-conv-relu-max"), load("alexnet-cifar")];
    models.extend((0..3).map(|_| random_toy_model(&mut r)));
    let mut files = 0;
    for g in &models {
        let settings = RunSettings {
            seed: 42,
            ..Default::default()
        };
        let a = simulate(g, &cfg, settings)
            .map_err(|e| format!("{}: {e}", g.name))?
            .artifacts();
        let b = simulate(g, &cfg, settings)
            .map_err(|e| format!("{}: {e}", g.name))?
            .artifacts();
        if a != b {
            return Err(format!(
                "{}: artifacts differ between identical runs",
                g.name
            ));
        }
        files += a.len();
    }
    Ok(format!(
        "{files} plan/trace/report files byte-identical across repeated runs of {} models",
        models.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("functional exactness", functional_exactness),
        ("tournament logic", tournament_logic),
        ("BAS legality and write cost", bas_legality),
        ("size balancing soundness", balance_soundness),
        ("floorplan validity", floorplan_validity),
        ("utilization vs array size", utilization_trend),
        ("ADC power/area ratios", adc_ratios),
        ("benchmark comparisons", benchmark_directions),
        ("pipeline stalls", pipeline_stalls),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
