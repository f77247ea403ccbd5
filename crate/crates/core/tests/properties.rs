//! Property tests for the structural invariants of floorplanning, data
//! mapping, the crossbar state machine and the pipeline model.

mod common;

use fbsim_core::bits::BitMatrix;
use fbsim_core::config::HardwareConfig;
use fbsim_core::crossbar::{gemm_bitserial, write_fb, BasKind, BasOp, CrossbarState};
use fbsim_core::datamap::{
    map_weights, read_weights, CellAssignment, CellRole, KernelTile, TileLayout,
};
use fbsim_core::floorplan::{
    balance_sizes, check_constraints, floorplan, realize_placement, BalanceOptions, FbShape,
    Placement, Relation, SequencePair,
};
use fbsim_core::logic::{tournament_max, LogicCost, TournamentMode};
use fbsim_core::pipeline::{simulate_timing, TimingModel};
use fbsim_core::plan::{build_plan, PlanOptions};
use fbsim_core::quant::weight_range;
use fbsim_core::workload::{random_toy_model, rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeded() -> impl Strategy<Value = ChaCha8Rng> {
    any::<u64>().prop_map(ChaCha8Rng::seed_from_u64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn realized_placements_are_disjoint_in_bounds_and_ordered(mut r in seeded(), n in 1usize..=6) {
        let ids: Vec<u32> = (1..=n as u32).collect();
        let mut seq1 = ids.clone();
        let mut seq2 = ids.clone();
        seq1.shuffle(&mut r);
        seq2.shuffle(&mut r);
        let sp = SequencePair { seq1, seq2 };
        let shapes: Vec<FbShape> = ids.iter().map(|&id| FbShape { fb_id: id, nx: r.gen_range(1..=12), ny: r.gen_range(1..=12) }).collect();
        let array = (32, 32);
        match realize_placement(&sp, &shapes, array) {
            Ok(ps) => {
                for p in &ps {
                    prop_assert!(p.end().0 <= array.0 && p.end().1 <= array.1);
                    let s = shapes.iter().find(|s| s.fb_id == p.fb_id).unwrap();
                    prop_assert_eq!(p.extent, (s.nx, s.ny));
                }
                for a in &ps {
                    for b in &ps {
                        if a.fb_id >= b.fb_id {
                            continue;
                        }
                        prop_assert!(!a.overlaps(b), "{a:?} overlaps {b:?}");
                        match sp.relation(a.fb_id, b.fb_id) {
                            Relation::LeftOf => prop_assert!(a.end().1 <= b.origin.1),
                            Relation::RightOf => prop_assert!(b.end().1 <= a.origin.1),
                            Relation::Below => prop_assert!(b.end().0 <= a.origin.0),
                            Relation::Above => prop_assert!(a.end().0 <= b.origin.0),
                        }
                    }
                }
            }
            Err(e) => prop_assert!(matches!(e, fbsim_core::floorplan::FloorplanError::Overflow { .. }), "{e}"),
        }
    }

    #[test]
    fn tournament_finds_the_maximum(mut r in seeded(), p in 1usize..=16, b in 1usize..=8) {
        let codes: Vec<u32> = (0..p).map(|_| r.gen_range(0..1u32 << b)).collect();
        let t = tournament_max(&codes, b, TournamentMode::Max, LogicCost::default());
        prop_assert_eq!(t.winner, *codes.iter().max().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn balanced_sizes_recheck_and_match_exhaustive_search(mut r in seeded(), n in 1usize..=4, literal in any::<bool>()) {
        let array = (r.gen_range(4..=16), r.gen_range(4..=16));
        let fbs = common::random_fbs(&mut r, n, 4);
        let opts = BalanceOptions { literal_index: literal };
        let got = balance_sizes(&fbs, array, opts);
        let want = common::exhaustive_sizes(&fbs, array, opts);
        match (got, want) {
            (Ok(shapes), Some(dims)) => {
                prop_assert!(check_constraints(&fbs, &shapes, array, opts).is_ok());
                let got: Vec<(usize, usize)> = shapes.iter().map(|s| (s.nx, s.ny)).collect();
                prop_assert_eq!(got, dims);
            }
            (Err(_), None) => {}
            (got, want) => prop_assert!(false, "balance {got:?} vs exhaustive {want:?} for {fbs:?} in {array:?}"),
        }
    }

    #[test]
    fn floorplans_of_feasible_sets_fit(mut r in seeded(), n in 1usize..=6, canonical in any::<bool>()) {
        let array = (r.gen_range(16..=128), r.gen_range(16..=128));
        let fbs = common::random_fbs(&mut r, n, 8);
        if let Ok((_, shapes, placements)) = floorplan(&fbs, array, canonical, BalanceOptions::default()) {
            prop_assert!(check_constraints(&fbs, &shapes, array, BalanceOptions::default()).is_ok());
            for (i, a) in placements.iter().enumerate() {
                prop_assert!(a.end().0 <= array.0 && a.end().1 <= array.1);
                for b in &placements[i + 1..] {
                    prop_assert!(!a.overlaps(b));
                }
            }
        }
    }

    #[test]
    fn random_bas_schedules_never_conflict(mut r in seeded()) {
        // Disjoint regions from a random grid cut; at most one write-port
        // op per cycle. A column write only sets cells; clearing needs a reset.
        let (rows, cols) = (24, 24);
        let cut = |r: &mut ChaCha8Rng, n: usize| {
            let mut c: Vec<usize> = (0..r.gen_range(1..=3)).map(|_| r.gen_range(1..n)).collect();
            c.extend([0, n]);
            c.sort_unstable();
            c.dedup();
            c
        };
        let (rc, cc) = (cut(&mut r, rows), cut(&mut r, cols));
        let mut regions = Vec::new();
        for w in rc.windows(2) {
            for v in cc.windows(2) {
                let id = regions.len() as u32 + 1;
                regions.push(Placement { fb_id: id, origin: (w[0], v[0]), extent: (w[1] - w[0], v[1] - v[0]) });
            }
        }
        let mut state = CrossbarState::new(rows, cols, 9);
        state.cells = BitMatrix::from_fn(rows, cols, |_, _| r.gen_bool(0.5));
        for _ in 0..8 {
            let before = state.cells.clone();
            let writer = r.gen_range(0..=regions.len());
            let mut ops = Vec::new();
            let mut target = None;
            for (i, &region) in regions.iter().enumerate() {
                let (nr, nc) = region.extent;
                let kind = if i == writer {
                    let col = r.gen_range(0..nc);
                    let bits: Vec<bool> = (0..nr).map(|_| r.gen_bool(0.5)).collect();
                    target = Some((region, col, bits.clone()));
                    BasKind::WriteColumn { col, bits }
                } else {
                    BasKind::ReadRegion { input: (0..nr).map(|_| r.gen_bool(0.5)).collect() }
                };
                ops.push(BasOp { kind, region });
            }
            prop_assert!(state.apply_cycle(&ops).is_ok());
            for rr in 0..rows {
                for c in 0..cols {
                    let expect = match &target {
                        Some((p, col, bits)) if p.contains(rr, c) && c - p.origin.1 == *col => bits[rr - p.origin.0] || before.get(rr, c),
                        _ => before.get(rr, c),
                    };
                    prop_assert_eq!(state.cells.get(rr, c), expect);
                }
            }
        }
    }

    #[test]
    fn write_cycles_follow_columns(rows in 1usize..=16, cols in 1usize..=16, reset in any::<bool>(), mut r in seeded()) {
        let mut state = CrossbarState::new(16, 16, 5);
        let region = Placement { fb_id: 1, origin: (16 - rows, 16 - cols), extent: (rows, cols) };
        let bits = BitMatrix::from_fn(rows, cols, |_, _| r.gen_bool(0.5));
        let w = write_fb(&mut state, region, &bits, reset).unwrap();
        prop_assert_eq!(w.total(), cols as u64 + reset as u64);
        prop_assert_eq!(state.cells.window(16 - rows, 16 - cols, rows, cols), bits);
    }

    #[test]
    fn bit_serial_gemm_is_exact(mut r in seeded(), rows in 1usize..=24, channels in 1usize..=4, bits_w in 1u32..=8, bits_in in 2u32..=8) {
        let (lo, hi) = weight_range(bits_w);
        let kernel = KernelTile { rows, channels, bits_w, values: (0..rows * channels).map(|_| r.gen_range(lo..=hi)).collect() };
        let layout = TileLayout::Weights { rows, row_offset: 0, channels, bits_w, kh: 1, kw: 1 };
        let region = Placement { fb_id: 1, origin: (0, 0), extent: (rows, channels * bits_w as usize) };
        let a = CellAssignment::new(region, layout).unwrap();
        let bits = map_weights(&a, &kernel).unwrap();
        prop_assert_eq!(&read_weights(&bits, bits_w), &kernel);
        let mut state = CrossbarState::new(rows, region.extent.1, 6);
        write_fb(&mut state, region, &bits, true).unwrap();
        let half = 1i64 << (bits_in - 1);
        let input: Vec<i64> = (0..rows).map(|_| r.gen_range(-half..half)).collect();
        let out = gemm_bitserial(&mut state, region, &input, bits_in, bits_w).unwrap();
        for k in 0..channels {
            let want: i64 = (0..rows).map(|i| input[i] * kernel.get(k, i)).sum();
            prop_assert_eq!(out.values[k], want);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_and_traces_are_consistent(seed in any::<u64>(), small in any::<bool>()) {
        let mut r = rng(seed);
        let g = random_toy_model(&mut r);
        let array = if small { (64, 64) } else { (128, 128) };
        let Ok(plan) = build_plan(&g, array, PlanOptions::default()) else { return Ok(()) };
        prop_assert!(plan.validate().is_ok());
        // Mapped cells counted per block equal the cells with a role.
        for ima in &plan.imas {
            let mut roles = 0;
            for fb in &ima.fbs {
                let a = fb.assignment();
                for row in fb.placement().rows() {
                    for col in fb.placement().cols() {
                        if !matches!(a.role_at(row, col), Some((_, CellRole::Unused)) | None) {
                            roles += 1;
                        }
                    }
                }
            }
            prop_assert_eq!(roles, ima.mapped_cells());
            prop_assert!(ima.mapped_cells() <= array.0 * array.1);
        }
        let tm = TimingModel::from_config(&HardwareConfig::reference());
        let trace = simulate_timing(&plan, &g, &tm);
        prop_assert!(trace.check_causality().is_ok(), "{:?}", trace.check_causality());
        prop_assert_eq!(trace.steady_stall_cycles(), 0);
        for tr in &trace.imas {
            for t in &tr.tasks {
                prop_assert!(tr.start <= t.start && t.start <= t.end);
            }
        }
        for w in trace.groups.windows(2) {
            prop_assert!(w[0].start <= w[0].compute_end && w[0].compute_end <= w[0].end && w[0].end <= w[1].start);
        }
        prop_assert_eq!(trace.total_cycles, trace.groups.last().unwrap().end);
    }
}
