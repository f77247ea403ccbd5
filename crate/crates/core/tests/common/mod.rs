//! Independent oracles and generators shared by the property and
//! acceptance tests.
#![allow(dead_code)]

use fbsim_core::floorplan::BalanceOptions;
use fbsim_core::lowering::FbRequirement;
use fbsim_core::model::LayerKind;
use rand::Rng;

/// Random block set of `n` blocks with op tiles up to `max_tile`; later
/// blocks may accumulate onto an earlier non-accumulating one.
pub fn random_fbs(rng: &mut impl Rng, n: usize, max_tile: usize) -> Vec<FbRequirement> {
    let mut fbs: Vec<FbRequirement> = Vec::with_capacity(n);
    for i in 0..n {
        let id = i as u32 + 1;
        let mut fb = FbRequirement::new(
            id,
            LayerKind::Conv,
            rng.gen_range(1..=max_tile),
            rng.gen_range(1..=max_tile),
            1,
            id,
        );
        let partners: Vec<&FbRequirement> = fbs
            .iter()
            .filter(|f| f.accumulates_with.is_none())
            .collect();
        if !partners.is_empty() && rng.gen_bool(0.25) {
            let p = partners[rng.gen_range(0..partners.len())];
            fb.op_kind = LayerKind::Res;
            fb.by = p.by;
            fb.accumulates_with = Some(p.fb_id);
        }
        fbs.push(fb);
    }
    fbs
}

fn mirror_dims(fbs: &[FbRequirement], i: usize, dims: &[(usize, usize)]) -> (usize, usize) {
    let j = fbs[i].accumulates_with.unwrap();
    let p = fbs.iter().position(|f| f.fb_id == j).unwrap();
    (fbs[i].bx * (dims[p].0 / fbs[p].bx), dims[p].1)
}

fn prev_chain(fbs: &[FbRequirement], i: usize) -> Option<usize> {
    (0..i).rev().find(|&j| fbs[j].accumulates_with.is_none())
}

/// Producer replicas must not exceed the consumer's intake columns.
fn throughput_ok(
    fbs: &[FbRequirement],
    dims: &[(usize, usize)],
    i: usize,
    opts: BalanceOptions,
) -> bool {
    let Some(p) = prev_chain(fbs, i) else {
        return true;
    };
    let replicas = (dims[p].0 / fbs[p].bx) * (dims[p].1 / fbs[p].by);
    if opts.literal_index {
        dims[i].1 >= replicas * fbs[p].by
    } else {
        dims[i].1 / fbs[i].by >= replicas
    }
}

/// Direct statement of every sizing constraint.
pub fn feasible(
    fbs: &[FbRequirement],
    dims: &[(usize, usize)],
    array: (usize, usize),
    opts: BalanceOptions,
) -> bool {
    let tiles_ok = fbs.iter().zip(dims).all(|(f, &(x, y))| {
        x > 0 && y > 0 && x <= array.0 && y <= array.1 && x % f.bx == 0 && y % f.by == 0
    });
    let rows: usize = dims.iter().map(|d| d.0).sum();
    let cols: usize = fbs
        .iter()
        .zip(dims)
        .filter(|(f, _)| f.accumulates_with.is_none())
        .map(|(_, d)| d.1)
        .sum();
    tiles_ok
        && rows <= array.0
        && cols <= array.1
        && (0..fbs.len()).all(|i| match fbs[i].accumulates_with {
            Some(_) => dims[i] == mirror_dims(fbs, i, dims),
            None => throughput_ok(fbs, dims, i, opts),
        })
}

/// Exhaustive search for the lexicographically largest feasible
/// `(nx₀, ny₀, nx₁, ny₁, …)`, accumulating blocks being fixed by their
/// partner.
pub fn exhaustive_sizes(
    fbs: &[FbRequirement],
    array: (usize, usize),
    opts: BalanceOptions,
) -> Option<Vec<(usize, usize)>> {
    let mut dims = vec![(0, 0); fbs.len()];
    search(fbs, array, opts, 0, &mut dims).then_some(dims)
}

fn search(
    fbs: &[FbRequirement],
    array: (usize, usize),
    opts: BalanceOptions,
    i: usize,
    dims: &mut Vec<(usize, usize)>,
) -> bool {
    if i == fbs.len() {
        return feasible(fbs, dims, array, opts);
    }
    let rows_left: usize = fbs[i + 1..].iter().map(|f| f.bx).sum();
    let cols_left: usize = fbs[i + 1..]
        .iter()
        .filter(|f| f.accumulates_with.is_none())
        .map(|f| f.by)
        .sum();
    let used_rows: usize = dims[..i].iter().map(|d| d.0).sum();
    let used_cols: usize = fbs[..i]
        .iter()
        .zip(dims.iter())
        .filter(|(f, _)| f.accumulates_with.is_none())
        .map(|(_, d)| d.1)
        .sum();
    let fb = &fbs[i];
    if fb.accumulates_with.is_some() {
        dims[i] = mirror_dims(fbs, i, dims);
        return used_rows + dims[i].0 + rows_left <= array.0
            && search(fbs, array, opts, i + 1, dims);
    }
    for nx in (fb.bx..=array.0)
        .step_by(fb.bx)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
    {
        if used_rows + nx + rows_left > array.0 {
            continue;
        }
        for ny in (fb.by..=array.1)
            .step_by(fb.by)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
        {
            if used_cols + ny + cols_left > array.1 {
                continue;
            }
            dims[i] = (nx, ny);
            if !throughput_ok(fbs, dims, i, opts) {
                continue;
            }
            if search(fbs, array, opts, i + 1, dims) {
                return true;
            }
        }
    }
    dims[i] = (0, 0);
    false
}
