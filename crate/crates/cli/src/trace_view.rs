//! Text view of an interval trace (`trace.csv` from `simulate`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;

use crate::{read, Failure, Result};

#[derive(Args)]
pub struct TraceViewArgs {
    /// Trace file written by `simulate`.
    trace: PathBuf,
    /// Only this array.
    #[arg(long)]
    ima: Option<usize>,
    /// First cycle of the window.
    #[arg(long, default_value_t = 0)]
    from: u64,
    /// End of the window (exclusive); defaults to the last task end.
    #[arg(long)]
    to: Option<u64>,
    /// Timeline width in characters.
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub start: u64,
    pub end: u64,
    pub ima: usize,
    pub fb_id: u32,
    pub op: String,
    pub phase: String,
    pub activated_cells: u64,
}

pub fn parse_trace(text: &str) -> std::result::Result<Vec<Task>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty trace")?;
    if header != "start,end,ima,group,fb_id,op,phase,granule,activated_cells" {
        return Err(format!("unexpected trace header `{header}`"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || format!("line {}: malformed row `{line}`", i + 2);
            if f.len() != 9 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
            Ok(Task {
                start: num(f[0])?,
                end: num(f[1])?,
                ima: num(f[2])? as usize,
                fb_id: num(f[4])? as u32,
                op: f[5].to_string(),
                phase: f[6].to_string(),
                activated_cells: num(f[8])?,
            })
        })
        .collect()
}

/// Busy cycles per block inside the window, and one timeline row per block:
/// `#` compute, `l` input load, `w` output write, `.` idle.
pub fn render(tasks: &[Task], ima: Option<usize>, from: u64, to: u64, width: usize) -> String {
    let width = width.max(1);
    let span = to.saturating_sub(from).max(1);
    let mut rows: BTreeMap<(usize, u32), (String, Vec<u8>, Vec<(u64, u64)>)> = BTreeMap::new();
    for t in tasks.iter().filter(|t| ima.is_none_or(|i| i == t.ima)) {
        let (s, e) = (t.start.max(from), t.end.min(to));
        let row = rows
            .entry((t.ima, t.fb_id))
            .or_insert_with(|| (t.op.clone(), vec![b'.'; width], Vec::new()));
        if e <= s {
            continue;
        }
        row.2.push((s, e));
        let mark = match t.phase.as_str() {
            "compute" => b'#',
            "load_input" => b'l',
            _ => b'w',
        };
        let a = ((s - from) as u128 * width as u128 / span as u128) as usize;
        let b = (((e - from) as u128 * width as u128).div_ceil(span as u128) as usize).min(width);
        for c in &mut row.1[a..b.max(a + 1).min(width)] {
            if *c == b'.' || mark == b'#' {
                *c = mark;
            }
        }
    }
    let mut out = format!("window [{from}, {to}) cycles, {width} columns\n");
    for ((ima, fb), (op, line, mut spans)) in rows {
        let busy = union_length(&mut spans);
        let _ = writeln!(
            out,
            "ima {ima:>4} FB{fb:<3} {op:<7} busy {busy:>9} ({:>5.1}%) |{}|",
            100.0 * busy as f64 / span as f64,
            String::from_utf8(line).expect("ascii")
        );
    }
    out
}

/// Cycles covered by at least one interval; parallel lanes of one block
/// overlap.
fn union_length(spans: &mut [(u64, u64)]) -> u64 {
    spans.sort_unstable();
    let (mut total, mut reach) = (0, 0);
    for &(s, e) in spans.iter() {
        let s = s.max(reach);
        if e > s {
            total += e - s;
            reach = e;
        }
    }
    total
}

pub fn run(args: &TraceViewArgs) -> Result<()> {
    let tasks = parse_trace(&read(&args.trace)?)
        .map_err(|e| Failure::Config(format!("{}: {e}", args.trace.display())))?;
    let to = args
        .to
        .unwrap_or_else(|| tasks.iter().map(|t| t.end).max().unwrap_or(0));
    print!("{}", render(&tasks, args.ima, args.from, to, args.width));
    Ok(())
}
