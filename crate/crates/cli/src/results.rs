//! Ranked search results as `query,rank,id,score` CSV.

use std::fmt::Write;

use anyhow::{bail, Context, Result};
use rbe_core::Neighbor;

pub const HEADER: &str = "query,rank,id,score";

pub fn render(rows: &[(u64, Vec<Neighbor>)]) -> String {
    let mut s = format!("{HEADER}\n");
    for (q, hits) in rows {
        for (rank, n) in hits.iter().enumerate() {
            let _ = writeln!(s, "{q},{rank},{},{}", n.id, n.score);
        }
    }
    s
}

/// Ranked ids per query, in first-appearance order of the queries.
pub fn parse(text: &str) -> Result<Vec<(u64, Vec<u64>)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HEADER) {
        bail!("results file must start with {HEADER:?}");
    }
    let mut out: Vec<(u64, Vec<(usize, u64)>)> = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            bail!("line {}: expected 4 fields", i + 2);
        }
        let num = |f: &str| f.parse::<u64>().with_context(|| format!("line {}: bad number {f:?}", i + 2));
        let (q, rank, id) = (num(fields[0])?, num(fields[1])? as usize, num(fields[2])?);
        match out.last_mut() {
            Some((last, hits)) if *last == q => hits.push((rank, id)),
            _ => out.push((q, vec![(rank, id)])),
        }
    }
    Ok(out
        .into_iter()
        .map(|(q, mut hits)| {
            hits.sort_by_key(|&(rank, _)| rank);
            (q, hits.into_iter().map(|(_, id)| id).collect())
        })
        .collect())
}
