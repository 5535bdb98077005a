//! Budget-constrained bit allocation.

use super::assignment::PrecisionAssignment;
use super::table::SensitivityTable;
use crate::error::{Error, Result};

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Sum of table entries selected by `assignment`.
pub fn total_sensitivity(table: &SensitivityTable, assignment: &PrecisionAssignment) -> Result<f64> {
    if assignment.len() != table.layers() {
        return Err(Error::invalid("assignment and table cover different layers"));
    }
    assignment
        .bits()
        .iter()
        .enumerate()
        .map(|(l, &b)| {
            table
                .get(l, b)
                .ok_or_else(|| Error::invalid(format!("no entry for layer {l} at {b} bits")))
        })
        .sum()
}

/// Chooses one candidate bit-width per layer minimising the summed
/// sensitivity subject to a parameter-weighted average of at most
/// `target_avg_bits`. Exact, by dynamic programming over the bit budget.
/// Equal sensitivities are resolved towards fewer total bits.
pub fn allocate_bits(table: &SensitivityTable, params: &[usize], target_avg_bits: f64) -> Result<PrecisionAssignment> {
    if params.len() != table.layers() {
        return Err(Error::invalid(format!(
            "{} parameter counts for {} table rows",
            params.len(),
            table.layers()
        )));
    }
    if params.is_empty() || params.contains(&0) {
        return Err(Error::invalid("every layer needs parameters"));
    }
    let min_bits = table.bits[0];
    if !target_avg_bits.is_finite() || target_avg_bits < f64::from(min_bits) {
        return Err(Error::Infeasible(format!(
            "target {target_avg_bits} bits is below the smallest candidate {min_bits}"
        )));
    }
    let costs: Vec<Vec<u64>> = params
        .iter()
        .map(|&p| table.bits.iter().map(|&b| p as u64 * u64::from(b)).collect())
        .collect();
    let g = costs.iter().flatten().fold(0, |a, &c| gcd(a, c));
    let costs: Vec<Vec<usize>> = costs
        .iter()
        .map(|row| row.iter().map(|&c| (c / g) as usize).collect())
        .collect();
    let total_params: u64 = params.iter().map(|&p| p as u64).sum();
    // allow for rounding in the product, e.g. 0.1 · 30 = 3.0000000000000004
    let budget_bits = (target_avg_bits * total_params as f64 * (1.0 + 1e-12)).floor();
    let most: usize = costs.iter().map(|row| *row.iter().max().unwrap()).sum();
    let cap = ((budget_bits / g as f64).floor() as usize).min(most);

    const NONE: u8 = u8::MAX;
    // best[c]: least sensitivity using exactly c budget units so far
    let mut best = vec![f64::INFINITY; cap + 1];
    best[0] = 0.0;
    let mut choice = vec![vec![NONE; cap + 1]; params.len()];
    for (l, row) in costs.iter().enumerate() {
        let mut next = vec![f64::INFINITY; cap + 1];
        for c in 0..=cap {
            if best[c].is_infinite() {
                continue;
            }
            for (j, &cost) in row.iter().enumerate() {
                let to = c + cost;
                if to > cap {
                    continue;
                }
                let s = best[c] + table.entries[l][j];
                if s < next[to] {
                    next[to] = s;
                    choice[l][to] = j as u8;
                }
            }
        }
        best = next;
    }
    let end = (0..=cap)
        .filter(|&c| best[c].is_finite())
        .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
        .ok_or_else(|| Error::Infeasible(format!("no assignment fits an average of {target_avg_bits} bits")))?;
    let mut bits = vec![0; params.len()];
    let mut c = end;
    for l in (0..params.len()).rev() {
        let j = choice[l][c] as usize;
        bits[l] = table.bits[j];
        c -= costs[l][j];
    }
    PrecisionAssignment::new(bits, params.to_vec())
}
