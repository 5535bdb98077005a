use serde::{Deserialize, Serialize};

use super::table::{check_bits, max_code, QuantTable};
use crate::error::{Error, Result};

/// Linear grid points over `(0, 2·max|θ|]` tried as starting scales.
const LINEAR_GRID: usize = 256;
/// Starting points refined by alternating minimisation.
const REFINE: usize = 4;
const MAX_ALTERNATIONS: usize = 100;
/// Code changes beyond which the exact sweep is skipped.
const SWEEP_LIMIT: usize = 1 << 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFit {
    pub table: QuantTable,
    pub codes: Vec<i32>,
    /// Squared L2 error `Σ (θ − α·c)²`.
    pub l2_error: f64,
    /// All weights were zero; `α` was set to 1.
    pub degenerate: bool,
}

impl ScaleFit {
    pub fn dequantized(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.table.value(c)).collect()
    }
}

/// Starting scale `max|θ| / (2^{n−1} − 1)` (`max|θ|` for one bit).
pub fn initial_alpha(weights: &[f64], bits: u32) -> f64 {
    let m = weights.iter().fold(0.0f64, |a, w| a.max(w.abs()));
    m / max_code(bits) as f64
}

#[derive(Clone)]
struct Candidate {
    alpha: f64,
    codes: Vec<i32>,
    err: f64,
}

fn evaluate(weights: &[f64], bits: u32, alpha: f64) -> Option<Candidate> {
    let table = QuantTable::new(bits, alpha).ok()?;
    let codes = table.quantize_slice(weights);
    let err = table.sq_error(weights, &codes);
    Some(Candidate { alpha, codes, err })
}

/// Least-squares scale for fixed codes: `Σ θ·c / Σ c²`.
fn ls_alpha(weights: &[f64], codes: &[i32]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (&w, &c) in weights.iter().zip(codes) {
        num += w * c as f64;
        den += (c as f64) * (c as f64);
    }
    let a = num / den;
    (den > 0.0 && a > 0.0 && a.is_finite()).then_some(a)
}

/// Alternates nearest-code assignment and least-squares scale until the
/// codes stop changing. The error never increases along the way.
fn alternate(weights: &[f64], bits: u32, start: Candidate) -> Candidate {
    let mut best = start;
    for _ in 0..MAX_ALTERNATIONS {
        let Some(alpha) = ls_alpha(weights, &best.codes) else {
            break;
        };
        let Some(next) = evaluate(weights, bits, alpha) else {
            break;
        };
        let stable = next.codes == best.codes;
        if next.err <= best.err {
            best = next;
        } else {
            break;
        }
        if stable {
            break;
        }
    }
    best
}

/// If the fitted reconstruction is (numerically) exact, look for a scale
/// that reproduces every weight bit-for-bit. Makes quantization idempotent.
fn snap_exact(weights: &[f64], cand: &Candidate) -> Option<Candidate> {
    let total: f64 = weights.iter().map(|w| w * w).sum();
    if cand.err > 1e-20 * total.max(f64::MIN_POSITIVE) {
        return None;
    }
    let (idx, &code) = cand.codes.iter().enumerate().max_by_key(|(_, c)| c.abs())?;
    if code == 0 {
        return None;
    }
    let base = weights[idx] / code as f64;
    let mut tries = vec![base];
    let (mut up, mut down) = (base, base);
    for _ in 0..3 {
        up = up.next_up();
        down = down.next_down();
        tries.push(up);
        tries.push(down);
    }
    tries.into_iter().find_map(|alpha| {
        let ok = alpha > 0.0 && weights.iter().zip(&cand.codes).all(|(&w, &c)| alpha * c as f64 == w);
        ok.then(|| Candidate {
            alpha,
            codes: cand.codes.clone(),
            err: 0.0,
        })
    })
}

/// Exact minimiser of the error over all scales, when the number of code
/// changes `n·(2^{n−1}−1)` is at most [`SWEEP_LIMIT`]. As `α` shrinks from
/// above `2·max|θ|`, the code magnitude of `θ_i` steps from `k` to `k+1` at
/// `α = |θ_i|/(k+½)`; between steps the codes are fixed and the error is a
/// quadratic in `α` with minimiser `Σ|θ||c| / Σc²`, clamped to the interval.
fn sweep(weights: &[f64], bits: u32) -> Option<f64> {
    let m = max_code(bits) as usize;
    let nonzero = weights.iter().filter(|w| **w != 0.0).count();
    if bits == 1 || nonzero * m > SWEEP_LIMIT {
        return None;
    }
    let mut events: Vec<(f64, f64, u32)> = Vec::with_capacity(nonzero * m);
    for &w in weights.iter().filter(|w| **w != 0.0) {
        let a = w.abs();
        for k in 0..m {
            events.push((a / (k as f64 + 0.5), a, k as u32));
        }
    }
    events.sort_by(|x, y| y.0.total_cmp(&x.0));
    let total: f64 = weights.iter().map(|w| w * w).sum();
    let (mut num, mut den) = (0.0, 0.0);
    let mut best: Option<(f64, f64)> = None;
    for (i, &(hi, a, k)) in events.iter().enumerate() {
        let k = f64::from(k);
        num += a;
        den += 2.0 * k + 1.0;
        let lo = events.get(i + 1).map_or(0.0, |e| e.0);
        if lo >= hi {
            continue;
        }
        let alpha = (num / den).clamp(lo, hi);
        if alpha <= 0.0 {
            continue;
        }
        let err = total - 2.0 * alpha * num + alpha * alpha * den;
        if best.is_none_or(|(e, _)| err < e) {
            best = Some((err, alpha));
        }
    }
    best.map(|(_, a)| a)
}

/// Fits the scale of an `n`-bit table to `weights` by minimising the squared
/// reconstruction error.
///
/// Each candidate scale is scored by the least-squares error of its nearest
/// codes; the best few are refined by alternating minimisation (codes for
/// fixed `α`, closed-form `α` for fixed codes). Candidates are the standard
/// start `max|θ|/(2^{n−1}−1)`, a linear grid, `max|θ|/j` for every code
/// magnitude `j`, a geometric sweep around the standard start, and the
/// optimum of the next lower bit-width, whose levels are a subset of these.
/// Small problems also get the exact minimiser from a sweep over the scales
/// at which codes change. The result is never worse than the standard start.
pub fn optimize_scale(weights: &[f64], bits: u32) -> Result<ScaleFit> {
    check_bits(bits)?;
    if weights.is_empty() {
        return Err(Error::invalid("cannot fit a scale to no weights"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("weights".into()));
    }
    let max_abs = weights.iter().fold(0.0f64, |a, w| a.max(w.abs()));
    if max_abs == 0.0 {
        let table = QuantTable::new(bits, 1.0)?;
        let codes = table.quantize_slice(weights);
        let l2_error = table.sq_error(weights, &codes);
        return Ok(ScaleFit {
            table,
            codes,
            l2_error,
            degenerate: true,
        });
    }
    let m = max_code(bits);
    let alpha0 = max_abs / m as f64;
    let mut alphas = vec![alpha0];
    alphas.extend((1..=LINEAR_GRID).map(|k| 2.0 * max_abs * k as f64 / LINEAR_GRID as f64));
    if m <= 255 {
        alphas.extend((1..=m).map(|j| max_abs / j as f64));
    }
    alphas.extend((-24..=8).map(|k| alpha0 * 2f64.powf(k as f64 / 8.0)));
    if let Some(lower) = lower_bits(bits) {
        alphas.push(optimize_scale(weights, lower)?.table.alpha());
    }
    let exact = sweep(weights, bits).and_then(|a| evaluate(weights, bits, a));

    let start = evaluate(weights, bits, alpha0).expect("positive initial scale");
    let mut scored: Vec<(f64, Candidate)> = alphas
        .into_iter()
        .filter_map(|a| evaluate(weights, bits, a))
        .map(|c| {
            let ls = ls_alpha(weights, &c.codes)
                .and_then(|a| evaluate(weights, bits, a))
                .map_or(c.err, |l| l.err.min(c.err));
            (ls, c)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best = alternate(weights, bits, start);
    if let Some(cand) = exact {
        let refined = alternate(weights, bits, cand);
        if refined.err < best.err {
            best = refined;
        }
    }
    for (_, cand) in scored.into_iter().take(REFINE) {
        let refined = alternate(weights, bits, cand);
        if refined.err < best.err {
            best = refined;
        }
    }
    if let Some(exact) = snap_exact(weights, &best) {
        best = exact;
    }
    Ok(ScaleFit {
        table: QuantTable::new(bits, best.alpha)?,
        codes: best.codes,
        l2_error: best.err,
        degenerate: false,
    })
}

fn lower_bits(bits: u32) -> Option<u32> {
    match bits {
        2 => Some(1),
        4 => Some(2),
        8 => Some(4),
        16 => Some(8),
        _ => None,
    }
}
