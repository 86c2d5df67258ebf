//! Encoding-side metrics: ABX discriminability, Levenshtein, DTW over posteriors, bitrate.

use crate::abcd::{PosteriorSequence, UnitSequence};
use crate::{Error, Result};

pub const KL_FLOOR: f64 = 1e-10;

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `D_KL(p ‖ q)` with both sides floored at [`KL_FLOOR`].
pub fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.max(KL_FLOOR);
            a * (a / b.max(KL_FLOOR)).ln()
        })
        .sum()
}

/// DTW with local cost `D_KL(a_i ‖ b_j)`, steps (1,0), (0,1), (1,1), divided by the
/// number of cells on the chosen path.
pub fn dtw_kl(pa: &PosteriorSequence, pb: &PosteriorSequence) -> Result<f64> {
    let (n, m) = (pa.n_frames(), pb.n_frames());
    if n == 0 || m == 0 {
        return Err(Error::Metric("dtw on an empty posterior sequence".into()));
    }
    if pa.n_categories() != pb.n_categories() {
        return Err(Error::Metric(format!("category counts differ: {} vs {}", pa.n_categories(), pb.n_categories())));
    }
    // (cost, path length) per cell; ties in cost prefer the longer path, i.e. the lower mean.
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let d = kl_rows(pa.row(i), pb.row(j));
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut cands = Vec::with_capacity(3);
                if i > 0 {
                    cands.push(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    cands.push(acc[i * m + j - 1]);
                }
                if i > 0 && j > 0 {
                    cands.push(acc[(i - 1) * m + j - 1]);
                }
                cands.into_iter().fold((f64::INFINITY, 0), |b, c| if c.0 < b.0 || (c.0 == b.0 && c.1 > b.1) { c } else { b })
            };
            acc[i * m + j] = (best.0 + d, best.1 + 1);
        }
    }
    let (cost, len) = acc[n * m - 1];
    Ok(cost / len as f64)
}

/// Percentage of triples with `d(B,X) < d(A,X)`, ties counting one half.
pub fn abx_error<T>(triples: &[(T, T, T)], mut dist: impl FnMut(&T, &T) -> Result<f64>) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Metric("no ABX triples".into()));
    }
    let mut errors = 0.0;
    for (a, b, x) in triples {
        let (dax, dbx) = (dist(a, x)?, dist(b, x)?);
        errors += if dbx < dax {
            1.0
        } else if dbx == dax {
            0.5
        } else {
            0.0
        };
    }
    Ok(100.0 * errors / triples.len() as f64)
}

fn unigram(frames: &[&[usize]]) -> (Vec<f64>, usize) {
    let k = frames.iter().flat_map(|f| f.iter()).max().map_or(0, |&m| m + 1);
    let mut counts = vec![0.0; k];
    let mut n = 0;
    for f in frames {
        for &u in f.iter() {
            counts[u] += 1.0;
            n += 1;
        }
    }
    (counts, n)
}

/// `Σ_frames −log₂ p(frame) / duration` with `p` the corpus unigram of per-frame units.
pub fn bitrate(unit_seqs: &[Vec<usize>], total_duration_sec: f64) -> Result<f64> {
    if !(total_duration_sec > 0.0) {
        return Err(Error::Metric("duration must be positive".into()));
    }
    let refs: Vec<&[usize]> = unit_seqs.iter().map(Vec::as_slice).collect();
    let (counts, n) = unigram(&refs);
    if n == 0 {
        return Err(Error::Metric("no frames".into()));
    }
    let bits: f64 = counts.iter().filter(|&&c| c > 0.0).map(|&c| -c * (c / n as f64).log2()).sum();
    Ok(bits / total_duration_sec)
}

pub fn bitrate_units(seqs: &[UnitSequence], total_duration_sec: f64) -> Result<f64> {
    bitrate(&seqs.iter().map(UnitSequence::expand).collect::<Vec<_>>(), total_duration_sec)
}

/// `exp` of the entropy of category usage over all frames.
pub fn effective_category_count(unit_seqs: &[Vec<usize>]) -> f64 {
    let refs: Vec<&[usize]> = unit_seqs.iter().map(Vec::as_slice).collect();
    let (counts, n) = unigram(&refs);
    if n == 0 {
        return 0.0;
    }
    let h: f64 = counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n as f64) * (c / n as f64).ln()).sum();
    h.exp()
}
