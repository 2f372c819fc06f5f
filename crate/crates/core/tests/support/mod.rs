//! Independent reference implementations used by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

pub mod gradcheck;

use visga::{BoundingBox, StopRule};

/// Cosine distance computed the obvious way.
pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

pub fn iou_oracle(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let area = |r: &BoundingBox| (r.x2 - r.x1).max(0.0) * (r.y2 - r.y1).max(0.0);
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        1.0
    } else {
        1.0 - inter / union
    }
}

/// Complete-linkage clustering by exhaustive search over the full cluster
/// distance table after every merge. Clusters are identified by their
/// smallest member; ties go to the lexicographically smallest id pair.
/// Returns clusters with sorted members, sorted by first member.
pub fn naive_complete_linkage(n: usize, dist: impl Fn(usize, usize) -> f64, stop: StopRule) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let linkage = |a: &[usize], b: &[usize]| -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for &i in a {
            for &j in b {
                worst = worst.max(dist(i, j));
            }
        }
        worst
    };
    loop {
        match stop {
            StopRule::FixedCount(k) if clusters.len() <= k.max(1) => break,
            _ => {}
        }
        if clusters.len() < 2 {
            break;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let d = linkage(&clusters[x], &clusters[y]);
                let (lo, hi) = {
                    let (a, b) = (clusters[x][0], clusters[y][0]);
                    (a.min(b), a.max(b))
                };
                let better = match best {
                    None => true,
                    Some((bd, bx, by)) => {
                        let (blo, bhi) = {
                            let (a, b) = (clusters[bx][0], clusters[by][0]);
                            (a.min(b), a.max(b))
                        };
                        d < bd || (d == bd && (lo, hi) < (blo, bhi))
                    }
                };
                if better {
                    best = Some((d, x, y));
                }
            }
        }
        let (d, x, y) = best.expect("at least two clusters");
        if let StopRule::RadiusThreshold(tau) = stop {
            if d > tau {
                break;
            }
        }
        let moved = clusters.remove(y);
        clusters[x].extend(moved);
        clusters[x].sort_unstable();
        clusters.sort_by_key(|c| c[0]);
    }
    clusters
}

/// Members sorted within clusters, clusters sorted by first member.
pub fn canonical(mut clusters: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    clusters
}

/// Central finite difference of `f` with respect to every coordinate of `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Passes when every coordinate agrees within `rel` relative error or
/// `abs` absolute error.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], rel: f64, abs: f64) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!("length {} vs {}", analytic.len(), numeric.len()));
    }
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        if diff <= abs {
            continue;
        }
        let scale = a.abs().max(n.abs());
        if diff / scale > rel {
            return Err(format!("coordinate {i}: analytic {a:e}, numeric {n:e}, rel err {:e}", diff / scale));
        }
    }
    Ok(())
}

/// Reference SplitMix64 followed by xoshiro256++, seeded the way the
/// library seeds its generators.
pub struct XoshiroOracle {
    s: [u64; 4],
}

impl XoshiroOracle {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = x;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        };
        XoshiroOracle {
            s: [next(), next(), next(), next()],
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }
}
