//! Brute-force metric definitions, written independently of the library's
//! ranking code, and a randomized comparison against the library.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sketchfeat::heads::{Keypoint, SegMask};
use sketchfeat::metrics::{acc_at_k, map_at_k, miou_pacc, pck_at_k, precision_at_k, RankedRetrieval};

/// 1-based rank of gallery item `i`: items strictly closer, or equally
/// close with a lower index, come first.
pub fn rank_of(d: &[f64], i: usize) -> usize {
    1 + (0..d.len()).filter(|&j| d[j] < d[i] || (d[j] == d[i] && j < i)).count()
}

pub fn ap_oracle(d: &[f64], rel: &[bool], k: usize) -> Option<f64> {
    let r = rel.iter().filter(|x| **x).count();
    if r == 0 {
        return None;
    }
    let ranks: Vec<usize> = (0..d.len()).filter(|&i| rel[i]).map(|i| rank_of(d, i)).collect();
    let mut sum = 0.0;
    for &ri in &ranks {
        if ri <= k {
            let above = ranks.iter().filter(|&&rj| rj <= ri).count();
            sum += above as f64 / ri as f64;
        }
    }
    Some(sum / k.min(r) as f64)
}

pub fn map_oracle(queries: &[(Vec<f64>, Vec<bool>)], k: usize) -> Option<f64> {
    let aps: Vec<f64> = queries.iter().filter_map(|(d, r)| ap_oracle(d, r, k)).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn relevant_within(d: &[f64], rel: &[bool], k: usize) -> usize {
    (0..d.len()).filter(|&i| rel[i] && rank_of(d, i) <= k).count()
}

pub fn precision_oracle(queries: &[(Vec<f64>, Vec<bool>)], k: usize) -> f64 {
    queries
        .iter()
        .map(|(d, r)| {
            let kk = k.min(d.len());
            relevant_within(d, r, kk) as f64 / kk as f64
        })
        .sum::<f64>()
        / queries.len() as f64
}

pub fn acc_oracle(queries: &[(Vec<f64>, Vec<bool>)], k: usize) -> f64 {
    queries.iter().filter(|(d, r)| relevant_within(d, r, k) > 0).count() as f64 / queries.len() as f64
}

pub fn pck_oracle(pred: &[(i32, i32)], gt: &[(i32, i32)], k_percent: u32, size: u32) -> f64 {
    // Integer arithmetic: (dx² + dy²)·100² ≤ (k·size)².
    let t = (k_percent * size) as i64;
    let n = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            let (dx, dy) = ((p.0 - g.0) as i64, (p.1 - g.1) as i64);
            (dx * dx + dy * dy) * 10_000 <= t * t
        })
        .count();
    n as f64 / gt.len() as f64
}

pub fn seg_oracle(pred: &[Vec<Vec<bool>>], gt: &[Vec<Vec<bool>>]) -> (f64, f64) {
    let mut ious = Vec::new();
    let (mut same, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let mut inter = 0;
        let mut uni = 0;
        for (rp, rg) in p.iter().zip(g) {
            for (a, b) in rp.iter().zip(rg) {
                if *a && *b {
                    inter += 1;
                }
                if *a || *b {
                    uni += 1;
                }
                if a == b {
                    same += 1;
                }
                total += 1;
            }
        }
        ious.push(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 });
    }
    (ious.iter().sum::<f64>() / ious.len() as f64, same as f64 / total as f64)
}

fn to_mask(m: &[Vec<bool>]) -> SegMask {
    let (h, w) = (m.len(), m[0].len());
    SegMask::new(h, w, m.iter().flatten().map(|b| u8::from(*b)).collect()).unwrap()
}

/// Random queries over a gallery of at most 20 items. Distances are drawn
/// from a coarse grid so ties occur.
pub fn random_queries(rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, Vec<bool>)> {
    let g = rng.random_range(1..=20);
    let q = rng.random_range(1..=5);
    (0..q)
        .map(|_| {
            let d = (0..g).map(|_| rng.random_range(0..8) as f64 * 0.125).collect();
            let p = rng.random_range(0.1..0.7);
            let mut rel: Vec<bool> = (0..g).map(|_| rng.random_bool(p)).collect();
            if rng.random_bool(0.9) && !rel.iter().any(|x| *x) {
                rel[rng.random_range(0..g)] = true;
            }
            (d, rel)
        })
        .collect()
}

#[derive(Default, Debug)]
pub struct OracleTally {
    pub map_max_error: f64,
    pub precision_mismatches: usize,
    pub acc_mismatches: usize,
    pub pck_mismatches: usize,
    pub miou_mismatches: usize,
    pub pacc_mismatches: usize,
    pub instances: usize,
}

impl OracleTally {
    pub fn count_ok(&self) -> bool {
        self.precision_mismatches + self.acc_mismatches + self.pck_mismatches + self.miou_mismatches + self.pacc_mismatches
            == 0
    }

    pub fn ap_ok(&self) -> bool {
        self.map_max_error <= 1e-9
    }
}

/// Runs `instances` randomized comparisons of every metric.
pub fn compare(seed: u64, instances: usize) -> OracleTally {
    let mut rng = super::rng(seed);
    let mut t = OracleTally {
        instances,
        ..OracleTally::default()
    };
    for _ in 0..instances {
        let queries = random_queries(&mut rng);
        let g = queries[0].0.len();
        let rankings: Vec<RankedRetrieval> = queries
            .iter()
            .map(|(d, r)| RankedRetrieval::from_distances(d, r.clone()).unwrap())
            .collect();
        for k in 1..=g + 2 {
            match (map_at_k(&rankings, k), map_oracle(&queries, k)) {
                (Ok(a), Some(b)) => t.map_max_error = t.map_max_error.max((a - b).abs()),
                (Err(_), None) => {}
                _ => t.map_max_error = f64::INFINITY,
            }
            if precision_at_k(&rankings, k).unwrap() != precision_oracle(&queries, k) {
                t.precision_mismatches += 1;
            }
            if acc_at_k(&rankings, k).unwrap() != acc_oracle(&queries, k) {
                t.acc_mismatches += 1;
            }
        }

        let n = rng.random_range(1..=20);
        let gt: Vec<(i32, i32)> = (0..n).map(|_| (rng.random_range(0..480), rng.random_range(0..480))).collect();
        let pred: Vec<(i32, i32)> = gt
            .iter()
            .map(|&(x, y)| {
                // Mix of exact boundary offsets (24 and 48 px) and random ones.
                match rng.random_range(0..4) {
                    0 => (x + 24, y),
                    1 => (x, y - 48),
                    _ => (x + rng.random_range(-60..60), y + rng.random_range(-60..60)),
                }
            })
            .collect();
        let kp = |v: &[(i32, i32)]| v.iter().map(|&(x, y)| Keypoint::new(x as f64, y as f64)).collect::<Vec<_>>();
        for k in [5u32, 10] {
            if pck_at_k(&kp(&pred), &kp(&gt), k as f64, 480).unwrap() != pck_oracle(&pred, &gt, k, 480) {
                t.pck_mismatches += 1;
            }
        }

        let m = rng.random_range(1..=5);
        let (h, w) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let random_mask = |rng: &mut ChaCha8Rng| -> Vec<Vec<bool>> {
            let p = [0.0, 0.3, 0.7][rng.random_range(0..3)];
            (0..h).map(|_| (0..w).map(|_| rng.random_bool(p)).collect()).collect()
        };
        let pm: Vec<_> = (0..m).map(|_| random_mask(&mut rng)).collect();
        let gm: Vec<_> = (0..m).map(|_| random_mask(&mut rng)).collect();
        let (miou, pacc) = miou_pacc(
            &pm.iter().map(|x| to_mask(x)).collect::<Vec<_>>(),
            &gm.iter().map(|x| to_mask(x)).collect::<Vec<_>>(),
        )
        .unwrap();
        let (om, op) = seg_oracle(&pm, &gm);
        if miou != om {
            t.miou_mismatches += 1;
        }
        if pacc != op {
            t.pacc_mismatches += 1;
        }
    }
    t
}
