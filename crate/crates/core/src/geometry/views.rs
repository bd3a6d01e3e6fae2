use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Camera;
use crate::error::{Error, Result};

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-8;
const DIR_WEIGHT: f64 = 0.5;

fn feature(cam: &Camera) -> [f64; 6] {
    let c = cam.center();
    let d = cam.view_dir() * DIR_WEIGHT;
    [c.x, c.y, c.z, d.x, d.y, d.z]
}

fn dist2(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Outcome of [`kmeans_detailed`].
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub selected: Vec<usize>,
    pub centroids: Vec<[f64; 6]>,
    /// Sum of squared member-to-centroid distances after each Lloyd iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Picks `k` representative cameras by k-means over `[center; 0.5·view_dir]`.
/// The result is sorted ascending.
pub fn kmeans_select_views(cams: &[Camera], k: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans_detailed(cams, k, seed)?.selected)
}

pub fn kmeans_detailed(cams: &[Camera], k: usize, seed: u64) -> Result<KMeansRun> {
    let n = cams.len();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("cannot select {k} views from {n}")));
    }
    let feats: Vec<[f64; 6]> = cams.iter().map(feature).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids = vec![feats[rng.gen_range(0..n)]];
    while centroids.len() < k {
        let d: Vec<f64> = feats
            .iter()
            .map(|f| centroids.iter().map(|c| dist2(f, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    idx = i;
                    break;
                }
                r -= di;
            }
            idx
        };
        centroids.push(feats[pick]);
    }

    let mut assign = vec![0usize; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        for (i, f) in feats.iter().enumerate() {
            assign[i] = nearest(f, &centroids);
        }
        let mut sums = vec![[0.0; 6]; k];
        let mut counts = vec![0usize; k];
        for (f, &a) in feats.iter().zip(&assign) {
            counts[a] += 1;
            for j in 0..6 {
                sums[a][j] += f[j];
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut next = sums[c];
            for v in &mut next {
                *v /= counts[c] as f64;
            }
            shift = shift.max(dist2(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        objective.push(feats.iter().zip(&assign).map(|(f, &a)| dist2(f, &centroids[a])).sum());
        if shift < KMEANS_TOL {
            break;
        }
    }

    let mut chosen = BTreeSet::new();
    for c in &centroids {
        chosen.insert(nearest(c, &feats));
    }
    while chosen.len() < k {
        let far = (0..n)
            .filter(|i| !chosen.contains(i))
            .max_by(|&a, &b| {
                let da = min_dist(&feats[a], &chosen, &feats);
                let db = min_dist(&feats[b], &chosen, &feats);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k ≤ n leaves a candidate");
        chosen.insert(far);
    }
    Ok(KMeansRun {
        selected: chosen.into_iter().collect(),
        centroids,
        objective,
        iterations,
    })
}

fn nearest(f: &[f64; 6], set: &[[f64; 6]]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, s) in set.iter().enumerate() {
        let d = dist2(f, s);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn min_dist(f: &[f64; 6], chosen: &BTreeSet<usize>, feats: &[[f64; 6]]) -> f64 {
    chosen.iter().map(|&j| dist2(f, &feats[j])).fold(f64::INFINITY, f64::min)
}

/// Context/target view sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSampling {
    pub context_views: usize,
    pub skip_min: usize,
    pub skip_max: usize,
    pub target_views: usize,
    #[serde(default = "default_margin")]
    pub margin: usize,
}

fn default_margin() -> usize {
    2
}

const GAP_REDRAWS: usize = 256;

/// Samples strictly increasing context indices with per-gap skips in
/// `[skip_min, skip_max]`, then targets without replacement from
/// `[min(C) − margin, max(C) + margin] ∩ [0, n)` minus the context set.
pub fn sample_context_target(n: usize, cfg: &ViewSampling, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let v = cfg.context_views;
    if v == 0 || cfg.skip_min == 0 || cfg.skip_min > cfg.skip_max {
        return Err(Error::Config(format!("invalid view sampling {cfg:?}")));
    }
    let gaps_needed = v - 1;
    if gaps_needed * cfg.skip_min > n.saturating_sub(1) || v > n {
        return Err(Error::Config(format!("{v} context views with skip ≥ {} do not fit in {n} frames", cfg.skip_min)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = n - 1;
    let mut gaps: Vec<usize> = Vec::with_capacity(gaps_needed);
    let mut ok = false;
    for _ in 0..GAP_REDRAWS {
        gaps = (0..gaps_needed).map(|_| rng.gen_range(cfg.skip_min..=cfg.skip_max)).collect();
        if gaps.iter().sum::<usize>() <= budget {
            ok = true;
            break;
        }
    }
    if !ok {
        // Tight budgets: draw each gap from the range still feasible for the rest.
        gaps.clear();
        let mut left = budget;
        for i in 0..gaps_needed {
            let rest = (gaps_needed - i - 1) * cfg.skip_min;
            let hi = cfg.skip_max.min(left - rest);
            let g = rng.gen_range(cfg.skip_min..=hi);
            gaps.push(g);
            left -= g;
        }
    }
    let span: usize = gaps.iter().sum();
    let start = rng.gen_range(0..=budget - span);
    let mut context = vec![start];
    for g in gaps {
        context.push(context.last().unwrap() + g);
    }

    let lo = context[0].saturating_sub(cfg.margin);
    let hi = (context[v - 1] + cfg.margin).min(n - 1);
    let ctx: BTreeSet<usize> = context.iter().copied().collect();
    let candidates: Vec<usize> = (lo..=hi).filter(|i| !ctx.contains(i)).collect();
    if cfg.target_views > candidates.len() {
        return Err(Error::Config(format!(
            "{} targets requested but only {} candidates around the context",
            cfg.target_views,
            candidates.len()
        )));
    }
    let mut targets: Vec<usize> = sample(&mut rng, candidates.len(), cfg.target_views)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    targets.sort_unstable();
    Ok((context, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn orbit(n: usize) -> Vec<Camera> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                let eye = Vector3::new(3.0 * a.cos(), 1.0 + 0.3 * (3.0 * a).sin(), 3.0 * a.sin());
                Camera::look_at(eye, Vector3::zeros(), -Vector3::y(), 50.0, 8, 8).unwrap()
            })
            .collect()
    }

    #[test]
    fn k_equals_n_returns_all() {
        let cams = orbit(7);
        assert_eq!(kmeans_select_views(&cams, 7, 3).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn k_one_is_nearest_to_mean() {
        let cams = orbit(11);
        let feats: Vec<[f64; 6]> = cams.iter().map(feature).collect();
        let mut mean = [0.0; 6];
        for f in &feats {
            for j in 0..6 {
                mean[j] += f[j] / feats.len() as f64;
            }
        }
        let brute = (0..feats.len())
            .min_by(|&a, &b| dist2(&feats[a], &mean).total_cmp(&dist2(&feats[b], &mean)))
            .unwrap();
        for seed in 0..5 {
            assert_eq!(kmeans_select_views(&cams, 1, seed).unwrap(), vec![brute]);
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_distinct() {
        let cams = orbit(24);
        let a = kmeans_select_views(&cams, 5, 9).unwrap();
        assert_eq!(a, kmeans_select_views(&cams, 5, 9).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(kmeans_select_views(&cams, 25, 0).is_err());
    }

    #[test]
    fn duplicate_cameras_are_backfilled() {
        let mut cams = orbit(3);
        cams.extend(std::iter::repeat(cams[0].clone()).take(5));
        let sel = kmeans_select_views(&cams, 4, 1).unwrap();
        assert_eq!(sel.len(), 4);
    }

    #[test]
    fn forced_gaps() {
        let cfg = ViewSampling {
            context_views: 4,
            skip_min: 1,
            skip_max: 1,
            target_views: 0,
            margin: 2,
        };
        let (c, t) = sample_context_target(4, &cfg, 0).unwrap();
        assert_eq!(c, vec![0, 1, 2, 3]);
        assert!(t.is_empty());
    }

    #[test]
    fn infeasible_configs_error() {
        let cfg = ViewSampling {
            context_views: 4,
            skip_min: 3,
            skip_max: 5,
            target_views: 1,
            margin: 2,
        };
        assert!(sample_context_target(9, &cfg, 0).is_err());
        let cfg = ViewSampling {
            context_views: 2,
            skip_min: 1,
            skip_max: 1,
            target_views: 5,
            margin: 1,
        };
        assert!(sample_context_target(3, &cfg, 0).is_err());
    }

    proptest! {
        #[test]
        fn sampler_contract(n in 4usize..60, v in 1usize..6, smin in 1usize..4, extra in 0usize..8, t in 0usize..4, seed in any::<u64>()) {
            let cfg = ViewSampling { context_views: v, skip_min: smin, skip_max: smin + extra, target_views: t, margin: 2 };
            if let Ok((c, tg)) = sample_context_target(n, &cfg, seed) {
                prop_assert_eq!(c.len(), v);
                for w in c.windows(2) {
                    let g = w[1] - w[0];
                    prop_assert!(g >= cfg.skip_min && g <= cfg.skip_max);
                }
                prop_assert!(*c.last().unwrap() < n);
                prop_assert_eq!(tg.len(), t);
                for x in &tg {
                    prop_assert!(!c.contains(x) && *x < n);
                    prop_assert!(*x + 2 >= c[0] && *x <= c[v - 1] + 2);
                }
                prop_assert_eq!(sample_context_target(n, &cfg, seed).unwrap(), (c, tg));
            }
        }

        #[test]
        fn kmeans_objective_nonincreasing(n in 2usize..30, k in 1usize..6, seed in any::<u64>()) {
            let k = k.min(n);
            let run = kmeans_detailed(&orbit(n), k, seed).unwrap();
            for w in run.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            prop_assert!(run.iterations <= KMEANS_MAX_ITERS);
        }
    }
}
