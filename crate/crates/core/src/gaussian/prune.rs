use crate::error::{Error, Result};

use super::GaussianCloud;

/// Drops faint kernels, then isolated ones.
///
/// A kernel is isolated when fewer than `min_neighbors` other surviving
/// kernels lie within `isolation_radius` of its center. Isolation removal is
/// repeated until no kernel changes status, so the result is a fixed point
/// and pruning twice equals pruning once. Kernel order is preserved.
pub fn prune_density(
    cloud: &GaussianCloud,
    opacity_floor: f64,
    isolation_radius: f64,
    min_neighbors: usize,
) -> Result<GaussianCloud> {
    if !(opacity_floor >= 0.0) || !(isolation_radius >= 0.0) {
        return Err(Error::invalid("prune thresholds must be >= 0"));
    }
    let kernels: Vec<_> = cloud
        .kernels()
        .iter()
        .filter(|k| k.opacity >= opacity_floor)
        .copied()
        .collect();

    let r2 = isolation_radius * isolation_radius;
    let mut alive = vec![true; kernels.len()];
    loop {
        let mut changed = false;
        let snapshot = alive.clone();
        for (i, ki) in kernels.iter().enumerate() {
            if !snapshot[i] {
                continue;
            }
            let neighbors = kernels
                .iter()
                .enumerate()
                .filter(|&(j, kj)| {
                    j != i && snapshot[j] && (kj.position - ki.position).norm_squared() <= r2
                })
                .take(min_neighbors)
                .count();
            if neighbors < min_neighbors {
                alive[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let kept: Vec<_> = kernels
        .into_iter()
        .zip(alive)
        .filter_map(|(k, a)| a.then_some(k))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyCloud);
    }
    GaussianCloud::new(kept)
}
