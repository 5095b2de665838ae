//! Scaling metrics from wall-clock timings keyed by worker count.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn baseline(timings: &BTreeMap<usize, f64>) -> Result<f64> {
    if let Some((n, t)) = timings.iter().find(|(_, t)| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Metric(format!("timing for {n} workers is not positive: {t}")));
    }
    timings.get(&1).copied().ok_or_else(|| Error::Metric("no single-worker timing".into()))
}

/// Weak-scaling efficiency `t(1) / t(n) · 100` (workload per worker fixed).
pub fn weak_scaling_efficiency(timings: &BTreeMap<usize, f64>) -> Result<BTreeMap<usize, f64>> {
    let t1 = baseline(timings)?;
    Ok(timings.iter().map(|(&n, &t)| (n, t1 / t * 100.0)).collect())
}

/// Strong-scaling speedup `t(1) / t(n)` (total workload fixed).
pub fn strong_scaling_speedup(timings: &BTreeMap<usize, f64>) -> Result<BTreeMap<usize, f64>> {
    let t1 = baseline(timings)?;
    Ok(timings.iter().map(|(&n, &t)| (n, t1 / t)).collect())
}
