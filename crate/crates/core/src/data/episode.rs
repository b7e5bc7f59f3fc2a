//! Weak-supervision episodes: every normal sample plus a few labelled
//! anomalies.

use std::collections::HashSet;

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) const EPISODE_DOMAIN: u32 = 0x45;

/// All of `normals` followed by `n_anomalies` anomalies drawn uniformly
/// without replacement from `anomalies` (in draw order).
pub fn sample_episode(normals: &[Sample], anomalies: &[Sample], n_anomalies: usize, seed: u64) -> Result<Vec<Sample>> {
    if n_anomalies > anomalies.len() {
        return Err(Error::invalid(
            "sample_episode",
            format!("{n_anomalies} anomalies requested but the pool has {}", anomalies.len()),
        ));
    }
    if let Some(s) = normals.iter().find(|s| s.is_anomaly()) {
        return Err(Error::invalid("sample_episode", format!("`{}` is in the normal pool but labelled 1", s.id)));
    }
    if let Some(s) = anomalies.iter().find(|s| !s.is_anomaly()) {
        return Err(Error::invalid("sample_episode", format!("`{}` is in the anomaly pool but labelled 0", s.id)));
    }
    let mut rng = Rng::derive(seed, EPISODE_DOMAIN, 0, 0);
    let picked = rng.sample_indices(anomalies.len(), n_anomalies);
    let episode: Vec<Sample> = normals
        .iter()
        .cloned()
        .chain(picked.into_iter().map(|i| anomalies[i].clone()))
        .collect();
    let mut seen = HashSet::new();
    if let Some(dup) = episode.iter().find(|s| !seen.insert(s.id.as_str())) {
        return Err(Error::invalid("sample_episode", format!("duplicate sample id `{}`", dup.id)));
    }
    Ok(episode)
}
