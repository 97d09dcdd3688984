use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::protocol::{ClientUpdate, ServerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `n_i / Σ n_j` over this round's participants; weights sum to 1.
    #[default]
    Participants,
    /// `n_i / n` over the whole population; absent clients contribute zero.
    Population,
}

/// Applies `X ← X + Σ w_i ΔX_i` to every global matrix. Updates are summed in
/// ascending client-id order with `f64` accumulators and added once, so the
/// result does not depend on the order of `updates`.
///
/// Returns the weights used, in ascending client-id order. With no updates
/// the round is void: the adapters are unchanged and the round counter still
/// advances.
pub fn aggregate(
    server: &mut ServerState,
    updates: &[ClientUpdate],
    weighting: Weighting,
    population: usize,
) -> Result<Vec<f64>> {
    if updates.is_empty() {
        let same = server.adapters().clone();
        server.advance(same);
        return Ok(Vec::new());
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::InvalidArgument("duplicate client update".into()));
    }
    for u in &sorted {
        if u.sample_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {} reported no samples",
                u.client_id
            )));
        }
        if !u.deltas.same_layout(server.adapters()) {
            return Err(Error::InvalidArgument(format!(
                "client {} update does not match the global adapters",
                u.client_id
            )));
        }
    }
    let denominator = match weighting {
        Weighting::Participants => sorted.iter().map(|u| u.sample_count).sum::<usize>(),
        Weighting::Population => population,
    } as f64;
    if denominator <= 0.0 {
        return Err(Error::InvalidArgument("population has no samples".into()));
    }
    let weights: Vec<f64> = sorted
        .iter()
        .map(|u| u.sample_count as f64 / denominator)
        .collect();

    let global = server.adapters();
    let mut sums: Vec<Vec<f64>> = global
        .matrices()
        .map(|m| vec![0.0f64; m.len()])
        .collect();
    for (u, &w) in sorted.iter().zip(&weights) {
        for (acc, delta) in sums.iter_mut().zip(u.deltas.matrices()) {
            for (a, &d) in acc.iter_mut().zip(delta.as_slice()) {
                *a += w * f64::from(d);
            }
        }
    }
    let mut index = 0;
    let next: AdapterSet = global.try_map(|m| {
        let acc = &sums[index];
        index += 1;
        let values = m
            .as_slice()
            .iter()
            .zip(acc)
            .map(|(&x, &a)| (f64::from(x) + a) as f32)
            .collect();
        crate::Matrix::new(m.rows(), m.cols(), values)
    })?;
    server.advance(next);
    Ok(weights)
}
