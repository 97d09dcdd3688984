use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RoundMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Global,
    Proxy,
}

/// Position in `history` of the lowest validation loss for `which`. The
/// earliest round wins ties; a NaN loss never wins.
pub fn select_best(history: &[RoundMetrics], which: Which) -> Result<usize> {
    let loss = |m: &RoundMetrics| match which {
        Which::Global => m.global_val_loss,
        Which::Proxy => m.proxy_val_loss,
    };
    let mut best: Option<usize> = None;
    for (i, m) in history.iter().enumerate() {
        let better = best.is_none_or(|b| {
            let current = loss(&history[b]);
            current.is_nan() || loss(m) < current
        });
        if better && (best.is_none() || !loss(m).is_nan()) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty metrics history".into()))
}

/// The tracked metrics of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub val_loss: f64,
    pub test_loss: f64,
    pub test_acc: Option<f64>,
}

impl MetricSummary {
    fn of(m: &RoundMetrics, which: Which) -> Self {
        match which {
            Which::Global => Self {
                val_loss: m.global_val_loss,
                test_loss: m.global_test_loss,
                test_acc: m.global_test_acc,
            },
            Which::Proxy => Self {
                val_loss: m.proxy_val_loss,
                test_loss: m.proxy_test_loss,
                test_acc: m.proxy_test_acc,
            },
        }
    }

    /// Margin of `self` over `other`, signed so that positive means `self`
    /// is better on that metric.
    fn advantage_over(&self, other: &Self) -> Self {
        Self {
            val_loss: other.val_loss - self.val_loss,
            test_loss: other.test_loss - self.test_loss,
            test_acc: self.test_acc.zip(other.test_acc).map(|(a, b)| a - b),
        }
    }

    /// True when every tracked margin is strictly positive.
    fn all_positive(&self) -> bool {
        self.val_loss > 0.0 && self.test_loss > 0.0 && self.test_acc.is_none_or(|a| a > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_global_round: usize,
    pub best_proxy_round: usize,
    pub global: MetricSummary,
    pub proxy: MetricSummary,
    /// Global advantage over proxy per metric.
    pub gap: MetricSummary,
    pub model_privacy: bool,
}

/// Best global versus best proxy model, summarised across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyGapReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedSummary>,
    pub median_global: MetricSummary,
    pub median_proxy: MetricSummary,
    pub median_gap: MetricSummary,
    /// The median global model beats the median proxy on every metric.
    pub model_privacy_achieved: bool,
    pub seeds_with_privacy: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedHistory {
    pub seed: u64,
    pub history: Vec<RoundMetrics>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

fn median_summary(items: &[MetricSummary]) -> MetricSummary {
    let pick = |f: fn(&MetricSummary) -> f64| median(&items.iter().map(f).collect::<Vec<_>>());
    let accs: Option<Vec<f64>> = items.iter().map(|m| m.test_acc).collect();
    MetricSummary {
        val_loss: pick(|m| m.val_loss),
        test_loss: pick(|m| m.test_loss),
        test_acc: accs.filter(|a| !a.is_empty()).map(|a| median(&a)),
    }
}

/// For each seed the best global and best proxy rounds are chosen
/// independently by validation loss; they may be different rounds.
pub fn privacy_gap_report(label: &str, runs: &[SeedHistory]) -> Result<PrivacyGapReport> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to report".into()));
    }
    let per_seed = runs
        .iter()
        .map(|run| {
            let g = select_best(&run.history, Which::Global)?;
            let p = select_best(&run.history, Which::Proxy)?;
            let global = MetricSummary::of(&run.history[g], Which::Global);
            let proxy = MetricSummary::of(&run.history[p], Which::Proxy);
            let gap = global.advantage_over(&proxy);
            Ok(SeedSummary {
                seed: run.seed,
                best_global_round: run.history[g].round,
                best_proxy_round: run.history[p].round,
                global,
                proxy,
                gap,
                model_privacy: gap.all_positive(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let median_global = median_summary(&per_seed.iter().map(|s| s.global).collect::<Vec<_>>());
    let median_proxy = median_summary(&per_seed.iter().map(|s| s.proxy).collect::<Vec<_>>());
    let median_gap = median_summary(&per_seed.iter().map(|s| s.gap).collect::<Vec<_>>());
    Ok(PrivacyGapReport {
        label: label.to_string(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        seeds_with_privacy: per_seed.iter().filter(|s| s.model_privacy).count(),
        model_privacy_achieved: median_global.advantage_over(&median_proxy).all_positive(),
        per_seed,
        median_global,
        median_proxy,
        median_gap,
    })
}
