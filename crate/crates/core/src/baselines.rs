//! Non-learned reference predictors: the per-site mean and yesterday's flow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::TimeSeries;

/// Days a mean-per-site predictor is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitRange {
    AllDays,
    /// Half-open day-index range `[start, end)`.
    Days {
        start: usize,
        end: usize,
    },
}

impl FitRange {
    fn bounds(self, len: usize) -> (usize, usize) {
        match self {
            FitRange::AllDays => (0, len),
            FitRange::Days { start, end } => (start.min(len), end.min(len)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePrediction {
    pub site_id: String,
    pub day: usize,
    pub flow: f64,
}

/// Arithmetic mean of the measured flows inside `range`.
pub fn mean_per_site(flow: &TimeSeries, range: FitRange) -> Result<f64> {
    let (start, end) = range.bounds(flow.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in start..end {
        if let Some(v) = flow.get(t) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoData("no measured flow in the fit range".into()));
    }
    Ok(sum / n as f64)
}

/// Flow of the previous day, when it was measured.
pub fn previous_flow(flow: &TimeSeries, t: usize) -> Option<f64> {
    if t == 0 {
        return None;
    }
    flow.get(t - 1)
}

/// Squared-error accumulator over the days a baseline can predict.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorTally {
    pub sse: f64,
    pub n_days: usize,
}

impl ErrorTally {
    pub fn add(&mut self, pred: f64, gt: f64) {
        let e = pred - gt;
        self.sse += e * e;
        self.n_days += 1;
    }

    pub fn rmse(&self) -> Result<f64> {
        if self.n_days == 0 {
            return Err(Error::NoData("no evaluated days".into()));
        }
        Ok((self.sse / self.n_days as f64).sqrt())
    }
}

/// RMSE of the constant `mean` on the measured days among `days`.
pub fn constant_tally(
    flow: &TimeSeries,
    mean: f64,
    days: impl IntoIterator<Item = usize>,
) -> ErrorTally {
    let mut tally = ErrorTally::default();
    for t in days {
        if let Some(gt) = flow.get(t) {
            tally.add(mean, gt);
        }
    }
    tally
}

/// Previous-flow errors; days whose previous flow is missing are skipped.
pub fn previous_flow_tally(flow: &TimeSeries, days: impl IntoIterator<Item = usize>) -> ErrorTally {
    let mut tally = ErrorTally::default();
    for t in days {
        if let (Some(gt), Some(pred)) = (flow.get(t), previous_flow(flow, t)) {
            tally.add(pred, gt);
        }
    }
    tally
}

pub fn mean_per_site_rmse(
    flow: &TimeSeries,
    fit: FitRange,
    days: impl IntoIterator<Item = usize>,
) -> Result<(f64, usize)> {
    let mean = mean_per_site(flow, fit)?;
    let tally = constant_tally(flow, mean, days);
    Ok((tally.rmse()?, tally.n_days))
}

pub fn previous_flow_rmse(
    flow: &TimeSeries,
    days: impl IntoIterator<Item = usize>,
) -> Result<(f64, usize)> {
    let tally = previous_flow_tally(flow, days);
    Ok((tally.rmse()?, tally.n_days))
}

/// Predictions of both baselines on `days`, skipping days without input.
pub fn baseline_predictions(
    site_id: &str,
    flow: &TimeSeries,
    fit: FitRange,
    days: impl IntoIterator<Item = usize> + Clone,
) -> Result<(Vec<BaselinePrediction>, Vec<BaselinePrediction>)> {
    let mean = mean_per_site(flow, fit)?;
    let constant = days
        .clone()
        .into_iter()
        .map(|day| BaselinePrediction {
            site_id: site_id.to_string(),
            day,
            flow: mean,
        })
        .collect();
    let previous = days
        .into_iter()
        .filter_map(|day| {
            previous_flow(flow, day).map(|f| BaselinePrediction {
                site_id: site_id.to_string(),
                day,
                flow: f,
            })
        })
        .collect();
    Ok((constant, previous))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::SeriesKind;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn series(values: Vec<Option<f64>>) -> TimeSeries {
        TimeSeries::new(
            NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            SeriesKind::FlowM3s,
            values,
        )
    }

    #[test]
    fn mean_examples() {
        let s = series(vec![Some(1.0), Some(2.0), Some(3.0)]);
        assert_eq!(mean_per_site(&s, FitRange::AllDays).unwrap(), 2.0);
        let c = series(vec![Some(4.25); 9]);
        assert_eq!(mean_per_site(&c, FitRange::AllDays).unwrap(), 4.25);
        let gaps = series(vec![Some(1.0), None, Some(5.0), None]);
        assert_eq!(mean_per_site(&gaps, FitRange::AllDays).unwrap(), 3.0);
        assert_eq!(
            mean_per_site(&gaps, FitRange::Days { start: 2, end: 4 }).unwrap(),
            5.0
        );
        assert!(mean_per_site(&series(vec![None, None]), FitRange::AllDays).is_err());
        assert!(mean_per_site(&gaps, FitRange::Days { start: 3, end: 4 }).is_err());
    }

    #[test]
    fn previous_flow_examples() {
        let s = series(vec![Some(5.0), Some(7.0), Some(9.0), None, Some(1.0)]);
        assert_eq!(previous_flow(&s, 2), Some(7.0));
        assert_eq!(previous_flow(&s, 0), None);
        assert_eq!(previous_flow(&s, 4), None);
        let (rmse, n) = previous_flow_rmse(&s, 0..5).unwrap();
        assert_eq!(n, 2);
        assert_eq!(rmse, 2.0);
    }

    #[test]
    fn previous_flow_is_exact_on_constant_series() {
        let s = series(vec![Some(3.3); 40]);
        assert_eq!(previous_flow_rmse(&s, 1..40).unwrap().0, 0.0);
    }

    #[test]
    fn persistence_beats_climatology_on_ar1_flow() {
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let rho = 0.98;
        let mut x = 0.0;
        let values: Vec<Option<f64>> = (0..2000)
            .map(|_| {
                x = rho * x + noise.sample(&mut rng);
                Some(20.0 + x)
            })
            .collect();
        let s = series(values);
        let (prev, _) = previous_flow_rmse(&s, 1..2000).unwrap();
        let (mean, _) = mean_per_site_rmse(&s, FitRange::AllDays, 1..2000).unwrap();
        assert!(prev < mean);
    }

    proptest! {
        #[test]
        fn mean_minimizes_squared_error(
            values in prop::collection::vec(-50.0f64..50.0, 1..60),
            perturb in prop::collection::vec((1e-3f64..3.0, any::<bool>()), 100),
        ) {
            let s = series(values.iter().copied().map(Some).collect());
            let mean = mean_per_site(&s, FitRange::AllDays).unwrap();
            let direct = values.iter().sum::<f64>() / values.len() as f64;
            prop_assert!((mean - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            let best = constant_tally(&s, mean, 0..values.len()).sse;
            for (size, negative) in perturb {
                let d = if negative { -size } else { size };
                let other = constant_tally(&s, mean + d, 0..values.len()).sse;
                prop_assert!(other > best);
            }
        }
    }
}
