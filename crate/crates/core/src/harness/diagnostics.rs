//! Run-level statistics: scale-component ratio, GSI/similarity correlation,
//! final-window accuracy and cross-seed summaries.

use crate::error::{Error, Result};

use super::RoundRecord;

/// Population std of the clients' squared update norms divided by their mean.
pub fn scale_ratio_diagnostic(sq_norms: &[f64]) -> Result<f64> {
    if sq_norms.len() < 2 {
        return Err(Error::TooFewClients {
            needed: 2,
            got: sq_norms.len(),
        });
    }
    let (mean, std) = mean_std(sq_norms);
    if mean == 0.0 {
        return Ok(0.0);
    }
    Ok(std / mean)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need two equally long series of length >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    // the float mean of a constant series can be off by an ulp, so test directly
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) {
        return Err(Error::ZeroVariance("first series".into()));
    }
    if constant(ys) {
        return Err(Error::ZeroVariance("second series".into()));
    }
    let (mx, sx) = mean_std(xs);
    let (my, sy) = mean_std(ys);
    let n = xs.len() as f64;
    let cov = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    Ok((cov / (sx * sy)).clamp(-1.0, 1.0))
}

/// Minimum number of rounds for the GSI/similarity correlation.
pub const MIN_CORRELATION_ROUNDS: usize = 10;

/// Pearson correlation between whole-model GSI and the sampled-vs-global
/// label similarity, over rounds that carry both.
pub fn gsi_sim_correlation(records: &[RoundRecord]) -> Result<f64> {
    let (gsi, sim): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| Some((r.gsi_all?, r.sim_score?)))
        .unzip();
    if gsi.len() < MIN_CORRELATION_ROUNDS {
        return Err(Error::InsufficientData(format!(
            "{} rounds with both GSI and sim_score, need {MIN_CORRELATION_ROUNDS}",
            gsi.len()
        )));
    }
    pearson(&gsi, &sim)
}

/// Mean evaluation accuracy over the last `window` evaluated rounds.
pub fn final_window_accuracy(records: &[RoundRecord], window: usize) -> Option<f64> {
    let accs: Vec<f64> = records.iter().rev().filter_map(|r| r.eval_acc).take(window).collect();
    if accs.is_empty() {
        return None;
    }
    Some(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Mean training loss over the final `fraction` of rounds (hyperparameter
/// selection criterion).
pub fn tail_train_loss(records: &[RoundRecord], fraction: f64) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let take = ((records.len() as f64 * fraction).ceil() as usize).clamp(1, records.len());
    let tail = &records[records.len() - take..];
    Some(tail.iter().map(|r| r.train_loss).sum::<f64>() / take as f64)
}

/// Mean of the per-round scale ratios.
pub fn mean_scale_ratio(records: &[RoundRecord]) -> Option<f64> {
    let xs: Vec<f64> = records.iter().filter_map(|r| r.scale_ratio).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Value at quantile `q` (0..=1) with linear interpolation between order statistics.
pub fn quantile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: usize, gsi: Option<f64>, sim: Option<f64>) -> RoundRecord {
        RoundRecord {
            round,
            gsi_all: gsi,
            sim_score: sim,
            ..RoundRecord::default()
        }
    }

    #[test]
    fn scale_ratio_examples() {
        assert_eq!(scale_ratio_diagnostic(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!((scale_ratio_diagnostic(&[1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        let base = scale_ratio_diagnostic(&[1.0, 4.0, 2.5]).unwrap();
        let scaled = scale_ratio_diagnostic(&[7.0, 28.0, 17.5]).unwrap();
        assert!((base - scaled).abs() < 1e-12);
        assert!(matches!(
            scale_ratio_diagnostic(&[1.0]),
            Err(Error::TooFewClients { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn correlation_examples() {
        let linear: Vec<_> = (0..12).map(|i| rec(i, Some(i as f64), Some(2.0 * i as f64 + 1.0))).collect();
        assert!((gsi_sim_correlation(&linear).unwrap() - 1.0).abs() < 1e-12);
        let flat: Vec<_> = (0..12).map(|i| rec(i, Some(i as f64), Some(0.7))).collect();
        assert!(matches!(gsi_sim_correlation(&flat), Err(Error::ZeroVariance(_))));
        let short: Vec<_> = (0..5).map(|i| rec(i, Some(i as f64), Some(i as f64))).collect();
        assert!(matches!(gsi_sim_correlation(&short), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn final_window_uses_last_evaluated_rounds() {
        let records: Vec<_> = (0..15)
            .map(|i| RoundRecord {
                round: i,
                eval_acc: (i % 2 == 0).then_some(i as f64),
                ..RoundRecord::default()
            })
            .collect();
        // evaluated rounds 14, 12, 10, 8, 6
        assert_eq!(final_window_accuracy(&records, 5), Some(10.0));
        assert_eq!(final_window_accuracy(&[], 10), None);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
        assert_eq!(quantile(&[0.0, 10.0], 0.1), Some(1.0));
        assert_eq!(quantile(&[], 0.1), None);
    }

    #[test]
    fn tail_loss_fraction() {
        let records: Vec<_> = (0..10)
            .map(|i| RoundRecord { round: i, train_loss: i as f64, ..RoundRecord::default() })
            .collect();
        assert_eq!(tail_train_loss(&records, 0.2), Some(8.5));
    }
}
