//! Synaptic-operation energy accounting and firing-rate histograms.

use crate::error::{Error, Result};

/// Energy of one accumulate in a spiking layer, joules.
pub const SOP_JOULES: f64 = 0.9e-12;
/// Energy of one floating-point operation in a non-spiking layer, joules.
pub const FLOP_JOULES: f64 = 4.6e-12;

/// Operation counts and energy estimate of one network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub flops_add: f64,
    pub flops_mul: f64,
    pub avg_rate: f64,
    pub steps: usize,
    pub spiking: bool,
    /// `avg_rate · steps · (flops_add + flops_mul)`, kept unrounded; zero for
    /// non-spiking networks.
    pub sops: f64,
    pub energy_joules: f64,
}

/// Spiking networks pay [`SOP_JOULES`] per synaptic operation; non-spiking
/// networks pay [`FLOP_JOULES`] per FLOP. Counts are taken as given.
pub fn energy_report(flops_add: f64, flops_mul: f64, avg_rate: f64, steps: usize, spiking: bool) -> EnergyReport {
    debug_assert!(flops_add >= 0.0 && flops_mul >= 0.0);
    debug_assert!((0.0..=1.0).contains(&avg_rate));
    let flops = flops_add + flops_mul;
    let (sops, energy_joules) = if spiking {
        let sops = avg_rate * steps as f64 * flops;
        (sops, sops * SOP_JOULES)
    } else {
        (0.0, flops * FLOP_JOULES)
    };
    EnergyReport {
        flops_add,
        flops_mul,
        avg_rate,
        steps,
        spiking,
        sops,
        energy_joules,
    }
}

/// Normalized histogram of values in `[0, 1]` over equal-width bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` bin edges.
    pub edges: Vec<f64>,
    pub freq: Vec<f64>,
}

/// Bin `i` covers `[i/bins, (i+1)/bins)`; the last bin also holds 1.0.
pub fn rate_histogram(rates: &[f32], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Validation(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if let Some(bad) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Validation(format!("rate {bad} outside [0, 1]")));
    }
    let mut counts = vec![0usize; bins];
    for &r in rates {
        counts[((r as f64 * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let n = rates.len().max(1) as f64;
    Ok(Histogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        freq: counts.iter().map(|&c| c as f64 / n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_hand_example() {
        let e = energy_report(600.0, 400.0, 0.5, 16, true);
        assert_eq!(e.sops, 8000.0);
        assert!((e.energy_joules - 7.2e-9).abs() < 1e-20);
        let ann = energy_report(600.0, 400.0, 0.5, 16, false);
        assert!((ann.energy_joules - 4.6e-9).abs() < 1e-20);
    }

    #[test]
    fn histogram_examples() {
        let h = rate_histogram(&[0.5; 7], 10).unwrap();
        assert_eq!(h.freq[5], 1.0);
        assert_eq!(h.freq.iter().sum::<f64>(), 1.0);
        let grid: Vec<f32> = (0..40).map(|i| (i as f32 + 0.5) / 40.0).collect();
        let h = rate_histogram(&grid, 4).unwrap();
        assert!(h.freq.iter().all(|&f| f == 0.25));
        assert_eq!(rate_histogram(&[1.0], 4).unwrap().freq[3], 1.0);
        assert!(rate_histogram(&[0.2], 1).is_err());
    }
}
