//! Singular-value spectra of learned adaptation matrices.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::arc::{AdapterBank, Group, Site, Variant};
use crate::error::{Error, Result};
use crate::kernel::{svd, Matrix};

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_TAU: f64 = 0.01;
/// Share of the largest singular values used for the energy metric.
pub const TOP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMetrics {
    pub tau: f64,
    pub effective_rank: usize,
    pub energy_top_fraction: f64,
    /// `max |U S V^T - delta|` of the decomposition behind the spectrum.
    pub reconstruction_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// Ascending, `bins + 1` entries.
    pub bin_edges: Vec<f64>,
    /// `bin_counts[i]` counts values with `edge[i] <= s < edge[i+1]`; the last
    /// bin is closed on the right. Values outside an explicit range are
    /// clamped into the end bins so the counts always sum to the number of
    /// singular values.
    pub bin_counts: Vec<usize>,
    pub metrics: SpectrumMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub layer: usize,
    pub site: Site,
    pub group: Group,
    pub spectrum: Spectrum,
}

/// `#{ s_i > tau * s_max }`; zero for an all-zero spectrum.
pub fn effective_rank_at(singular_values: &[f64], tau: f64) -> usize {
    let s_max = singular_values.iter().copied().fold(0.0, f64::max);
    if s_max == 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > tau * s_max).count()
}

/// Fraction of `sum s_i^2` carried by the largest `ceil(fraction * n)` values.
pub fn energy_top_fraction(singular_values: &[f64], fraction: f64) -> f64 {
    let mut s: Vec<f64> = singular_values.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = s.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return 0.0;
    }
    let k = ((fraction * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[..k].iter().map(|v| v * v).sum::<f64>() / total
}

/// Fixed-width histogram over `[lo, hi]`.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if bins == 0 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::Config(format!("histogram range must satisfy lo < hi, got [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        // partition_point gives the first edge strictly above v
        let idx = edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1);
        counts[idx] += 1;
    }
    Ok((edges, counts))
}

/// Spectrum of a square matrix. The histogram spans `[0, s_max]` unless a
/// range is given.
pub fn spectrum(delta: &Matrix, bins: usize, range: Option<(f64, f64)>) -> Result<Spectrum> {
    if delta.rows() != delta.cols() {
        return Err(Error::dim("spectrum", delta.shape(), (delta.rows(), delta.rows())));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    let dec = svd(delta)?;
    let reconstruction_error = dec.reconstruct().max_abs_diff(delta)?;
    let singular_values = dec.s;
    let s_max = singular_values.first().copied().unwrap_or(0.0);
    let (lo, hi) = range.unwrap_or((0.0, if s_max > 0.0 { s_max } else { 1.0 }));
    let (bin_edges, bin_counts) = histogram(&singular_values, bins, lo, hi)?;
    Ok(Spectrum {
        metrics: SpectrumMetrics {
            tau: DEFAULT_TAU,
            effective_rank: effective_rank_at(&singular_values, DEFAULT_TAU),
            energy_top_fraction: energy_top_fraction(&singular_values, TOP_FRACTION),
            reconstruction_error,
        },
        singular_values,
        bin_edges,
        bin_counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSweep {
    pub reports: Vec<SpectrumReport>,
    pub median_effective_rank: f64,
}

/// Spectrum of every adaptation matrix in a full-rank bank, ordered by
/// layer then site.
pub fn rank_sweep(bank: &AdapterBank, bins: usize) -> Result<RankSweep> {
    if bank.config().variant != Variant::FullRank {
        return Err(Error::Contract("rank_sweep expects a full_rank bank".into()));
    }
    let mut reports = Vec::with_capacity(bank.hooks().len());
    for hook in bank.hooks().iter() {
        reports.push(SpectrumReport {
            layer: hook.layer,
            site: hook.site,
            group: hook.site.block(),
            spectrum: spectrum(bank.delta(hook.layer, hook.site)?, bins, None)?,
        });
    }
    let ranks: Vec<usize> = reports.iter().map(|r| r.spectrum.metrics.effective_rank).collect();
    Ok(RankSweep {
        median_effective_rank: median(&ranks),
        reports,
    })
}

fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

pub fn write_histogram_csv(spectrum: &Spectrum, mut out: impl Write) -> Result<()> {
    writeln!(out, "bin_lo,bin_hi,count")?;
    for (i, c) in spectrum.bin_counts.iter().enumerate() {
        writeln!(out, "{},{},{c}", spectrum.bin_edges[i], spectrum.bin_edges[i + 1])?;
    }
    Ok(())
}

pub fn write_summary_csv(sweep: &RankSweep, mut out: impl Write) -> Result<()> {
    writeln!(out, "layer,group,site,effective_rank,top10_energy,s_max")?;
    for r in &sweep.reports {
        let m = &r.spectrum.metrics;
        let s_max = r.spectrum.singular_values.first().copied().unwrap_or(0.0);
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.layer,
            r.group.as_str(),
            r.site.as_str(),
            m.effective_rank,
            m.energy_top_fraction,
            s_max
        )?;
    }
    writeln!(out, "median,all,all,{},,", sweep.median_effective_rank)?;
    Ok(())
}

/// Writes `spectrum_l{layer}_{site}.csv` per report plus `spectrum_summary.csv`.
pub fn write_sweep(dir: &Path, sweep: &RankSweep) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for r in &sweep.reports {
        let path = dir.join(format!("spectrum_l{}_{}.csv", r.layer, r.site.as_str()));
        write_histogram_csv(&r.spectrum, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        written.push(path);
    }
    let path = dir.join("spectrum_summary.csv");
    write_summary_csv(sweep, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
    written.push(path);
    Ok(written)
}
