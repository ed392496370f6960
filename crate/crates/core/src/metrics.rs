//! 1-Wasserstein distances and binned return distributions.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Exact W1 between two equal-size empirical distributions: the mean
/// absolute difference of order statistics. Inputs need not be sorted.
pub fn wasserstein1_samples(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Contract(format!(
            "sample W1 needs equal non-empty lengths, got {} and {}; use the histogram variant",
            x.len(),
            y.len()
        )));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}

/// W1 between two finitely supported distributions given as `(value, mass)`
/// atoms, in any order. Masses are renormalised.
pub fn wasserstein1_atoms(p: &[(f64, f64)], q: &[(f64, f64)]) -> f64 {
    let norm = |v: &[(f64, f64)]| {
        let total: f64 = v.iter().map(|a| a.1).sum();
        let mut out: Vec<(f64, f64)> = v.iter().map(|&(z, m)| (z, m / total)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    };
    let (p, q) = (norm(p), norm(q));
    let mut events: Vec<(f64, f64)> = p.iter().copied().chain(q.iter().map(|&(z, m)| (z, -m))).collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut diff = 0.0;
    let mut total = 0.0;
    for w in 0..events.len() {
        diff += events[w].1;
        if let Some(next) = events.get(w + 1) {
            total += diff.abs() * (next.0 - events[w].0);
        }
    }
    total
}

/// Binned return distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnHistogram {
    edges: Vec<f64>,
    masses: Vec<f64>,
}

/// `n_bins + 1` evenly spaced edges; the last edge is exactly `hi`.
pub fn uniform_edges(lo: f64, hi: f64, n_bins: usize) -> Result<Vec<f64>> {
    if n_bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Contract(format!("bad histogram support [{lo}, {hi}] with {n_bins} bins")));
    }
    let w = (hi - lo) / n_bins as f64;
    let mut e: Vec<f64> = (0..n_bins).map(|i| lo + i as f64 * w).collect();
    e.push(hi);
    Ok(e)
}

impl ReturnHistogram {
    pub fn new(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || masses.len() + 1 != edges.len() {
            return Err(Error::Contract(format!("{} edges do not bound {} bins", edges.len(), masses.len())));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Contract("histogram edges must be strictly ascending".into()));
        }
        if masses.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::Contract("histogram masses must be non-negative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("histogram masses sum to {total}, not 1")));
        }
        Ok(Self { edges, masses })
    }

    /// Bins `samples` on `[lo, hi]`; samples outside are clipped into the
    /// boundary bins. Returns the histogram and the number clipped.
    pub fn from_samples(samples: &[f64], lo: f64, hi: f64, n_bins: usize) -> Result<(Self, usize)> {
        if samples.is_empty() {
            return Err(Error::Contract("cannot bin zero samples".into()));
        }
        let edges = uniform_edges(lo, hi, n_bins)?;
        let mut counts = vec![0usize; n_bins];
        let mut clipped = 0;
        for &x in samples {
            if !x.is_finite() {
                return Err(Error::Contract("non-finite return sample".into()));
            }
            if x < lo || x > hi {
                clipped += 1;
            }
            counts[bin_index(&edges, x)] += 1;
        }
        let n = samples.len() as f64;
        let masses = counts.into_iter().map(|c| c as f64 / n).collect();
        Ok((Self { edges, masses }, clipped))
    }

    /// Bins weighted atoms on `[lo, hi]`, clipping out-of-range atoms.
    pub fn from_atoms(atoms: &[(f64, f64)], lo: f64, hi: f64, n_bins: usize) -> Result<Self> {
        let edges = uniform_edges(lo, hi, n_bins)?;
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if !(total > 0.0) {
            return Err(Error::Contract("atoms carry no mass".into()));
        }
        let mut masses = vec![0.0; n_bins];
        for &(z, m) in atoms {
            masses[bin_index(&edges, z)] += m / total;
        }
        Ok(Self { edges, masses })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn n_bins(&self) -> usize {
        self.masses.len()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Widest bin.
    pub fn bin_width(&self) -> f64 {
        self.edges.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.centers().iter().zip(&self.masses).map(|(c, m)| c * m).sum()
    }

    /// Mass of the bins whose centres lie in `[a, b]`.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        self.centers().iter().zip(&self.masses).filter(|(c, _)| **c >= a && **c <= b).map(|(_, m)| m).sum()
    }

    pub fn bin_of(&self, x: f64) -> usize {
        bin_index(&self.edges, x)
    }

    /// Bin centres weighted by mass.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        self.centers().into_iter().zip(self.masses.iter().copied()).collect()
    }

    /// `bin_left,bin_right,mass` rows under a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,mass\n");
        for (w, m) in self.edges.windows(2).zip(&self.masses) {
            let _ = writeln!(out, "{:?},{:?},{:?}", w[0], w[1], m);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("bin_left,bin_right,mass") {
            return Err(Error::Parse("histogram CSV must start with bin_left,bin_right,mass".into()));
        }
        let mut edges = Vec::new();
        let mut masses = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {}: {e}", i + 1))))
                .collect::<Result<_>>()?;
            if v.len() != 3 {
                return Err(Error::Parse(format!("row {}: expected 3 columns", i + 1)));
            }
            if edges.is_empty() {
                edges.push(v[0]);
            } else if edges.last() != Some(&v[0]) {
                return Err(Error::Parse(format!("row {}: bins are not contiguous", i + 1)));
            }
            edges.push(v[1]);
            masses.push(v[2]);
        }
        Self::new(edges, masses).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, &self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&crate::error::read_file(path)?)
    }
}

fn bin_index(edges: &[f64], x: f64) -> usize {
    let n = edges.len() - 1;
    // partition_point gives the number of edges <= x
    let k = edges.partition_point(|e| *e <= x);
    k.saturating_sub(1).min(n - 1)
}

/// `sum |CDF_p - CDF_q| * bin_width` over shared bins.
pub fn wasserstein1_histograms(p: &ReturnHistogram, q: &ReturnHistogram) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::Contract("histograms must share identical bin edges".into()));
    }
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut total = 0.0;
    for (i, w) in p.edges.windows(2).enumerate() {
        cp += p.masses[i];
        cq += q.masses[i];
        total += (cp - cq).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// Writes the histogram of `samples` to `path` as CSV and returns it with
/// the number of clipped samples.
pub fn export_histogram(samples: &[f64], n_bins: usize, lo: f64, hi: f64, path: &Path) -> Result<(ReturnHistogram, usize)> {
    let (h, clipped) = ReturnHistogram::from_samples(samples, lo, hi, n_bins)?;
    h.write_csv(path)?;
    Ok((h, clipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_w1_examples() {
        assert_eq!(wasserstein1_samples(&[0.3, 0.1], &[0.1, 0.3]).unwrap(), 0.0);
        assert_eq!(wasserstein1_samples(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1_samples(&[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(wasserstein1_samples(&[0.0], &[0.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn atom_w1_matches_samples() {
        let p = [(0.0, 0.5), (1.0, 0.5)];
        let q = [(0.0, 1.0)];
        assert!((wasserstein1_atoms(&p, &q) - 0.5).abs() < 1e-15);
        assert_eq!(wasserstein1_atoms(&p, &p), 0.0);
        assert!((wasserstein1_atoms(&[(2.0, 3.0)], &[(-1.0, 1.0)]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_w1_examples() {
        let a = ReturnHistogram::from_samples(&[0.05], 0.0, 1.0, 10).unwrap().0;
        let b = ReturnHistogram::from_samples(&[0.15], 0.0, 1.0, 10).unwrap().0;
        assert_eq!(wasserstein1_histograms(&a, &a).unwrap(), 0.0);
        assert!((wasserstein1_histograms(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        let c = ReturnHistogram::from_samples(&[0.15], 0.0, 1.0, 5).unwrap().0;
        assert!(matches!(wasserstein1_histograms(&a, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn binning_clips_and_counts() {
        let (h, clipped) = ReturnHistogram::from_samples(&[-5.0, 0.0, 0.5, 1.0, 9.0], 0.0, 1.0, 4).unwrap();
        assert_eq!(clipped, 2);
        assert_eq!(h.masses(), &[0.4, 0.0, 0.2, 0.4]);
        let (one, _) = ReturnHistogram::from_samples(&[0.3; 7], 0.0, 1.0, 60).unwrap();
        assert_eq!(one.masses().iter().filter(|m| **m > 0.0).count(), 1);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let xs: Vec<f64> = (0..5000).map(|i| ((i * 7919) % 1000) as f64 / 997.0).collect();
        let (h, _) = ReturnHistogram::from_samples(&xs, -0.1, 1.1, 60).unwrap();
        let back = ReturnHistogram::from_csv(&h.to_csv()).unwrap();
        assert_eq!(back, h);
        assert!((h.masses().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_histograms_rejected() {
        assert!(ReturnHistogram::new(vec![0.0, 1.0], vec![0.5]).is_err());
        assert!(ReturnHistogram::new(vec![1.0, 0.0], vec![1.0]).is_err());
        assert!(ReturnHistogram::new(vec![0.0, 1.0, 2.0], vec![1.0]).is_err());
        assert!(ReturnHistogram::from_csv("a,b\n").is_err());
    }
}
