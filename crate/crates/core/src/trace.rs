//! Per-layer SNR record of an unrolled run.

use serde::{Deserialize, Serialize};

use crate::attention::Phi;
use crate::model::ModelDims;

/// Parameters a trace was produced with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub dims: ModelDims,
    pub tokens_per_cluster: usize,
    pub eta: f64,
    pub phi: Phi,
    #[serde(default)]
    pub causal: bool,
    #[serde(default)]
    pub prenorm: bool,
    /// Noise scale of the generating model, when known.
    pub delta: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTrace {
    pub params: TraceParams,
    /// `snr[l][k]`: SNR of cluster `k` at layer state `l`; `l = 0` is the input.
    #[serde(with = "snr_table")]
    snr: Vec<Vec<f64>>,
    /// `pattern[l]`: every head's thresholded attention at layer `l` had the
    /// block-diagonal pattern. Empty for the plain softmax.
    pattern: Vec<bool>,
}

impl DenoiseTrace {
    pub fn new(params: TraceParams) -> Self {
        DenoiseTrace {
            params,
            snr: Vec::new(),
            pattern: Vec::new(),
        }
    }

    pub(crate) fn push_snr(&mut self, row: Vec<f64>) {
        self.snr.push(row);
    }

    pub(crate) fn push_pattern(&mut self, held: bool) {
        self.pattern.push(held);
    }

    pub fn snr(&self) -> &[Vec<f64>] {
        &self.snr
    }

    pub fn pattern(&self) -> &[bool] {
        &self.pattern
    }

    /// Number of layer transitions recorded.
    pub fn num_layers(&self) -> usize {
        self.snr.len().saturating_sub(1)
    }

    pub fn num_clusters(&self) -> usize {
        self.snr.first().map_or(0, Vec::len)
    }

    /// `snr[l+1][k] / snr[l][k]` for every transition.
    pub fn ratios(&self) -> Vec<Vec<f64>> {
        self.snr
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b / a).collect())
            .collect()
    }

    pub fn mean_snr(&self, layer: usize) -> f64 {
        let row = &self.snr[layer];
        row.iter().sum::<f64>() / row.len() as f64
    }

    /// Fraction of layers whose pattern held; `None` when nothing was checked.
    pub fn pattern_frequency(&self) -> Option<f64> {
        if self.pattern.is_empty() {
            return None;
        }
        Some(self.pattern.iter().filter(|&&h| h).count() as f64 / self.pattern.len() as f64)
    }

    /// Leading layers over which the pattern held without interruption.
    pub fn held_prefix(&self) -> usize {
        self.pattern.iter().take_while(|&&h| h).count()
    }

    /// Every cluster's SNR strictly increases at every layer.
    pub fn strictly_increasing(&self) -> bool {
        self.snr
            .windows(2)
            .all(|w| w[1].iter().zip(&w[0]).all(|(b, a)| b > a))
    }

    /// Least-squares fit of `ln SNR_k(l) = a + b l` for cluster `k`;
    /// returns `(slope, max abs residual)`.
    pub fn log_linear_fit(&self, k: usize) -> (f64, f64) {
        let ys: Vec<f64> = self.snr.iter().map(|row| row[k].ln()).collect();
        let n = ys.len() as f64;
        let mean_x = (n - 1.0) / 2.0;
        let mean_y = ys.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, y) in ys.iter().enumerate() {
            let dx = i as f64 - mean_x;
            sxy += dx * (y - mean_y);
            sxx += dx * dx;
        }
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let resid = ys
            .iter()
            .enumerate()
            .map(|(i, y)| (y - (mean_y + slope * (i as f64 - mean_x))).abs())
            .fold(0.0, f64::max);
        (slope, resid)
    }
}

/// SNR tables with `+∞` written as the string `"inf"`.
mod snr_table {
    use serde::de::{self, Deserializer};
    use serde::ser::Serializer;
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Cell {
        Finite(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(table: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let cells: Vec<Vec<Cell>> = table
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| {
                        if v == f64::INFINITY {
                            Cell::Text("inf".into())
                        } else {
                            Cell::Finite(v)
                        }
                    })
                    .collect()
            })
            .collect();
        cells.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let cells: Vec<Vec<Cell>> = Vec::deserialize(d)?;
        cells
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|c| match c {
                        Cell::Finite(v) => Ok(v),
                        Cell::Text(t) if t == "inf" => Ok(f64::INFINITY),
                        Cell::Text(t) => Err(de::Error::custom(format!("bad SNR value {t:?}"))),
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> TraceParams {
        TraceParams {
            dims: ModelDims::new(4, 2, 1).unwrap(),
            tokens_per_cluster: 3,
            eta: 0.5,
            phi: Phi::threshold(0.8),
            causal: false,
            prenorm: false,
            delta: Some(0.0),
            seed: Some(7),
        }
    }

    #[test]
    fn infinite_snr_serializes_as_string() {
        let mut t = DenoiseTrace::new(params());
        t.push_snr(vec![f64::INFINITY, 2.5]);
        t.push_pattern(true);
        t.push_snr(vec![f64::INFINITY, 3.5]);
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.contains("\"inf\""));
        let back: DenoiseTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn log_linear_fit_recovers_slope() {
        let mut t = DenoiseTrace::new(params());
        for l in 0..6 {
            t.push_snr(vec![2.0 * 1.4f64.powi(l)]);
        }
        let (slope, resid) = t.log_linear_fit(0);
        assert!((slope - 1.4f64.ln()).abs() < 1e-12);
        assert!(resid < 1e-12);
        assert!(t.strictly_increasing());
    }
}
