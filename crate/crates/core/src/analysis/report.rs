use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{read_snapshot, SimilarityTracker};
use crate::tensor::Real;

use super::LayerHistogram;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    /// `min(1, run / baseline)`.
    pub capped: Real,
    pub raw: Real,
}

impl Ratio {
    pub fn new(name: &str, run: Real, baseline: Real) -> Result<Self> {
        if baseline == 0.0 {
            return Err(Error::invalid(
                "ratio_report",
                format!("baseline {name} is zero"),
            ));
        }
        let raw = run / baseline;
        Ok(Ratio {
            capped: raw.min(1.0),
            raw,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub baseline: String,
    pub sensitivity: Ratio,
    pub uniqueness: Ratio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub sensitivity_total: Real,
    pub sensitivity_raw: Real,
    pub sensitivity_per_layer: Vec<Real>,
    pub examples: usize,
    pub uniqueness: Real,
    pub non_unique_fraction: Real,
    pub threshold: Real,
    pub layer_widths: Vec<usize>,
    pub kept_per_layer: Vec<usize>,
    pub per_layer_leftover: Vec<Real>,
    pub non_unique_per_layer: Vec<usize>,
    pub histograms: Vec<LayerHistogram>,
    #[serde(default)]
    pub ratios: Option<Ratios>,
}

impl RedundancyReport {
    /// Ratios of this run against `baseline`, capped at 1 with raw values kept.
    pub fn ratio_report(
        &self,
        baseline: &RedundancyReport,
        baseline_name: &str,
    ) -> Result<RedundancyReport> {
        let ratios = Ratios {
            baseline: baseline_name.to_string(),
            sensitivity: Ratio::new(
                "sensitivity",
                self.sensitivity_total,
                baseline.sensitivity_total,
            )?,
            uniqueness: Ratio::new("uniqueness", self.uniqueness, baseline.uniqueness)?,
        };
        Ok(RedundancyReport {
            ratios: Some(ratios),
            ..self.clone()
        })
    }
}

#[derive(Serialize)]
struct Bundle<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    report: &'a RedundancyReport,
}

/// Writes `report.json`, `layers.csv`, `histogram.csv` and, when given,
/// `similarity.bin` into `dir`. Every file carries `config_hash`.
///
/// `similarity.bin` is a `u32` hash length, the hash bytes, then the
/// tracker snapshot (see [`SimilarityTracker::snapshot_bytes`]).
pub fn write_report_bundle(
    dir: &Path,
    report: &RedundancyReport,
    similarity: Option<&SimilarityTracker>,
    config_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    let json = serde_json::to_string_pretty(&Bundle {
        config_hash,
        report,
    })?;
    write("report.json", json.as_bytes())?;

    let mut csv = String::from("layer,width,kept,leftover,sensitivity,non_unique,config_hash\n");
    for l in 0..report.layer_widths.len() {
        writeln!(
            csv,
            "{l},{},{},{},{},{},{config_hash}",
            report.layer_widths[l],
            report.kept_per_layer[l],
            report.per_layer_leftover[l],
            report.sensitivity_per_layer[l],
            report.non_unique_per_layer[l],
        )
        .unwrap();
    }
    write("layers.csv", csv.as_bytes())?;

    let mut csv = String::from("layer,bin_low,bin_high,count,share,config_hash\n");
    for (l, h) in report.histograms.iter().enumerate() {
        let bins = h.counts.len() as Real;
        for (b, (&c, &s)) in h.counts.iter().zip(&h.shares).enumerate() {
            writeln!(
                csv,
                "{l},{},{},{c},{s},{config_hash}",
                b as Real / bins,
                (b + 1) as Real / bins
            )
            .unwrap();
        }
    }
    write("histogram.csv", csv.as_bytes())?;

    if let Some(t) = similarity {
        let mut bytes = (config_hash.len() as u32).to_le_bytes().to_vec();
        bytes.extend_from_slice(config_hash.as_bytes());
        bytes.extend_from_slice(&t.snapshot_bytes());
        write("similarity.bin", &bytes)?;
    }
    Ok(())
}

/// Splits a `similarity.bin` file into its config hash and per-layer matrices.
pub fn read_similarity_bin(bytes: &[u8]) -> Result<(String, Vec<(usize, Vec<f64>)>)> {
    let bad = || Error::Data("malformed similarity.bin".into());
    let n = u32::from_le_bytes(bytes.get(..4).ok_or_else(bad)?.try_into().unwrap()) as usize;
    let hash = bytes.get(4..4 + n).ok_or_else(bad)?;
    let hash = String::from_utf8(hash.to_vec()).map_err(|_| bad())?;
    Ok((hash, read_snapshot(&bytes[4 + n..])?))
}

/// Reads `report.json` from a bundle directory, returning the report and its config hash.
pub fn read_report(dir: &Path) -> Result<(RedundancyReport, String)> {
    let p = dir.join("report.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let hash = value
        .get("config_hash")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    Ok((serde_json::from_value(value)?, hash))
}
