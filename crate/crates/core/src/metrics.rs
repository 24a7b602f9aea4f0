//! Texture and stress-curve error measures, plus pole-figure binning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotlab::{cubic_symmetry_ops, Quat, Vec3};
use crate::tacs::OdfHistogram;

pub const REPORT_VERSION: u32 = 1;

/// Normalized texture index of the difference ODF,
/// `sum (f_pred - f_ref)^2 dg / sum f_ref^2 dg`.
pub fn texture_index(f_pred: &OdfHistogram, f_ref: &OdfHistogram) -> Result<f64> {
    if !f_pred.same_partition(f_ref) {
        return Err(Error::Invalid(format!(
            "histograms use different partitions ({} vs {} bins)",
            f_pred.bins(),
            f_ref.bins()
        )));
    }
    let dg = f_ref.bin_volume();
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, r) in f_pred.density.iter().zip(&f_ref.density) {
        let d = p - r;
        num += d * d * dg;
        den += r * r * dg;
    }
    if den == 0.0 {
        return Err(Error::Invalid("reference histogram is empty".into()));
    }
    Ok(num / den)
}

/// `(mean |dP| / max |P_ref|, max |dP| / max |P_ref|)`.
pub fn relative_errors(reference: &[f64], prediction: &[f64]) -> Result<(f64, f64)> {
    if reference.is_empty() || reference.len() != prediction.len() {
        return Err(Error::Invalid(format!(
            "series lengths {} and {} must match and be nonzero",
            reference.len(),
            prediction.len()
        )));
    }
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Invalid("reference series is identically zero".into()));
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (r, p) in reference.iter().zip(prediction) {
        let d = (r - p).abs();
        sum += d;
        max = max.max(d);
    }
    Ok((sum / reference.len() as f64 / scale, max / scale))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub seed: u64,
    pub texture_index: Option<f64>,
    pub mean_relative_error: Option<f64>,
    pub max_relative_error: Option<f64>,
    /// Named loss values (final train / validation and similar).
    #[serde(default)]
    pub losses: Vec<(String, f64)>,
    /// Wall times in seconds by stage.
    #[serde(default)]
    pub runtimes: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn new(seed: u64) -> Self {
        MetricsReport {
            version: REPORT_VERSION,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != REPORT_VERSION {
            return Err(Error::Version {
                what: "metrics report",
                found: self.version,
                expected: REPORT_VERSION,
            });
        }
        let values = [self.texture_index, self.mean_relative_error, self.max_relative_error];
        let named = self.losses.iter().chain(&self.runtimes).map(|(_, v)| Some(*v));
        if values.into_iter().chain(named).flatten().any(|v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Invalid("metrics must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoleFamily {
    /// `{100}`
    Cube,
    /// `{111}`
    Octahedral,
}

impl PoleFamily {
    fn poles(self) -> Vec<Vec3> {
        let base = match self {
            PoleFamily::Cube => Vec3::new(1.0, 0.0, 0.0),
            PoleFamily::Octahedral => Vec3::new(1.0, 1.0, 1.0).normalize(),
        };
        let mut out: Vec<Vec3> = Vec::new();
        for s in cubic_symmetry_ops() {
            let p = s.to_matrix() * base;
            if !out.iter().any(|o| (o - p).norm() < 1e-9 || (o + p).norm() < 1e-9) {
                out.push(p);
            }
        }
        out
    }
}

/// Weighted stereographic pole counts on a `grid x grid` square over the
/// unit disk, normalized to sum to one.
pub fn pole_figure(orientations: &[Quat], weights: &[f64], family: PoleFamily, grid: usize) -> Result<Vec<f64>> {
    if orientations.len() != weights.len() || orientations.is_empty() || grid == 0 {
        return Err(Error::Invalid("need matching non-empty orientations and weights".into()));
    }
    let poles = family.poles();
    let mut counts = vec![0.0; grid * grid];
    for (q, w) in orientations.iter().zip(weights) {
        let r = q.to_matrix();
        for p in &poles {
            let mut v = r * p;
            if v.z < 0.0 {
                v = -v;
            }
            let (x, y) = (v.x / (1.0 + v.z), v.y / (1.0 + v.z));
            let cell = |c: f64| (((c + 1.0) * 0.5 * grid as f64) as usize).min(grid - 1);
            counts[cell(y) * grid + cell(x)] += w;
        }
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    Ok(counts)
}

/// `x,y,density` rows at cell centers.
pub fn pole_figure_csv(counts: &[f64], grid: usize) -> String {
    let mut s = String::from("x,y,density\n");
    for (k, c) in counts.iter().enumerate() {
        let center = |i: usize| -1.0 + (i as f64 + 0.5) * 2.0 / grid as f64;
        s.push_str(&format!("{:.6},{:.6},{:e}\n", center(k % grid), center(k / grid), c));
    }
    s
}
