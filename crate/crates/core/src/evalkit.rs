//! Separation metrics.
//!
//! `bss_eval` uses zero-lag projections: the estimate is projected onto the
//! span of the reference signals themselves, without the time-shifted
//! copies (distortion filters) of the full BSS-Eval decomposition. Scores
//! therefore differ from the reference toolkit on reverberant material.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::Waveform;

/// Scores are clamped to `[−CLAMP_DB, CLAMP_DB]`.
pub const CLAMP_DB: f64 = 60.0;

fn db(num: f64, den: f64) -> f64 {
    let r = 10.0 * (num / den).log10();
    if r.is_nan() {
        // 0/0: nothing to measure either way
        return 0.0;
    }
    r.clamp(-CLAMP_DB, CLAMP_DB)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR of `est` against `reference`, in dB.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "estimate of {} samples against reference of {}",
            est.len(),
            reference.len()
        )));
    }
    let rr = dot(reference, reference);
    if !(rr > 0.0) {
        return Err(Error::InvalidInput("reference signal is silent".into()));
    }
    let alpha = dot(est, reference) / rr;
    let mut target = 0.0;
    let mut noise = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        noise += (e - t) * (e - t);
    }
    Ok(db(target, noise))
}

/// SI-SDR over all channels of two waveforms, treated as one signal.
pub fn si_sdr_multichannel(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.num_channels() != reference.num_channels() {
        return Err(Error::DimensionMismatch("channel counts differ".into()));
    }
    si_sdr(&est.channels.concat(), &reference.channels.concat())
}

/// Projection of `x` onto the span of `basis` (least squares through the
/// normal equations, pseudo-inverse for rank-deficient bases).
fn project(x: &[f64], basis: &[&[f64]]) -> Vec<f64> {
    let k = basis.len();
    let gram = DMatrix::from_fn(k, k, |a, b| dot(basis[a], basis[b]));
    let rhs = DVector::from_fn(k, |a, _| dot(basis[a], x));
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let coef = gram
        .svd(true, true)
        .solve(&rhs, 1e-12 * scale)
        .unwrap_or_else(|_| DVector::zeros(k));
    let mut out = vec![0.0; x.len()];
    for (c, b) in coef.iter().zip(basis) {
        for (o, v) in out.iter_mut().zip(b.iter()) {
            *o += c * v;
        }
    }
    out
}

/// Energies of the orthogonal split of an estimate: inside the target
/// subspace, inside the other references' part of the full span, and outside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub target: f64,
    pub spatial: f64,
    pub interference: f64,
    pub artifacts: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub sdr: f64,
    pub isr: f64,
    pub sir: f64,
    pub sar: f64,
}

fn check_images(est: &[Waveform], refs: &[Waveform]) -> Result<(usize, usize)> {
    if est.len() != refs.len() || refs.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {} references",
            est.len(),
            refs.len()
        )));
    }
    let (ch, len) = (refs[0].num_channels(), refs[0].len());
    if est.iter().chain(refs).any(|w| w.num_channels() != ch || w.len() != len) {
        return Err(Error::DimensionMismatch("all images must share channel count and length".into()));
    }
    Ok((ch, len))
}

/// Image-domain metrics of `est[j]` against `refs[j]`.
///
/// With `P_j` the projection onto the channels of reference image `j` and
/// `P` onto all reference channels, the estimate splits into
/// `s_img + e_spat` (`= P_j ŝ`), `e_interf = (P − P_j) ŝ` and
/// `e_artif = (I − P) ŝ`, where `s_img` is the true image.
pub fn bss_eval(est: &[Waveform], refs: &[Waveform]) -> Result<(Vec<SourceMetrics>, Vec<Decomposition>)> {
    let (ch, _) = check_images(est, refs)?;
    let all: Vec<&[f64]> = refs.iter().flat_map(|r| r.channels.iter().map(|c| c.as_slice())).collect();
    let mut metrics = Vec::with_capacity(est.len());
    let mut parts = Vec::with_capacity(est.len());
    for (j, e) in est.iter().enumerate() {
        let own: Vec<&[f64]> = refs[j].channels.iter().map(|c| c.as_slice()).collect();
        let mut d = Decomposition {
            target: 0.0,
            spatial: 0.0,
            interference: 0.0,
            artifacts: 0.0,
            total: 0.0,
        };
        let (mut img, mut img_spat, mut img_spat_int) = (0.0, 0.0, 0.0);
        let (mut err_all, mut err_int, mut err_art) = (0.0, 0.0, 0.0);
        for i in 0..ch {
            let x = &e.channels[i];
            let s = &refs[j].channels[i];
            let pj = project(x, &own);
            let pa = project(x, &all);
            for t in 0..x.len() {
                let spat = pj[t] - s[t];
                let interf = pa[t] - pj[t];
                let artif = x[t] - pa[t];
                d.target += pj[t] * pj[t];
                d.interference += interf * interf;
                d.artifacts += artif * artif;
                d.total += x[t] * x[t];
                d.spatial += spat * spat;
                img += s[t] * s[t];
                img_spat += pj[t] * pj[t];
                img_spat_int += pa[t] * pa[t];
                let err = x[t] - s[t];
                err_all += err * err;
                err_int += interf * interf;
                err_art += artif * artif;
            }
        }
        metrics.push(SourceMetrics {
            sdr: db(img, err_all),
            isr: db(img, d.spatial),
            sir: db(img_spat, err_int),
            sar: db(img_spat_int, err_art),
        });
        parts.push(d);
    }
    Ok((metrics, parts))
}

/// Assignment `perm` maximizing `Σ_j scores[j][perm[j]]`, by enumeration.
pub fn best_assignment(scores: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = scores.len();
    if n == 0 || n > 8 || scores.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput(format!(
            "assignment needs a square score table of size 1..=8, got {n}"
        )));
    }
    let mut best = (f64::NEG_INFINITY, (0..n).collect::<Vec<_>>());
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(j, &k)| scores[j][k]).sum();
        if total > best.0 {
            best = (total, perm);
        }
    }
    Ok(best.1)
}

/// For each reference `j`, the index of the estimate assigned to it,
/// maximizing total SI-SDR on the reference channel.
pub fn resolve_permutation(est: &[Waveform], refs: &[Waveform], reference_channel: usize) -> Result<Vec<usize>> {
    let (ch, _) = check_images(est, refs)?;
    if reference_channel >= ch {
        return Err(Error::InvalidInput(format!("reference channel {reference_channel} of {ch}")));
    }
    let scores = refs
        .iter()
        .map(|r| {
            est.iter()
                .map(|e| si_sdr(&e.channels[reference_channel], &r.channels[reference_channel]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    best_assignment(&scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub name: String,
    /// Grouping key for averages, e.g. the class pattern of a mixture.
    pub pattern: String,
    /// `permutation[j]` is the estimate matched to reference `j`.
    pub permutation: Vec<usize>,
    pub sources: Vec<SourceMetrics>,
    /// SI-SDR on the reference channel, per source.
    pub si_sdr: Vec<f64>,
    /// SI-SDR gain over the unprocessed mixture, per source.
    pub si_sdr_improvement: Option<Vec<f64>>,
}

impl ItemMetrics {
    pub fn mean_si_sdr(&self) -> f64 {
        self.si_sdr.iter().sum::<f64>() / self.si_sdr.len() as f64
    }

    pub fn mean_improvement(&self) -> Option<f64> {
        self.si_sdr_improvement
            .as_ref()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Scores one separated mixture: resolves the permutation, then computes
/// image metrics and reference-channel SI-SDR.
pub fn evaluate_item(
    name: &str,
    pattern: &str,
    est: &[Waveform],
    refs: &[Waveform],
    mixture: Option<&Waveform>,
    reference_channel: usize,
) -> Result<ItemMetrics> {
    let permutation = resolve_permutation(est, refs, reference_channel)?;
    let ordered: Vec<Waveform> = permutation.iter().map(|&k| est[k].clone()).collect();
    let (sources, _) = bss_eval(&ordered, refs)?;
    let si = ordered
        .iter()
        .zip(refs)
        .map(|(e, r)| si_sdr(&e.channels[reference_channel], &r.channels[reference_channel]))
        .collect::<Result<Vec<_>>>()?;
    let improvement = match mixture {
        Some(m) => {
            if m.num_channels() <= reference_channel || m.len() != refs[0].len() {
                return Err(Error::DimensionMismatch("mixture does not match the references".into()));
            }
            let base = refs
                .iter()
                .map(|r| si_sdr(&m.channels[reference_channel], &r.channels[reference_channel]))
                .collect::<Result<Vec<_>>>()?;
            Some(si.iter().zip(&base).map(|(a, b)| a - b).collect())
        }
        None => None,
    };
    Ok(ItemMetrics {
        name: name.to_string(),
        pattern: pattern.to_string(),
        permutation,
        sources,
        si_sdr: si,
        si_sdr_improvement: improvement,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub items: usize,
    pub sdr: f64,
    pub isr: f64,
    pub sir: f64,
    pub sar: f64,
    pub si_sdr: f64,
    pub si_sdr_improvement: Option<f64>,
}

fn average<'a>(items: impl Iterator<Item = &'a ItemMetrics>) -> Averages {
    let mut a = Averages::default();
    let mut count = 0usize;
    let mut improvement = Some(0.0);
    for it in items {
        a.items += 1;
        for (s, si) in it.sources.iter().zip(&it.si_sdr) {
            a.sdr += s.sdr;
            a.isr += s.isr;
            a.sir += s.sir;
            a.sar += s.sar;
            a.si_sdr += si;
            count += 1;
        }
        improvement = match (improvement, &it.si_sdr_improvement) {
            (Some(acc), Some(v)) => Some(acc + v.iter().sum::<f64>()),
            _ => None,
        };
    }
    if count > 0 {
        let c = count as f64;
        a.sdr /= c;
        a.isr /= c;
        a.sir /= c;
        a.sar /= c;
        a.si_sdr /= c;
        a.si_sdr_improvement = improvement.map(|s| s / c);
    }
    a
}

/// Metrics for a set of mixtures, with per-pattern and overall averages
/// taken over all sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub items: Vec<ItemMetrics>,
    pub by_pattern: BTreeMap<String, Averages>,
    pub overall: Averages,
    pub note: String,
}

impl MetricReport {
    pub fn new(method: &str, items: Vec<ItemMetrics>) -> Self {
        let mut patterns: BTreeMap<String, Vec<&ItemMetrics>> = BTreeMap::new();
        for it in &items {
            patterns.entry(it.pattern.clone()).or_default().push(it);
        }
        let by_pattern = patterns
            .into_iter()
            .map(|(k, v)| (k, average(v.into_iter())))
            .collect();
        let overall = average(items.iter());
        MetricReport {
            method: method.to_string(),
            items,
            by_pattern,
            overall,
            note: "image metrics use zero-lag projections without distortion filters".into(),
        }
    }

    /// One row per source plus average rows, tab-separated.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.note);
        let _ = writeln!(out, "method\titem\tpattern\tsource\testimate\tsdr\tisr\tsir\tsar\tsi_sdr\tsi_sdr_improvement");
        for it in &self.items {
            for (j, s) in it.sources.iter().enumerate() {
                let imp = it
                    .si_sdr_improvement
                    .as_ref()
                    .map_or("-".to_string(), |v| format!("{:.4}", v[j]));
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
                    self.method, it.name, it.pattern, j, it.permutation[j], s.sdr, s.isr, s.sir, s.sar, it.si_sdr[j], imp
                );
            }
        }
        let mut avg_row = |label: &str, a: &Averages| {
            let imp = a.si_sdr_improvement.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{}\tmean\t{}\t-\t-\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
                self.method, label, a.sdr, a.isr, a.sir, a.sar, a.si_sdr, imp
            );
        };
        for (p, a) in &self.by_pattern {
            avg_row(p, a);
        }
        avg_row("all", &self.overall);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Values for a grouped bar chart: one line per pattern and metric.
    pub fn bar_data(&self) -> String {
        let mut out = String::from("pattern\tmetric\tvalue\n");
        for (p, a) in self.by_pattern.iter().chain(std::iter::once((&"all".to_string(), &self.overall))) {
            for (name, v) in [("sdr", a.sdr), ("isr", a.isr), ("sir", a.sir), ("sar", a.sar), ("si_sdr", a.si_sdr)] {
                let _ = writeln!(out, "{p}\t{name}\t{v:.4}");
            }
        }
        out
    }

    /// Writes `metrics.tsv`, `metrics.json` and `bars.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("metrics.tsv", self.to_tsv()),
            ("metrics.json", self.to_json()),
            ("bars.tsv", self.bar_data()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
