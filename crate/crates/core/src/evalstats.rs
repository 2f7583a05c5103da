//! Correlation coefficients and per-category evaluation reports.
//!
//! The coefficients use a shift-then-sum formulation: every value is
//! offset by the first element, and the centred moments come out of the
//! `n·Σxy − Σx·Σy` identity. On integer-valued inputs of moderate size all
//! sums are exact, so the only roundings are the final square root and
//! division.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::BackboneSpec;
use crate::datasets::{Category, JNDSample, TwoAFCSample};
use crate::error::{Error, Result};
use crate::fusion::{compare_2afc, score, FusionHead};
use crate::pipeline::quality_groups;
use crate::trainer::{precompute_groups, sample_scales, soft_2afc_credit};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "vectors have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 values, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value".into()));
    }
    Ok(())
}

fn constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

/// Both sides need spread for a correlation to exist.
fn check_spread(x: &[f64], y: &[f64]) -> Result<()> {
    match (constant(x), constant(y)) {
        (true, true) => Err(Error::Degenerate("both inputs are constant".into())),
        (true, false) => Err(Error::Degenerate("first input is constant".into())),
        (false, true) => Err(Error::Degenerate("second input is constant".into())),
        (false, false) => Ok(()),
    }
}

/// Pearson's r with 64-bit accumulation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    check_spread(x, y)?;
    Ok(pearson_unchecked(x, y))
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (x0, y0) = (x[0], y[0]);
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - x0, b - y0);
        sx += dx;
        sy += dy;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let num = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    (num / (vx * vy).sqrt()).clamp(-1.0, 1.0)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson's r over average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    check_spread(x, y)?;
    Ok(pearson_unchecked(&average_ranks(x), &average_ranks(y)))
}

/// Kendall's τ-b by pair enumeration.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    check_spread(x, y)?;
    let (mut concordant, mut discordant, mut tied_x, mut tied_y) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].total_cmp(&x[j]);
            let dy = y[i].total_cmp(&y[j]);
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {}
                (Equal, _) => tied_x += 1,
                (_, Equal) => tied_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let num = concordant as f64 - discordant as f64;
    let a = (concordant + discordant + tied_x) as f64;
    let b = (concordant + discordant + tied_y) as f64;
    Ok((num / (a * b).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CategoryStats {
    pub plcc: f64,
    pub srcc: f64,
    pub krcc: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc2afc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrelationReport {
    pub categories: BTreeMap<Category, CategoryStats>,
    /// Categories left out of the report, with the reason.
    pub warnings: Vec<String>,
}

/// One evaluated sample: model value, human value and, for 2AFC, the soft
/// accuracy credit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub category: Category,
    pub model: f64,
    pub human: f64,
    pub credit: Option<f64>,
}

/// Groups rows by category and correlates model against human values.
/// Categories with fewer than two rows are skipped with a warning; a
/// category whose model or human values are constant is an error.
pub fn build_report(rows: &[EvalRow]) -> Result<CorrelationReport> {
    let mut by_cat: BTreeMap<Category, Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        by_cat.entry(r.category).or_default().push(r);
    }
    let mut report = CorrelationReport::default();
    for (cat, rs) in by_cat {
        if rs.len() < 2 {
            let msg = format!("category {cat} has {} sample(s), need at least 2", rs.len());
            log::warn!("{msg}");
            report.warnings.push(msg);
            continue;
        }
        let x: Vec<f64> = rs.iter().map(|r| r.model).collect();
        let y: Vec<f64> = rs.iter().map(|r| r.human).collect();
        let in_cat = |e: Error| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("category {cat}: {m}")),
            other => other,
        };
        let credits: Option<Vec<f64>> = rs.iter().map(|r| r.credit).collect();
        report.categories.insert(
            cat,
            CategoryStats {
                plcc: plcc(&x, &y).map_err(in_cat)?,
                srcc: srcc(&x, &y).map_err(in_cat)?,
                krcc: krcc(&x, &y).map_err(in_cat)?,
                n: rs.len(),
                acc2afc: credits.map(|c| c.iter().sum::<f64>() / c.len() as f64),
            },
        );
    }
    Ok(report)
}

/// Correlates the comparator's preference probability for image1 with the
/// human judge fraction, per category, and adds soft 2AFC accuracy.
pub fn eval_2afc(
    head: &FusionHead,
    spec: &BackboneSpec,
    samples: &[TwoAFCSample],
) -> Result<CorrelationReport> {
    let scales = head
        .msssim_scales()
        .map_or_else(|| sample_scales(samples), Ok)?;
    let rows = samples
        .par_iter()
        .map(|s| {
            let (g0, g1) = precompute_groups(spec, s, scales)?;
            let wrap = |e| Error::Sample {
                id: s.id.clone(),
                source: Box::new(e),
            };
            let s0 = score(head, &g0).map_err(wrap)?;
            let s1 = score(head, &g1).map_err(wrap)?;
            Ok(EvalRow {
                category: s.category,
                model: compare_2afc(head, &s0, &s1),
                human: s.judge,
                credit: Some(soft_2afc_credit(s0.score, s1.score, s.judge)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    build_report(&rows)
}

/// Correlates the score of img0 against img1 (as reference) with the
/// fraction of annotators who saw a difference.
pub fn eval_jnd(
    head: &FusionHead,
    spec: &BackboneSpec,
    samples: &[JNDSample],
) -> Result<CorrelationReport> {
    let rows = samples
        .par_iter()
        .map(|s| {
            let wrap = |e| Error::Sample {
                id: s.id.clone(),
                source: Box::new(e),
            };
            let (a, b) = s.load_images()?;
            let groups = quality_groups(spec, &a, &b, head.msssim_scales()).map_err(wrap)?;
            let sc = score(head, &groups).map_err(wrap)?;
            Ok(EvalRow {
                category: s.category,
                model: sc.score,
                human: s.diff_fraction,
                credit: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    build_report(&rows)
}
