//! Squared deep-feature differences and the three-way grouping of all
//! quality maps.

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::traditional::{MapSource, QualityMap};

/// Quality maps split into the three groups the fusion head consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityGroups {
    /// `[Q_psnr, Q_ssim, Q_msssim]`.
    pub tradition: Vec<QualityMap>,
    /// Deep maps from taps `1..=L-2`.
    pub percept: Vec<QualityMap>,
    /// Deep maps from the last two taps.
    pub semantic: Vec<QualityMap>,
}

impl QualityGroups {
    pub fn all_maps(&self) -> impl Iterator<Item = &QualityMap> {
        self.tradition
            .iter()
            .chain(&self.percept)
            .chain(&self.semantic)
    }
}

/// Elementwise `(a - b)²` per tap layer.
pub fn deep_maps(f_eval: &FeaturePyramid, f_ref: &FeaturePyramid) -> Result<Vec<QualityMap>> {
    if f_eval.len() != f_ref.len() {
        return Err(Error::Shape(format!(
            "pyramids have {} and {} levels",
            f_eval.len(),
            f_ref.len()
        )));
    }
    f_eval
        .features
        .iter()
        .zip(&f_ref.features)
        .enumerate()
        .map(|(l, (a, b))| {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "level {l}: feature shapes {:?} and {:?} differ",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| {
                    let d = x - y;
                    d * d
                })
                .collect();
            Ok(QualityMap {
                map: Tensor::new(a.shape().to_vec(), data)?,
                source: MapSource::Deep(l),
            })
        })
        .collect()
}

/// The last two deep maps are semantic, the rest perceptual.
pub fn split_groups(deep: Vec<QualityMap>, trad: Vec<QualityMap>) -> Result<QualityGroups> {
    if deep.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "grouping needs at least 3 deep maps, got {}",
            deep.len()
        )));
    }
    if trad.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "expected 3 traditional maps, got {}",
            trad.len()
        )));
    }
    let mut percept = deep;
    let semantic = percept.split_off(percept.len() - 2);
    Ok(QualityGroups {
        tradition: trad,
        percept,
        semantic,
    })
}
