//! Image pair → grouped quality maps → score.

use crate::backbone::{BackboneSpec, FeaturePyramid};
use crate::deep::{deep_maps, split_groups, QualityGroups};
use crate::error::{Error, Result};
use crate::fusion::{score, FusionHead, ScoreBreakdown};
use crate::tensor::Tensor;
use crate::traditional::{max_scales, msssim_map, psnr_map, ssim_map};

/// Scale count for an image, or an error if the image is below one SSIM
/// window.
pub fn scales_for(image: &Tensor) -> Result<usize> {
    let (_, h, w) = image.dims3()?;
    match max_scales(h, w) {
        0 => Err(Error::Shape(format!("image {h}×{w} is too small for SSIM"))),
        s => Ok(s),
    }
}

/// All quality maps of `eval` against `reference`, grouped. `scales` fixes
/// the MS-SSIM depth; `None` uses as many scales as the image allows.
pub fn quality_groups(
    spec: &BackboneSpec,
    eval: &Tensor,
    reference: &Tensor,
    scales: Option<usize>,
) -> Result<QualityGroups> {
    let ref_features = spec.extract_features(reference)?;
    quality_groups_with_ref(spec, eval, reference, &ref_features, scales)
}

/// As [`quality_groups`] with the reference's features already extracted,
/// so that two candidates can share one backbone pass over the reference.
pub fn quality_groups_with_ref(
    spec: &BackboneSpec,
    eval: &Tensor,
    reference: &Tensor,
    ref_features: &FeaturePyramid,
    scales: Option<usize>,
) -> Result<QualityGroups> {
    let scales = match scales {
        Some(s) => s,
        None => scales_for(reference)?,
    };
    let trad = vec![
        psnr_map(eval, reference)?,
        ssim_map(eval, reference)?,
        msssim_map(eval, reference, scales)?,
    ];
    let eval_features = spec.extract_features(eval)?;
    split_groups(deep_maps(&eval_features, ref_features)?, trad)
}

/// Scores `eval` against `reference` with the MS-SSIM depth the head was
/// built for.
pub fn score_images(
    spec: &BackboneSpec,
    head: &FusionHead,
    eval: &Tensor,
    reference: &Tensor,
) -> Result<ScoreBreakdown> {
    let groups = quality_groups(spec, eval, reference, head.msssim_scales())?;
    score(head, &groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::alexnet_random;
    use crate::fusion::{init_head, Ablation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_images_score_zero() {
        let spec = alexnet_random(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::from_fn(3, 64, 64, |_, _, _| rng.random::<f32>());
        let groups = quality_groups(&spec, &img, &img, None).unwrap();
        assert!(groups
            .all_maps()
            .all(|m| m.map.data().iter().all(|&v| v == 0.0)));
        assert_eq!(groups.tradition[2].channels(), 3);
        let head = init_head(&spec, 3, Ablation::Full, 0).unwrap();
        assert_eq!(score_images(&spec, &head, &img, &img).unwrap().score, 0.0);
    }

    #[test]
    fn head_scale_count_is_honoured() {
        let spec = alexnet_random(1);
        let a = Tensor::filled(vec![3, 96, 96], 0.3);
        let b = Tensor::filled(vec![3, 96, 96], 0.6);
        let head = init_head(&spec, 2, Ablation::Full, 0).unwrap();
        let s = score_images(&spec, &head, &a, &b).unwrap();
        assert!(s.score > 0.0);
        let too_deep = init_head(&spec, 5, Ablation::Full, 0).unwrap();
        assert!(score_images(&spec, &too_deep, &a, &b).is_err());
    }
}
