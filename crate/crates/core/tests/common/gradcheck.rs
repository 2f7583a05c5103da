//! Random fusion-head configurations and a central-difference check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use spips_core::deep::QualityGroups;
use spips_core::fusion::{loss, loss_and_gradients, Ablation, FusionHead, Group};
use spips_core::traditional::{MapSource, QualityMap};
use spips_core::Tensor;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
/// Pre-activations closer than this to zero could cross the ReLU kink
/// under an `H` perturbation, where finite differences are meaningless.
pub const KINK_MARGIN: f64 = 0.02;

pub struct Config {
    pub head: FusionHead,
    pub g0: QualityGroups,
    pub g1: QualityGroups,
    pub human: f64,
}

fn random_groups(rng: &mut ChaCha8Rng, layout: &[(Group, usize)], side: usize) -> QualityGroups {
    let mut g = QualityGroups {
        tradition: vec![],
        percept: vec![],
        semantic: vec![],
    };
    let mut deep = 0;
    for (i, &(group, c)) in layout.iter().enumerate() {
        let map = Tensor::from_fn(c, side, side, |_, _, _| rng.random_range(0.0f32..1.0));
        let source = match (group, i) {
            (Group::Tradition, 0) => MapSource::Psnr,
            (Group::Tradition, 1) => MapSource::Ssim,
            (Group::Tradition, _) => MapSource::MsSsim,
            _ => {
                deep += 1;
                MapSource::Deep(deep - 1)
            }
        };
        let m = QualityMap { map, source };
        match group {
            Group::Tradition => g.tradition.push(m),
            Group::Percept => g.percept.push(m),
            Group::Semantic => g.semantic.push(m),
        }
    }
    g
}

/// Smallest |w·Q + b| over every pixel the head sees.
fn min_preactivation(head: &FusionHead, groups: &QualityGroups) -> f64 {
    let maps: Vec<&QualityMap> = groups.all_maps().collect();
    let mut by_group = [0usize; 3];
    let mut min = f64::INFINITY;
    for k in &head.kernels {
        let offset = match k.group {
            Group::Tradition => 0,
            Group::Percept => groups.tradition.len(),
            Group::Semantic => groups.tradition.len() + groups.percept.len(),
        };
        let m = maps[offset + by_group[k.group as usize]];
        by_group[k.group as usize] += 1;
        let c = k.weights.len();
        let p = m.map.len() / c;
        for i in 0..p {
            let y: f64 = k.bias
                + (0..c)
                    .map(|ci| k.weights[ci] * m.map.data()[ci * p + i] as f64)
                    .sum::<f64>();
            min = min.min(y.abs());
        }
    }
    min
}

pub fn random_config(seed: u64) -> Config {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.6).unwrap();
    loop {
        let scales = rng.random_range(1..=3);
        let n_percept = rng.random_range(1..=3);
        let mut layout = vec![
            (Group::Tradition, 3),
            (Group::Tradition, 3),
            (Group::Tradition, scales),
        ];
        for _ in 0..n_percept {
            layout.push((Group::Percept, rng.random_range(1..=4)));
        }
        for _ in 0..2 {
            layout.push((Group::Semantic, rng.random_range(1..=4)));
        }
        let ablation =
            [Ablation::Full, Ablation::NoSemantic, Ablation::NoTradition][rng.random_range(0..3)];
        let mut head = FusionHead::with_noise(&layout, ablation, rng.random(), 0.0);
        for k in &mut head.kernels {
            k.weights
                .iter_mut()
                .for_each(|w| *w = normal.sample(&mut rng));
            k.bias = normal.sample(&mut rng) * 0.5;
        }
        for g in ablation.active_groups() {
            head.lambda_logits[g as usize] = normal.sample(&mut rng);
        }
        head.comparator_scale = rng.random_range(0.5..3.0);
        head.comparator_bias = rng.random_range(-0.5..0.5);
        let side = rng.random_range(2..=4);
        let g0 = random_groups(&mut rng, &layout, side);
        let g1 = random_groups(&mut rng, &layout, side);
        let human = [0.0, 1.0, rng.random_range(0.0..1.0)][rng.random_range(0..3)];
        if min_preactivation(&head, &g0).min(min_preactivation(&head, &g1)) > KINK_MARGIN {
            return Config {
                head,
                g0,
                g1,
                human,
            };
        }
    }
}

pub fn check_config(cfg: &Config) -> Result<(), String> {
    let (_, grads) = loss_and_gradients(&cfg.head, (&cfg.g0, &cfg.g1), cfg.human).unwrap();
    let analytic = grads.flat();
    let base = cfg.head.params();
    assert_eq!(analytic.len(), base.len());
    let mut probe = cfg.head.clone();
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + H;
        probe.set_params(&p);
        let up = loss(&probe, (&cfg.g0, &cfg.g1), cfg.human).unwrap();
        p[i] = base[i] - H;
        probe.set_params(&p);
        let down = loss(&probe, (&cfg.g0, &cfg.g1), cfg.human).unwrap();
        let fd = (up - down) / (2.0 * H);
        let scale = analytic[i].abs().max(fd.abs());
        // both exactly flat: inactive group logits
        if scale < 1e-12 {
            continue;
        }
        let rel = (analytic[i] - fd).abs() / scale;
        if rel > TOL {
            return Err(format!(
                "param {i}: analytic {} vs finite difference {fd} (rel {rel:.2e}, ablation {:?})",
                analytic[i], cfg.head.ablation
            ));
        }
    }
    Ok(())
}
