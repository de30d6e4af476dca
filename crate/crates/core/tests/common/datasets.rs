//! Random reduced datasets covering every optional channel.

use drupi_core::data::{Provenance, ReducedDataset};
use drupi_core::privileged::{Aggregation, AttentionKind, AttentionLabels, FeatureLabelSet};
use drupi_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Any finite `f32`, subnormals and signed zeros included.
fn finite(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    }
}

fn tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| finite(rng)).collect()).unwrap()
}

pub fn random_reduced(rng: &mut ChaCha8Rng) -> ReducedDataset {
    let classes = rng.random_range(2..6);
    let m = classes * rng.random_range(1..4);
    let (ch, h, w) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
    let mut labels: Vec<usize> = (0..m).map(|i| i % classes).collect();
    labels.rotate_left(rng.random_range(0..m));
    let soft_labels = rng.random_bool(0.5).then(|| {
        let mut d = Vec::with_capacity(m * classes);
        for _ in 0..m {
            let row: Vec<f32> = (0..classes).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f32 = row.iter().sum();
            d.extend(row.iter().map(|v| v / s));
        }
        Tensor::new(vec![m, classes], d).unwrap()
    });
    let features = rng.random_bool(0.6).then(|| {
        let mut shape = vec![m, rng.random_range(1..4)];
        if rng.random_bool(0.5) {
            shape.push(rng.random_range(1..9));
        } else {
            shape.extend([rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)]);
        }
        let mode = if rng.random_bool(0.5) { Aggregation::Average } else { Aggregation::RandomPick };
        FeatureLabelSet { labels: tensor(shape, rng), mode }
    });
    let attention = rng.random_bool(0.4).then(|| {
        let (kind, shape) = if rng.random_bool(0.5) {
            (AttentionKind::Spatial, vec![m, 1, h, w])
        } else {
            (AttentionKind::Channel, vec![m, rng.random_range(1..6), 1, 1])
        };
        AttentionLabels { kind, labels: tensor(shape, rng) }
    });
    ReducedDataset {
        images: tensor(vec![m, ch, h, w], rng),
        labels,
        classes,
        soft_labels,
        features,
        attention,
        provenance: Provenance {
            backend: ["dc", "dm", "herding"][rng.random_range(0..3)].into(),
            config_hash: format!("{:016x}", rng.random::<u64>()),
            seed: rng.random(),
        },
    }
}

pub fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Field-by-field bit equality (NaN-free, so `-0.0` vs `0.0` is the only
/// case where `==` and bit equality differ).
pub fn bit_identical(a: &ReducedDataset, b: &ReducedDataset) -> bool {
    let opt = |x: Option<&Tensor>, y: Option<&Tensor>| match (x, y) {
        (None, None) => true,
        (Some(x), Some(y)) => x.shape() == y.shape() && bits(x) == bits(y),
        _ => false,
    };
    a.images.shape() == b.images.shape()
        && bits(&a.images) == bits(&b.images)
        && a.labels == b.labels
        && a.classes == b.classes
        && opt(a.soft_labels.as_ref(), b.soft_labels.as_ref())
        && opt(a.features.as_ref().map(|f| &f.labels), b.features.as_ref().map(|f| &f.labels))
        && a.features.as_ref().map(|f| f.mode) == b.features.as_ref().map(|f| f.mode)
        && opt(a.attention.as_ref().map(|x| &x.labels), b.attention.as_ref().map(|x| &x.labels))
        && a.attention.as_ref().map(|x| x.kind) == b.attention.as_ref().map(|x| x.kind)
        && a.provenance == b.provenance
}
