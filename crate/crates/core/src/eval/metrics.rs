use crate::data::{Image, Mask};
use crate::error::{Error, Result};

/// Rank-based area under the ROC curve; tied scores share their average rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auroc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean pairwise distance between feature vectors, each distance divided by
/// `√dim` so the value does not grow with feature size.
pub fn diversity_proxy(features: &[Vec<f64>]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::Contract(
            "diversity needs at least two samples".into(),
        ));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::Contract(
            "feature vectors must share a nonzero length".into(),
        ));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let d: f64 = features[i]
                .iter()
                .zip(&features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += (d / dim as f64).sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Share of the absolute pixel change `|generated − baseline|` that falls
/// inside the mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    pub ratio: f64,
    /// True when the images are identical; the ratio is then 0 by convention.
    pub unchanged: bool,
}

pub fn localization_ratio(
    generated: &Image,
    baseline: &Image,
    mask: &Mask,
) -> Result<Localization> {
    let dims = [generated.height(), generated.width()];
    if dims != [baseline.height(), baseline.width()] || dims != [mask.height(), mask.width()] {
        return Err(Error::dim(
            "localization_ratio",
            &dims,
            &[mask.height(), mask.width()],
        ));
    }
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for (k, (a, b)) in generated
        .data()
        .chunks(3)
        .zip(baseline.data().chunks(3))
        .enumerate()
    {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum();
        total += d;
        if mask.data()[k] {
            inside += d;
        }
    }
    if total == 0.0 {
        return Ok(Localization {
            ratio: 0.0,
            unchanged: true,
        });
    }
    Ok(Localization {
        ratio: inside / total,
        unchanged: false,
    })
}
