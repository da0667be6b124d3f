//! Memorization audit of a trained generator.
//!
//! Each generated image g is scored by
//!   score(g) = l2(g, x) / (alpha * mean_{y in S_x} l2(x, y))
//! where x is the nearest training image and S_x its n nearest training
//! neighbors (excluding x itself). Scores near zero mean g sits much closer
//! to x than x's own neighborhood does -- a likely copy. Samples below the
//! threshold tau are flagged.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{from_model_range, LabeledImageDataset};
use crate::diffusion::{sample, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorizationConfig {
    /// Denominator scale; smaller alpha makes the score stricter.
    pub alpha: f64,
    /// Neighborhood size n used for the calibration denominator.
    pub neighbor_count: usize,
    /// Samples scoring below tau are flagged as likely memorized.
    pub tau: f64,
}

impl Default for MemorizationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            neighbor_count: 50,
            tau: 1.0,
        }
    }
}

/// How many times the requested sample count the audit draws.
pub const AUDIT_OVERSAMPLE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub config: MemorizationConfig,
    pub scores: Vec<f64>,
    pub nearest_train_index: Vec<usize>,
    pub nearest_distance: Vec<f64>,
    pub flagged_count: usize,
    pub min_score: f64,
    /// (bin lower edge, count) over [0, max score] in equal-width bins.
    pub histogram: Vec<(f64, usize)>,
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Index and distance of the training image nearest to `probe`.
pub fn nearest_train(probe: &[f32], train: &[f32], pixel: usize) -> (usize, f64) {
    let count = train.len() / pixel;
    let mut best = (0usize, f64::INFINITY);
    for i in 0..count {
        let d = l2_distance(probe, &train[i * pixel..(i + 1) * pixel]);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Mean distance from train image `idx` to its `n` nearest train neighbors
/// (excluding itself).
fn neighborhood_mean(train: &[f32], count: usize, pixel: usize, idx: usize, n: usize) -> f64 {
    let x = &train[idx * pixel..(idx + 1) * pixel];
    let mut dists: Vec<f64> = (0..count)
        .filter(|&j| j != idx)
        .map(|j| l2_distance(x, &train[j * pixel..(j + 1) * pixel]))
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[..n].iter().sum::<f64>() / n as f64
}

/// Score a stack of generated images (flat, `gen_count` images of `pixel`
/// values each, same value range as `train`).
pub fn memorization_scores(
    generated: &[f32],
    gen_count: usize,
    train: &[f32],
    train_count: usize,
    pixel: usize,
    config: &MemorizationConfig,
) -> Result<MemorizationReport> {
    if config.neighbor_count == 0 || config.neighbor_count >= train_count {
        return Err(Error::Argument(format!(
            "neighbor count {} must be in [1, {})",
            config.neighbor_count, train_count
        )));
    }
    if config.alpha <= 0.0 {
        return Err(Error::Argument("alpha must be positive".into()));
    }
    if generated.len() != gen_count * pixel || train.len() != train_count * pixel {
        return Err(Error::Argument("image buffer shape mismatch".into()));
    }
    let nearest: Vec<(usize, f64)> = exec::map_range(gen_count, |i| {
        nearest_train(&generated[i * pixel..(i + 1) * pixel], train, pixel)
    });
    // Denominators depend only on the nearest train image; compute each
    // distinct one once.
    let mut unique: Vec<usize> = nearest.iter().map(|&(i, _)| i).collect();
    unique.sort_unstable();
    unique.dedup();
    let means = exec::map_items(&unique, |&idx| {
        neighborhood_mean(train, train_count, pixel, idx, config.neighbor_count)
    });
    let mean_of = |idx: usize| -> f64 {
        let pos = unique.binary_search(&idx).expect("computed above");
        means[pos]
    };
    let mut scores = Vec::with_capacity(gen_count);
    for &(idx, dist) in &nearest {
        let denom = config.alpha * mean_of(idx);
        if denom <= 0.0 {
            // degenerate training set (duplicate images); a copy of it is
            // maximal memorization
            scores.push(0.0);
        } else {
            scores.push(dist / denom);
        }
    }
    let flagged_count = scores.iter().filter(|&&s| s < config.tau).count();
    let min_score = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(MemorizationReport {
        config: *config,
        histogram: score_histogram(&scores, 20),
        nearest_train_index: nearest.iter().map(|&(i, _)| i).collect(),
        nearest_distance: nearest.iter().map(|&(_, d)| d).collect(),
        flagged_count,
        min_score,
        scores,
    })
}

fn score_histogram(scores: &[f64], bins: usize) -> Vec<(f64, usize)> {
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let mut hist = vec![0usize; bins];
    for &s in scores {
        let b = ((s / width) as usize).min(bins - 1);
        hist[b] += 1;
    }
    hist.into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 * width, c))
        .collect()
}

/// Sample `sample_count * AUDIT_OVERSAMPLE` images from the generator with
/// labels drawn from the training label distribution, score them against the
/// training images, and (optionally) write `audit_report.json` plus a PNG
/// grid of the most suspicious generated/nearest-train pairs.
#[allow(clippy::too_many_arguments)]
pub fn audit_generator(
    model: &dyn NoisePredictor,
    train: &LabeledImageDataset,
    schedule: &NoiseSchedule,
    sampling_steps: usize,
    sample_count: usize,
    config: &MemorizationConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<MemorizationReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let total = sample_count * AUDIT_OVERSAMPLE;
    let labels: Vec<u32> = (0..total)
        .map(|_| train.labels[rng.gen_range(0..train.count)])
        .collect();
    let raw = sample(model, &labels, schedule, sampling_steps, &mut rng)?;
    let generated = from_model_range(&raw);
    let pixel = train.pixels_per_image();
    let report = memorization_scores(
        &generated,
        total,
        &train.images,
        train.count,
        pixel,
        config,
    )?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("audit_report.json"),
            serde_json::to_vec_pretty(&report)?,
        )?;
        write_pair_grid(
            &dir.join("nearest_pairs.png"),
            &generated,
            train,
            &report,
            8,
        )?;
    }
    Ok(report)
}

/// PNG grid of the `rows` lowest-scoring generated images (left column) next
/// to their nearest training images (right column). Greyscale uses channel 0;
/// RGB images are written as-is.
pub fn write_pair_grid(
    path: &Path,
    generated: &[f32],
    train: &LabeledImageDataset,
    report: &MemorizationReport,
    rows: usize,
) -> Result<()> {
    let (h, w, c) = (train.height, train.width, train.channels);
    let pixel = h * w * c;
    let mut order: Vec<usize> = (0..report.scores.len()).collect();
    order.sort_by(|&a, &b| report.scores[a].partial_cmp(&report.scores[b]).unwrap());
    let rows = rows.min(order.len());
    let pad = 2usize;
    let (gw, gh) = (2 * w + 3 * pad, rows * h + (rows + 1) * pad);
    let mut img = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([30, 30, 30]));
    let mut blit = |x0: usize, y0: usize, data: &[f32]| {
        for y in 0..h {
            for x in 0..w {
                let px = if c >= 3 {
                    let base = (y * w + x) * c;
                    [
                        (data[base].clamp(0.0, 1.0) * 255.0) as u8,
                        (data[base + 1].clamp(0.0, 1.0) * 255.0) as u8,
                        (data[base + 2].clamp(0.0, 1.0) * 255.0) as u8,
                    ]
                } else {
                    let v = (data[(y * w + x) * c].clamp(0.0, 1.0) * 255.0) as u8;
                    [v, v, v]
                };
                img.put_pixel((x0 + x) as u32, (y0 + y) as u32, image::Rgb(px));
            }
        }
    };
    for (r, &gi) in order.iter().take(rows).enumerate() {
        let y0 = pad + r * (h + pad);
        blit(pad, y0, &generated[gi * pixel..(gi + 1) * pixel]);
        let ti = report.nearest_train_index[gi];
        blit(w + 2 * pad, y0, train.image(ti));
    }
    img.save(path)
        .map_err(|e| Error::Ingest(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> MemorizationConfig {
        MemorizationConfig {
            alpha: 0.5,
            neighbor_count: n,
            tau: 1.0,
        }
    }

    #[test]
    fn verbatim_copy_scores_zero_and_is_flagged() {
        let train = [0.0f32, 0.3, 0.7, 1.0];
        let gen = [0.3f32];
        let report = memorization_scores(&gen, 1, &train, 4, 1, &cfg(2)).unwrap();
        assert_eq!(report.scores[0], 0.0);
        assert_eq!(report.nearest_train_index[0], 1);
        assert_eq!(report.flagged_count, 1);
        assert_eq!(report.min_score, 0.0);
    }

    #[test]
    fn scalar_worked_example() {
        // train {0, 1, 2, 10}, generated 0.1, n = 2:
        // nearest is 0 at distance 0.1; its 2 nearest neighbors are 1 and 2,
        // mean distance 1.5; score = 0.1 / (0.5 * 1.5) = 0.13333...
        let train = [0.0f32, 1.0, 2.0, 10.0];
        let report = memorization_scores(&[0.1], 1, &train, 4, 1, &cfg(2)).unwrap();
        assert!((report.scores[0] - 0.1 / 0.75).abs() < 1e-6);
    }

    #[test]
    fn matches_double_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let pixel = 4;
        let (tc, gc, n) = (50usize, 30usize, 5usize);
        let train: Vec<f32> = (0..tc * pixel).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gen: Vec<f32> = (0..gc * pixel).map(|_| rng.gen_range(0.0..1.0)).collect();
        let report = memorization_scores(&gen, gc, &train, tc, pixel, &cfg(n)).unwrap();
        for gi in 0..gc {
            let g = &gen[gi * pixel..(gi + 1) * pixel];
            // oracle: plain double loop, no caching
            let mut best = (0usize, f64::INFINITY);
            for ti in 0..tc {
                let d = l2_distance(g, &train[ti * pixel..(ti + 1) * pixel]);
                if d < best.1 {
                    best = (ti, d);
                }
            }
            let x = &train[best.0 * pixel..(best.0 + 1) * pixel];
            let mut dists: Vec<f64> = (0..tc)
                .filter(|&j| j != best.0)
                .map(|j| l2_distance(x, &train[j * pixel..(j + 1) * pixel]))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let denom = 0.5 * dists[..n].iter().sum::<f64>() / n as f64;
            let expected = best.1 / denom;
            assert!(
                (report.scores[gi] - expected).abs() < 1e-9,
                "sample {gi}: {} vs {expected}",
                report.scores[gi]
            );
        }
    }

    #[test]
    fn score_invariant_under_uniform_scaling() {
        use rand::SeedableRng;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let train: Vec<f32> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gen: Vec<f32> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let base = memorization_scores(&gen, 5, &train, 20, 1, &cfg(3)).unwrap();
        let k = 7.5f32;
        let train_k: Vec<f32> = train.iter().map(|v| v * k).collect();
        let gen_k: Vec<f32> = gen.iter().map(|v| v * k).collect();
        let scaled = memorization_scores(&gen_k, 5, &train_k, 20, 1, &cfg(3)).unwrap();
        for (a, b) in base.scores.iter().zip(&scaled.scores) {
            assert!((a - b).abs() < 1e-4 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn neighbor_count_must_fit_training_set() {
        let train = [0.0f32, 1.0, 2.0];
        assert!(memorization_scores(&[0.5], 1, &train, 3, 1, &cfg(3)).is_err());
        assert!(memorization_scores(&[0.5], 1, &train, 3, 1, &cfg(0)).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let train: Vec<f32> = (0..10).map(|i| i as f32).collect();
        let gen = [0.2f32, 3.4, 7.9];
        let report = memorization_scores(&gen, 3, &train, 10, 1, &cfg(4)).unwrap();
        let total: usize = report.histogram.iter().map(|&(_, c)| c).sum();
        assert_eq!(total, 3);
        assert_eq!(report.histogram.len(), 20);
    }

    #[test]
    fn pair_grid_written() {
        let dir = tempfile::tempdir().unwrap();
        let train = LabeledImageDataset::new(
            "custom",
            (0..4 * 16).map(|i| (i % 16) as f32 / 16.0).collect(),
            4,
            4,
            1,
            vec![0, 1, 0, 1],
            2,
        )
        .unwrap();
        let gen: Vec<f32> = train.images[..32].to_vec();
        let report =
            memorization_scores(&gen, 2, &train.images, 4, 16, &cfg(2)).unwrap();
        let path = dir.path().join("pairs.png");
        write_pair_grid(&path, &gen, &train, &report, 2).unwrap();
        let img = image::open(&path).unwrap();
        assert!(img.width() > 0 && img.height() > 0);
    }
}
