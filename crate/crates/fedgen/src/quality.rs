//! Fourier magnitude filtering of synthetic samples.
//!
//! Each client publishes the mean 2D-DFT magnitude spectrum of its real
//! images (optionally through a DP bounded mean). The server scores every
//! generated sample by the l2 distance between its own magnitude spectrum and
//! the profile of the client whose model produced it, then drops the worst
//! fraction gamma per client.

use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::privacy::dp_bounded_mean;

/// Mean magnitude spectrum of one client's real images. Layout matches the
/// dataset images: H x W x C, row major, channel innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeProfile {
    pub client_id: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mean_magnitude: Vec<f32>,
    /// Budget spent publishing the profile, when it went through DP.
    pub dp_epsilon_spent: Option<f64>,
}

/// |2D-DFT| of one HWC image, per channel, same layout as the input.
pub fn magnitude_spectrum(image: &[f32], height: usize, width: usize, channels: usize) -> Vec<f32> {
    assert_eq!(image.len(), height * width * channels);
    let mut planner = FftPlanner::<f64>::new();
    let fft_row = planner.plan_fft_forward(width);
    let fft_col = planner.plan_fft_forward(height);
    let mut out = vec![0.0f32; image.len()];
    let mut plane = vec![Complex::new(0.0, 0.0); height * width];
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for ch in 0..channels {
        for y in 0..height {
            for x in 0..width {
                plane[y * width + x] = Complex::new(image[(y * width + x) * channels + ch] as f64, 0.0);
            }
        }
        for y in 0..height {
            fft_row.process(&mut plane[y * width..(y + 1) * width]);
        }
        for x in 0..width {
            for y in 0..height {
                col[y] = plane[y * width + x];
            }
            fft_col.process(&mut col);
            for y in 0..height {
                plane[y * width + x] = col[y];
            }
        }
        for y in 0..height {
            for x in 0..width {
                out[(y * width + x) * channels + ch] = plane[y * width + x].norm() as f32;
            }
        }
    }
    out
}

/// Mean magnitude spectrum over a stack of HWC images (flat, `count` images).
pub fn mean_magnitude(
    images: &[f32],
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Vec<f32>> {
    let pixel = height * width * channels;
    if count == 0 || images.len() != count * pixel {
        return Err(Error::Argument(format!(
            "magnitude mean over {count} images with buffer length {}",
            images.len()
        )));
    }
    let spectra = exec::map_range(count, |i| {
        magnitude_spectrum(&images[i * pixel..(i + 1) * pixel], height, width, channels)
    });
    let mut mean = vec![0.0f64; pixel];
    for s in &spectra {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v as f64;
        }
    }
    Ok(mean.into_iter().map(|m| (m / count as f64) as f32).collect())
}

/// Build a client's profile. With `dp_epsilon` set, every spectrum bin is
/// released through a DP bounded mean over the per-image magnitudes; the
/// budget is split evenly across bins. Magnitudes of [0, 1] pixels are bounded
/// by H*W, which fixes the clamp range.
pub fn client_profile<R: Rng>(
    images: &[f32],
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    client_id: usize,
    dp_epsilon: Option<f64>,
    rng: &mut R,
) -> Result<MagnitudeProfile> {
    let pixel = height * width * channels;
    let mean_magnitude = match dp_epsilon {
        None => mean_magnitude(images, count, height, width, channels)?,
        Some(eps) => {
            if eps <= 0.0 {
                return Err(Error::Argument("profile epsilon must be positive".into()));
            }
            if count == 0 || images.len() != count * pixel {
                return Err(Error::Argument("magnitude mean over empty image set".into()));
            }
            let spectra: Vec<Vec<f32>> = (0..count)
                .map(|i| {
                    magnitude_spectrum(&images[i * pixel..(i + 1) * pixel], height, width, channels)
                })
                .collect();
            let eps_bin = eps / pixel as f64;
            let upper = (height * width) as f64;
            let mut released = Vec::with_capacity(pixel);
            for bin in 0..pixel {
                let values: Vec<f64> = spectra.iter().map(|s| s[bin] as f64).collect();
                let v = dp_bounded_mean(&values, 0.0, upper, eps_bin, rng)?;
                released.push(v.max(0.0) as f32);
            }
            released
        }
    };
    Ok(MagnitudeProfile {
        client_id,
        height,
        width,
        channels,
        mean_magnitude,
        dp_epsilon_spent: dp_epsilon,
    })
}

/// l2 distance between the sample's magnitude spectrum and the profile.
pub fn sample_score(sample: &[f32], profile: &MagnitudeProfile) -> Result<f64> {
    if sample.len() != profile.mean_magnitude.len() {
        return Err(Error::Argument(format!(
            "sample has {} values, profile {}",
            sample.len(),
            profile.mean_magnitude.len()
        )));
    }
    let spec = magnitude_spectrum(sample, profile.height, profile.width, profile.channels);
    Ok(spec
        .iter()
        .zip(&profile.mean_magnitude)
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// One scored synthetic sample in the filter report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmfRecord {
    pub sample_index: usize,
    pub client_id: usize,
    pub score: f64,
    pub removed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmfReport {
    pub gamma: f64,
    pub records: Vec<FmfRecord>,
}

impl FmfReport {
    pub fn kept_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| !r.removed)
            .map(|r| r.sample_index)
            .collect()
    }

    pub fn removed_count(&self) -> usize {
        self.records.iter().filter(|r| r.removed).count()
    }
}

/// Score samples (flat HWC stack, pixels in [0, 1]) against their origin
/// clients' profiles and remove floor(gamma * count_c) highest-scoring
/// samples per client. Ties are broken by keeping the earlier index.
pub fn fmf_filter(
    samples: &[f32],
    sample_clients: &[usize],
    profiles: &[MagnitudeProfile],
    gamma: f64,
) -> Result<FmfReport> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Argument(format!("gamma {gamma} outside [0, 1)")));
    }
    let Some(first) = profiles.first() else {
        return Err(Error::Argument("no magnitude profiles".into()));
    };
    let pixel = first.height * first.width * first.channels;
    let count = sample_clients.len();
    if samples.len() != count * pixel {
        return Err(Error::Argument(format!(
            "sample buffer length {} for {count} samples of {pixel} values",
            samples.len()
        )));
    }
    let by_id = |id: usize| -> Result<&MagnitudeProfile> {
        profiles
            .iter()
            .find(|p| p.client_id == id)
            .ok_or_else(|| Error::Argument(format!("no profile for client {id}")))
    };
    for &id in sample_clients {
        by_id(id)?;
    }
    let scores = exec::map_range(count, |i| {
        let profile = by_id(sample_clients[i]).expect("checked above");
        sample_score(&samples[i * pixel..(i + 1) * pixel], profile).expect("lengths checked")
    });

    let mut removed = vec![false; count];
    for profile in profiles {
        let mut members: Vec<usize> = (0..count)
            .filter(|&i| sample_clients[i] == profile.client_id)
            .collect();
        let drop = ((gamma * members.len() as f64).floor()) as usize;
        // highest score first; equal scores keep the earlier index
        members.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &i in members.iter().take(drop) {
            removed[i] = true;
        }
    }
    Ok(FmfReport {
        gamma,
        records: (0..count)
            .map(|i| FmfRecord {
                sample_index: i,
                client_id: sample_clients[i],
                score: scores[i],
                removed: removed[i],
            })
            .collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileMeta {
    height: usize,
    width: usize,
    channels: usize,
    clients: Vec<ProfileClientMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileClientMeta {
    client_id: usize,
    dp_epsilon_spent: Option<f64>,
}

/// Write profiles as `magnitude.bin` (concatenated little-endian f32 spectra
/// in listed order) plus `magnitude_meta.json` in `dir`.
pub fn save_profiles(dir: &Path, profiles: &[MagnitudeProfile]) -> Result<()> {
    let Some(first) = profiles.first() else {
        return Err(Error::Argument("no profiles to save".into()));
    };
    std::fs::create_dir_all(dir)?;
    let mut bin = Vec::new();
    for p in profiles {
        if (p.height, p.width, p.channels) != (first.height, first.width, first.channels) {
            return Err(Error::Validation("profiles disagree on image shape".into()));
        }
        for v in &p.mean_magnitude {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = ProfileMeta {
        height: first.height,
        width: first.width,
        channels: first.channels,
        clients: profiles
            .iter()
            .map(|p| ProfileClientMeta {
                client_id: p.client_id,
                dp_epsilon_spent: p.dp_epsilon_spent,
            })
            .collect(),
    };
    std::fs::write(dir.join("magnitude.bin"), bin)?;
    std::fs::write(dir.join("magnitude_meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_profiles(dir: &Path) -> Result<Vec<MagnitudeProfile>> {
    let meta: ProfileMeta =
        serde_json::from_slice(&std::fs::read(dir.join("magnitude_meta.json"))?)?;
    let bin = std::fs::read(dir.join("magnitude.bin"))?;
    let pixel = meta.height * meta.width * meta.channels;
    if bin.len() != meta.clients.len() * pixel * 4 {
        return Err(Error::Validation(format!(
            "magnitude.bin has {} bytes, expected {}",
            bin.len(),
            meta.clients.len() * pixel * 4
        )));
    }
    Ok(meta
        .clients
        .iter()
        .enumerate()
        .map(|(i, c)| MagnitudeProfile {
            client_id: c.client_id,
            height: meta.height,
            width: meta.width,
            channels: meta.channels,
            mean_magnitude: bin[i * pixel * 4..(i + 1) * pixel * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            dp_epsilon_spent: c.dp_epsilon_spent,
        })
        .collect())
}

/// Write the per-sample filter report CSV: sample_index, client_id, score, removed.
pub fn write_fmf_report(path: &Path, report: &FmfReport) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Ingest(e.to_string()))?;
    writer
        .write_record(["sample_index", "client_id", "score", "removed"])
        .map_err(|e| Error::Ingest(e.to_string()))?;
    for r in &report.records {
        writer
            .write_record([
                r.sample_index.to_string(),
                r.client_id.to_string(),
                format!("{:.6}", r.score),
                r.removed.to_string(),
            ])
            .map_err(|e| Error::Ingest(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// O(N^4) direct DFT used as an oracle.
    fn naive_magnitude(image: &[f32], h: usize, w: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for y in 0..h {
                    for x in 0..w {
                        let angle = -2.0 * std::f64::consts::PI
                            * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                        re += image[y * w + x] as f64 * angle.cos();
                        im += image[y * w + x] as f64 * angle.sin();
                    }
                }
                out[u * w + v] = (re * re + im * im).sqrt() as f32;
            }
        }
        out
    }

    #[test]
    fn fft_matches_naive_dft_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (h, w) = (5, 6);
        let image: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fast = magnitude_spectrum(&image, h, w, 1);
        let slow = naive_magnitude(&image, h, w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn dc_bin_is_pixel_sum() {
        let image = [0.1f32, 0.2, 0.3, 0.4];
        let spec = magnitude_spectrum(&image, 2, 2, 1);
        assert!((spec[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn magnitude_invariant_to_circular_shift() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (h, w) = (8, 8);
        let image: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut shifted = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                shifted[((y + 3) % h) * w + (x + 5) % w] = image[y * w + x];
            }
        }
        let a = magnitude_spectrum(&image, h, w, 1);
        let b = magnitude_spectrum(&shifted, h, w, 1);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn channels_are_independent() {
        // A 2-channel image's spectrum equals the per-channel spectra interleaved.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let (h, w) = (4, 4);
        let c0: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let c1: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut mixed = Vec::new();
        for i in 0..h * w {
            mixed.push(c0[i]);
            mixed.push(c1[i]);
        }
        let spec = magnitude_spectrum(&mixed, h, w, 2);
        let s0 = magnitude_spectrum(&c0, h, w, 1);
        let s1 = magnitude_spectrum(&c1, h, w, 1);
        for i in 0..h * w {
            assert!((spec[2 * i] - s0[i]).abs() < 1e-5);
            assert!((spec[2 * i + 1] - s1[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn mean_magnitude_averages() {
        let a = [1.0f32, 0.0, 0.0, 0.0];
        let b = [0.0f32, 1.0, 0.0, 0.0];
        let mut stack = a.to_vec();
        stack.extend_from_slice(&b);
        let mean = mean_magnitude(&stack, 2, 2, 2, 1).unwrap();
        let sa = magnitude_spectrum(&a, 2, 2, 1);
        let sb = magnitude_spectrum(&b, 2, 2, 1);
        for i in 0..4 {
            assert!((mean[i] - 0.5 * (sa[i] + sb[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn dp_profile_converges_to_exact_at_huge_epsilon() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let images: Vec<f32> = (0..3 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let exact = client_profile(&images, 3, 4, 4, 1, 0, None, &mut rng).unwrap();
        let noisy = client_profile(&images, 3, 4, 4, 1, 0, Some(1e12), &mut rng).unwrap();
        assert_eq!(noisy.dp_epsilon_spent, Some(1e12));
        for (a, b) in exact.mean_magnitude.iter().zip(&noisy.mean_magnitude) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    fn flat_sample(value: f32) -> Vec<f32> {
        vec![value; 16]
    }

    fn profiles_for(clients: &[usize]) -> Vec<MagnitudeProfile> {
        clients
            .iter()
            .map(|&c| MagnitudeProfile {
                client_id: c,
                height: 4,
                width: 4,
                channels: 1,
                mean_magnitude: magnitude_spectrum(&flat_sample(0.5), 4, 4, 1),
                dp_epsilon_spent: None,
            })
            .collect()
    }

    #[test]
    fn gamma_zero_keeps_everything() {
        let samples: Vec<f32> = (0..5).flat_map(|i| flat_sample(0.1 * i as f32)).collect();
        let report = fmf_filter(&samples, &[0; 5], &profiles_for(&[0]), 0.0).unwrap();
        assert_eq!(report.removed_count(), 0);
        assert_eq!(report.kept_indices(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn filter_matches_sort_oracle() {
        // One client, gamma 0.4 over 5 samples -> drop floor(2.0) = 2 worst.
        let samples: Vec<f32> = [0.5f32, 0.45, 0.9, 0.55, 0.1]
            .iter()
            .flat_map(|&v| flat_sample(v))
            .collect();
        let profiles = profiles_for(&[0]);
        let report = fmf_filter(&samples, &[0; 5], &profiles, 0.4).unwrap();
        // independent oracle: sort scored pairs descending, drop first 2
        let mut scored: Vec<(usize, f64)> = (0..5)
            .map(|i| {
                (
                    i,
                    sample_score(&samples[i * 16..(i + 1) * 16], &profiles[0]).unwrap(),
                )
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let expect_removed: Vec<usize> = scored[..2].iter().map(|&(i, _)| i).collect();
        for r in &report.records {
            assert_eq!(r.removed, expect_removed.contains(&r.sample_index));
        }
        assert_eq!(report.removed_count(), 2);
    }

    #[test]
    fn per_client_quotas_and_ties() {
        // Client 0 has 3 identical samples, client 1 has 2. gamma = 0.34:
        // drop floor(1.02)=1 from client 0 (tie -> earliest index 0), and
        // floor(0.68)=0 from client 1.
        let samples: Vec<f32> = (0..5).flat_map(|_| flat_sample(0.9)).collect();
        let clients = [0, 0, 0, 1, 1];
        let report = fmf_filter(&samples, &clients, &profiles_for(&[0, 1]), 0.34).unwrap();
        let removed: Vec<usize> = report
            .records
            .iter()
            .filter(|r| r.removed)
            .map(|r| r.sample_index)
            .collect();
        assert_eq!(removed, vec![0]);
    }

    #[test]
    fn missing_profile_rejected() {
        let samples = flat_sample(0.5);
        assert!(fmf_filter(&samples, &[7], &profiles_for(&[0]), 0.05).is_err());
    }

    #[test]
    fn profiles_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let images: Vec<f32> = (0..2 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p0 = client_profile(&images, 2, 4, 4, 1, 0, None, &mut rng).unwrap();
        let p1 = client_profile(&images, 2, 4, 4, 1, 3, Some(2.0), &mut rng).unwrap();
        save_profiles(dir.path(), &[p0.clone(), p1.clone()]).unwrap();
        let back = load_profiles(dir.path()).unwrap();
        assert_eq!(back, vec![p0, p1]);
    }

    #[test]
    fn report_csv_written() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f32> = (0..3).flat_map(|i| flat_sample(0.2 * i as f32)).collect();
        let report = fmf_filter(&samples, &[0; 3], &profiles_for(&[0]), 0.34).unwrap();
        let path = dir.path().join("fmf_report.csv");
        write_fmf_report(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_index,client_id,score,removed"));
        assert_eq!(text.lines().count(), 4);
    }
}
