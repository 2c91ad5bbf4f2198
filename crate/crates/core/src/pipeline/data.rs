use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{DatasetKind, RunConfig};
use crate::error::{ensure, Result};
use crate::numkit::Tensor;

/// Parameters of [`synth_latents`].
#[derive(Debug, Clone, PartialEq)]
pub enum LatentSpec {
    /// `components` isotropic Gaussians with means evenly spaced on a circle
    /// of `radius`.
    GaussianMixture2d {
        count: usize,
        components: usize,
        radius: f64,
        spread: f64,
    },
    /// `count` points `c·B + noise` with `c ∈ R^dim` and a random
    /// `dim × ambient` basis `B`.
    SubspacePd {
        count: usize,
        ambient: usize,
        dim: usize,
        noise: f64,
    },
}

/// Means of the 2-D mixture.
pub fn mixture_means(components: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..components)
        .map(|k| {
            let a = TAU * k as f64 / components as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn synth_latents(spec: &LatentSpec, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *spec {
        LatentSpec::GaussianMixture2d {
            count,
            components,
            radius,
            spread,
        } => {
            ensure!(count >= 1, "mixture needs at least one point");
            ensure!(components >= 1, "mixture needs at least one component");
            ensure!(radius >= 0.0 && spread >= 0.0, "radius and spread must be non-negative");
            let means = mixture_means(components, radius);
            let mut values = Vec::with_capacity(count * 2);
            for _ in 0..count {
                let m = means[rng.random_range(0..components)];
                values.push((m[0] + spread * normal(&mut rng)) as f32);
                values.push((m[1] + spread * normal(&mut rng)) as f32);
            }
            Tensor::matrix(count, 2, values)
        }
        LatentSpec::SubspacePd {
            count,
            ambient,
            dim,
            noise,
        } => {
            ensure!(count >= 1, "subspace data needs at least one point");
            ensure!(
                dim >= 1 && dim <= ambient,
                "subspace dimension {dim} must be in 1..={ambient}"
            );
            ensure!(noise >= 0.0, "noise must be non-negative");
            let scale = (1.0 / dim as f64).sqrt();
            let basis: Vec<f64> = (0..dim * ambient).map(|_| scale * normal(&mut rng)).collect();
            let mut values = Vec::with_capacity(count * ambient);
            for _ in 0..count {
                let c: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
                for j in 0..ambient {
                    let v: f64 = (0..dim).map(|i| c[i] * basis[i * ambient + j]).sum();
                    values.push((v + noise * normal(&mut rng)) as f32);
                }
            }
            Tensor::matrix(count, ambient, values)
        }
    }
}

/// Procedural `size × size` images in `[0, 1]`: a linear ramp background
/// with one to three axis-aligned rectangles painted over it.
pub fn synth_images(count: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    ensure!(size >= 1, "image size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let lo: f64 = rng.random_range(0.0..0.6);
        let hi: f64 = rng.random_range(lo..=1.0);
        let angle: f64 = rng.random_range(0.0..TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let span = dx.abs() + dy.abs();
        let mut px = vec![0.0f32; size * size];
        let denom = (size.max(2) - 1) as f64;
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 / denom;
                let v = y as f64 / denom;
                let proj = dx * u + dy * v;
                let offset = dx.min(0.0) + dy.min(0.0);
                let t = if span > 0.0 { (proj - offset) / span } else { 0.0 };
                px[y * size + x] = (lo + (hi - lo) * t.clamp(0.0, 1.0)) as f32;
            }
        }
        let rects = rng.random_range(1..=3);
        for _ in 0..rects {
            let x0 = rng.random_range(0..size);
            let y0 = rng.random_range(0..size);
            let x1 = rng.random_range(x0..size) + 1;
            let y1 = rng.random_range(y0..size) + 1;
            let value: f32 = rng.random_range(0.0..=1.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    px[y * size + x] = value;
                }
            }
        }
        images.push(Tensor::matrix(size, size, px)?);
    }
    Ok(images)
}

/// Splits images into `patch × patch` rows: image-major, then raster order
/// over patch positions, then raster order within a patch.
pub fn patchify(images: &[Tensor], patch: usize) -> Result<Tensor> {
    ensure!(!images.is_empty(), "patchify needs at least one image");
    let size = images[0].rows();
    ensure!(
        patch >= 1 && size % patch == 0,
        "image size {size} is not a multiple of patch {patch}"
    );
    let g = size / patch;
    let mut values = Vec::with_capacity(images.len() * size * size);
    for img in images {
        ensure!(img.shape() == [size, size], "images must all be {size}×{size}");
        for py in 0..g {
            for px in 0..g {
                for y in 0..patch {
                    let start = (py * patch + y) * size + px * patch;
                    values.extend_from_slice(&img.values()[start..start + patch]);
                }
            }
        }
    }
    Tensor::matrix(images.len() * g * g, patch * patch, values)
}

/// Inverse of [`patchify`].
pub fn unpatchify(rows: &Tensor, size: usize, patch: usize) -> Result<Vec<Tensor>> {
    ensure!(
        patch >= 1 && size.is_multiple_of(patch),
        "image size {size} is not a multiple of patch {patch}"
    );
    let g = size / patch;
    ensure!(
        rows.is_matrix() && rows.cols() == patch * patch && rows.rows() % (g * g) == 0,
        "rows of shape {:?} do not form {size}×{size} images of {patch}×{patch} patches",
        rows.shape()
    );
    let count = rows.rows() / (g * g);
    (0..count)
        .map(|i| {
            let mut px = vec![0.0f32; size * size];
            for py in 0..g {
                for pxi in 0..g {
                    let r = rows.row(i * g * g + py * g + pxi);
                    for y in 0..patch {
                        let start = (py * patch + y) * size + pxi * patch;
                        px[start..start + patch].copy_from_slice(&r[y * patch..(y + 1) * patch]);
                    }
                }
            }
            Tensor::matrix(size, size, px)
        })
        .collect()
}

/// Which half of the data a dataset is drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Rows fed to the tokenizer, grouped into items (images or points).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Tensor,
    pub items: usize,
    /// `grid_side²` rows per item.
    pub grid_side: usize,
    /// Image side length when items are images.
    pub image_size: Option<usize>,
    pub patch: usize,
}

impl Dataset {
    pub fn rows_per_item(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Rows of the listed items, item-major.
    pub fn item_rows(&self, items: &[usize]) -> Result<Tensor> {
        let per = self.rows_per_item();
        let idx: Vec<usize> = items.iter().flat_map(|&i| i * per..(i + 1) * per).collect();
        self.rows.select_rows(&idx)
    }
}

const EVAL_SEED_SALT: u64 = 0x5eed_e7a1_0000_0001;

pub fn build_dataset(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let d = &cfg.data;
    let (count, seed) = match split {
        Split::Train => (d.count, cfg.seed),
        Split::Eval => (d.eval_count, cfg.seed ^ EVAL_SEED_SALT),
    };
    match d.kind {
        DatasetKind::Images => {
            let images = synth_images(count, d.image_size, seed)?;
            Ok(Dataset {
                rows: patchify(&images, d.patch)?,
                items: count,
                grid_side: d.image_size / d.patch,
                image_size: Some(d.image_size),
                patch: d.patch,
            })
        }
        DatasetKind::Mixture2d => Ok(Dataset {
            rows: synth_latents(
                &LatentSpec::GaussianMixture2d {
                    count,
                    components: d.components,
                    radius: d.radius,
                    spread: d.spread,
                },
                seed,
            )?,
            items: count,
            grid_side: 1,
            image_size: None,
            patch: 1,
        }),
        DatasetKind::Subspace => {
            // The basis must match across splits, so both splits draw one
            // stream and the eval split takes the tail.
            let all = synth_latents(
                &LatentSpec::SubspacePd {
                    count: d.count + d.eval_count,
                    ambient: d.ambient_dim,
                    dim: d.subspace_dim,
                    noise: d.noise,
                },
                cfg.seed,
            )?;
            let rows = match split {
                Split::Train => all.slice_rows(0, d.count)?,
                Split::Eval => all.slice_rows(d.count, d.count + d.eval_count)?,
            };
            Ok(Dataset {
                rows,
                items: count,
                grid_side: 1,
                image_size: None,
                patch: 1,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_without_spread_is_constant() {
        let spec = LatentSpec::GaussianMixture2d {
            count: 50,
            components: 1,
            radius: 1.5,
            spread: 0.0,
        };
        let x = synth_latents(&spec, 3).unwrap();
        for i in 0..50 {
            assert_eq!(x.row(i), &[1.5, 0.0]);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = LatentSpec::SubspacePd {
            count: 20,
            ambient: 6,
            dim: 2,
            noise: 0.1,
        };
        assert_eq!(synth_latents(&spec, 5).unwrap(), synth_latents(&spec, 5).unwrap());
        assert_ne!(synth_latents(&spec, 5).unwrap(), synth_latents(&spec, 6).unwrap());
        assert_eq!(synth_images(3, 8, 1).unwrap(), synth_images(3, 8, 1).unwrap());
    }

    #[test]
    fn invalid_params() {
        let bad = LatentSpec::GaussianMixture2d {
            count: 5,
            components: 0,
            radius: 1.0,
            spread: 0.1,
        };
        assert!(synth_latents(&bad, 1).is_err());
        let bad = LatentSpec::SubspacePd {
            count: 5,
            ambient: 3,
            dim: 4,
            noise: 0.0,
        };
        assert!(synth_latents(&bad, 1).is_err());
    }

    #[test]
    fn subspace_without_noise_has_rank_dim() {
        let spec = LatentSpec::SubspacePd {
            count: 40,
            ambient: 5,
            dim: 2,
            noise: 0.0,
        };
        let x = synth_latents(&spec, 2).unwrap();
        // Any three rows are linearly dependent: Gram determinant ≈ 0.
        let g = |a: usize, b: usize| {
            x.row(a)
                .iter()
                .zip(x.row(b))
                .map(|(p, q)| (*p as f64) * (*q as f64))
                .sum::<f64>()
        };
        let m = [
            [g(0, 0), g(0, 1), g(0, 2)],
            [g(1, 0), g(1, 1), g(1, 2)],
            [g(2, 0), g(2, 1), g(2, 2)],
        ];
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        assert!(det.abs() < 1e-3, "{det}");
    }

    /// Lloyd's algorithm from farthest-point seeds.
    fn lloyd_oracle(x: &Tensor, k: usize) -> Vec<[f64; 2]> {
        let mut centers: Vec<[f64; 2]> = vec![[x.row(0)[0] as f64, x.row(0)[1] as f64]];
        while centers.len() < k {
            let far = (0..x.rows())
                .max_by(|&a, &b| {
                    let da = centers
                        .iter()
                        .map(|c| (x.row(a)[0] as f64 - c[0]).powi(2) + (x.row(a)[1] as f64 - c[1]).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    let db = centers
                        .iter()
                        .map(|c| (x.row(b)[0] as f64 - c[0]).powi(2) + (x.row(b)[1] as f64 - c[1]).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    da.total_cmp(&db)
                })
                .unwrap();
            centers.push([x.row(far)[0] as f64, x.row(far)[1] as f64]);
        }
        for _ in 0..20 {
            let mut sums = vec![[0.0f64; 3]; k];
            for i in 0..x.rows() {
                let p = [x.row(i)[0] as f64, x.row(i)[1] as f64];
                let c = (0..k)
                    .min_by(|&a, &b| {
                        let da = (p[0] - centers[a][0]).powi(2) + (p[1] - centers[a][1]).powi(2);
                        let db = (p[0] - centers[b][0]).powi(2) + (p[1] - centers[b][1]).powi(2);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                sums[c][0] += p[0];
                sums[c][1] += p[1];
                sums[c][2] += 1.0;
            }
            for c in 0..k {
                if sums[c][2] > 0.0 {
                    centers[c] = [sums[c][0] / sums[c][2], sums[c][1] / sums[c][2]];
                }
            }
        }
        centers
    }

    #[test]
    fn separated_mixture_recovered_by_lloyd() {
        let spec = LatentSpec::GaussianMixture2d {
            count: 2000,
            components: 4,
            radius: 5.0,
            spread: 0.2,
        };
        let x = synth_latents(&spec, 9).unwrap();
        let centers = lloyd_oracle(&x, 4);
        for m in mixture_means(4, 5.0) {
            let best = centers
                .iter()
                .map(|c| ((c[0] - m[0]).powi(2) + (c[1] - m[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "mean {m:?} missed by {best}");
        }
    }

    #[test]
    fn images_in_range_and_empty() {
        assert!(synth_images(0, 16, 1).unwrap().is_empty());
        for img in synth_images(20, 16, 2).unwrap() {
            assert!(img.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn patch_round_trip() {
        let imgs = synth_images(3, 8, 4).unwrap();
        let rows = patchify(&imgs, 4).unwrap();
        assert_eq!(rows.shape(), &[12, 16]);
        assert_eq!(rows.row(1)[0], imgs[0].values()[4]);
        assert_eq!(unpatchify(&rows, 8, 4).unwrap(), imgs);
        assert!(patchify(&imgs, 3).is_err());
    }

    #[test]
    fn splits_differ() {
        let mut cfg = RunConfig::default();
        cfg.data.kind = DatasetKind::Mixture2d;
        let a = build_dataset(&cfg, Split::Train).unwrap();
        let b = build_dataset(&cfg, Split::Eval).unwrap();
        assert_ne!(a.rows.row(0), b.rows.row(0));
        cfg.data.kind = DatasetKind::Images;
        cfg.data.count = 4;
        let imgs = build_dataset(&cfg, Split::Train).unwrap();
        assert_eq!(imgs.rows.rows(), 4 * 16);
        assert_eq!(imgs.item_rows(&[1]).unwrap().rows(), 16);
    }
}
