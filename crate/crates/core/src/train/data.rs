//! Seeded synthetic dense-prediction task.
//!
//! Images are smooth fields: each channel is a clipped sum of random 2-D
//! sinusoids. The label of every 4×4 cell is the argmax over `C` fixed random
//! scores of the cell's mean colour, each score being a linear probe plus a
//! sinusoidal term of another random projection.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;

pub const CELL: usize = 4;
pub const RULE_ID: &str = "sinusoid-probe-v2";

/// Model inputs are `(pixel - PIXEL_MEAN) / PIXEL_STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

pub fn normalize_pixel(v: f64) -> f64 {
    (v - PIXEL_MEAN) / PIXEL_STD
}

const WAVES: usize = 4;
const NONLINEAR_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    /// `[n, img, img, 3]`, values in `[0, 1]`.
    pub images: Vec<f64>,
    /// `[n, img/4, img/4]`, values in `[0, classes)`.
    pub labels: Vec<usize>,
    pub n: usize,
    pub img: usize,
    pub classes: usize,
    pub seed: u64,
    pub rule: String,
}

/// A class's score of a mean colour `mu`.
#[derive(Debug, Clone)]
struct Probe {
    w: [f64; 3],
    b: f64,
    u: [f64; 3],
    phase: f64,
}

impl Probe {
    fn score(&self, mu: &[f64; 3]) -> f64 {
        let dot = |a: &[f64; 3]| a.iter().zip(mu).map(|(x, y)| x * y).sum::<f64>();
        dot(&self.w) + self.b + NONLINEAR_GAIN * (std::f64::consts::TAU * dot(&self.u) + self.phase).sin()
    }
}

fn probes(seed: u64, classes: usize) -> Vec<Probe> {
    let mut rng = init::rng_stream(seed, 101);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let draw3 = |rng: &mut init::InitRng| [0; 3].map(|_: i32| normal.sample(rng));
    (0..classes)
        .map(|_| {
            let w = draw3(&mut rng);
            let u = draw3(&mut rng);
            Probe {
                // centre the linear part on the mid-grey colour so no class dominates
                b: -0.5 * w.iter().sum::<f64>(),
                w,
                u,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

impl SyntheticDataset {
    pub fn cells_per_side(&self) -> usize {
        self.img / CELL
    }

    pub fn cells_per_image(&self) -> usize {
        self.cells_per_side().pow(2)
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.img * self.img * 3;
        &self.images[i * len..(i + 1) * len]
    }

    pub fn label_map(&self, i: usize) -> &[usize] {
        let len = self.cells_per_image();
        &self.labels[i * len..(i + 1) * len]
    }

    /// Relabels every cell from the images with the rule for `seed`.
    pub fn derive_labels(images: &[f64], n: usize, img: usize, classes: usize, seed: u64) -> Vec<usize> {
        let probes = probes(seed, classes);
        let g = img / CELL;
        let mut labels = Vec::with_capacity(n * g * g);
        for i in 0..n {
            let im = &images[i * img * img * 3..(i + 1) * img * img * 3];
            for cy in 0..g {
                for cx in 0..g {
                    let mut mu = [0.0; 3];
                    for y in cy * CELL..(cy + 1) * CELL {
                        for x in cx * CELL..(cx + 1) * CELL {
                            for (c, m) in mu.iter_mut().enumerate() {
                                *m += im[(y * img + x) * 3 + c];
                            }
                        }
                    }
                    mu.iter_mut().for_each(|m| *m /= (CELL * CELL) as f64);
                    let best = probes
                        .iter()
                        .map(|p| p.score(&mu))
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (k, s)| if s > acc.1 { (k, s) } else { acc })
                        .0;
                    labels.push(best);
                }
            }
        }
        labels
    }

    /// Per-class cell counts.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

pub fn gen_synthetic(seed: u64, n: usize, img: usize, classes: usize) -> Result<SyntheticDataset> {
    if n == 0 || img == 0 || img % CELL != 0 {
        return Err(Error::Config(format!(
            "synthetic data needs n ≥ 1 and an image side divisible by {CELL}, got n={n}, img={img}"
        )));
    }
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let mut rng = init::rng_stream(seed, 100);
    let tau = std::f64::consts::TAU;
    let mut images = Vec::with_capacity(n * img * img * 3);
    for _ in 0..n {
        // per channel: (amplitude, fx, fy, phase) for each wave
        let waves: Vec<[(f64, f64, f64, f64); WAVES]> = (0..3)
            .map(|_| {
                [(); WAVES].map(|_| {
                    (
                        rng.random_range(0.1..0.3),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(0.0..tau),
                    )
                })
            })
            .collect();
        for y in 0..img {
            for x in 0..img {
                let (u, v) = (x as f64 / img as f64, y as f64 / img as f64);
                for w in &waves {
                    let s: f64 = w.iter().map(|&(a, fx, fy, ph)| a * (tau * (fx * u + fy * v) + ph).sin()).sum();
                    images.push((0.5 + s).clamp(0.0, 1.0));
                }
            }
        }
    }
    let labels = SyntheticDataset::derive_labels(&images, n, img, classes, seed);
    Ok(SyntheticDataset {
        images,
        labels,
        n,
        img,
        classes,
        seed,
        rule: RULE_ID.to_string(),
    })
}
