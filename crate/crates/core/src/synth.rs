//! Parameterized stationary texture processes for self-contained
//! experiments. Images are quantized to 8 bits so in-memory and on-disk
//! copies agree exactly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::{Manifest, ManifestEntry};
use crate::raster::{save_pgm, GrayImage};

const MID_GRAY: f64 = 128.0;

/// One texture class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TextureSpec {
    /// Oriented grating plus white noise.
    Sinusoid {
        angle_deg: f64,
        period: f64,
        amplitude: f64,
        noise: f64,
    },
    /// Gaussian-smoothed white noise; `correlation` is the blur sigma.
    SmoothNoise { correlation: f64, amplitude: f64 },
    /// Checkerboard with random phase plus white noise.
    Checkerboard { cell: usize, contrast: f64, jitter: f64 },
    Constant { value: f64 },
}

impl TextureSpec {
    pub fn family(&self) -> &'static str {
        match self {
            TextureSpec::Sinusoid { .. } => "sinusoid",
            TextureSpec::SmoothNoise { .. } => "smooth",
            TextureSpec::Checkerboard { .. } => "checker",
            TextureSpec::Constant { .. } => "constant",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            TextureSpec::Sinusoid {
                period,
                amplitude,
                noise,
                angle_deg,
            } => period > 0.0 && amplitude >= 0.0 && noise >= 0.0 && angle_deg.is_finite(),
            TextureSpec::SmoothNoise { correlation, amplitude } => correlation > 0.0 && amplitude >= 0.0,
            TextureSpec::Checkerboard { cell, contrast, jitter } => cell > 0 && contrast >= 0.0 && jitter >= 0.0,
            TextureSpec::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid texture spec {self}")))
        }
    }

    /// Renders one `size x size` sample.
    pub fn render(&self, size: usize, rng: &mut impl Rng) -> Result<GrayImage> {
        self.validate()?;
        if size == 0 {
            return Err(Error::invalid("texture size must be positive"));
        }
        let img = match *self {
            TextureSpec::Sinusoid {
                angle_deg,
                period,
                amplitude,
                noise,
            } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / period;
                let wave = GrayImage::from_fn(size, size, |r, col| {
                    MID_GRAY + amplitude * (k * (col as f64 * c + r as f64 * s) + phase).sin()
                });
                add_noise(wave, noise, rng)
            }
            TextureSpec::SmoothNoise { correlation, amplitude } => smooth_noise(size, correlation, amplitude, rng),
            TextureSpec::Checkerboard { cell, contrast, jitter } => {
                let (dy, dx) = (rng.random_range(0..2 * cell), rng.random_range(0..2 * cell));
                let board = GrayImage::from_fn(size, size, |r, col| {
                    let parity = ((r + dy) / cell + (col + dx) / cell) % 2;
                    MID_GRAY + if parity == 0 { contrast } else { -contrast } / 2.0
                });
                add_noise(board, jitter, rng)
            }
            TextureSpec::Constant { value } => GrayImage::filled(size, size, value),
        };
        Ok(quantize(&img))
    }
}

impl fmt::Display for TextureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TextureSpec::Sinusoid {
                angle_deg,
                period,
                amplitude,
                noise,
            } => write!(f, "sinusoid:angle={angle_deg},period={period},amp={amplitude},noise={noise}"),
            TextureSpec::SmoothNoise { correlation, amplitude } => {
                write!(f, "smooth:corr={correlation},amp={amplitude}")
            }
            TextureSpec::Checkerboard { cell, contrast, jitter } => {
                write!(f, "checker:cell={cell},contrast={contrast},jitter={jitter}")
            }
            TextureSpec::Constant { value } => write!(f, "constant:value={value}"),
        }
    }
}

/// Parses `family:key=value,...`, e.g. `sinusoid:angle=30,period=8`.
/// Missing keys take the family defaults.
impl FromStr for TextureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (family, params) = s.split_once(':').unwrap_or((s, ""));
        let mut spec = match family.trim() {
            "sinusoid" => TextureSpec::Sinusoid {
                angle_deg: 0.0,
                period: 8.0,
                amplitude: 40.0,
                noise: 10.0,
            },
            "smooth" => TextureSpec::SmoothNoise {
                correlation: 2.0,
                amplitude: 30.0,
            },
            "checker" => TextureSpec::Checkerboard {
                cell: 6,
                contrast: 60.0,
                jitter: 10.0,
            },
            "constant" => TextureSpec::Constant { value: MID_GRAY },
            other => return Err(Error::invalid(format!("unknown texture family {other:?}"))),
        };
        for kv in params.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got {kv:?}")))?;
            let num: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad number {value:?} for {key}")))?;
            match (&mut spec, key.trim()) {
                (TextureSpec::Sinusoid { angle_deg, .. }, "angle") => *angle_deg = num,
                (TextureSpec::Sinusoid { period, .. }, "period") => *period = num,
                (TextureSpec::Sinusoid { amplitude, .. }, "amp") => *amplitude = num,
                (TextureSpec::Sinusoid { noise, .. }, "noise") => *noise = num,
                (TextureSpec::SmoothNoise { correlation, .. }, "corr") => *correlation = num,
                (TextureSpec::SmoothNoise { amplitude, .. }, "amp") => *amplitude = num,
                (TextureSpec::Checkerboard { cell, .. }, "cell") if num >= 1.0 && num.fract() == 0.0 => {
                    *cell = num as usize
                }
                (TextureSpec::Checkerboard { contrast, .. }, "contrast") => *contrast = num,
                (TextureSpec::Checkerboard { jitter, .. }, "jitter") => *jitter = num,
                (TextureSpec::Constant { value }, "value") => *value = num,
                (_, key) => return Err(Error::invalid(format!("unknown or invalid parameter {key:?} for {family}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// A mix of families with distinct parameters, `n` classes long.
pub fn default_classes(n: usize) -> Vec<(String, TextureSpec)> {
    let pool = [
        TextureSpec::Sinusoid {
            angle_deg: 30.0,
            period: 8.0,
            amplitude: 40.0,
            noise: 12.0,
        },
        TextureSpec::SmoothNoise {
            correlation: 1.0,
            amplitude: 30.0,
        },
        TextureSpec::Checkerboard {
            cell: 5,
            contrast: 60.0,
            jitter: 12.0,
        },
        TextureSpec::SmoothNoise {
            correlation: 3.0,
            amplitude: 30.0,
        },
        TextureSpec::Sinusoid {
            angle_deg: 120.0,
            period: 5.0,
            amplitude: 30.0,
            noise: 12.0,
        },
        TextureSpec::Checkerboard {
            cell: 3,
            contrast: 40.0,
            jitter: 12.0,
        },
    ];
    (0..n)
        .map(|i| {
            let mut spec = pool[i % pool.len()];
            // later cycles get shifted parameters so classes stay distinct
            let cycle = (i / pool.len()) as f64;
            match &mut spec {
                TextureSpec::Sinusoid { angle_deg, .. } => *angle_deg += 17.0 * cycle,
                TextureSpec::SmoothNoise { correlation, .. } => *correlation += 0.5 * cycle,
                TextureSpec::Checkerboard { cell, .. } => *cell += 2 * cycle as usize,
                TextureSpec::Constant { .. } => {}
            }
            (format!("c{i:02}-{}", spec.family()), spec)
        })
        .collect()
}

fn add_noise(img: GrayImage, sigma: f64, rng: &mut impl Rng) -> GrayImage {
    if sigma == 0.0 {
        return img;
    }
    let dist = Normal::new(0.0, sigma).expect("sigma validated non-negative");
    let data = img.data().iter().map(|&p| p + dist.sample(rng)).collect();
    GrayImage::new(img.width(), img.height(), data).expect("same shape")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|k| k / total).collect()
}

/// White noise blurred by a separable Gaussian on a padded canvas, rescaled
/// so the process has standard deviation `amplitude`.
fn smooth_noise(size: usize, sigma: f64, amplitude: f64, rng: &mut impl Rng) -> GrayImage {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let padded = size + 2 * radius;
    let noise: Vec<f64> = (0..padded * padded).map(|_| StandardNormal.sample(rng)).collect();
    // horizontal pass keeps all rows, drops the side padding
    let mut horiz = vec![0.0; padded * size];
    for r in 0..padded {
        for c in 0..size {
            horiz[r * size + c] = kernel.iter().enumerate().map(|(k, w)| w * noise[r * padded + c + k]).sum();
        }
    }
    let process_std = kernel.iter().map(|w| w * w).sum::<f64>();
    let scale = amplitude / process_std;
    GrayImage::from_fn(size, size, |r, c| {
        let v: f64 = kernel.iter().enumerate().map(|(k, w)| w * horiz[(r + k) * size + c]).sum();
        MID_GRAY + scale * v
    })
}

fn quantize(img: &GrayImage) -> GrayImage {
    let data = img.data().iter().map(|p| p.round().clamp(0.0, 255.0)).collect();
    GrayImage::new(img.width(), img.height(), data).expect("same shape")
}

/// `count` images per class, generated independently per image so the
/// output does not depend on thread scheduling.
pub fn synth_images(classes: &[(String, TextureSpec)], count: usize, size: usize, seed: u64) -> Result<Vec<(GrayImage, String)>> {
    if classes.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 texture classes, got {}", classes.len())));
    }
    for (label, spec) in classes {
        if label.is_empty() || label.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("invalid class label {label:?}")));
        }
        spec.validate()?;
    }
    (0..classes.len() * count)
        .into_par_iter()
        .map(|job| {
            let (label, spec) = &classes[job / count];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(job as u64);
            Ok((spec.render(size, &mut rng)?, label.clone()))
        })
        .collect()
}

/// Writes the synthetic set as PGM files under `out_dir` together with
/// `out_dir/manifest.tsv`, and returns the manifest.
pub fn generate_synthetic_textures(
    classes: &[(String, TextureSpec)],
    count: usize,
    size: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let images = synth_images(classes, count, size, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::from(e).in_file(out_dir))?;
    let entries = images
        .par_iter()
        .enumerate()
        .map(|(i, (img, label))| {
            let path = out_dir.join(format!("{label}_{:04}.pgm", i % count.max(1)));
            save_pgm(img, &path)?;
            Ok(ManifestEntry {
                path,
                label: label.clone(),
                group: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(entries)?;
    manifest.save(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::mean_std;

    #[test]
    fn specs_parse_and_print() {
        let s: TextureSpec = "sinusoid:angle=30,period=8,amp=40,noise=10".parse().unwrap();
        assert_eq!(
            s,
            TextureSpec::Sinusoid {
                angle_deg: 30.0,
                period: 8.0,
                amplitude: 40.0,
                noise: 10.0
            }
        );
        for (_, spec) in default_classes(8) {
            assert_eq!(spec.to_string().parse::<TextureSpec>().unwrap(), spec);
        }
        assert!("smooth:corr=0".parse::<TextureSpec>().is_err());
        assert!("checker:cell=2.5".parse::<TextureSpec>().is_err());
        assert!("plaid".parse::<TextureSpec>().is_err());
        assert!("smooth:period=3".parse::<TextureSpec>().is_err());
        assert_eq!("constant".parse::<TextureSpec>().unwrap(), TextureSpec::Constant { value: 128.0 });
    }

    #[test]
    fn generation_is_deterministic_and_quantized() {
        let classes = default_classes(2);
        let a = synth_images(&classes, 50, 64, 7).unwrap();
        let b = synth_images(&classes, 50, 64, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert_ne!(a[0].0, a[1].0);
        assert!(a.iter().all(|(img, _)| img.data().iter().all(|p| p.fract() == 0.0 && (0.0..=255.0).contains(p))));
        assert_ne!(a, synth_images(&classes, 50, 64, 8).unwrap());
        assert!(synth_images(&classes[..1], 5, 16, 0).is_err());
    }

    #[test]
    fn smooth_noise_has_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = smooth_noise(128, 1.5, 20.0, &mut rng);
        let (mean, sd) = mean_std(img.data());
        assert!((mean - MID_GRAY).abs() < 3.0, "{mean}");
        assert!((sd - 20.0).abs() < 4.0, "{sd}");
    }

    #[test]
    fn constant_class_is_constant() {
        let classes = vec![
            ("flat".to_string(), TextureSpec::Constant { value: 90.0 }),
            ("grating".to_string(), "sinusoid".parse().unwrap()),
        ];
        let imgs = synth_images(&classes, 3, 16, 0).unwrap();
        for (img, label) in &imgs[..3] {
            assert_eq!(label, "flat");
            assert_eq!(img, &GrayImage::filled(16, 16, 90.0));
        }
    }

    #[test]
    fn writes_manifest_and_pgms() {
        let dir = tempfile::tempdir().unwrap();
        let classes = default_classes(2);
        let manifest = generate_synthetic_textures(&classes, 3, 20, 0, dir.path()).unwrap();
        assert_eq!(manifest.entries().len(), 6);
        let reread = Manifest::load(dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(reread, manifest);
        let mem = synth_images(&classes, 3, 20, 0).unwrap();
        for (entry, (img, label)) in manifest.entries().iter().zip(&mem) {
            assert_eq!(&crate::raster::load_image(&entry.path).unwrap(), img);
            assert_eq!(&entry.label, label);
        }
    }
}
