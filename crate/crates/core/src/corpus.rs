//! Synthetic texture collages and image-directory loading, with a seeded
//! name-hash split that keeps held-out images out of training.

use std::path::Path;

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: Image,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<NamedImage>,
    pub held_out: Vec<NamedImage>,
}

/// One in five names goes to the held-out split, decided by an FNV-1a hash
/// of the seed and the name.
pub fn is_held_out(seed: u64, name: &str) -> bool {
    let h = seed
        .to_le_bytes()
        .iter()
        .chain(name.as_bytes())
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    h % 5 == 0
}

type Rgb = [f64; 3];

fn color(rng: &mut impl Rng) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

enum Texture {
    /// Bilinear value noise on a coarse lattice.
    Noise { cell: f64, lattice: Vec<f64>, cols: usize, a: Rgb, b: Rgb },
    Stripes { dir: (f64, f64), period: f64, a: Rgb, b: Rgb },
    Checker { cell: usize, a: Rgb, b: Rgb },
}

impl Texture {
    fn random(rng: &mut impl Rng, size: usize) -> Self {
        let (a, b) = (color(rng), color(rng));
        match rng.random_range(0..3) {
            0 => {
                let cell = rng.random_range(6.0..16.0);
                let cols = (size as f64 / cell) as usize + 2;
                let lattice = (0..cols * cols).map(|_| rng.random()).collect();
                Texture::Noise { cell, lattice, cols, a, b }
            }
            1 => {
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Texture::Stripes {
                    dir: (t.cos(), t.sin()),
                    period: rng.random_range(4.0..16.0),
                    a,
                    b,
                }
            }
            _ => Texture::Checker {
                cell: rng.random_range(3..10),
                a,
                b,
            },
        }
    }

    fn sample(&self, r: usize, x: usize) -> Rgb {
        match self {
            Texture::Noise { cell, lattice, cols, a, b } => {
                let (fy, fx) = (r as f64 / cell, x as f64 / cell);
                let (iy, ix) = (fy as usize, fx as usize);
                let (ty, tx) = (fy - iy as f64, fx - ix as f64);
                let at = |y: usize, x: usize| lattice[y * cols + x];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                mix(*a, *b, top * (1.0 - ty) + bot * ty)
            }
            Texture::Stripes { dir, period, a, b } => {
                let p = (r as f64 * dir.0 + x as f64 * dir.1) / period;
                mix(*a, *b, 0.5 + 0.5 * (p * std::f64::consts::TAU).sin())
            }
            Texture::Checker { cell, a, b } => {
                if (r / cell + x / cell) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

/// A Voronoi collage of 3–6 textured regions plus fine grain.
pub fn synthetic_image(seed: u64, index: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let k = rng.random_range(3..=6);
    let sites: Vec<(f64, f64)> = (0..k)
        .map(|_| (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)))
        .collect();
    let textures: Vec<Texture> = (0..k).map(|_| Texture::random(&mut rng, size)).collect();
    let grain = rng.random_range(0.0..0.04);
    let mut pixels = vec![[0.0; 3]; size * size];
    for r in 0..size {
        for x in 0..size {
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(i, &(sy, sx))| (i, (r as f64 - sy).powi(2) + (x as f64 - sx).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap();
            let c = textures[nearest].sample(r, x);
            pixels[r * size + x] = c.map(|v| (v + grain * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
        }
    }
    Image::from_fn(size, size, 3, |c, r, x| pixels[r * size + x][c])
}

/// Generates collages named `syn-00000`, `syn-00001`, … until both splits hold
/// at least the requested counts; surplus images are dropped.
pub fn synthetic_split(seed: u64, train: usize, held_out: usize, size: usize) -> Split {
    let mut split = Split::default();
    let mut index = 0u64;
    while split.train.len() < train || split.held_out.len() < held_out {
        let name = format!("syn-{index:05}");
        let bucket = if is_held_out(seed, &name) {
            &mut split.held_out
        } else {
            &mut split.train
        };
        let want = if is_held_out(seed, &name) { held_out } else { train };
        if bucket.len() < want {
            bucket.push(NamedImage {
                image: synthetic_image(seed, index, size),
                name,
            });
        }
        index += 1;
    }
    split
}

/// Loads every PNG/JPEG in `dir` (sorted by file name), resized to
/// `size × size` RGB, and splits by name hash.
pub fn load_dir(dir: &Path, size: usize, seed: u64) -> Result<Split> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    entries.sort();
    let mut split = Split::default();
    for path in entries {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let img = image::open(&path)?.resize_exact(size as u32, size as u32, FilterType::Triangle);
        let item = NamedImage {
            image: Image::from_dynamic(&img),
            name,
        };
        if is_held_out(seed, &item.name) {
            split.held_out.push(item);
        } else {
            split.train.push(item);
        }
    }
    if split.train.is_empty() && split.held_out.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG or JPEG images in {}", dir.display())));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_images_are_deterministic_and_valid() {
        let a = synthetic_image(3, 7, 32);
        assert_eq!(a, synthetic_image(3, 7, 32));
        assert_ne!(a, synthetic_image(3, 8, 32));
        assert_eq!((a.height(), a.width(), a.channels()), (32, 32, 3));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn split_meets_quotas_and_respects_hash() {
        let s = synthetic_split(1, 12, 4, 16);
        assert_eq!((s.train.len(), s.held_out.len()), (12, 4));
        assert!(s.train.iter().all(|n| !is_held_out(1, &n.name)));
        assert!(s.held_out.iter().all(|n| is_held_out(1, &n.name)));
        let names: std::collections::HashSet<_> = s.train.iter().chain(&s.held_out).map(|n| &n.name).collect();
        assert_eq!(names.len(), 16);
    }

    #[test]
    fn held_out_fraction_is_about_a_fifth() {
        let n = (0..5000).filter(|i| is_held_out(9, &format!("img{i}.png"))).count();
        assert!((800..1200).contains(&n), "{n}");
    }

    #[test]
    fn load_dir_splits_by_name() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10 {
            synthetic_image(0, i, 24).save_png(dir.path().join(format!("im{i}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "skip").unwrap();
        let s = load_dir(dir.path(), 16, 4).unwrap();
        assert_eq!(s.train.len() + s.held_out.len(), 10);
        assert!(s.held_out.iter().all(|n| is_held_out(4, &n.name)));
        assert!(s.train.iter().all(|n| n.image.height() == 16 && n.image.channels() == 3));
        let empty = tempfile::tempdir().unwrap();
        assert!(load_dir(empty.path(), 16, 4).is_err());
    }
}
