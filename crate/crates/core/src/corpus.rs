//! Image collections used as pair sources.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::ImagePlane;

/// An indexable, lazily loaded set of images.
pub trait Corpus: Sync {
    fn len(&self) -> usize;

    fn image(&self, index: usize) -> Result<ImagePlane>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every PNG/JPEG file directly inside a directory, sorted by file name.
#[derive(Debug, Clone)]
pub struct DirCorpus {
    files: Vec<PathBuf>,
}

impl DirCorpus {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase());
            if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                files.push(path);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::format(dir, "no png/jpg images found"));
        }
        Ok(DirCorpus { files })
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }
}

impl Corpus for DirCorpus {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn image(&self, index: usize) -> Result<ImagePlane> {
        ImagePlane::load(&self.files[index])
    }
}

/// Images held in memory.
#[derive(Debug, Clone, Default)]
pub struct MemoryCorpus {
    pub images: Vec<ImagePlane>,
}

impl Corpus for MemoryCorpus {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image(&self, index: usize) -> Result<ImagePlane> {
        Ok(self.images[index].clone())
    }
}

/// Seeded procedural textures generated on demand; image `i` depends only
/// on `(seed, i)`.
#[derive(Debug, Clone, Copy)]
pub struct ProceduralCorpus {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl ProceduralCorpus {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        ProceduralCorpus { count, size, seed }
    }
}

impl Corpus for ProceduralCorpus {
    fn len(&self) -> usize {
        self.count
    }

    fn image(&self, index: usize) -> Result<ImagePlane> {
        if index >= self.count {
            return Err(Error::InvalidArgument(format!(
                "image {index} out of range for corpus of {}",
                self.count
            )));
        }
        let seed = self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(procedural_texture(self.size, self.size, seed))
    }
}

/// Grayscale texture in `[0, 1]`: multi-octave value noise overlaid with
/// random discs and rectangles, so it has gradients at every scale and
/// some sharp edges.
pub fn procedural_texture(width: usize, height: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0f64; width * height];
    let base = rng.random_range(3.0..6.0);
    let persistence = rng.random_range(0.5..0.7);
    let mut amp = 1.0;
    let mut cells = base;
    while cells <= width.max(height) as f64 / 2.0 {
        add_value_noise(&mut field, width, height, cells, amp, &mut rng);
        amp *= persistence;
        cells *= 2.0;
    }
    normalize(&mut field);

    let shapes = rng.random_range(10..30);
    let extent = width.min(height) as f64;
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let r = rng.random_range(0.02..0.12) * extent;
        let level: f64 = rng.random();
        let opacity = rng.random_range(0.3..0.8);
        let disc = rng.random_bool(0.5);
        let (x0, x1) = ((cx - r).max(0.0) as usize, ((cx + r) as usize).min(width - 1));
        let (y0, y1) = ((cy - r).max(0.0) as usize, ((cy + r) as usize).min(height - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if !disc || dx * dx + dy * dy <= r * r {
                    let v = &mut field[y * width + x];
                    *v = (1.0 - opacity) * *v + opacity * level;
                }
            }
        }
    }
    normalize(&mut field);
    ImagePlane::new(width, height, 1, field).expect("shape is consistent by construction")
}

/// Grayscale texture in `[0, 1]` whose detail is spread evenly across
/// scales from `feature_px` down to 2 px, for large ground planes that
/// must look textured in every small window.
pub fn detail_texture(width: usize, height: usize, feature_px: f64, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0f64; width * height];
    let extent = width.max(height) as f64;
    let mut step = feature_px.max(2.0);
    let mut amp = 1.0;
    while step >= 2.0 {
        add_value_noise(&mut field, width, height, extent / step, amp, &mut rng);
        amp *= 0.75;
        step /= 2.0;
    }
    normalize(&mut field);
    ImagePlane::new(width, height, 1, field).expect("shape is consistent by construction")
}

fn add_value_noise(field: &mut [f64], width: usize, height: usize, cells: f64, amp: f64, rng: &mut impl Rng) {
    let step = width.max(height) as f64 / cells;
    let gw = (width as f64 / step).ceil() as usize + 2;
    let gh = (height as f64 / step).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (ox, oy): (f64, f64) = (rng.random(), rng.random());
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    for y in 0..height {
        let fy = y as f64 / step + oy;
        let iy = fy.floor() as usize;
        let ty = smooth(fy - iy as f64);
        for x in 0..width {
            let fx = x as f64 / step + ox;
            let ix = fx.floor() as usize;
            let tx = smooth(fx - ix as f64);
            let l = |i: usize, j: usize| lattice[j * gw + i];
            let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
            let bot = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
            field[y * width + x] += amp * (top * (1.0 - ty) + bot * ty);
        }
    }
}

fn normalize(field: &mut [f64]) {
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    for v in field.iter_mut() {
        *v = (*v - lo) / span;
    }
}
