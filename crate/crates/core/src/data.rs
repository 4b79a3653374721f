//! Datasets: a seeded synthetic shapes set and a COCO-format loader.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::detection::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image, as `(H, W, 3)` values in `[0, 1]`, with its boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub gts: Vec<GroundTruth>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

pub const SYNTH_CLASSES: [&str; 2] = ["rectangle", "ellipse"];

/// Shape colors. Every entry has a channel of at least 0.6, so none can
/// occur in the background noise (channels below [`NOISE_MAX`]).
pub const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.2, 0.3, 1.0],
    [1.0, 1.0, 0.1],
    [1.0, 0.2, 1.0],
    [0.1, 1.0, 1.0],
    [1.0, 0.6, 0.0],
    [1.0, 1.0, 1.0],
];
pub const NOISE_MAX: f64 = 0.35;

/// `n` images of 1 to 4 non-overlapping filled rectangles (class 0) and
/// ellipses (class 1) in distinct colors on uniform noise. Each box is the
/// exact pixel extent of its painted shape.
pub fn synth_dataset(n: usize, image_size: usize, seed: u64) -> Result<Vec<Sample>> {
    if image_size == 0 || image_size % 64 != 0 {
        return Err(Error::Dimension {
            op: "synth_dataset",
            axis: "image_size",
            size: image_size,
            divisor: 64,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| Ok(synth_image(&mut rng, image_size, format!("synth-{seed}-{i}")))).collect()
}

fn synth_image(rng: &mut ChaCha8Rng, s: usize, id: String) -> Sample {
    let mut data: Vec<f64> = (0..s * s * 3).map(|_| rng.random::<f64>() * NOISE_MAX).collect();
    let count = rng.random_range(1..=4usize);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    let mut placed: Vec<[usize; 4]> = Vec::new();
    let mut gts = Vec::new();
    let (lo, hi) = ((s as f64 * 0.2).round() as usize, (s as f64 * 0.5).round() as usize);
    for _ in 0..count {
        // rejection sampling; give up on this shape after a bounded number of tries
        let Some(rect) = (0..200).find_map(|_| {
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let x0 = rng.random_range(0..=s - w);
            let y0 = rng.random_range(0..=s - h);
            let r = [x0, y0, x0 + w, y0 + h];
            let clear = placed
                .iter()
                .all(|p| r[2] + 2 <= p[0] || p[2] + 2 <= r[0] || r[3] + 2 <= p[1] || p[3] + 2 <= r[1]);
            clear.then_some(r)
        }) else {
            break;
        };
        placed.push(rect);
        let color = PALETTE[colors.swap_remove(rng.random_range(0..colors.len()))];
        let class = rng.random_range(0..2usize);
        let [x0, y0, x1, y1] = rect;
        let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
        let (rx, ry) = ((x1 - x0) as f64 / 2.0, (y1 - y0) as f64 / 2.0);
        let mut ext = [usize::MAX, usize::MAX, 0, 0];
        for y in y0..y1 {
            for x in x0..x1 {
                let inside = class == 0 || {
                    let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                    dx * dx + dy * dy <= 1.0
                };
                if inside {
                    data[(y * s + x) * 3..(y * s + x) * 3 + 3].copy_from_slice(&color);
                    ext = [ext[0].min(x), ext[1].min(y), ext[2].max(x + 1), ext[3].max(y + 1)];
                }
            }
        }
        gts.push(GroundTruth {
            bbox: BBox::new(ext[0] as f64, ext[1] as f64, ext[2] as f64, ext[3] as f64),
            class,
        });
    }
    Sample {
        id,
        image: Tensor::new(vec![s, s, 3], data),
        gts,
    }
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    bbox: [f64; 4],
    category_id: u64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Clone, Debug)]
pub struct CocoDataset {
    pub samples: Vec<Sample>,
    /// Category names in contiguous class-id order (sorted by COCO id).
    pub categories: Vec<String>,
}

/// Loads COCO-format annotations. Images are resized so their longer side is
/// `image_size`, then zero-padded on the right/bottom to a square.
pub fn load_coco(images_dir: impl AsRef<Path>, annotations: impl AsRef<Path>, image_size: usize) -> Result<CocoDataset> {
    if image_size == 0 || image_size % 64 != 0 {
        return Err(Error::Dimension {
            op: "load_coco",
            axis: "image_size",
            size: image_size,
            divisor: 64,
        });
    }
    let ann_path = annotations.as_ref();
    let text = std::fs::read_to_string(ann_path)?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: ann_path.to_path_buf(),
        source,
    })?;
    let mut cats: Vec<&CocoCategory> = file.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let class_of: BTreeMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for a in file.annotations.iter().filter(|a| a.iscrowd == 0) {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut samples = Vec::with_capacity(file.images.len());
    for im in &file.images {
        let path = images_dir.as_ref().join(&im.file_name);
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("image {} ({}): {e}", im.id, path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let (image, scale) = letterbox(&img, image_size);
        let mut gts = Vec::new();
        for a in by_image.get(&im.id).map(Vec::as_slice).unwrap_or_default() {
            let class = *class_of.get(&a.category_id).ok_or_else(|| {
                Error::Data(format!("image {}: unknown category {}", im.id, a.category_id))
            })?;
            let [x, y, bw, bh] = a.bbox;
            let b = BBox::from_xywh(x, y, bw, bh)
                .clip(w as f64, h as f64)
                .scale(scale);
            if b.area() > 0.0 {
                gts.push(GroundTruth { bbox: b, class });
            }
        }
        samples.push(Sample {
            id: im.id.to_string(),
            image,
            gts,
        });
    }
    Ok(CocoDataset {
        samples,
        categories: cats.iter().map(|c| c.name.clone()).collect(),
    })
}

/// Reads one image file for inference, resized and padded like [`load_coco`].
/// Returns the tensor and the applied scale.
pub fn load_image(path: impl AsRef<Path>, image_size: usize) -> Result<(Tensor, f64)> {
    let img = image::open(path.as_ref())?.to_rgb8();
    Ok(letterbox(&img, image_size))
}

fn letterbox(img: &image::RgbImage, image_size: usize) -> (Tensor, f64) {
    let (w, h) = img.dimensions();
    let scale = image_size as f64 / w.max(h) as f64;
    let (nw, nh) = (
        ((w as f64 * scale).round() as u32).clamp(1, image_size as u32),
        ((h as f64 * scale).round() as u32).clamp(1, image_size as u32),
    );
    let resized = image::imageops::resize(img, nw, nh, image::imageops::FilterType::Triangle);
    let mut data = vec![0.0; image_size * image_size * 3];
    for (x, y, p) in resized.enumerate_pixels() {
        let o = (y as usize * image_size + x as usize) * 3;
        for c in 0..3 {
            data[o + c] = p[c] as f64 / 255.0;
        }
    }
    (Tensor::new(vec![image_size, image_size, 3], data), scale)
}
