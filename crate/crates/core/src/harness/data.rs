//! Synthetic surface-defect scenes and their on-disk form: one PNG per image
//! plus a JSON-lines annotation file per split.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AugmentConfig, DataConfig};
use crate::error::{Error, Result};
use crate::matching::GroundTruth;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["crack", "corrosion", "decarburization", "scratch", "pit"];
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// One image: `[1, 3, S, S]` pixels in `[0, 1]` (multiples of 1/255) and
/// `(class, [cx, cy, w, h])` instances in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: String,
    pub image: Tensor,
    pub instances: Vec<(usize, [f64; 4])>,
}

impl SyntheticScene {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            boxes: self.instances.iter().map(|i| i.1).collect(),
            labels: self.instances.iter().map(|i| i.0).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[SyntheticScene]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split {name}"))),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &SyntheticScene> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Pixel sets of a rendered scene, one per instance.
pub type Masks = Vec<Vec<(usize, usize)>>;

struct Canvas {
    s: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn background(s: usize, rng: &mut ChaCha8Rng) -> Canvas {
        let base = rng.random_range(0.42..0.58);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.01..0.04),
                )
            })
            .collect();
        let mut px = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let (u, v) = (x as f64 / s as f64, y as f64 / s as f64);
                let low: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
                    .sum();
                let n = rng.random_range(-0.035..0.035);
                px.push(std::array::from_fn(|c| base + tint[c] + low + n));
            }
        }
        Canvas { s, px }
    }

    fn paint(&mut self, mask: &[(usize, usize)], f: impl Fn([f64; 3], &mut ChaCha8Rng) -> [f64; 3], rng: &mut ChaCha8Rng) {
        for &(x, y) in mask {
            let p = &mut self.px[y * self.s + x];
            *p = f(*p, rng);
        }
    }

    fn to_tensor(&self) -> Tensor {
        let s = self.s;
        Tensor::from_fn(&[1, 3, s, s], |i| {
            let c = i / (s * s);
            let v = self.px[i % (s * s)][c];
            (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Pixels whose centre satisfies `inside`, scanning a bounding window.
fn raster(s: usize, lo: (f64, f64), hi: (f64, f64), inside: impl Fn(f64, f64) -> bool) -> Vec<(usize, usize)> {
    let clampi = |v: f64| (v.max(0.0) as usize).min(s);
    let mut out = Vec::new();
    for y in clampi(lo.1.floor())..clampi(hi.1.ceil() + 1.0) {
        for x in clampi(lo.0.floor())..clampi(hi.0.ceil() + 1.0) {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                out.push((x, y));
            }
        }
    }
    out
}

fn polyline_mask(s: usize, pts: &[(f64, f64)], half_width: f64) -> Vec<(usize, usize)> {
    let lo = pts.iter().fold((f64::MAX, f64::MAX), |a, p| (a.0.min(p.0), a.1.min(p.1)));
    let hi = pts.iter().fold((f64::MIN, f64::MIN), |a, p| (a.0.max(p.0), a.1.max(p.1)));
    let pad = half_width + 1.0;
    raster(s, (lo.0 - pad, lo.1 - pad), (hi.0 + pad, hi.1 + pad), |x, y| {
        pts.windows(2).any(|w| seg_dist((x, y), w[0], w[1]) <= half_width)
    })
}

/// Mask of one primitive of `class` centred near `c`.
fn shape_mask(class: usize, c: (f64, f64), s: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let k = s as f64 / 128.0;
    let tau = std::f64::consts::TAU;
    match class {
        // crack: dark jagged polyline
        0 => {
            let len = rng.random_range(18.0..40.0) * k;
            let n = rng.random_range(3..6);
            let mut dir = rng.random_range(0.0..tau);
            let step = len / n as f64;
            let mut p = (c.0 - 0.5 * len * dir.cos(), c.1 - 0.5 * len * dir.sin());
            let mut pts = vec![p];
            for _ in 0..n {
                dir += rng.random_range(-0.7..0.7);
                p = (p.0 + step * dir.cos(), p.1 + step * dir.sin());
                pts.push(p);
            }
            polyline_mask(s, &pts, 0.9 * k.max(1.0))
        }
        // corrosion: union of overlapping discs
        1 => {
            let r = rng.random_range(5.0..12.0) * k;
            let blobs: Vec<(f64, f64, f64)> = (0..rng.random_range(4..8))
                .map(|_| {
                    let a = rng.random_range(0.0..tau);
                    let d = rng.random_range(0.0..0.6) * r;
                    (c.0 + d * a.cos(), c.1 + d * a.sin(), (rng.random_range(0.4..0.75) * r).max(1.0))
                })
                .collect();
            raster(s, (c.0 - 2.0 * r, c.1 - 2.0 * r), (c.0 + 2.0 * r, c.1 + 2.0 * r), |x, y| {
                blobs.iter().any(|&(bx, by, br)| (x - bx).powi(2) + (y - by).powi(2) <= br * br)
            })
        }
        // decarburization: faint rotated ellipse
        2 => {
            let a = rng.random_range(8.0..18.0) * k;
            let b = rng.random_range(5.0..10.0) * k;
            let th = rng.random_range(0.0..std::f64::consts::PI);
            let (ct, st) = (th.cos(), th.sin());
            raster(s, (c.0 - a, c.1 - a), (c.0 + a, c.1 + a), |x, y| {
                let (dx, dy) = (x - c.0, y - c.1);
                let u = dx * ct + dy * st;
                let v = -dx * st + dy * ct;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
        }
        // scratch: bright straight line
        3 => {
            let len = rng.random_range(25.0..50.0) * k;
            let dir = rng.random_range(0.0..tau);
            let h = (0.5 * len * dir.cos(), 0.5 * len * dir.sin());
            polyline_mask(s, &[(c.0 - h.0, c.1 - h.1), (c.0 + h.0, c.1 + h.1)], 0.7 * k.max(1.0))
        }
        // pit: small dark disc
        _ => {
            let r = (rng.random_range(2.0..4.5) * k).max(1.0);
            raster(s, (c.0 - r, c.1 - r), (c.0 + r, c.1 + r), |x, y| {
                (x - c.0).powi(2) + (y - c.1).powi(2) <= r * r
            })
        }
    }
}

fn colorize(class: usize) -> impl Fn([f64; 3], &mut ChaCha8Rng) -> [f64; 3] {
    move |p, rng| {
        let n = rng.random_range(-0.03..0.03);
        match class {
            0 => [0.12 + n, 0.11 + n, 0.10 + n],
            1 => [0.58 + n, 0.32 + n, 0.14 + n],
            2 => [p[0] + 0.13, p[1] + 0.13, p[2] + 0.11],
            3 => [0.93 + n, 0.93 + n, 0.95 + n],
            _ => [0.06 + n, 0.06 + n, 0.14 + n],
        }
    }
}

/// Pixel-inclusive bounding box of a mask, normalized `[cx, cy, w, h]`.
pub fn mask_box(mask: &[(usize, usize)], s: usize) -> [f64; 4] {
    let x0 = mask.iter().map(|p| p.0).min().unwrap_or(0) as f64;
    let x1 = mask.iter().map(|p| p.0).max().unwrap_or(0) as f64 + 1.0;
    let y0 = mask.iter().map(|p| p.1).min().unwrap_or(0) as f64;
    let y1 = mask.iter().map(|p| p.1).max().unwrap_or(0) as f64 + 1.0;
    let s = s as f64;
    [(x0 + x1) / (2.0 * s), (y0 + y1) / (2.0 * s), (x1 - x0) / s, (y1 - y0) / s]
}

fn overlap(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
    let iy = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
    ix * iy / (a[2] * a[3]).min(b[2] * b[3])
}

/// Render one scene with the given instance classes.
pub fn render_scene(id: &str, classes: &[usize], s: usize, rng: &mut ChaCha8Rng) -> (SyntheticScene, Masks) {
    let mut canvas = Canvas::background(s, rng);
    let mut instances = Vec::new();
    let mut masks = Vec::new();
    for &class in classes {
        // Place away from earlier instances when possible.
        let mut best: Option<(Vec<(usize, usize)>, [f64; 4], f64)> = None;
        for _ in 0..20 {
            let m = 0.12 * s as f64;
            let c = (rng.random_range(m..s as f64 - m), rng.random_range(m..s as f64 - m));
            let mask = shape_mask(class, c, s, rng);
            if mask.is_empty() {
                continue;
            }
            let b = mask_box(&mask, s);
            let worst = instances.iter().map(|(_, o)| overlap(&b, o)).fold(0.0, f64::max);
            if best.as_ref().is_none_or(|x| worst < x.2) {
                best = Some((mask, b, worst));
            }
            if worst < 0.05 {
                break;
            }
        }
        let (mask, b, _) = best.expect("a primitive centred inside the image covers a pixel");
        canvas.paint(&mask, colorize(class), rng);
        instances.push((class, b));
        masks.push(mask);
    }
    (
        SyntheticScene {
            id: id.to_string(),
            image: canvas.to_tensor(),
            instances,
        },
        masks,
    )
}

/// Deterministic dataset for `seed`; classes are dealt round-robin and
/// shuffled so every class gets the same number of instances (± 1).
pub fn gen_dataset_with_masks(cfg: &DataConfig, seed: u64) -> (Dataset, Vec<Masks>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts: Vec<usize> = (0..cfg.size)
        .map(|_| rng.random_range(cfg.min_instances..=cfg.max_instances))
        .collect();
    let total: usize = counts.iter().sum();
    let mut classes: Vec<usize> = (0..total).map(|i| i % CLASS_NAMES.len()).collect();
    classes.shuffle(&mut rng);
    let [n_train, n_val, _] = cfg.counts();
    let mut ds = Dataset::default();
    let mut all_masks = Vec::with_capacity(cfg.size);
    let mut next = 0;
    for (i, &n) in counts.iter().enumerate() {
        let (split, j) = if i < n_train {
            ("train", i)
        } else if i < n_train + n_val {
            ("val", i - n_train)
        } else {
            ("test", i - n_train - n_val)
        };
        let mut img_rng = ChaCha8Rng::seed_from_u64(seed);
        img_rng.set_stream(i as u64 + 1);
        let (scene, masks) = render_scene(&format!("{split}_{j:05}"), &classes[next..next + n], cfg.image_size, &mut img_rng);
        next += n;
        all_masks.push(masks);
        match split {
            "train" => ds.train.push(scene),
            "val" => ds.val.push(scene),
            _ => ds.test.push(scene),
        }
    }
    (ds, all_masks)
}

pub fn gen_dataset(cfg: &DataConfig, seed: u64) -> Dataset {
    gen_dataset_with_masks(cfg, seed).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub class: usize,
    pub class_name: String,
    /// Normalized `[cx, cy, w, h]`.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetInfo {
    seed: u64,
    image_size: usize,
    classes: Vec<String>,
    splits: BTreeMap<String, usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::Dimension(format!("PNG export needs 3 channels, got {c}")));
    }
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            raw.push((image.data()[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[3 * p + c] as f64 / 255.0
    }))
}

/// Write `{dir}/dataset.json` and `{dir}/{split}/images/*.png` +
/// `{dir}/{split}/annotations.jsonl`.
pub fn save_dataset(ds: &Dataset, dir: &Path, seed: u64) -> Result<()> {
    let mut splits = BTreeMap::new();
    for name in SPLITS {
        let scenes = ds.split(name)?;
        splits.insert(name.to_string(), scenes.len());
        let img_dir = dir.join(name).join("images");
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        let ann_path = dir.join(name).join("annotations.jsonl");
        let mut ann = fs::File::create(&ann_path).map_err(io_err(&ann_path))?;
        for s in scenes {
            write_png(&img_dir.join(format!("{}.png", s.id)), &s.image)?;
            for &(class, bbox) in &s.instances {
                let line = serde_json::to_string(&Annotation {
                    image_id: s.id.clone(),
                    class,
                    class_name: CLASS_NAMES[class].to_string(),
                    bbox,
                })
                .expect("annotation serializes");
                writeln!(ann, "{line}").map_err(io_err(&ann_path))?;
            }
        }
    }
    let info = DatasetInfo {
        seed,
        image_size: ds.all().next().map(|s| s.size()).unwrap_or(0),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        splits,
    };
    let path = dir.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&info).expect("info serializes")).map_err(io_err(&path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for name in SPLITS {
        let ann: Vec<Annotation> = read_jsonl(&dir.join(name).join("annotations.jsonl"))?;
        let mut by_id: BTreeMap<String, Vec<(usize, [f64; 4])>> = BTreeMap::new();
        for a in ann {
            if a.class >= CLASS_NAMES.len() {
                return Err(Error::Format(format!("{}: class {} out of range", a.image_id, a.class)));
            }
            by_id.entry(a.image_id).or_default().push((a.class, a.bbox));
        }
        let img_dir = dir.join(name).join("images");
        let mut files: Vec<_> = fs::read_dir(&img_dir)
            .map_err(io_err(&img_dir))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(&img_dir)))
            .collect::<Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "png"));
        files.sort();
        let scenes = files
            .iter()
            .map(|p| {
                let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                Ok(SyntheticScene {
                    image: read_png(p)?,
                    instances: by_id.remove(&id).unwrap_or_default(),
                    id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(id) = by_id.keys().next() {
            return Err(Error::Format(format!("annotation for missing image {id}")));
        }
        match name {
            "train" => ds.train = scenes,
            "val" => ds.val = scenes,
            _ => ds.test = scenes,
        }
    }
    Ok(ds)
}

/// Random horizontal flip and centre zoom; boxes follow, and boxes pushed
/// mostly out of frame are dropped.
pub fn augment(scene: &SyntheticScene, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> (Tensor, GroundTruth) {
    let flip = rng.random_bool(cfg.hflip);
    let [lo, hi] = cfg.scale_jitter;
    let z = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let img = &scene.image;
    let (_, _, h, w) = img.dims4().expect("scene image is rank 4");
    let fill = img.sum() / img.len() as f64;
    let out = Tensor::from_fn(img.shape(), |i| {
        let ch = i / (h * w);
        let (y, x) = ((i / w) % h, i % w);
        let xs = if flip { w - 1 - x } else { x };
        // Inverse of the zoom about the centre, sampled bilinearly.
        let sx = (xs as f64 + 0.5 - w as f64 / 2.0) / z + w as f64 / 2.0 - 0.5;
        let sy = (y as f64 + 0.5 - h as f64 / 2.0) / z + h as f64 / 2.0 - 0.5;
        if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
            return fill;
        }
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let at = |yy: usize, xx: usize| img.data()[ch * h * w + yy * w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    });
    let mut gt = GroundTruth::default();
    for &(class, [cx, cy, bw, bh]) in &scene.instances {
        let cx = if flip { 1.0 - cx } else { cx };
        let x0 = ((cx - bw / 2.0 - 0.5) * z + 0.5).clamp(0.0, 1.0);
        let x1 = ((cx + bw / 2.0 - 0.5) * z + 0.5).clamp(0.0, 1.0);
        let y0 = ((cy - bh / 2.0 - 0.5) * z + 0.5).clamp(0.0, 1.0);
        let y1 = ((cy + bh / 2.0 - 0.5) * z + 0.5).clamp(0.0, 1.0);
        let kept = (x1 - x0) * (y1 - y0) / (bw * bh * z * z);
        if kept < 0.5 || x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
            continue;
        }
        gt.boxes.push([(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]);
        gt.labels.push(class);
    }
    (out, gt)
}
