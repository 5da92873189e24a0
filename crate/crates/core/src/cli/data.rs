//! Synthetic datasets, on-disk dataset directories, augmentation and batching.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Augment, Task};
use super::io::{read_pnm, write_pnm, Image};
use crate::error::{Error, Result};
use crate::metrics::IGNORE_INDEX;
use crate::tensor::{Scalar, Shape4, Tensor};

/// Pixel normalization applied when images become tensors.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Row-major class labels, `IGNORE_INDEX` for unlabeled pixels.
    Mask(Vec<u32>),
    /// `(x, y)` in image pixels, one per landmark.
    Points(Vec<(f64, f64)>),
    Class(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    /// Classes for segmentation/classification, landmarks for landmarks.
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Independent stream for `(seed, index)` pairs.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn noisy_background(rng: &mut ChaCha8Rng, w: usize, h: usize, channels: usize, lo: u8, hi: u8) -> Image {
    let mut img = Image::new(w, h, channels);
    let base: Vec<i32> = (0..channels).map(|_| rng.random_range(lo as i32..=hi as i32)).collect();
    for y in 0..h {
        for x in 0..w {
            for (c, &b) in base.iter().enumerate() {
                let v = b + rng.random_range(-12..=12);
                img.set(x, y, c, v.clamp(0, 255) as u8);
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

/// Class `c >= 1` is a rectangle when `c` is odd and a disk when even.
fn random_shape(rng: &mut ChaCha8Rng, class: u32, w: usize, h: usize) -> Shape {
    let s = w.min(h) as f64;
    let cx = rng.random_range(0.15..0.85) * w as f64;
    let cy = rng.random_range(0.15..0.85) * h as f64;
    if class % 2 == 1 {
        Shape::Rect {
            cx,
            cy,
            hw: rng.random_range(0.16..0.36) * s,
            hh: rng.random_range(0.16..0.36) * s,
        }
    } else {
        Shape::Disk {
            cx,
            cy,
            r: rng.random_range(0.2..0.38) * s,
        }
    }
}

fn paint(img: &mut Image, shape: &Shape, color: &[u8], mut on_pixel: impl FnMut(usize, usize)) {
    for y in 0..img.height {
        for x in 0..img.width {
            // pixel centers
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                for (c, &v) in color.iter().enumerate().take(img.channels) {
                    img.set(x, y, c, v);
                }
                on_pixel(x, y);
            }
        }
    }
}

fn bright_color(rng: &mut ChaCha8Rng, channels: usize) -> Vec<u8> {
    (0..channels).map(|_| rng.random_range(150..=255)).collect()
}

/// Images with 2 to 4 bright rectangles/disks over a dark noisy background
/// and their exact masks. With two classes every shape is foreground;
/// otherwise the class fixes the shape kind.
pub fn synthetic_segmentation(n: usize, size: (usize, usize), classes: usize, channels: usize, seed: u64) -> Dataset {
    let (h, w) = size;
    let samples = (0..n)
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let mut image = noisy_background(&mut rng, w, h, channels, 10, 90);
            let mut mask = vec![0u32; w * h];
            for _ in 0..rng.random_range(2..=4) {
                let class = rng.random_range(1..classes.max(2)) as u32;
                let kind = if classes == 2 { rng.random_range(1..=2) } else { class };
                let shape = random_shape(&mut rng, kind, w, h);
                let color = bright_color(&mut rng, channels);
                paint(&mut image, &shape, &color, |x, y| mask[y * w + x] = class);
            }
            Sample {
                image,
                target: Target::Mask(mask),
            }
        })
        .collect();
    Dataset {
        task: Task::Segmentation,
        classes,
        samples,
    }
}

/// Saturated color of landmark `l`.
pub fn landmark_color(l: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [255, 40, 40],
        [40, 255, 40],
        [40, 40, 255],
        [255, 255, 40],
        [40, 255, 255],
        [255, 40, 255],
        [255, 255, 255],
        [255, 140, 0],
    ];
    if l < PALETTE.len() {
        PALETTE[l]
    } else {
        let h = (l as u32).wrapping_mul(2654435761);
        [(h >> 24) as u8 | 0x40, (h >> 16) as u8 | 0x40, (h >> 8) as u8 | 0x40]
    }
}

pub const BLOB_SIGMA: f64 = 2.5;
pub const HEATMAP_STRIDE: usize = 4;

/// Colored Gaussian blobs, one per landmark, centered on pixels whose
/// coordinates are multiples of the heatmap stride and at least three
/// heatmap cells apart.
pub fn synthetic_landmarks(n: usize, size: (usize, usize), landmarks: usize, channels: usize, seed: u64) -> Dataset {
    let (h, w) = size;
    let (gh, gw) = (h / HEATMAP_STRIDE, w / HEATMAP_STRIDE);
    let samples = (0..n)
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let mut image = noisy_background(&mut rng, w, h, channels, 10, 60);
            let mut cells: Vec<(usize, usize)> = Vec::with_capacity(landmarks);
            let mut tries = 0;
            while cells.len() < landmarks {
                let c = (rng.random_range(2..gw.max(5) - 2), rng.random_range(2..gh.max(5) - 2));
                tries += 1;
                let far = cells.iter().all(|&(x, y)| x.abs_diff(c.0).max(y.abs_diff(c.1)) >= 3);
                if far || tries > 1000 {
                    cells.push(c);
                }
            }
            let points: Vec<(f64, f64)> = cells
                .iter()
                .map(|&(cx, cy)| ((cx * HEATMAP_STRIDE) as f64, (cy * HEATMAP_STRIDE) as f64))
                .collect();
            for (l, &(px, py)) in points.iter().enumerate() {
                let color = landmark_color(l);
                let reach = (3.0 * BLOB_SIGMA).ceil() as isize;
                for y in (py as isize - reach).max(0)..(py as isize + reach + 1).min(h as isize) {
                    for x in (px as isize - reach).max(0)..(px as isize + reach + 1).min(w as isize) {
                        let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                        let a = (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                        for c in 0..channels {
                            let (x, y) = (x as usize, y as usize);
                            let v = image.get(x, y, c) as f64 * (1.0 - a) + color[c % 3] as f64 * a;
                            image.set(x, y, c, v.round() as u8);
                        }
                    }
                }
            }
            Sample {
                image,
                target: Target::Points(points),
            }
        })
        .collect();
    Dataset {
        task: Task::Landmarks,
        classes: landmarks,
        samples,
    }
}

/// One shape per image. Class `c` fixes the shape kind (`c % 2`), the
/// dominant channel (`c / 2 % 3`) and the size bucket (`c / 6 % 2`).
pub fn synthetic_classification(n: usize, size: (usize, usize), classes: usize, channels: usize, seed: u64) -> Dataset {
    let (h, w) = size;
    let s = w.min(h) as f64;
    let samples = (0..n)
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let mut image = noisy_background(&mut rng, w, h, channels, 10, 60);
            let class = rng.random_range(0..classes) as u32;
            let big = (class / 6) % 2 == 1;
            let scale = if big { 0.3 } else { 0.18 };
            let (cx, cy) = (w as f64 * rng.random_range(0.35..0.65), h as f64 * rng.random_range(0.35..0.65));
            let shape = if class.is_multiple_of(2) {
                Shape::Rect {
                    cx,
                    cy,
                    hw: scale * s,
                    hh: scale * s,
                }
            } else {
                Shape::Disk { cx, cy, r: scale * s }
            };
            let dominant = (class as usize / 2) % 3;
            let color: Vec<u8> = (0..channels)
                .map(|c| if c % 3 == dominant { 240 } else { 90 })
                .collect();
            paint(&mut image, &shape, &color, |_, _| {});
            Sample {
                image,
                target: Target::Class(class),
            }
        })
        .collect();
    Dataset {
        task: Task::Classification,
        classes,
        samples,
    }
}

pub fn synthetic(task: Task, n: usize, size: (usize, usize), classes: usize, channels: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("gen-data", "sample count must be positive"));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::invalid("gen-data", format!("synthetic images have 1 or 3 channels, not {channels}")));
    }
    Ok(match task {
        Task::Segmentation => {
            if classes < 2 {
                return Err(Error::invalid("gen-data", "segmentation needs at least 2 classes"));
            }
            synthetic_segmentation(n, size, classes, channels, seed)
        }
        Task::Landmarks => {
            let (gh, gw) = (size.0 / HEATMAP_STRIDE, size.1 / HEATMAP_STRIDE);
            if gh < 5 || gw < 5 {
                return Err(Error::invalid("gen-data", "landmark images must be at least 20x20"));
            }
            synthetic_landmarks(n, size, classes, channels, seed)
        }
        Task::Classification => synthetic_classification(n, size, classes, channels, seed),
        Task::Pyramid => return Err(Error::invalid("gen-data", "the pyramid task has no labels")),
    })
}

fn image_name(i: usize, channels: usize) -> String {
    format!("img_{i:05}.{}", if channels == 1 { "pgm" } else { "ppm" })
}

/// Writes `dataset.txt`, images, and the task's label files.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "task = {}\nsamples = {}\nclasses = {}\n",
        data.task.as_str(),
        data.len(),
        data.classes
    );
    let mut table = String::new();
    for (i, s) in data.samples.iter().enumerate() {
        write_pnm(&dir.join(image_name(i, s.image.channels)), &s.image)?;
        match &s.target {
            Target::Mask(m) => {
                let mut label = Image::new(s.image.width, s.image.height, 1);
                for (d, &v) in label.data.iter_mut().zip(m) {
                    *d = u8::try_from(v).map_err(|_| Error::Data(format!("label {v} does not fit a PGM")))?;
                }
                write_pnm(&dir.join(format!("label_{i:05}.pgm")), &label)?;
            }
            Target::Points(p) => {
                for (l, (x, y)) in p.iter().enumerate() {
                    let _ = writeln!(table, "{i}\t{l}\t{x:?}\t{y:?}");
                }
            }
            Target::Class(c) => {
                let _ = writeln!(table, "{i}\t{c}");
            }
        }
    }
    match data.task {
        Task::Landmarks => std::fs::write(dir.join("points.tsv"), table)?,
        Task::Classification => std::fs::write(dir.join("labels.tsv"), table)?,
        _ => {}
    }
    if let Some(s) = data.samples.first() {
        let _ = writeln!(manifest, "channels = {}", s.image.channels);
    }
    std::fs::write(dir.join("dataset.txt"), manifest)?;
    Ok(())
}

fn manifest_value<'a>(text: &'a str, key: &str) -> Result<&'a str> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::Data(format!("dataset.txt lacks `{key}`")))
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Data(format!("bad {what} `{s}`")))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = std::fs::read_to_string(dir.join("dataset.txt"))?;
    let task_name = manifest_value(&manifest, "task")?;
    let task = Task::parse(task_name).ok_or_else(|| Error::Data(format!("unknown task `{task_name}`")))?;
    let n: usize = parse_field(manifest_value(&manifest, "samples")?, "sample count")?;
    let classes: usize = parse_field(manifest_value(&manifest, "classes")?, "class count")?;
    let channels: usize = parse_field(manifest_value(&manifest, "channels").unwrap_or("3"), "channel count")?;
    let table = match task {
        Task::Landmarks => std::fs::read_to_string(dir.join("points.tsv"))?,
        Task::Classification => std::fs::read_to_string(dir.join("labels.tsv"))?,
        _ => String::new(),
    };
    let mut points: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    let mut labels: Vec<Option<u32>> = vec![None; n];
    for line in table.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let i: usize = parse_field(f[0], "sample index")?;
        if i >= n {
            return Err(Error::Data(format!("sample index {i} out of range")));
        }
        match (task, f.len()) {
            (Task::Landmarks, 4) => {
                let l: usize = parse_field(f[1], "landmark index")?;
                if l != points[i].len() {
                    return Err(Error::Data(format!("landmarks of sample {i} out of order")));
                }
                points[i].push((parse_field(f[2], "x")?, parse_field(f[3], "y")?));
            }
            (Task::Classification, 2) => labels[i] = Some(parse_field(f[1], "class")?),
            _ => return Err(Error::Data(format!("malformed label line `{line}`"))),
        }
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let image = read_pnm(&dir.join(image_name(i, channels)))?;
        let target = match task {
            Task::Segmentation => {
                let label = read_pnm(&dir.join(format!("label_{i:05}.pgm")))?;
                if (label.width, label.height, label.channels) != (image.width, image.height, 1) {
                    return Err(Error::Data(format!("label {i} does not match its image")));
                }
                Target::Mask(label.data.iter().map(|&v| v as u32).collect())
            }
            Task::Landmarks => {
                if points[i].len() != classes {
                    return Err(Error::Data(format!("sample {i} has {} landmarks", points[i].len())));
                }
                Target::Points(std::mem::take(&mut points[i]))
            }
            Task::Classification => Target::Class(labels[i].ok_or_else(|| Error::Data(format!("sample {i} has no label")))?),
            Task::Pyramid => return Err(Error::Data("the pyramid task has no labels".into())),
        };
        samples.push(Sample { image, target });
    }
    Ok(Dataset { task, classes, samples })
}

/// Output-to-source map of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub scale: f64,
    /// Radians, counter-clockwise in image coordinates.
    pub angle: f64,
    pub flip: bool,
    /// Offset of the crop window, in output pixels.
    pub shift: (f64, f64),
    pub src: (usize, usize),
    pub dst: (usize, usize),
}

fn center(size: (usize, usize)) -> (f64, f64) {
    ((size.1 as f64 - 1.0) / 2.0, (size.0 as f64 - 1.0) / 2.0)
}

impl Warp {
    pub fn identity(size: (usize, usize)) -> Self {
        Warp {
            scale: 1.0,
            angle: 0.0,
            flip: false,
            shift: (0.0, 0.0),
            src: size,
            dst: size,
        }
    }

    /// Draws flip, scale, rotation (when `rotate`) and a random crop window.
    pub fn draw(rng: &mut impl Rng, aug: &Augment, src: (usize, usize), dst: (usize, usize), rotate: bool) -> Self {
        let flip = aug.flip_prob > 0.0 && rng.random::<f64>() < aug.flip_prob;
        let scale = if aug.scale_max > aug.scale_min {
            rng.random_range(aug.scale_min..=aug.scale_max)
        } else {
            aug.scale_min
        };
        let angle = if rotate && aug.rotation_deg > 0.0 {
            rng.random_range(-aug.rotation_deg..=aug.rotation_deg).to_radians()
        } else {
            0.0
        };
        let slack = |s: usize, d: usize| (s as f64 * scale - d as f64).max(0.0) / 2.0;
        let (sx, sy) = (slack(src.1, dst.1), slack(src.0, dst.0));
        let shift = (
            if sx > 0.0 { rng.random_range(-sx..=sx) } else { 0.0 },
            if sy > 0.0 { rng.random_range(-sy..=sy) } else { 0.0 },
        );
        Warp {
            scale,
            angle,
            flip,
            shift,
            src,
            dst,
        }
    }

    /// Source position of output pixel `(x, y)`.
    pub fn to_source(&self, x: f64, y: f64) -> (f64, f64) {
        let (co, cs) = (center(self.dst), center(self.src));
        let (u, v) = ((x - co.0 + self.shift.0) / self.scale, (y - co.1 + self.shift.1) / self.scale);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * u + s * v, -s * u + c * v);
        let u = if self.flip { -u } else { u };
        (cs.0 + u, cs.1 + v)
    }

    /// Output position of source point `(x, y)`; inverse of [`Warp::to_source`].
    pub fn to_output(&self, x: f64, y: f64) -> (f64, f64) {
        let (co, cs) = (center(self.dst), center(self.src));
        let (u, v) = (x - cs.0, y - cs.1);
        let u = if self.flip { -u } else { u };
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * u - s * v, s * u + c * v);
        (u * self.scale + co.0 - self.shift.0, v * self.scale + co.1 - self.shift.1)
    }

    pub fn is_identity(&self) -> bool {
        *self == Warp::identity(self.src)
    }
}

/// Bilinear resampling; pixels mapping outside the source become zero.
pub fn warp_image(img: &Image, warp: &Warp) -> Image {
    if warp.is_identity() {
        return img.clone();
    }
    let (h, w) = warp.dst;
    let mut out = Image::new(w, h, img.channels);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = warp.to_source(x as f64, y as f64);
            if sx < -0.5 || sy < -0.5 || sx > img.width as f64 - 0.5 || sy > img.height as f64 - 0.5 {
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, (img.width - 1) as f64), sy.clamp(0.0, (img.height - 1) as f64));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..img.channels {
                let v = img.get(x0, y0, c) as f64 * (1.0 - fx) * (1.0 - fy)
                    + img.get(x1, y0, c) as f64 * fx * (1.0 - fy)
                    + img.get(x0, y1, c) as f64 * (1.0 - fx) * fy
                    + img.get(x1, y1, c) as f64 * fx * fy;
                out.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Nearest-neighbor resampling; pixels mapping outside become ignored.
pub fn warp_mask(mask: &[u32], warp: &Warp) -> Vec<u32> {
    if warp.is_identity() {
        return mask.to_vec();
    }
    let (sh, sw) = warp.src;
    let (h, w) = warp.dst;
    let mut out = vec![IGNORE_INDEX; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = warp.to_source(x as f64, y as f64);
            let (rx, ry) = (sx.round(), sy.round());
            if rx >= 0.0 && ry >= 0.0 && rx < sw as f64 && ry < sh as f64 {
                out[y * w + x] = mask[ry as usize * sw + rx as usize];
            }
        }
    }
    out
}

pub fn warp_sample(s: &Sample, warp: &Warp) -> Sample {
    let image = warp_image(&s.image, warp);
    let target = match &s.target {
        Target::Mask(m) => Target::Mask(warp_mask(m, warp)),
        Target::Points(p) => Target::Points(p.iter().map(|&(x, y)| warp.to_output(x, y)).collect()),
        Target::Class(c) => Target::Class(*c),
    };
    Sample { image, target }
}

/// Stacks images into an `(N, C, H, W)` tensor with pixel normalization.
pub fn image_batch<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("batch", "no images"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    if images.iter().any(|i| (i.height, i.width, i.channels) != (h, w, c)) {
        return Err(Error::shape("batch", "images differ in size"));
    }
    let shape = Shape4::new(images.len(), c, h, w);
    Ok(Tensor::from_fn(shape, |n, ch, y, x| {
        T::of((images[n].get(x, y, ch) as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic_and_prefix_stable() {
        let a = synthetic_segmentation(6, (32, 32), 3, 3, 9);
        let b = synthetic_segmentation(4, (32, 32), 3, 3, 9);
        assert_eq!(a.samples[..4], b.samples[..]);
        assert_ne!(a.samples[0], synthetic_segmentation(1, (32, 32), 3, 3, 10).samples[0]);
    }

    #[test]
    fn mask_labels_in_range_and_roughly_balanced() {
        let d = synthetic_segmentation(200, (64, 64), 2, 3, 1);
        let mut fg = 0usize;
        for s in &d.samples {
            let Target::Mask(m) = &s.target else { panic!() };
            assert!(m.iter().all(|&v| v < 2));
            fg += m.iter().filter(|&&v| v == 1).count();
        }
        let frac = fg as f64 / (200.0 * 64.0 * 64.0);
        assert!((0.4..0.6).contains(&frac), "{frac}");
        let d = synthetic_segmentation(50, (64, 64), 3, 3, 1);
        for s in &d.samples {
            let Target::Mask(m) = &s.target else { panic!() };
            assert!(m.iter().all(|&v| v < 3));
        }
    }

    #[test]
    fn shapes_are_brighter_than_background() {
        let d = synthetic_segmentation(5, (32, 32), 2, 3, 4);
        for s in &d.samples {
            let Target::Mask(m) = &s.target else { panic!() };
            for (i, &l) in m.iter().enumerate() {
                let v = s.image.data[i * 3];
                assert!(if l == 1 { v >= 150 } else { v <= 102 });
            }
        }
    }

    #[test]
    fn landmark_points_on_the_heatmap_grid() {
        let d = synthetic_landmarks(20, (64, 64), 5, 3, 2);
        for s in &d.samples {
            let Target::Points(p) = &s.target else { panic!() };
            assert_eq!(p.len(), 5);
            for &(x, y) in p {
                assert_eq!((x % 4.0, y % 4.0), (0.0, 0.0));
                assert!((8.0..=52.0).contains(&x) && (8.0..=52.0).contains(&y));
            }
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (task, k) in [(Task::Segmentation, 3), (Task::Landmarks, 5), (Task::Classification, 4)] {
            let d = synthetic(task, 3, (32, 32), k, 3, 5).unwrap();
            let sub = dir.path().join(task.as_str());
            write_dataset(&sub, &d).unwrap();
            assert_eq!(read_dataset(&sub).unwrap(), d);
        }
        assert!(read_dataset(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn warp_inverse_and_identity() {
        let aug = Augment {
            flip_prob: 0.5,
            scale_min: 0.75,
            scale_max: 1.25,
            rotation_deg: 30.0,
            crop: None,
        };
        let mut rng = stream(1, 0);
        for _ in 0..50 {
            let w = Warp::draw(&mut rng, &aug, (48, 64), (32, 40), true);
            let (x, y) = w.to_output(10.0, 20.0);
            let (bx, by) = w.to_source(x, y);
            assert!((bx - 10.0).abs() < 1e-9 && (by - 20.0).abs() < 1e-9);
        }
        let img = synthetic_segmentation(1, (16, 16), 2, 3, 0).samples.remove(0);
        assert_eq!(warp_sample(&img, &Warp::identity((16, 16))), img);
    }

    #[test]
    fn flip_mirrors_mask_and_points() {
        let mut w = Warp::identity((4, 4));
        w.flip = true;
        let mask: Vec<u32> = (0..16).collect();
        let m = warp_mask(&mask, &w);
        assert_eq!(&m[..4], &[3, 2, 1, 0]);
        assert_eq!(w.to_output(0.0, 1.0), (3.0, 1.0));
    }

    #[test]
    fn batch_normalizes_pixels() {
        let mut img = Image::new(2, 1, 1);
        img.data = vec![0, 255];
        let t: Tensor<f64> = image_batch(&[&img]).unwrap();
        assert_eq!(t.data(), &[-2.0, 2.0]);
    }
}
