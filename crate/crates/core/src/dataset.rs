//! Ground-truth mask synthesis, preprocessing, the synthetic scene
//! generator and dataset manifests.
//!
//! A frame's mask paints the object's distance class inside its bounding
//! box and the background class everywhere else. Preprocessing center-crops
//! image and mask around the box and Gaussian-smooths the cropped mask to
//! soften the class step at the box edge.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::ops::reflect_index;

/// Axis-aligned pixel box; `x`/`y` is the top-left corner and may sit
/// outside the image (only the intersection is ever painted).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: i32, y: i32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "bbox extents must be positive, got {w}x{h}"
            )));
        }
        Ok(BBox { x, y, w, h })
    }

    /// Intersection with an `h_img` x `w_img` image, if non-empty.
    pub fn clip(&self, h_img: usize, w_img: usize) -> Option<BBox> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = (self.x as i64 + self.w as i64).min(w_img as i64);
        let y1 = (self.y as i64 + self.h as i64).min(h_img as i64);
        if x1 > x0 as i64 && y1 > y0 as i64 {
            Some(BBox {
                x: x0,
                y: y0,
                w: (x1 - x0 as i64) as u32,
                h: (y1 - y0 as i64) as u32,
            })
        } else {
            None
        }
    }

    /// Box center in pixel coordinates (integer division).
    pub fn center(&self) -> (i64, i64) {
        (
            self.x as i64 + self.w as i64 / 2,
            self.y as i64 + self.h as i64 / 2,
        )
    }
}

/// One annotated image: where the object is and how far away it flies.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub frame_id: String,
    /// Stored verbatim; relative paths resolve against the manifest's parent.
    pub image_path: PathBuf,
    pub bbox: BBox,
    pub distance_m: f32,
}

impl AnnotatedFrame {
    pub fn resolve_image_path(&self, manifest_dir: &Path) -> PathBuf {
        if self.image_path.is_absolute() {
            self.image_path.clone()
        } else {
            manifest_dir.join(&self.image_path)
        }
    }
}

/// Ordinal distance classes: strict `<` against each upper edge, with one
/// background class past the last edge.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBins {
    pub upper_edges_m: Vec<f32>,
    pub background_class: u8,
}

impl Default for ClassBins {
    fn default() -> Self {
        ClassBins {
            upper_edges_m: vec![200.0, 400.0, 600.0, 700.0],
            background_class: 4,
        }
    }
}

impl ClassBins {
    pub fn num_classes(&self) -> usize {
        self.upper_edges_m.len() + 1
    }
}

/// Smallest class whose upper edge exceeds `d` under strict `<`; background
/// only strictly past the last edge. Exactly 200 m is class 1; exactly
/// 700 m resolves to the closer class 3.
pub fn bin_distance(d: f32, bins: &ClassBins) -> Result<u8> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "distance must be finite and non-negative, got {d}"
        )));
    }
    for (i, edge) in bins.upper_edges_m.iter().enumerate() {
        if d < *edge {
            return Ok(i as u8);
        }
    }
    let last = *bins.upper_edges_m.last().expect("bins have edges");
    if d > last {
        Ok(bins.background_class)
    } else {
        Ok((bins.upper_edges_m.len() - 1) as u8)
    }
}

/// Paint the frame's class inside its (clipped) bounding box, background
/// everywhere else.
pub fn build_mask(frame: &AnnotatedFrame, h: usize, w: usize, bins: &ClassBins) -> Result<Mask> {
    let class = bin_distance(frame.distance_m, bins)? as f32;
    let inside = frame.bbox.clip(h, w).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "bbox of frame {} lies fully outside the {}x{} image",
            frame.frame_id, h, w
        ))
    })?;
    let mut mask = Mask::filled(h, w, bins.background_class as f32);
    for y in inside.y as usize..(inside.y as usize + inside.h as usize) {
        let row = y * w + inside.x as usize;
        mask.data_mut()[row..row + inside.w as usize].fill(class);
    }
    Ok(mask)
}

/// Crop a `crop`×`crop` window centered on the box, translated (never
/// shrunk) to stay inside the image. Returns the cropped image, the
/// identically cropped mask, and the box re-expressed in crop coordinates
/// (clipped to the window).
pub fn center_crop(
    image: &Image,
    mask: &Mask,
    bbox: &BBox,
    crop: usize,
) -> Result<(Image, Mask, BBox)> {
    if image.h != mask.h || image.w != mask.w {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} and mask {}x{} differ",
            image.h, image.w, mask.h, mask.w
        )));
    }
    if crop == 0 || crop > image.h || crop > image.w {
        return Err(Error::InvalidArgument(format!(
            "crop {} exceeds image {}x{}",
            crop, image.h, image.w
        )));
    }
    let (cx, cy) = bbox.center();
    let x0 = (cx - crop as i64 / 2).clamp(0, (image.w - crop) as i64) as usize;
    let y0 = (cy - crop as i64 / 2).clamp(0, (image.h - crop) as i64) as usize;
    let local = BBox {
        x: bbox.x - x0 as i32,
        y: bbox.y - y0 as i32,
        w: bbox.w,
        h: bbox.h,
    };
    let local = local.clip(crop, crop).ok_or_else(|| {
        Error::InvalidArgument("bbox fell outside its own crop window".to_string())
    })?;
    Ok((image.crop(y0, x0, crop), mask.crop(y0, x0, crop), local))
}

/// Separable Gaussian smoothing with reflect borders. The kernel is
/// normalized to unit sum, so output values stay within the input range.
pub fn gaussian_smooth(mask: &Mask, sigma: f32, ksize: usize) -> Result<Mask> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    if ksize % 2 == 0 || ksize == 0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel size must be odd, got {ksize}"
        )));
    }
    if ksize > 2 * mask.h - 1 || ksize > 2 * mask.w - 1 {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel {} too large for {}x{} mask",
            ksize, mask.h, mask.w
        )));
    }
    let r = (ksize / 2) as isize;
    let kernel = gaussian_kernel(sigma, ksize);

    // Horizontal pass, then vertical.
    let (h, w) = (mask.h, mask.w);
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, &k) in kernel.iter().enumerate() {
                let sx = reflect_index(x as isize + i as isize - r, w);
                acc += k * mask.at(y, sx);
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, &k) in kernel.iter().enumerate() {
                let sy = reflect_index(y as isize + i as isize - r, h);
                acc += k * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Mask::new(h, w, out)
}

fn gaussian_kernel(sigma: f32, ksize: usize) -> Vec<f32> {
    let r = (ksize / 2) as f64;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let raw: Vec<f64> = (0..ksize)
        .map(|i| (-((i as f64 - r) * (i as f64 - r)) / s2).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

/// Parameters of the pinhole-model scene generator.
#[derive(Clone, Debug)]
pub struct SynthParams {
    pub focal_px: f32,
    pub wingspan_m: f32,
    pub image_size: usize,
    pub distance_range_m: (f32, f32),
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            focal_px: 1200.0,
            wingspan_m: 12.0,
            image_size: 512,
            distance_range_m: (50.0, 900.0),
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.distance_range_m;
        if self.focal_px <= 0.0 || self.wingspan_m <= 0.0 {
            return Err(Error::InvalidArgument(
                "focal length and wingspan must be positive".to_string(),
            ));
        }
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::InvalidArgument(format!(
                "distance range must satisfy 0 < lo < hi, got [{lo}, {hi}]"
            )));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidArgument(format!(
                "image size {} too small",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Height of the elliptical silhouette relative to its span.
const SILHOUETTE_ASPECT: f64 = 0.4;
const SILHOUETTE_VALUE: f32 = 0.08;

/// Render one sky frame with a dark elliptical intruder. The apparent span
/// follows the pinhole relation `s_px = focal * wingspan / distance`; the
/// reported bbox is the tight extent of the painted pixels.
pub fn synth_scene(
    params: &SynthParams,
    frame_id: &str,
    rng: &mut impl Rng,
) -> Result<(Image, AnnotatedFrame)> {
    params.validate()?;
    let size = params.image_size;
    let (dlo, dhi) = params.distance_range_m;

    // Resample the distance until the silhouette is at least 2 px wide.
    let mut chosen = None;
    for _ in 0..100 {
        let d: f32 = rng.gen_range(dlo..dhi);
        let s_px = params.focal_px * params.wingspan_m / d;
        if s_px >= 2.0 {
            chosen = Some((d, s_px));
            break;
        }
    }
    let (distance, s_px) = chosen.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "silhouette stayed under 2 px after 100 draws from [{dlo}, {dhi}] m"
        ))
    })?;

    let a = s_px as f64 / 2.0;
    let b = (a * SILHOUETTE_ASPECT).max(0.5);
    if 2.0 * a >= (size - 2) as f64 || 2.0 * b >= (size - 2) as f64 {
        return Err(Error::InvalidArgument(format!(
            "silhouette span {:.1} px cannot fit a {}px image",
            s_px, size
        )));
    }
    let cx: f64 = rng.gen_range(a..(size as f64 - 1.0 - a));
    let cy: f64 = rng.gen_range(b..(size as f64 - 1.0 - b));

    // Vertical sky gradient, bright toward the top.
    let mut img = Image::zeros(size, size, 1);
    for y in 0..size {
        let base = 0.85 - 0.5 * (y as f32 / (size - 1) as f32);
        let row = &mut img.data_mut()[y * size..(y + 1) * size];
        row.fill(base);
    }

    // Scanline-paint the ellipse, tracking the tight pixel extent.
    let mut x_min = usize::MAX;
    let mut x_max = 0usize;
    let mut y_min = usize::MAX;
    let mut y_max = 0usize;
    let y_lo = (cy - b).ceil().max(0.0) as usize;
    let y_hi = ((cy + b).floor() as usize).min(size - 1);
    for y in y_lo..=y_hi {
        let t = (y as f64 - cy) / b;
        let rel = 1.0 - t * t;
        if rel < 0.0 {
            continue;
        }
        let hx = a * rel.sqrt();
        let x_lo = (cx - hx).ceil().max(0.0) as usize;
        let x_hi = ((cx + hx).floor() as usize).min(size - 1);
        if x_lo > x_hi {
            continue;
        }
        img.data_mut()[y * size + x_lo..y * size + x_hi + 1].fill(SILHOUETTE_VALUE);
        x_min = x_min.min(x_lo);
        x_max = x_max.max(x_hi);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if x_min == usize::MAX {
        // Sub-pixel silhouette between scanlines; paint its center pixel.
        let px = cx.round() as usize;
        let py = cy.round() as usize;
        img.set(0, py, px, SILHOUETTE_VALUE);
        (x_min, x_max, y_min, y_max) = (px, px, py, py);
    }

    // Pixel noise over the whole frame.
    let normal = Normal::new(0.0f32, params.noise_std).map_err(|e| {
        Error::InvalidArgument(format!("invalid noise std {}: {e}", params.noise_std))
    })?;
    for v in img.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }

    let bbox = BBox {
        x: x_min as i32,
        y: y_min as i32,
        w: (x_max - x_min + 1) as u32,
        h: (y_max - y_min + 1) as u32,
    };
    let frame = AnnotatedFrame {
        frame_id: frame_id.to_string(),
        image_path: PathBuf::from(format!("images/{frame_id}.pgm")),
        bbox,
        distance_m: distance,
    };
    Ok((img, frame))
}

/// Per-frame RNG: seeds split by frame index so generation is independent
/// of how work is distributed across workers.
pub fn frame_rng(seed: u64, frame_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index);
    rng
}

// ── Manifest I/O ────────────────────────────────────────────────────────

/// Write frames as tab-separated records, one per line (UTF-8, LF):
/// `frame_id<TAB>image_path<TAB>x<TAB>y<TAB>w<TAB>h<TAB>distance_m`.
pub fn write_manifest(frames: &[AnnotatedFrame], path: &Path) -> Result<()> {
    let mut out = String::new();
    for f in frames {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            f.frame_id,
            f.image_path.display(),
            f.bbox.x,
            f.bbox.y,
            f.bbox.w,
            f.bbox.h,
            f.distance_m
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<AnnotatedFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        frames.push(parse_record(path, idx + 1, line)?);
    }
    Ok(frames)
}

fn parse_record(path: &Path, line_no: usize, line: &str) -> Result<AnnotatedFrame> {
    let parse_err = |msg: String| Error::Parse {
        path: path.display().to_string(),
        line: line_no,
        msg,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(parse_err(format!(
            "expected 7 tab-separated fields, got {}",
            fields.len()
        )));
    }
    let int = |name: &str, s: &str| -> Result<i64> {
        s.parse::<i64>()
            .map_err(|_| parse_err(format!("field {name}: invalid integer {s:?}")))
    };
    let x = int("x", fields[2])?;
    let y = int("y", fields[3])?;
    let w = int("w", fields[4])?;
    let h = int("h", fields[5])?;
    if w <= 0 || h <= 0 {
        return Err(parse_err(format!(
            "field {}: bbox extent must be positive, got {}",
            if w <= 0 { "w" } else { "h" },
            if w <= 0 { w } else { h }
        )));
    }
    let distance: f32 = fields[6]
        .parse()
        .map_err(|_| parse_err(format!("field distance_m: invalid real {:?}", fields[6])))?;
    if !distance.is_finite() || distance < 0.0 {
        return Err(parse_err(format!(
            "field distance_m: must be finite and non-negative, got {distance}"
        )));
    }
    Ok(AnnotatedFrame {
        frame_id: fields[0].to_string(),
        image_path: PathBuf::from(fields[1]),
        bbox: BBox {
            x: x as i32,
            y: y as i32,
            w: w as u32,
            h: h as u32,
        },
        distance_m: distance,
    })
}

/// Count frames per distance class.
pub fn class_histogram(frames: &[AnnotatedFrame], bins: &ClassBins) -> Result<Vec<usize>> {
    let mut hist = vec![0usize; bins.num_classes()];
    for f in frames {
        hist[bin_distance(f.distance_m, bins)? as usize] += 1;
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(bbox: BBox, d: f32) -> AnnotatedFrame {
        AnnotatedFrame {
            frame_id: "t".to_string(),
            image_path: PathBuf::from("t.pgm"),
            bbox,
            distance_m: d,
        }
    }

    #[test]
    fn bin_distance_follows_strict_edges() {
        let bins = ClassBins::default();
        assert_eq!(bin_distance(150.0, &bins).unwrap(), 0);
        assert_eq!(bin_distance(350.0, &bins).unwrap(), 1);
        assert_eq!(bin_distance(200.0, &bins).unwrap(), 1);
        assert_eq!(bin_distance(400.0, &bins).unwrap(), 2);
        assert_eq!(bin_distance(600.0, &bins).unwrap(), 3);
        assert_eq!(bin_distance(700.0, &bins).unwrap(), 3);
        assert_eq!(bin_distance(800.0, &bins).unwrap(), 4);
        assert!(bin_distance(f32::NAN, &bins).is_err());
    }

    #[test]
    fn build_mask_paints_box_and_background() {
        let bins = ClassBins::default();
        let f = frame(BBox::new(10, 10, 20, 20).unwrap(), 350.0);
        let m = build_mask(&f, 64, 64, &bins).unwrap();
        assert_eq!(m.at(15, 15), 1.0);
        assert_eq!(m.at(9, 9), 4.0);
        assert_eq!(m.at(29, 29), 1.0);
        assert_eq!(m.at(30, 30), 4.0);
    }

    #[test]
    fn build_mask_far_object_is_uniform_background() {
        let bins = ClassBins::default();
        let f = frame(BBox::new(5, 5, 4, 4).unwrap(), 800.0);
        let m = build_mask(&f, 16, 16, &bins).unwrap();
        assert!(m.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn build_mask_clips_offscreen_box() {
        let bins = ClassBins::default();
        let f = frame(BBox::new(-5, -5, 10, 10).unwrap(), 100.0);
        let m = build_mask(&f, 16, 16, &bins).unwrap();
        assert_eq!(m.at(0, 0), 0.0);
        assert_eq!(m.at(4, 4), 0.0);
        assert_eq!(m.at(5, 5), 4.0);

        let outside = frame(BBox::new(100, 100, 4, 4).unwrap(), 100.0);
        assert!(build_mask(&outside, 16, 16, &bins).is_err());
    }

    #[test]
    fn center_crop_window_arithmetic() {
        let img = Image::zeros(512, 512, 1);
        let mask = Mask::filled(512, 512, 4.0);
        let bbox = BBox::new(246, 246, 20, 20).unwrap(); // centered at (256, 256)
        let (ci, cm, cb) = center_crop(&img, &mask, &bbox, 128).unwrap();
        assert_eq!((ci.h, ci.w), (128, 128));
        assert_eq!((cm.h, cm.w), (128, 128));
        // window [192, 320): bbox shifts by -192
        assert_eq!((cb.x, cb.y), (54, 54));

        let near = BBox::new(5, 5, 10, 10).unwrap(); // center (10, 10)
        let (_, _, cb) = center_crop(&img, &mask, &near, 128).unwrap();
        assert_eq!((cb.x, cb.y), (5, 5)); // window clamped to [0, 128)
    }

    #[test]
    fn center_crop_rejects_oversized_crop() {
        let img = Image::zeros(64, 64, 1);
        let mask = Mask::filled(64, 64, 0.0);
        let bbox = BBox::new(10, 10, 4, 4).unwrap();
        assert!(center_crop(&img, &mask, &bbox, 128).is_err());
    }

    #[test]
    fn crop_then_mask_commutes_with_mask_then_crop() {
        let bins = ClassBins::default();
        let img = Image::zeros(256, 256, 1);
        let bbox = BBox::new(100, 80, 30, 24).unwrap();
        let f = frame(bbox, 250.0);

        let full = build_mask(&f, 256, 256, &bins).unwrap();
        let (_, cropped_mask, local) = center_crop(&img, &full, &bbox, 64).unwrap();

        let local_frame = frame(local, 250.0);
        let direct = build_mask(&local_frame, 64, 64, &bins).unwrap();
        assert_eq!(cropped_mask.data(), direct.data());
    }

    #[test]
    fn gaussian_smooth_keeps_uniform_masks() {
        let m = Mask::filled(16, 16, 3.0);
        let s = gaussian_smooth(&m, 2.0, 9).unwrap();
        for &v in s.data() {
            assert!((v - 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gaussian_smooth_monotone_across_step_edge() {
        let mut m = Mask::filled(9, 16, 0.0);
        for y in 0..9 {
            for x in 8..16 {
                m.set(y, x, 4.0);
            }
        }
        let s = gaussian_smooth(&m, 1.5, 7).unwrap();
        let row: Vec<f32> = (0..16).map(|x| s.at(4, x)).collect();
        for pair in row.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-6, "row not monotone: {row:?}");
        }
        for &v in s.data() {
            assert!((0.0..=4.0).contains(&v));
        }
    }

    #[test]
    fn gaussian_smooth_matches_direct_2d_oracle() {
        let mut rng = frame_rng(11, 0);
        let data: Vec<f32> = (0..81).map(|_| rng.gen_range(0.0f32..4.0)).collect();
        let m = Mask::new(9, 9, data).unwrap();
        let s = gaussian_smooth(&m, 1.0, 5).unwrap();

        // Direct 2-D convolution with the outer-product kernel.
        let k1 = gaussian_kernel(1.0, 5);
        let r = 2isize;
        for y in 0..9usize {
            for x in 0..9usize {
                let mut acc = 0.0f64;
                for ky in 0..5usize {
                    for kx in 0..5usize {
                        let sy = reflect_index(y as isize + ky as isize - r, 9);
                        let sx = reflect_index(x as isize + kx as isize - r, 9);
                        acc += (k1[ky] as f64) * (k1[kx] as f64) * (m.at(sy, sx) as f64);
                    }
                }
                assert!(
                    (acc as f32 - s.at(y, x)).abs() < 1e-5,
                    "mismatch at ({y},{x}): {acc} vs {}",
                    s.at(y, x)
                );
            }
        }
    }

    #[test]
    fn gaussian_smooth_rejects_even_kernel() {
        let m = Mask::filled(8, 8, 0.0);
        assert!(gaussian_smooth(&m, 1.0, 4).is_err());
        assert!(gaussian_smooth(&m, 0.0, 5).is_err());
    }

    #[test]
    fn gaussian_smooth_preserves_mean_away_from_borders() {
        // Features are >3*sigma away from every border, so border reflection
        // only redistributes constant background.
        let bins = ClassBins::default();
        let f = frame(BBox::new(24, 24, 16, 16).unwrap(), 100.0);
        let m = build_mask(&f, 64, 64, &bins).unwrap();
        let s = gaussian_smooth(&m, 2.0, 9).unwrap();
        let mean = |mm: &Mask| mm.data().iter().map(|&v| v as f64).sum::<f64>() / 4096.0;
        assert!((mean(&m) - mean(&s)).abs() < 1e-4);
    }

    #[test]
    fn synth_scene_follows_pinhole_relation() {
        // d = 600, focal 1200, wingspan 12 -> span 24 px.
        let params = SynthParams {
            distance_range_m: (599.9999, 600.0001),
            noise_std: 1e-6,
            ..Default::default()
        };
        let mut rng = frame_rng(3, 0);
        let (_, f) = synth_scene(&params, "f0", &mut rng).unwrap();
        // Tight pixel extent of a 24 px ellipse is 23..=24 px wide.
        assert!(
            (23..=24).contains(&f.bbox.w),
            "span {} for 24 px silhouette",
            f.bbox.w
        );
    }

    #[test]
    fn synth_scene_is_deterministic() {
        let params = SynthParams::default();
        let (img_a, f_a) = synth_scene(&params, "f0", &mut frame_rng(9, 4)).unwrap();
        let (img_b, f_b) = synth_scene(&params, "f0", &mut frame_rng(9, 4)).unwrap();
        assert_eq!(img_a, img_b);
        assert_eq!(f_a, f_b);
    }

    #[test]
    fn synth_scene_bbox_is_tight() {
        let params = SynthParams::default();
        for i in 0..20 {
            let (img, f) = synth_scene(&params, "f", &mut frame_rng(21, i)).unwrap();
            let b = &f.bbox;
            let (x0, y0) = (b.x as usize, b.y as usize);
            let (x1, y1) = (x0 + b.w as usize - 1, y0 + b.h as usize - 1);
            let dark = |y: usize, x: usize| img.at(0, y, x) < 0.2;
            // Each side touches silhouette pixels.
            assert!((x0..=x1).any(|x| dark(y0, x)));
            assert!((x0..=x1).any(|x| dark(y1, x)));
            assert!((y0..=y1).any(|y| dark(y, x0)));
            assert!((y0..=y1).any(|y| dark(y, x1)));
        }
    }

    #[test]
    fn synth_distances_cover_every_class() {
        let params = SynthParams::default();
        let bins = ClassBins::default();
        let mut hist = vec![0usize; 5];
        for i in 0..1000 {
            let (_, f) = synth_scene(&params, "f", &mut frame_rng(42, i)).unwrap();
            hist[bin_distance(f.distance_m, &bins).unwrap() as usize] += 1;
        }
        assert!(hist.iter().all(|&c| c > 0), "class histogram {hist:?}");
    }

    #[test]
    fn manifest_roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let frames = vec![
            frame(BBox::new(3, -2, 10, 12).unwrap(), 123.456),
            frame(BBox::new(0, 0, 1, 1).unwrap(), 0.0),
        ];
        write_manifest(&frames, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(frames, loaded);
    }

    #[test]
    fn manifest_empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        std::fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn manifest_errors_name_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        std::fs::write(&path, "a\timg.pgm\t0\t0\t5\t5\t-3.0\n").unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
        assert!(err.contains("distance_m"), "{err}");

        std::fs::write(&path, "a\timg.pgm\t0\t0\t5\t5\t100\nb\timg\tx\t0\t5\t5\t1\n").unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("field x"), "{err}");
    }
}
