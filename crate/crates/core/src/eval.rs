//! Proxy no-reference quality metrics (sharpness, illumination
//! uniformity, entropy), CSV reports and simple histogram plots.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{EnhanceError, Result};
use crate::imaging::ImageTensor;
use crate::training::load_corpus;

/// Per-image quality record.
#[derive(Clone, Debug)]
pub struct ImageQuality {
    pub path: PathBuf,
    pub sharpness: f64,
    pub illum_uniformity: f64,
    pub entropy: f64,
}

impl ImageQuality {
    fn metrics(&self) -> [f64; 3] {
        [self.sharpness, self.illum_uniformity, self.entropy]
    }
}

/// A corpus of records plus per-metric aggregates.
#[derive(Clone, Debug)]
pub struct QualityReport {
    pub records: Vec<ImageQuality>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub const METRIC_NAMES: [&str; 3] = ["sharpness", "illum_uniformity", "entropy"];

/// Mean Sobel gradient energy of the gray image (interior pixels).
pub fn tenengrad_sharpness(img: &ImageTensor) -> f64 {
    let g = img.gray();
    let (h, w) = g.dim();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut total = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (g[[y - 1, x + 1]] + 2.0 * g[[y, x + 1]] + g[[y + 1, x + 1]])
                - (g[[y - 1, x - 1]] + 2.0 * g[[y, x - 1]] + g[[y + 1, x - 1]]);
            let gy = (g[[y + 1, x - 1]] + 2.0 * g[[y + 1, x]] + g[[y + 1, x + 1]])
                - (g[[y - 1, x - 1]] + 2.0 * g[[y - 1, x]] + g[[y - 1, x + 1]]);
            total += gx * gx + gy * gy;
        }
    }
    total / ((h - 2) * (w - 2)) as f64
}

const UNIFORMITY_TILE: usize = 16;

/// Standard deviation of 16x16 local gray means (full tiles only);
/// 0 when fewer than two tiles fit.
pub fn illumination_uniformity(img: &ImageTensor) -> f64 {
    let g = img.gray();
    let (h, w) = g.dim();
    let (ty, tx) = (h / UNIFORMITY_TILE, w / UNIFORMITY_TILE);
    if ty * tx < 2 {
        return 0.0;
    }
    let mut means = Vec::with_capacity(ty * tx);
    for by in 0..ty {
        for bx in 0..tx {
            let mut s = 0.0;
            for dy in 0..UNIFORMITY_TILE {
                for dx in 0..UNIFORMITY_TILE {
                    s += g[[by * UNIFORMITY_TILE + dy, bx * UNIFORMITY_TILE + dx]];
                }
            }
            means.push(s / (UNIFORMITY_TILE * UNIFORMITY_TILE) as f64);
        }
    }
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    (means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n).sqrt()
}

/// Shannon entropy in bits of the 256-bin gray histogram.
pub fn gray_entropy(img: &ImageTensor) -> f64 {
    let g = img.gray();
    let mut hist = [0u64; 256];
    for &v in g.iter() {
        let bin = (v * 255.0).round().clamp(0.0, 255.0) as usize;
        hist[bin] += 1;
    }
    let total = g.len() as f64;
    let mut h = 0.0;
    for &count in &hist {
        if count > 0 {
            let p = count as f64 / total;
            h -= p * p.log2();
        }
    }
    h
}

/// Computes all metrics for one image.
pub fn assess_image(path: &Path, img: &ImageTensor) -> ImageQuality {
    ImageQuality {
        path: path.to_path_buf(),
        sharpness: tenengrad_sharpness(img),
        illum_uniformity: illumination_uniformity(img),
        entropy: gray_entropy(img),
    }
}

fn aggregate(records: &[ImageQuality]) -> ([f64; 3], [f64; 3]) {
    let n = records.len() as f64;
    let mut mean = [0.0; 3];
    for r in records {
        for (m, v) in mean.iter_mut().zip(r.metrics()) {
            *m += v / n;
        }
    }
    let mut std = [0.0; 3];
    for r in records {
        for ((s, v), m) in std.iter_mut().zip(r.metrics()).zip(mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
    }
    (mean, std)
}

/// Assesses every image in a directory, optionally bounding concurrency.
pub fn assess_dir(dir: &Path, jobs: Option<usize>) -> Result<QualityReport> {
    let corpus = load_corpus(dir)?;
    let run = || -> Vec<ImageQuality> {
        corpus
            .par_iter()
            .map(|(path, img)| assess_image(path, img))
            .collect()
    };
    let records = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| EnhanceError::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let (mean, std) = aggregate(&records);
    Ok(QualityReport { records, mean, std })
}

fn file_key(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Writes the report as CSV. With a baseline, per-image and aggregate
/// delta columns (report minus baseline, matched by file name) are added.
pub fn write_report_csv(
    report: &QualityReport,
    baseline: Option<&QualityReport>,
    path: &Path,
) -> Result<()> {
    let file = File::create(path).map_err(|e| EnhanceError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| EnhanceError::io(path, e);
    let mut header = format!("path,{},{},{}", METRIC_NAMES[0], METRIC_NAMES[1], METRIC_NAMES[2]);
    if baseline.is_some() {
        for m in METRIC_NAMES {
            header.push_str(&format!(",delta_{m}"));
        }
    }
    writeln!(out, "{header}").map_err(io)?;
    let base_map: BTreeMap<String, [f64; 3]> = baseline
        .map(|b| {
            b.records
                .iter()
                .map(|r| (file_key(&r.path), r.metrics()))
                .collect()
        })
        .unwrap_or_default();
    for r in &report.records {
        let mut row = format!(
            "{},{},{},{}",
            r.path.display(),
            r.sharpness,
            r.illum_uniformity,
            r.entropy
        );
        if baseline.is_some() {
            match base_map.get(&file_key(&r.path)) {
                Some(b) => {
                    for (v, bv) in r.metrics().iter().zip(b) {
                        row.push_str(&format!(",{}", v - bv));
                    }
                }
                None => row.push_str(",,,"),
            }
        }
        writeln!(out, "{row}").map_err(io)?;
    }
    let mut mean_row = format!(
        "__mean__,{},{},{}",
        report.mean[0], report.mean[1], report.mean[2]
    );
    let mut std_row = format!(
        "__std__,{},{},{}",
        report.std[0], report.std[1], report.std[2]
    );
    if let Some(b) = baseline {
        for (v, bv) in report.mean.iter().zip(b.mean) {
            mean_row.push_str(&format!(",{}", v - bv));
        }
        for (v, bv) in report.std.iter().zip(b.std) {
            std_row.push_str(&format!(",{}", v - bv));
        }
    }
    writeln!(out, "{mean_row}").map_err(io)?;
    writeln!(out, "{std_row}").map_err(io)?;
    out.flush().map_err(io)
}

/// Draws per-metric histograms (report in blue, baseline in red) into a
/// PNG. Display-only; no numeric contract.
pub fn plot_histograms(
    report: &QualityReport,
    baseline: Option<&QualityReport>,
    path: &Path,
) -> Result<()> {
    const W: u32 = 640;
    const PANEL_H: u32 = 150;
    const MARGIN: u32 = 10;
    const BINS: usize = 24;
    let h = (PANEL_H + MARGIN) * 3 + MARGIN;
    let mut img = image::RgbImage::from_pixel(W, h, image::Rgb([255, 255, 255]));
    for (mi, _) in METRIC_NAMES.iter().enumerate() {
        let vals: Vec<f64> = report.records.iter().map(|r| r.metrics()[mi]).collect();
        let bvals: Vec<f64> = baseline
            .map(|b| b.records.iter().map(|r| r.metrics()[mi]).collect())
            .unwrap_or_default();
        let all: Vec<f64> = vals.iter().chain(bvals.iter()).copied().collect();
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let mut hist = vec![0usize; BINS];
        let mut bhist = vec![0usize; BINS];
        for &v in &vals {
            let b = (((v - lo) / span) * (BINS - 1) as f64).round() as usize;
            hist[b.min(BINS - 1)] += 1;
        }
        for &v in &bvals {
            let b = (((v - lo) / span) * (BINS - 1) as f64).round() as usize;
            bhist[b.min(BINS - 1)] += 1;
        }
        let peak = hist.iter().chain(bhist.iter()).copied().max().unwrap_or(1).max(1);
        let top = MARGIN + (PANEL_H + MARGIN) * mi as u32;
        let bottom = top + PANEL_H;
        // Axis line.
        for x in MARGIN..W - MARGIN {
            img.put_pixel(x, bottom, image::Rgb([0, 0, 0]));
        }
        let plot_w = W - 2 * MARGIN;
        let bar_w = plot_w as usize / BINS;
        for b in 0..BINS {
            let x0 = MARGIN as usize + b * bar_w;
            let draw = |img: &mut image::RgbImage, count: usize, color: [u8; 3], offset, width| {
                if count == 0 {
                    return;
                }
                let bh = ((count as f64 / peak as f64) * (PANEL_H - 4) as f64) as u32;
                for x in (x0 + offset)..(x0 + offset + width) {
                    for y in (bottom - bh)..bottom {
                        if (x as u32) < W {
                            img.put_pixel(x as u32, y, image::Rgb(color));
                        }
                    }
                }
            };
            if baseline.is_some() {
                draw(&mut img, hist[b], [40, 80, 200], 0, bar_w / 2);
                draw(&mut img, bhist[b], [200, 60, 40], bar_w / 2, bar_w / 2);
            } else {
                draw(&mut img, hist[b], [40, 80, 200], 0, bar_w.saturating_sub(1));
            }
        }
    }
    img.save(path)
        .map_err(|e| EnhanceError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::RangeTag;
    use ndarray::Array3;

    #[test]
    fn constant_image_has_zero_sharpness_and_uniformity() {
        let img = ImageTensor::constant(64, 64, 3, 0.5, RangeTag::Unit);
        assert_eq!(tenengrad_sharpness(&img), 0.0);
        assert_eq!(illumination_uniformity(&img), 0.0);
    }

    #[test]
    fn checkerboard_entropy_is_one_bit() {
        let data = Array3::from_shape_fn((32, 32, 3), |(y, x, _)| ((y + x) % 2) as f64);
        let img = ImageTensor::unit(data).unwrap();
        assert!((gray_entropy(&img) - 1.0).abs() < 1e-12);
        // A hard step edge carries gradient energy.
        let step = Array3::from_shape_fn((32, 32, 3), |(_, x, _)| if x < 16 { 0.0 } else { 1.0 });
        let simg = ImageTensor::unit(step).unwrap();
        assert!(tenengrad_sharpness(&simg) > 0.1);
    }

    #[test]
    fn entropy_bounds() {
        let img = ImageTensor::constant(16, 16, 3, 0.3, RangeTag::Unit);
        assert_eq!(gray_entropy(&img), 0.0);
        let data = Array3::from_shape_fn((16, 16, 1), |(y, x, _)| {
            ((y * 16 + x) % 256) as f64 / 255.0
        });
        let img = ImageTensor::new(data, RangeTag::Unit).unwrap();
        let h = gray_entropy(&img);
        assert!(h > 7.9 && h <= 8.0);
    }

    #[test]
    fn vignette_increases_uniformity_metric() {
        let (h, w) = (64, 64);
        let flat = ImageTensor::constant(h, w, 3, 0.8, RangeTag::Unit);
        let mut vdata = Array3::zeros((h, w, 3));
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let rmax = (cy * cy + cx * cx).sqrt();
        for y in 0..h {
            for x in 0..w {
                let r = (((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt()) / rmax;
                let fall = 1.0 - 0.7 * r;
                for c in 0..3 {
                    vdata[[y, x, c]] = 0.8 * fall;
                }
            }
        }
        let vignetted = ImageTensor::unit(vdata).unwrap();
        assert!(
            illumination_uniformity(&vignetted) > illumination_uniformity(&flat)
        );
    }

    #[test]
    fn metrics_invariant_to_channel_permutation() {
        let mut data = Array3::zeros((32, 32, 3));
        let mut v: f64 = 0.0;
        for e in data.iter_mut() {
            *e = v;
            v = (v + 0.17).fract();
        }
        let img = ImageTensor::unit(data.clone()).unwrap();
        let mut permuted = Array3::zeros((32, 32, 3));
        for y in 0..32 {
            for x in 0..32 {
                permuted[[y, x, 0]] = data[[y, x, 2]];
                permuted[[y, x, 1]] = data[[y, x, 0]];
                permuted[[y, x, 2]] = data[[y, x, 1]];
            }
        }
        let pimg = ImageTensor::unit(permuted).unwrap();
        // Equal up to floating-point summation order in the gray average.
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        assert!(close(tenengrad_sharpness(&img), tenengrad_sharpness(&pimg)));
        assert!(close(
            illumination_uniformity(&img),
            illumination_uniformity(&pimg)
        ));
        assert!(close(gray_entropy(&img), gray_entropy(&pimg)));
    }

    #[test]
    fn report_csv_and_plot() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("imgs");
        std::fs::create_dir_all(&data_dir).unwrap();
        for i in 0..3 {
            let img = ImageTensor::constant(32, 32, 3, 0.2 + 0.2 * i as f64, RangeTag::Unit);
            crate::imaging::save_image(
                &img,
                &data_dir.join(format!("i{i}.png")),
                crate::imaging::BitDepth::Eight,
            )
            .unwrap();
        }
        let report = assess_dir(&data_dir, Some(2)).unwrap();
        assert_eq!(report.records.len(), 3);
        let csv_path = dir.path().join("report.csv");
        write_report_csv(&report, Some(&report), &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("path,sharpness,illum_uniformity,entropy"));
        assert!(header.contains("delta_sharpness"));
        assert_eq!(text.lines().count(), 1 + 3 + 2);
        // Self-baseline deltas are zero.
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 7);
            for d in &cols[4..] {
                assert_eq!(d.parse::<f64>().unwrap(), 0.0);
            }
        }
        let plot_path = dir.path().join("plot.png");
        plot_histograms(&report, Some(&report), &plot_path).unwrap();
        assert!(plot_path.exists());
        let err = assess_dir(&dir.path().join("missing"), None).unwrap_err();
        assert!(matches!(err, EnhanceError::Io { .. } | EnhanceError::Config(_)));
    }
}
