//! Per-generation metrics, perturbation images and convergence charts.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{apply_perturbation, ImageBatch, NormalizationSpec, Perturbation};

pub const METRICS_HEADER: &str =
    "generation,batch_id,best_gamma,best_l2_255,best_mse_255,mean_confidence_true,epsilon,p_cross,p_mut,wall_ms";

/// One row of `metrics.csv`. Float fields are `f32`, whose shortest
/// round-trip text form never needs more than 9 significant digits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub batch_id: usize,
    pub best_gamma: f32,
    pub best_l2_255: f32,
    pub best_mse_255: f32,
    pub mean_confidence_true: f32,
    pub epsilon: f32,
    pub p_cross: f32,
    pub p_mut: f32,
    pub wall_ms: u64,
}

/// Append-only CSV sink; the header is written when the file is empty.
#[derive(Debug, Clone)]
pub struct MetricsSink {
    path: PathBuf,
}

impl MetricsSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &GenerationRecord) -> Result<()> {
        append_record(&self.path, record)
    }
}

pub fn append_record(path: impl AsRef<Path>, record: &GenerationRecord) -> Result<()> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut writer = csv::WriterBuilder::new().has_headers(empty).from_writer(file);
    writer.serialize(record)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(Error::Config(format!(
            "{}: unexpected metrics header {header:?}",
            path.display()
        )));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Pixel-domain perturbation as 8-bit RGB, mid-gray (128) meaning zero.
pub fn perturbation_to_rgb<T: Scalar>(delta: &Perturbation<T>, norm: &NormalizationSpec<T>) -> Vec<u8> {
    let shape = delta.shape();
    let plane = shape.pixels();
    let mut rgb = vec![0u8; plane * 3];
    for c in 0..3 {
        for p in 0..plane {
            let v = norm.delta_to_pixel(c, delta.genes()[c * plane + p]).to_f64_lossy();
            rgb[p * 3 + c] = (128.0 + v.round().clamp(-128.0, 127.0)) as u8;
        }
    }
    rgb
}

pub fn export_perturbation_image<T: Scalar>(
    delta: &Perturbation<T>,
    norm: &NormalizationSpec<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let shape = delta.shape();
    write_rgb_png(path, shape.w as u32, shape.h as u32, &perturbation_to_rgb(delta, norm))
}

/// Normalized image to 8-bit RGB, rounding to the nearest level.
pub fn image_to_rgb<T: Scalar>(image: &[T], h: usize, w: usize, norm: &NormalizationSpec<T>) -> Vec<u8> {
    let plane = h * w;
    let mut rgb = vec![0u8; plane * 3];
    for c in 0..3 {
        for p in 0..plane {
            let v = norm.to_pixel(c, image[c * plane + p]).to_f64_lossy();
            rgb[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    rgb
}

pub const GRID_GUTTER: usize = 2;

/// Tiles `rows` images: column 0 clean, column `j >= 1` attacked by
/// `deltas[j - 1]`. Tiles are separated by white 2-pixel gutters.
pub fn export_attack_grid_series<T: Scalar>(
    batch: &ImageBatch<T>,
    deltas: &[&Perturbation<T>],
    norm: &NormalizationSpec<T>,
    path: impl AsRef<Path>,
    rows: usize,
) -> Result<()> {
    if rows == 0 || rows > batch.len() {
        return Err(Error::InvalidArgument(format!(
            "grid needs 1..={} rows, got {rows}",
            batch.len()
        )));
    }
    let shape = batch.shape();
    let (h, w) = (shape.h, shape.w);
    let cols = deltas.len() + 1;
    let width = cols * w + (cols - 1) * GRID_GUTTER;
    let height = rows * h + (rows - 1) * GRID_GUTTER;
    let mut canvas = vec![255u8; width * height * 3];
    let head = batch.take(rows);
    let mut columns = vec![head.clone()];
    for d in deltas {
        columns.push(apply_perturbation(&head, d, norm)?);
    }
    for (col, tiles) in columns.iter().enumerate() {
        for row in 0..rows {
            let rgb = image_to_rgb(tiles.image(row), h, w, norm);
            let x0 = col * (w + GRID_GUTTER);
            let y0 = row * (h + GRID_GUTTER);
            for y in 0..h {
                let dst = ((y0 + y) * width + x0) * 3;
                canvas[dst..dst + w * 3].copy_from_slice(&rgb[y * w * 3..(y + 1) * w * 3]);
            }
        }
    }
    write_rgb_png(path, width as u32, height as u32, &canvas)
}

/// Grid of `rows` images by `cols` columns: clean first, then `cols - 1`
/// attacked copies under `delta`.
pub fn export_attack_grid<T: Scalar>(
    batch: &ImageBatch<T>,
    delta: &Perturbation<T>,
    norm: &NormalizationSpec<T>,
    path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if cols == 0 || rows * cols > batch.len() {
        return Err(Error::InvalidArgument(format!(
            "{rows}x{cols} grid does not fit a batch of {}",
            batch.len()
        )));
    }
    let deltas = vec![delta; cols - 1];
    export_attack_grid_series(batch, &deltas, norm, path, rows)
}

/// 8-bit RGB, no interlacing, `Sub` filter on every row, default deflate
/// level. Fixed settings keep output byte-stable for a given encoder version.
pub fn write_rgb_png(path: impl AsRef<Path>, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_filter(png::Filter::Sub);
    encoder.set_compression(png::Compression::Balanced);
    let png_err = |e: png::EncodingError| Error::Image(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 44.0;

struct Panel<'a> {
    title: &'a str,
    y_label: &'a str,
    values: Vec<f64>,
}

/// Four line charts (norm, MSE, misclassification rate, true-label confidence)
/// on a 2×2 grid, as a self-contained SVG 1.1 document.
pub fn render_convergence_svg(history: &[GenerationRecord]) -> Result<String> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("cannot plot an empty history".into()));
    }
    let pick = |f: fn(&GenerationRecord) -> f32| history.iter().map(|r| f(r) as f64).collect::<Vec<_>>();
    let panels = [
        Panel { title: "Perturbation L2 norm", y_label: "L2 [0,255]", values: pick(|r| r.best_l2_255) },
        Panel { title: "Average MSE", y_label: "MSE [0,255]", values: pick(|r| r.best_mse_255) },
        Panel { title: "Misclassification rate", y_label: "rate", values: pick(|r| r.best_gamma) },
        Panel { title: "Mean true-label confidence", y_label: "confidence", values: pick(|r| r.mean_confidence_true) },
    ];
    let gens: Vec<f64> = history.iter().map(|r| r.generation as f64).collect();
    let (g_lo, g_hi) = (gens[0], gens[gens.len() - 1]);

    let cell_w = MARGIN_L + PANEL_W + MARGIN_R;
    let cell_h = MARGIN_T + PANEL_H + MARGIN_B;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#,
        w = 2.0 * cell_w,
        h = 2.0 * cell_h
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, panel) in panels.iter().enumerate() {
        let ox = (i % 2) as f64 * cell_w + MARGIN_L;
        let oy = (i / 2) as f64 * cell_h + MARGIN_T;
        let (mut lo, mut hi) = panel
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let sx = |g: f64| {
            if g_hi > g_lo {
                ox + (g - g_lo) / (g_hi - g_lo) * PANEL_W
            } else {
                ox + PANEL_W / 2.0
            }
        };
        let sy = |v: f64| oy + PANEL_H - (v - lo) / (hi - lo) * PANEL_H;
        let _ = writeln!(svg, r#"<g id="panel-{i}">"#);
        let _ = writeln!(
            svg,
            r#"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-weight="bold">{}</text>"#,
            ox + PANEL_W / 2.0,
            oy - 10.0,
            panel.title
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">generation</text>"#,
            ox + PANEL_W / 2.0,
            oy + PANEL_H + 34.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" text-anchor="middle" transform="rotate(-90 {x} {y})">{}</text>"#,
            panel.y_label,
            x = ox - 48.0,
            y = oy + PANEL_H / 2.0
        );
        for (v, y) in [(lo, oy + PANEL_H), (hi, oy)] {
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, ox - 4.0, y + 4.0, tick(v));
        }
        for (g, anchor) in [(g_lo, "start"), (g_hi, "end")] {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="{anchor}">{}</text>"#,
                sx(g),
                oy + PANEL_H + 16.0,
                g
            );
        }
        let points: Vec<String> = gens
            .iter()
            .zip(&panel.values)
            .map(|(g, v)| format!("{:.2},{:.2}", sx(*g), sy(*v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

pub fn write_convergence_svg(history: &[GenerationRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let svg = render_convergence_svg(history)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ImageShape;

    fn record(g: usize, l2: f32) -> GenerationRecord {
        GenerationRecord {
            generation: g,
            batch_id: g / 4,
            best_gamma: 0.515625 + g as f32 * 1e-3,
            best_l2_255: l2,
            best_mse_255: 1.0 / 3.0,
            mean_confidence_true: 0.123456789,
            epsilon: 85.0 * (35.0f32 / 85.0).powf(g as f32 / 63.0),
            p_cross: 0.9,
            p_mut: 0.6,
            wall_ms: 17,
        }
    }

    fn decode_png(path: &Path) -> (u32, u32, Vec<u8>) {
        let img = image::open(path).unwrap().to_rgb8();
        (img.width(), img.height(), img.into_raw())
    }

    #[test]
    fn metrics_file_grows_one_line_per_record_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        append_record(&path, &record(0, 110.0)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);

        let sink = MetricsSink::new(&path);
        let records: Vec<_> = (0..64).map(|g| record(g, 110.0 - g as f32 * 1.1)).collect();
        for r in &records[1..] {
            sink.append(r).unwrap();
        }
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 65);
        assert_eq!(read_records(&path).unwrap()[1..], records[1..]);
    }

    #[test]
    fn zero_delta_is_mid_gray_and_ceiling_is_white() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ImageShape::rgb(3, 5);
        let norm = NormalizationSpec::<f64>::imagenet();
        let p = dir.path().join("zero.png");
        export_perturbation_image(&Perturbation::zeros(shape), &norm, &p).unwrap();
        let (w, h, px) = decode_png(&p);
        assert_eq!((w, h), (5, 3));
        assert!(px.iter().all(|v| *v == 128));

        let genes = (0..shape.len()).map(|i| norm.delta_from_pixel(i / 15, 127.0)).collect();
        let p = dir.path().join("max.png");
        export_perturbation_image(&Perturbation::from_genes(shape, genes).unwrap(), &norm, &p).unwrap();
        assert!(decode_png(&p).2.iter().all(|v| *v == 255));
    }

    #[test]
    fn zero_perturbation_png_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zero.png");
        let norm = NormalizationSpec::<f32>::imagenet();
        export_perturbation_image(&Perturbation::zeros(ImageShape::rgb(4, 4)), &norm, &p).unwrap();
        let golden = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/zero_perturbation_4x4.png");
        if std::env::var_os("UAP_BLESS").is_some() {
            std::fs::copy(&p, golden).unwrap();
        }
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(golden).unwrap());
    }

    #[test]
    fn perturbation_png_round_trip_within_half_level() {
        use rand::{Rng, SeedableRng};
        let shape = ImageShape::rgb(6, 7);
        let norm = NormalizationSpec::<f64>::imagenet();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let px: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-150.0..150.0)).collect();
        let genes = px.iter().enumerate().map(|(i, v)| norm.delta_from_pixel(i / 42, *v)).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        export_perturbation_image(&Perturbation::from_genes(shape, genes).unwrap(), &norm, &p).unwrap();
        let (_, _, rgb) = decode_png(&p);
        for (i, v) in px.iter().enumerate() {
            let (c, pix) = (i / 42, i % 42);
            let back = rgb[pix * 3 + c] as f64 - 128.0;
            assert!((back - v.clamp(-128.0, 127.0)).abs() <= 0.5 + 1e-9, "{back} vs {v}");
        }
    }

    fn gradient_batch(shape: ImageShape, n: usize, norm: &NormalizationSpec<f64>) -> ImageBatch<f64> {
        let data = (0..n * shape.len())
            .map(|i| {
                let c = (i % shape.len()) / shape.pixels();
                norm.from_pixel(c, ((i * 37) % 256) as f64)
            })
            .collect();
        ImageBatch::new(shape, data, vec![0; n], 0).unwrap()
    }

    #[test]
    fn single_tile_grid_is_the_clean_image() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ImageShape::rgb(4, 6);
        let norm = NormalizationSpec::<f64>::imagenet();
        let batch = gradient_batch(shape, 2, &norm);
        let p = dir.path().join("g.png");
        export_attack_grid(&batch, &Perturbation::zeros(shape), &norm, &p, 1, 1).unwrap();
        let (w, h, rgb) = decode_png(&p);
        assert_eq!((w, h), (6, 4));
        assert_eq!(rgb, image_to_rgb(batch.image(0), 4, 6, &norm));
    }

    #[test]
    fn grid_dimensions_and_attacked_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ImageShape::rgb(4, 6);
        let norm = NormalizationSpec::<f64>::imagenet();
        let batch = gradient_batch(shape, 8, &norm);
        let genes = (0..shape.len()).map(|i| norm.delta_from_pixel(i / 24, if i % 2 == 0 { 40.0 } else { -40.0 })).collect();
        let delta = Perturbation::from_genes(shape, genes).unwrap();
        let p = dir.path().join("g.png");
        export_attack_grid(&batch, &delta, &norm, &p, 4, 2).unwrap();
        let (w, h, rgb) = decode_png(&p);
        assert_eq!((w as usize, h as usize), (2 * 6 + GRID_GUTTER, 4 * 4 + 3 * GRID_GUTTER));

        let attacked = apply_perturbation(&batch, &delta, &norm).unwrap();
        for row in 0..4 {
            let want = image_to_rgb(attacked.image(row), 4, 6, &norm);
            for y in 0..4 {
                let src = ((row * (4 + GRID_GUTTER) + y) * w as usize + 6 + GRID_GUTTER) * 3;
                assert_eq!(&rgb[src..src + 18], &want[y * 18..(y + 1) * 18]);
            }
        }
        assert!(export_attack_grid(&batch, &delta, &norm, &p, 5, 2).is_err());
    }

    fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
        svg.lines()
            .filter_map(|l| l.split("points=\"").nth(1))
            .map(|rest| {
                rest.split('"')
                    .next()
                    .unwrap()
                    .split(' ')
                    .map(|pt| {
                        let (x, y) = pt.split_once(',').unwrap();
                        (x.parse().unwrap(), y.parse().unwrap())
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn svg_has_four_series_with_one_vertex_per_record() {
        let one = render_convergence_svg(&[record(0, 50.0)]).unwrap();
        assert!(one.starts_with("<?xml"));
        let lines = polylines(&one);
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.len() == 1));

        let history: Vec<_> = (0..64).map(|g| record(g, 110.0 - g as f32)).collect();
        let svg = render_convergence_svg(&history).unwrap();
        let lines = polylines(&svg);
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.len() == 64));
        // decreasing norm is drawn moving down the screen
        assert!(lines[0].windows(2).all(|w| w[1].1 > w[0].1));
        for label in ["Perturbation L2 norm", "Average MSE", "Misclassification rate", "confidence"] {
            assert!(svg.contains(label));
        }
        assert!(render_convergence_svg(&[]).is_err());
    }
}
